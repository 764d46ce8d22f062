//! CMAF object model: presentations, switching sets, tracks and fragments.
//!
//! The mutable model is owned by the ingest application. Events carry the
//! immutable `*Info` snapshots, so subscribers never see partial updates.

pub mod bmff;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

pub use bmff::{
    chunk_duration_ticks, is_fragment_boundary, parse_box_header, parse_chunk, parse_cmaf_header,
    read_box_header, read_cmaf_header, scan_chunk, BoxHeader, Chunk, CmafHeader, FourCC,
    HandlerType, MediaError, TrackDefaults,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresentationInfo {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchingSetInfo {
    pub presentation: String,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackInfo {
    pub presentation: String,
    pub switching_set: String,
    pub id: String,
    pub header: Arc<CmafHeader>,
}

impl TrackInfo {
    /// Volume directory holding the track's files.
    pub fn dir(&self) -> String {
        format!("{}/{}/{}", self.presentation, self.switching_set, self.id)
    }

    pub fn init_path(&self) -> String {
        format!("{}/init", self.dir())
    }

    pub fn fragment_path(&self, sequence_number: u64) -> String {
        format!("{}/{}", self.dir(), fragment_name(sequence_number))
    }

    pub fn timescale(&self) -> u32 {
        self.header.timescale
    }

    pub fn handler(&self) -> HandlerType {
        self.header.handler
    }
}

/// File name of a fragment: the zero-padded sequence number.
pub fn fragment_name(sequence_number: u64) -> String {
    format!("{sequence_number:010}")
}

/// Summary of one chunk within a fragment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkInfo {
    pub size: u64,
    pub base_decode_time: u64,
    pub duration: u64,
    pub sample_count: u32,
    pub boundary: bool,
}

/// A fragment as it is being assembled from chunks.
#[derive(Debug, Clone)]
pub struct Fragment {
    pub sequence_number: u64,
    pub chunks: Vec<ChunkInfo>,
}

impl Fragment {
    pub fn new(sequence_number: u64) -> Self {
        Self {
            sequence_number,
            chunks: Vec::new(),
        }
    }

    pub fn push(&mut self, chunk: ChunkInfo) {
        self.chunks.push(chunk);
    }

    pub fn start_time(&self) -> u64 {
        self.chunks.first().map(|c| c.base_decode_time).unwrap_or(0)
    }

    pub fn duration(&self) -> u64 {
        self.chunks.iter().map(|c| c.duration).sum()
    }

    pub fn size(&self) -> u64 {
        self.chunks.iter().map(|c| c.size).sum()
    }

    pub fn info(&self, track: &Arc<TrackInfo>) -> Arc<FragmentInfo> {
        Arc::new(FragmentInfo {
            track: track.clone(),
            sequence_number: self.sequence_number,
            start_time: self.start_time(),
            duration: self.duration(),
            size: self.size(),
            chunk_count: self.chunks.len() as u32,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentInfo {
    pub track: Arc<TrackInfo>,
    pub sequence_number: u64,
    pub start_time: u64,
    pub duration: u64,
    pub size: u64,
    pub chunk_count: u32,
}

impl FragmentInfo {
    pub fn path(&self) -> String {
        self.track.fragment_path(self.sequence_number)
    }
}

#[derive(Debug)]
pub struct Track {
    pub info: Arc<TrackInfo>,
    pub fragments: Vec<Arc<FragmentInfo>>,
    /// Number of requests currently writing this track (0 or 1).
    pub writers: usize,
}

impl Track {
    pub fn new(info: Arc<TrackInfo>) -> Self {
        Self {
            info,
            fragments: Vec::new(),
            writers: 0,
        }
    }

    /// Sequence number for the next fragment, continuing after the last
    /// committed one.
    pub fn next_sequence_number(&self) -> u64 {
        self.fragments
            .last()
            .map(|f| f.sequence_number + 1)
            .unwrap_or(1)
    }
}

#[derive(Debug)]
pub struct SwitchingSet {
    pub info: Arc<SwitchingSetInfo>,
    pub tracks: BTreeMap<String, Track>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresentationState {
    Active,
    Terminated,
}

#[derive(Debug)]
pub struct Presentation {
    pub info: Arc<PresentationInfo>,
    pub switching_sets: BTreeMap<String, SwitchingSet>,
    pub last_activity: Instant,
    pub state: PresentationState,
}

impl Presentation {
    pub fn new(id: impl Into<String>, now: Instant) -> Self {
        Self {
            info: Arc::new(PresentationInfo { id: id.into() }),
            switching_sets: BTreeMap::new(),
            last_activity: now,
            state: PresentationState::Active,
        }
    }

    pub fn touch(&mut self, now: Instant) {
        if now > self.last_activity {
            self.last_activity = now;
        }
    }

    pub fn active_writers(&self) -> usize {
        self.switching_sets
            .values()
            .flat_map(|s| s.tracks.values())
            .map(|t| t.writers)
            .sum()
    }
}
