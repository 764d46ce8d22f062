//! HLS playlists generated from the CMAF events of an ingest app.
//!
//! Switching sets become rendition groups, tracks become media playlists
//! and fragments become segments. For a presentation `p` the multivariant
//! playlist is `p/index.m3u8` and each track `p/<set>/<track>` gets
//! `p/<set>/<track>.m3u8`. Segment and map URIs are relative to the
//! playlist.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::event::{BoundaryKind, Event, FileEventKind, WriteKind};
use crate::media::{fragment_name, FragmentInfo, HandlerType, TrackInfo};
use crate::volume::{write_all, Volume, VolumePath};

use super::{event_loop, FunctionCtx, FunctionError};

pub const HLS_VERSION: u32 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct HlsSegment {
    pub sequence_number: u64,
    pub uri: String,
    /// Volume path of the fragment file.
    pub path: String,
    pub duration_seconds: f64,
    pub size: u64,
}

#[derive(Debug, Clone)]
pub struct HlsTrack {
    pub info: Arc<TrackInfo>,
    pub header_uri: String,
    pub segments: Vec<HlsSegment>,
    /// Largest segment duration seen, including removed segments.
    pub max_duration: f64,
    /// Sequence number the playlist starts at when no segment is listed.
    pub next_sequence: u64,
}

impl HlsTrack {
    fn media_sequence(&self) -> u64 {
        self.segments.first().map(|s| s.sequence_number).unwrap_or(self.next_sequence)
    }

    /// Estimated bitrate from the last segment, rounded up.
    pub fn bandwidth(&self) -> Option<u64> {
        let last = self.segments.last()?;
        if last.duration_seconds <= 0.0 {
            return None;
        }
        Some(((last.size * 8) as f64 / last.duration_seconds).ceil() as u64)
    }
}

#[derive(Debug, Clone)]
pub struct HlsGroup {
    pub kind: HandlerType,
    /// Track id to track.
    pub tracks: BTreeMap<String, HlsTrack>,
}

#[derive(Debug, Clone, Default)]
pub struct HlsPresentation {
    pub groups: BTreeMap<String, HlsGroup>,
    pub ended: bool,
}

/// Playlist paths and contents that changed after an update.
pub type Writes = Vec<(String, String)>;

/// The playlist model of all presentations of one app.
#[derive(Debug, Default)]
pub struct ManifestModel {
    pub presentations: BTreeMap<String, HlsPresentation>,
}

pub fn multivariant_path(presentation: &str) -> String {
    format!("{presentation}/index.m3u8")
}

pub fn media_playlist_path(track: &TrackInfo) -> String {
    format!("{}/{}/{}.m3u8", track.presentation, track.switching_set, track.id)
}

fn quoted(s: &str) -> String {
    s.replace('"', "'")
}

impl ManifestModel {
    pub fn new() -> Self {
        Self::default()
    }

    fn track(&self, info: &TrackInfo) -> Option<&HlsTrack> {
        self.presentations
            .get(&info.presentation)?
            .groups
            .get(&info.switching_set)?
            .tracks
            .get(&info.id)
    }

    fn track_mut(&mut self, info: &TrackInfo) -> Option<&mut HlsTrack> {
        self.presentations
            .get_mut(&info.presentation)?
            .groups
            .get_mut(&info.switching_set)?
            .tracks
            .get_mut(&info.id)
    }

    /// A header was committed: registers the track and returns the
    /// multivariant playlist.
    pub fn header_committed(&mut self, info: &Arc<TrackInfo>) -> Writes {
        let p = self.presentations.entry(info.presentation.clone()).or_default();
        p.ended = false;
        let group = p.groups.entry(info.switching_set.clone()).or_insert_with(|| HlsGroup {
            kind: info.handler(),
            tracks: BTreeMap::new(),
        });
        let header_uri = format!("{}/init", info.id);
        match group.tracks.get_mut(&info.id) {
            Some(t) => {
                t.info = info.clone();
                t.header_uri = header_uri;
            }
            None => {
                group.tracks.insert(
                    info.id.clone(),
                    HlsTrack {
                        info: info.clone(),
                        header_uri,
                        segments: Vec::new(),
                        max_duration: 0.0,
                        next_sequence: 1,
                    },
                );
            }
        }
        vec![(multivariant_path(&info.presentation), self.multivariant(&info.presentation))]
    }

    /// A fragment was committed: appends a segment and returns the media
    /// playlist, plus the multivariant playlist when the track got its
    /// first segment.
    pub fn fragment_committed(&mut self, frag: &FragmentInfo) -> Result<Writes, String> {
        let timescale = frag.track.timescale();
        if timescale == 0 {
            return Err("track has timescale 0".into());
        }
        let duration = frag.duration as f64 / f64::from(timescale);
        if duration <= 0.0 {
            return Err(format!("fragment {} has no duration", frag.sequence_number));
        }
        let track = self
            .track_mut(&frag.track)
            .ok_or_else(|| format!("fragment for unknown track {}", frag.track.dir()))?;
        let first = track.segments.is_empty();
        track.segments.push(HlsSegment {
            sequence_number: frag.sequence_number,
            uri: format!("{}/{}", frag.track.id, fragment_name(frag.sequence_number)),
            path: frag.path(),
            duration_seconds: duration,
            size: frag.size,
        });
        track.max_duration = track.max_duration.max(duration);
        track.next_sequence = frag.sequence_number + 1;
        let mut writes = vec![self.media_write(&frag.track)];
        if first {
            writes.push((
                multivariant_path(&frag.track.presentation),
                self.multivariant(&frag.track.presentation),
            ));
        }
        Ok(writes)
    }

    /// A file was deleted: drops a listed segment with that path.
    pub fn file_deleted(&mut self, path: &str) -> Writes {
        let mut changed = None;
        'outer: for p in self.presentations.values_mut() {
            for g in p.groups.values_mut() {
                for t in g.tracks.values_mut() {
                    if let Some(i) = t.segments.iter().position(|s| s.path == path) {
                        t.segments.remove(i);
                        changed = Some(t.info.clone());
                        break 'outer;
                    }
                }
            }
        }
        changed.map(|info| vec![self.media_write(&info)]).unwrap_or_default()
    }

    /// The presentation ended: closes every media playlist.
    pub fn stream_ended(&mut self, presentation: &str) -> Writes {
        let Some(p) = self.presentations.get_mut(presentation) else {
            return Vec::new();
        };
        p.ended = true;
        let infos: Vec<Arc<TrackInfo>> =
            p.groups.values().flat_map(|g| g.tracks.values()).map(|t| t.info.clone()).collect();
        infos.iter().map(|i| self.media_write(i)).collect()
    }

    fn media_write(&self, info: &TrackInfo) -> (String, String) {
        (media_playlist_path(info), self.media_playlist(info).unwrap_or_default())
    }

    pub fn media_playlist(&self, info: &TrackInfo) -> Option<String> {
        let track = self.track(info)?;
        let ended = self.presentations.get(&info.presentation).is_some_and(|p| p.ended);
        let mut out = String::new();
        let _ = writeln!(out, "#EXTM3U");
        let _ = writeln!(out, "#EXT-X-VERSION:{HLS_VERSION}");
        let _ = writeln!(out, "#EXT-X-TARGETDURATION:{}", track.max_duration.ceil().max(1.0) as u64);
        let _ = writeln!(out, "#EXT-X-MEDIA-SEQUENCE:{}", track.media_sequence());
        let _ = writeln!(out, "#EXT-X-INDEPENDENT-SEGMENTS");
        let _ = writeln!(out, "#EXT-X-MAP:URI=\"{}\"", quoted(&track.header_uri));
        for s in &track.segments {
            let _ = writeln!(out, "#EXTINF:{:.6},", s.duration_seconds);
            let _ = writeln!(out, "{}", s.uri);
        }
        if ended {
            let _ = writeln!(out, "#EXT-X-ENDLIST");
        }
        Some(out)
    }

    /// Multivariant playlist. Tracks appear once they have a segment, since
    /// the bandwidth estimate needs one.
    pub fn multivariant(&self, presentation: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#EXTM3U");
        let _ = writeln!(out, "#EXT-X-VERSION:{HLS_VERSION}");
        let _ = writeln!(out, "#EXT-X-INDEPENDENT-SEGMENTS");
        let Some(p) = self.presentations.get(presentation) else {
            return out;
        };
        let ready = |g: &HlsGroup| -> Vec<(String, HlsTrack)> {
            g.tracks
                .iter()
                .filter(|(_, t)| !t.segments.is_empty())
                .map(|(id, t)| (id.clone(), t.clone()))
                .collect()
        };
        let mut audio_group = None;
        let mut audio_bandwidth = 0;
        for (gid, g) in p.groups.iter().filter(|(_, g)| g.kind == HandlerType::Audio) {
            let tracks = ready(g);
            for (i, (tid, t)) in tracks.iter().enumerate() {
                let default = if i == 0 { "YES" } else { "NO" };
                let _ = writeln!(
                    out,
                    "#EXT-X-MEDIA:TYPE=AUDIO,GROUP-ID=\"{}\",NAME=\"{}\",DEFAULT={default},AUTOSELECT=YES,URI=\"{}/{}.m3u8\"",
                    quoted(gid),
                    quoted(tid),
                    quoted(gid),
                    quoted(tid)
                );
                audio_bandwidth = audio_bandwidth.max(t.bandwidth().unwrap_or(0));
            }
            if !tracks.is_empty() && audio_group.is_none() {
                audio_group = Some(gid.clone());
            }
        }
        let mut variants = 0;
        for (gid, g) in p.groups.iter().filter(|(_, g)| g.kind != HandlerType::Audio) {
            for (tid, t) in ready(g) {
                let bandwidth = t.bandwidth().unwrap_or(0) + audio_bandwidth;
                let _ = write!(out, "#EXT-X-STREAM-INF:BANDWIDTH={bandwidth}");
                if let Some(a) = &audio_group {
                    let _ = write!(out, ",AUDIO=\"{}\"", quoted(a));
                }
                let _ = writeln!(out);
                let _ = writeln!(out, "{gid}/{tid}.m3u8");
                variants += 1;
            }
        }
        if variants == 0 {
            // Audio-only presentations list the audio tracks as variants.
            for (gid, g) in p.groups.iter().filter(|(_, g)| g.kind == HandlerType::Audio) {
                for (tid, t) in ready(g) {
                    let _ = writeln!(out, "#EXT-X-STREAM-INF:BANDWIDTH={}", t.bandwidth().unwrap_or(0));
                    let _ = writeln!(out, "{gid}/{tid}.m3u8");
                }
            }
        }
        out
    }

    /// Applies an event, returning the playlists to write.
    pub fn apply(&mut self, ev: &Event) -> Result<Writes, String> {
        Ok(match ev {
            Event::InitSegment { track, kind: WriteKind::Committed, .. } => self.header_committed(track),
            Event::Fragment { fragment, kind: WriteKind::Committed, .. } => self.fragment_committed(fragment)?,
            Event::File { file, kind: FileEventKind::Deleted } => self.file_deleted(file.path.as_str()),
            Event::Stream { presentation, kind: BoundaryKind::End } => self.stream_ended(&presentation.id),
            _ => Vec::new(),
        })
    }
}

pub struct Manifest {
    pub(crate) name: String,
    pub(crate) handle: JoinHandle<()>,
    model: Arc<Mutex<ManifestModel>>,
}

impl Manifest {
    pub fn spawn(name: String, ctx: FunctionCtx, out: Arc<dyn Volume>) -> Result<Self, FunctionError> {
        let sub = ctx.events.subscribe()?;
        let model: Arc<Mutex<ManifestModel>> = Arc::default();
        let m = model.clone();
        let fn_name = name.clone();
        let handle = ctx.tracker.spawn(&format!("fn-{name}"), move || {
            event_loop(sub, &ctx.cancel, |ev| {
                let writes = match m.lock().unwrap().apply(&ev) {
                    Ok(w) => w,
                    Err(e) => {
                        tracing::warn!(function = %fn_name, error = %e, "event skipped");
                        return;
                    }
                };
                for (path, body) in writes {
                    let result = VolumePath::new(path.as_str()).and_then(|p| write_all(&*out, &p, body.as_bytes()));
                    if let Err(e) = result {
                        tracing::warn!(function = %fn_name, %path, error = %e, "playlist write failed");
                    }
                }
            });
        })?;
        Ok(Self { name, handle, model })
    }

    /// Current media playlist of a track, if known.
    pub fn media_playlist(&self, track: &TrackInfo) -> Option<String> {
        self.model.lock().unwrap().media_playlist(track)
    }
}
