//! CMAF ingest over long-running HTTP requests.
//!
//! A request body carries one CMAF track: the header followed by chunks.
//! The header becomes `<presentation>/<switchingSet>/<track>/init`; every
//! fragment becomes `<presentation>/<switchingSet>/<track>/<seq>` with a
//! zero-padded ten digit sequence number, written with an in-place writer
//! so readers can follow it while it grows.

use std::collections::{HashMap, HashSet};
use std::io::{BufReader, Write};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use crate::config::CmafIngestOptions;
use crate::event::{BoundaryKind, Event, EventStream, FileEventKind, FileRef, WriteKind};
use crate::http::{App, Method, Request, Response, StatusCode};
use crate::lifecycle::{CancelToken, TaskTracker};
use crate::media::bmff::boxes;
use crate::media::{
    chunk_duration_ticks, is_fragment_boundary, read_cmaf_header, scan_chunk, ChunkInfo, CmafHeader, Fragment,
    FragmentInfo, MediaError, Presentation, PresentationState, SwitchingSet, SwitchingSetInfo, Track, TrackInfo,
};
use crate::volume::{FileWriter, Volume, VolumeError, VolumePath};

use super::emit;

/// Where an ingest request writes to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IngestAddress {
    pub presentation: String,
    pub switching_set: String,
    pub track: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IngestPathError {
    #[error("path lacks a Switching() segment")]
    MissingSwitching,
    #[error("path lacks a Stream() segment after Switching()")]
    MissingStream,
    #[error("empty {0} argument")]
    EmptyArgument(&'static str),
    #[error("path has no presentation prefix")]
    MissingPresentation,
    #[error("unexpected segments after Stream()")]
    TrailingSegments,
    #[error("invalid path: {0}")]
    Invalid(String),
}

fn keyword<'a>(segment: &'a str, name: &str) -> Option<&'a str> {
    segment.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')
}

/// Splits `/<presentation...>/Switching(<id>)/Stream(<id>)`.
pub fn parse_ingest_path(path: &str) -> Result<IngestAddress, IngestPathError> {
    let segments: Vec<&str> = path.trim_start_matches('/').split('/').collect();
    let idx = segments
        .iter()
        .position(|s| keyword(s, "Switching").is_some())
        .ok_or(IngestPathError::MissingSwitching)?;
    let switching_set = keyword(segments[idx], "Switching").unwrap_or_default();
    if switching_set.is_empty() {
        return Err(IngestPathError::EmptyArgument("Switching"));
    }
    let track = segments
        .get(idx + 1)
        .and_then(|s| keyword(s, "Stream"))
        .ok_or(IngestPathError::MissingStream)?;
    if track.is_empty() {
        return Err(IngestPathError::EmptyArgument("Stream"));
    }
    if segments.len() > idx + 2 {
        return Err(IngestPathError::TrailingSegments);
    }
    if idx == 0 {
        return Err(IngestPathError::MissingPresentation);
    }
    let presentation = segments[..idx].join("/");
    let addr = IngestAddress {
        presentation,
        switching_set: switching_set.to_string(),
        track: track.to_string(),
    };
    // Every component must be usable as a volume path.
    VolumePath::new(format!("{}/{}/{}/init", addr.presentation, addr.switching_set, addr.track))
        .map_err(|e| IngestPathError::Invalid(e.to_string()))?;
    Ok(addr)
}

/// Whether a header carries a `kind` box, the in-band signaling mode.
fn has_kind_box(header: &CmafHeader) -> bool {
    fn walk(buf: &[u8], depth: usize) -> bool {
        boxes(buf).filter_map(Result::ok).any(|(h, body, _)| match &h.kind.0 {
            b"kind" => true,
            b"moov" | b"trak" | b"udta" | b"mdia" if depth < 4 => walk(body, depth + 1),
            _ => false,
        })
    }
    walk(&header.raw, 0)
}

struct ModelState {
    presentations: HashMap<String, Presentation>,
    /// Track directories with an active request.
    active: HashSet<String>,
}

pub struct CmafIngest {
    name: String,
    volume: Arc<dyn Volume>,
    events: EventStream,
    opts: CmafIngestOptions,
    state: Mutex<ModelState>,
    shutdown: CancelToken,
}

/// Releases a track's active slot when the request ends.
struct ActiveGuard<'a> {
    app: &'a CmafIngest,
    key: String,
    presentation: String,
}

impl Drop for ActiveGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.app.state.lock().unwrap();
        st.active.remove(&self.key);
        if let Some(p) = st.presentations.get_mut(&self.presentation) {
            p.touch(Instant::now());
        }
    }
}

struct OpenFragment {
    fragment: Fragment,
    writer: Box<dyn FileWriter>,
    file: FileRef,
}

enum Outcome {
    Done,
    Shutdown,
    Failed(StatusCode, String),
}

fn media_status(e: &MediaError) -> StatusCode {
    match e {
        MediaError::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl CmafIngest {
    pub fn new(
        name: impl Into<String>,
        volume: Arc<dyn Volume>,
        events: EventStream,
        opts: CmafIngestOptions,
        shutdown: CancelToken,
    ) -> Arc<Self> {
        Arc::new(Self {
            name: name.into(),
            volume,
            events,
            opts,
            state: Mutex::new(ModelState {
                presentations: HashMap::new(),
                active: HashSet::new(),
            }),
            shutdown,
        })
    }

    pub fn events(&self) -> &EventStream {
        &self.events
    }

    /// Ids of presentations currently held in memory.
    pub fn presentation_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.state.lock().unwrap().presentations.keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Committed fragments of a track, in order.
    pub fn fragments(&self, addr: &IngestAddress) -> Vec<Arc<FragmentInfo>> {
        let st = self.state.lock().unwrap();
        st.presentations
            .get(&addr.presentation)
            .and_then(|p| p.switching_sets.get(&addr.switching_set))
            .and_then(|s| s.tracks.get(&addr.track))
            .map(|t| t.fragments.clone())
            .unwrap_or_default()
    }

    /// Terminates presentations idle for longer than the presentation
    /// timeout and without active requests. Returns their ids.
    pub fn gc_presentations(&self, now: Instant) -> Vec<String> {
        let timeout = self.opts.presentation_timeout.0;
        let mut events = Vec::new();
        let mut ids = Vec::new();
        {
            let mut st = self.state.lock().unwrap();
            let ModelState { presentations, active } = &mut *st;
            let expired: Vec<String> = presentations
                .iter()
                .filter(|(id, p)| {
                    now.saturating_duration_since(p.last_activity) > timeout
                        && !active.iter().any(|k| k.starts_with(&format!("{id}/")))
                })
                .map(|(id, _)| id.clone())
                .collect();
            for id in expired {
                let Some(mut p) = presentations.remove(&id) else { continue };
                p.state = PresentationState::Terminated;
                for ss in p.switching_sets.values() {
                    for t in ss.tracks.values() {
                        events.push(Event::Track {
                            track: t.info.clone(),
                            kind: BoundaryKind::End,
                        });
                    }
                    events.push(Event::SwitchingSet {
                        switching_set: ss.info.clone(),
                        kind: BoundaryKind::End,
                    });
                }
                events.push(Event::Stream {
                    presentation: p.info.clone(),
                    kind: BoundaryKind::End,
                });
                ids.push(id);
            }
        }
        for e in events {
            emit(&self.events, e);
        }
        if !ids.is_empty() {
            tracing::info!(app = %self.name, presentations = ?ids, "presentations terminated");
        }
        ids
    }

    /// Runs the periodic garbage collection until `cancel` fires.
    pub fn spawn_gc(self: &Arc<Self>, cancel: &CancelToken, tracker: &TaskTracker) -> std::io::Result<JoinHandle<()>> {
        let app = self.clone();
        let cancel = cancel.clone();
        let interval = self.opts.gc_interval.0;
        tracker.spawn(&format!("{}-gc", self.name), move || {
            while !cancel.wait_timeout(interval) {
                app.gc_presentations(Instant::now());
            }
        })
    }

    fn file_ref(&self, path: &str) -> Result<(FileRef, VolumePath), VolumeError> {
        let vp = VolumePath::new(path)?;
        Ok((FileRef::new(self.volume.clone(), vp.clone()), vp))
    }

    fn claim(&self, addr: &IngestAddress) -> Option<ActiveGuard<'_>> {
        let key = format!("{}/{}/{}", addr.presentation, addr.switching_set, addr.track);
        let mut st = self.state.lock().unwrap();
        if !st.active.insert(key.clone()) {
            return None;
        }
        Some(ActiveGuard {
            app: self,
            key,
            presentation: addr.presentation.clone(),
        })
    }

    /// Records the header in the model. Returns the track info, the next
    /// fragment sequence number and the Begin events to publish.
    fn register_track(&self, addr: &IngestAddress, header: CmafHeader) -> (Arc<TrackInfo>, u64, Vec<Event>) {
        let now = Instant::now();
        let mut events = Vec::new();
        let mut st = self.state.lock().unwrap();
        let p = st.presentations.entry(addr.presentation.clone()).or_insert_with(|| {
            let p = Presentation::new(addr.presentation.clone(), now);
            events.push(Event::Stream {
                presentation: p.info.clone(),
                kind: BoundaryKind::Begin,
            });
            p
        });
        p.touch(now);
        let ss = p.switching_sets.entry(addr.switching_set.clone()).or_insert_with(|| {
            let info = Arc::new(SwitchingSetInfo {
                presentation: addr.presentation.clone(),
                id: addr.switching_set.clone(),
            });
            events.push(Event::SwitchingSet {
                switching_set: info.clone(),
                kind: BoundaryKind::Begin,
            });
            SwitchingSet {
                info,
                tracks: Default::default(),
            }
        });
        let info = Arc::new(TrackInfo {
            presentation: addr.presentation.clone(),
            switching_set: addr.switching_set.clone(),
            id: addr.track.clone(),
            header: Arc::new(header),
        });
        let track = ss.tracks.entry(addr.track.clone()).or_insert_with(|| {
            events.push(Event::Track {
                track: info.clone(),
                kind: BoundaryKind::Begin,
            });
            Track::new(info.clone())
        });
        track.info = info.clone();
        (info, track.next_sequence_number(), events)
    }

    fn touch(&self, presentation: &str) {
        let mut st = self.state.lock().unwrap();
        if let Some(p) = st.presentations.get_mut(presentation) {
            p.touch(Instant::now());
        }
    }

    fn record_fragment(&self, addr: &IngestAddress, info: Arc<FragmentInfo>) {
        let mut st = self.state.lock().unwrap();
        if let Some(t) = st
            .presentations
            .get_mut(&addr.presentation)
            .and_then(|p| p.switching_sets.get_mut(&addr.switching_set))
            .and_then(|s| s.tracks.get_mut(&addr.track))
        {
            t.fragments.push(info);
        }
    }

    fn write_header(&self, track: &Arc<TrackInfo>) -> Result<(), (StatusCode, String)> {
        let internal = |e: VolumeError| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        let (file, vp) = self.file_ref(&track.init_path()).map_err(internal)?;
        let handle = self.volume.open_create(&vp).map_err(internal)?;
        let mut writer = handle.new_writer(false).map_err(|e| match e {
            VolumeError::WriterExists(_) => (StatusCode::CONFLICT, e.to_string()),
            e => internal(e),
        })?;
        emit(&self.events, Event::File { file: file.clone(), kind: FileEventKind::Started });
        emit(
            &self.events,
            Event::InitSegment { file: file.clone(), track: track.clone(), kind: WriteKind::Started },
        );
        let result = writer
            .write_all(&track.header.raw)
            .map_err(VolumeError::io)
            .and_then(|_| writer.commit());
        match result {
            Ok(()) => {
                emit(&self.events, Event::File { file: file.clone(), kind: FileEventKind::Committed });
                emit(&self.events, Event::InitSegment { file, track: track.clone(), kind: WriteKind::Committed });
                Ok(())
            }
            Err(e) => {
                let _ = writer.abort();
                emit(&self.events, Event::File { file: file.clone(), kind: FileEventKind::Aborted });
                emit(&self.events, Event::InitSegment { file, track: track.clone(), kind: WriteKind::Aborted });
                Err(internal(e))
            }
        }
    }

    fn open_fragment(&self, track: &Arc<TrackInfo>, seq: u64) -> Result<OpenFragment, (StatusCode, String)> {
        let internal = |e: VolumeError| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        let (file, vp) = self.file_ref(&track.fragment_path(seq)).map_err(internal)?;
        let handle = self.volume.open_create(&vp).map_err(internal)?;
        let writer = handle.new_writer(true).map_err(|e| match e {
            VolumeError::WriterExists(_) => (StatusCode::CONFLICT, e.to_string()),
            e => internal(e),
        })?;
        Ok(OpenFragment {
            fragment: Fragment::new(seq),
            writer,
            file,
        })
    }

    fn commit_fragment(&self, addr: &IngestAddress, track: &Arc<TrackInfo>, mut open: OpenFragment) -> Result<(), String> {
        let info = open.fragment.info(track);
        match open.writer.commit() {
            Ok(()) => {
                self.record_fragment(addr, info.clone());
                emit(&self.events, Event::File { file: open.file.clone(), kind: FileEventKind::Committed });
                emit(&self.events, Event::Fragment { file: open.file, fragment: info, kind: WriteKind::Committed });
                Ok(())
            }
            Err(e) => {
                self.abort_events(open.file, info);
                Err(e.to_string())
            }
        }
    }

    fn abort_fragment(&self, track: &Arc<TrackInfo>, mut open: OpenFragment) {
        let info = open.fragment.info(track);
        let _ = open.writer.abort();
        self.abort_events(open.file, info);
    }

    fn abort_events(&self, file: FileRef, info: Arc<FragmentInfo>) {
        emit(&self.events, Event::File { file: file.clone(), kind: FileEventKind::Aborted });
        emit(&self.events, Event::Fragment { file, fragment: info, kind: WriteKind::Aborted });
    }

    fn ingest(&self, req: &mut Request<'_>, addr: &IngestAddress) -> Response {
        let shutdown = req.shutdown.clone();
        let mut body = BufReader::with_capacity(64 * 1024, req.body());
        let header = match read_cmaf_header(&mut body, self.opts.max_header_bytes) {
            Ok(h) => h,
            Err(e) => return Response::error(media_status(&e), format!("invalid CMAF header: {e}")),
        };
        let defaults = header.defaults;
        let (track, mut seq, begin) = self.register_track(addr, header);
        for e in begin {
            emit(&self.events, e);
        }
        if let Err((status, msg)) = self.write_header(&track) {
            return Response::error(status, msg);
        }

        let mut current: Option<OpenFragment> = None;
        let outcome = loop {
            if self.shutdown.is_cancelled() || shutdown.is_cancelled() {
                break Outcome::Shutdown;
            }
            let chunk = match scan_chunk(&mut body, &defaults, self.opts.max_fragment_bytes) {
                Ok(Some(c)) => c,
                Ok(None) => break Outcome::Done,
                Err(_) if self.shutdown.is_cancelled() || shutdown.is_cancelled() => break Outcome::Shutdown,
                Err(e) => break Outcome::Failed(media_status(&e), e.to_string()),
            };
            let boundary = match is_fragment_boundary(&chunk, track.handler()) {
                Ok(b) => b,
                Err(e) => break Outcome::Failed(StatusCode::BAD_REQUEST, e.to_string()),
            };
            let duration = match chunk_duration_ticks(&chunk) {
                Ok(d) => d,
                Err(e) => break Outcome::Failed(StatusCode::BAD_REQUEST, e.to_string()),
            };
            if boundary {
                if let Some(open) = current.take() {
                    if let Err(e) = self.commit_fragment(addr, &track, open) {
                        break Outcome::Failed(StatusCode::INTERNAL_SERVER_ERROR, e);
                    }
                    seq += 1;
                }
                match self.open_fragment(&track, seq) {
                    Ok(open) => current = Some(open),
                    Err((status, msg)) => break Outcome::Failed(status, msg),
                }
            }
            let Some(open) = current.as_mut() else {
                break Outcome::Failed(StatusCode::BAD_REQUEST, "track does not start at a switching point".into());
            };
            if open.fragment.size() + chunk.len() as u64 > self.opts.max_fragment_bytes {
                break Outcome::Failed(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    format!("fragment exceeds {} bytes", self.opts.max_fragment_bytes),
                );
            }
            let first = open.fragment.chunks.is_empty();
            open.fragment.push(ChunkInfo {
                size: chunk.len() as u64,
                base_decode_time: chunk.base_decode_time,
                duration,
                sample_count: chunk.sample_count,
                boundary,
            });
            if first {
                let info = open.fragment.info(&track);
                emit(&self.events, Event::File { file: open.file.clone(), kind: FileEventKind::Started });
                emit(&self.events, Event::Fragment { file: open.file.clone(), fragment: info, kind: WriteKind::Started });
            }
            if let Err(e) = open.writer.write_all(&chunk.raw) {
                break Outcome::Failed(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
            }
            self.touch(&addr.presentation);
        };

        match outcome {
            Outcome::Done | Outcome::Shutdown => {
                if let Some(open) = current.take() {
                    if let Err(e) = self.commit_fragment(addr, &track, open) {
                        return Response::error(StatusCode::INTERNAL_SERVER_ERROR, e);
                    }
                }
                if matches!(outcome, Outcome::Shutdown) {
                    return Response::error(StatusCode::SERVICE_UNAVAILABLE, "server is shutting down").closing();
                }
                Response::new(StatusCode::OK)
            }
            Outcome::Failed(status, msg) => {
                if let Some(open) = current.take() {
                    self.abort_fragment(&track, open);
                }
                tracing::warn!(app = %self.name, track = %track.dir(), %status, error = %msg, "ingest failed");
                Response::error(status, msg)
            }
        }
    }
}

fn is_manifest_path(path: &str) -> bool {
    let lower = path.to_ascii_lowercase();
    lower.ends_with(".mpd") || lower.ends_with(".m3u8")
}

impl App for CmafIngest {
    fn name(&self) -> &str {
        &self.name
    }

    fn serve(&self, req: &mut Request<'_>) -> Response {
        if req.method != Method::PUT && req.method != Method::POST {
            return Response::method_not_allowed("POST, PUT");
        }
        let addr = match parse_ingest_path(&req.path) {
            Ok(a) => a,
            Err(e @ (IngestPathError::MissingSwitching | IngestPathError::MissingStream)) => {
                if is_manifest_path(&req.path) {
                    return Response::error(StatusCode::NOT_IMPLEMENTED, "manifest based signaling is not supported");
                }
                let mut body = BufReader::new(req.body());
                if let Ok(h) = read_cmaf_header(&mut body, self.opts.max_header_bytes) {
                    if has_kind_box(&h) {
                        return Response::error(StatusCode::NOT_IMPLEMENTED, "kind box signaling is not supported");
                    }
                }
                return Response::error(StatusCode::BAD_REQUEST, e);
            }
            Err(e) => return Response::error(StatusCode::BAD_REQUEST, e),
        };
        let Some(_guard) = self.claim(&addr) else {
            return Response::error(StatusCode::CONFLICT, "another request is ingesting this track");
        };
        self.ingest(req, &addr)
    }
}
