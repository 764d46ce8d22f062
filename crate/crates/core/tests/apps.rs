//! In-process tests of the ingest and serving applications.

use std::io::{Cursor, Read};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use ingest_core::apps::{CmafIngest, DashHlsIngest, GenericServe, IngestAddress};
use ingest_core::config::{CmafIngestOptions, DashAndHlsIngestOptions, GenericServeOptions, SendfileMode};
use ingest_core::event::{Event, EventStream, Subscription};
use ingest_core::http::{App, Method, Request, Response, ResponseBody, StatusCode};
use ingest_core::lifecycle::{CancelToken, TaskTracker};
use ingest_core::volume::{read_all, write_all, MemVolume, Volume, VolumePath};
use ingest_harness::synth::{synth_track, SynthSpec, TrackKind};

struct Env {
    cancel: CancelToken,
    _tracker: TaskTracker,
    events: EventStream,
    sub: Subscription,
    volume: Arc<dyn Volume>,
}

impl Env {
    fn new() -> Self {
        let cancel = CancelToken::new();
        let tracker = TaskTracker::new();
        let events = EventStream::new("test");
        events.start(&cancel, &tracker).unwrap();
        let sub = events.subscribe_buf(100_000).unwrap();
        let volume: Arc<dyn Volume> = Arc::new(MemVolume::new("mem", 4096));
        volume.init().unwrap();
        Self { cancel, _tracker: tracker, events, sub, volume }
    }

    fn drain(&self) -> Vec<Event> {
        let mut out = Vec::new();
        while let Ok(Some(e)) = self.sub.recv_timeout(Duration::from_millis(50)) {
            out.push(e);
        }
        out
    }

    fn cmaf(&self, opts: CmafIngestOptions) -> Arc<CmafIngest> {
        CmafIngest::new("cmaf", self.volume.clone(), self.events.clone(), opts, self.cancel.child())
    }
}

impl Drop for Env {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

fn call(app: &dyn App, method: Method, path: &str, body: Vec<u8>) -> Response {
    let mut req = Request::new(method, path, Cursor::new(body));
    app.serve(&mut req)
}

fn body_bytes(resp: Response) -> Vec<u8> {
    match resp.body {
        ResponseBody::Empty => Vec::new(),
        ResponseBody::Bytes(b) => b,
        ResponseBody::Stream { mut reader, length } => {
            let mut out = Vec::new();
            match length {
                Some(n) => reader.take(n).read_to_end(&mut out).unwrap(),
                None => reader.read_to_end(&mut out).unwrap(),
            };
            out
        }
    }
}

fn summary(events: &[Event]) -> Vec<String> {
    events.iter().map(|e| format!("{}.{}", e.family(), e.kind_name())).collect()
}

const TRACK_PATH: &str = "/example.str/Switching(video)/Stream(1080p.cmfv)";

fn addr() -> IngestAddress {
    IngestAddress {
        presentation: "example.str".into(),
        switching_set: "video".into(),
        track: "1080p.cmfv".into(),
    }
}

/// A request body fed from a channel, for requests that stay open.
struct ChannelBody {
    rx: Receiver<Vec<u8>>,
    buf: Cursor<Vec<u8>>,
}

impl Read for ChannelBody {
    fn read(&mut self, out: &mut [u8]) -> std::io::Result<usize> {
        loop {
            let n = self.buf.read(out)?;
            if n > 0 {
                return Ok(n);
            }
            match self.rx.recv() {
                Ok(next) => self.buf = Cursor::new(next),
                Err(_) => return Ok(0),
            }
        }
    }
}

fn channel_body() -> (Sender<Vec<u8>>, ChannelBody) {
    let (tx, rx) = unbounded();
    (tx, ChannelBody { rx, buf: Cursor::new(Vec::new()) })
}

#[test]
fn cmaf_ingest_stores_header_and_fragments() {
    let env = Env::new();
    let app = env.cmaf(CmafIngestOptions::default());
    let track = synth_track(&SynthSpec { chunk_count: 12, chunks_per_fragment: 3, ..Default::default() });
    let resp = call(&*app, Method::PUT, TRACK_PATH, track.bytes());
    assert_eq!(resp.status, StatusCode::OK);

    let init = read_all(&*env.volume, &VolumePath::new("example.str/video/1080p.cmfv/init").unwrap()).unwrap();
    assert_eq!(init, track.header);
    let expected = track.fragments();
    assert_eq!(expected.len(), 4);
    for (i, frag) in expected.iter().enumerate() {
        let path = VolumePath::new(format!("example.str/video/1080p.cmfv/{:010}", i + 1)).unwrap();
        assert_eq!(&read_all(&*env.volume, &path).unwrap(), frag, "fragment {}", i + 1);
    }
    let infos = app.fragments(&addr());
    let durations: Vec<u64> = infos.iter().map(|f| f.duration).collect();
    assert_eq!(durations, track.fragment_durations());

    let events = summary(&env.drain());
    assert_eq!(
        &events[..7],
        [
            "stream.begin",
            "switchingSet.begin",
            "track.begin",
            "file.started",
            "initSegment.started",
            "file.committed",
            "initSegment.committed"
        ]
    );
    assert_eq!(events.iter().filter(|e| *e == "fragment.committed").count(), 4);
    assert_eq!(events.iter().filter(|e| *e == "fragment.started").count(), 4);
}

#[test]
fn audio_fragments_at_every_chunk() {
    let env = Env::new();
    let app = env.cmaf(CmafIngestOptions::default());
    let track = synth_track(&SynthSpec {
        track_kind: TrackKind::Audio,
        timescale: 48000,
        sample_duration: 1024,
        chunk_count: 5,
        ..Default::default()
    });
    let resp = call(&*app, Method::POST, "/p/Switching(audio)/Stream(en.cmfa)", track.bytes());
    assert_eq!(resp.status, StatusCode::OK);
    let addr = IngestAddress { presentation: "p".into(), switching_set: "audio".into(), track: "en.cmfa".into() };
    assert_eq!(app.fragments(&addr).len(), 5);
}

#[test]
fn reconnect_continues_numbering() {
    let env = Env::new();
    let app = env.cmaf(CmafIngestOptions::default());
    let first = synth_track(&SynthSpec { chunk_count: 4, chunks_per_fragment: 2, ..Default::default() });
    let second = synth_track(&SynthSpec { chunk_count: 6, chunks_per_fragment: 2, seed: 9, ..Default::default() });
    assert_eq!(call(&*app, Method::PUT, TRACK_PATH, first.bytes()).status, StatusCode::OK);
    assert_eq!(call(&*app, Method::PUT, TRACK_PATH, second.bytes()).status, StatusCode::OK);
    let seqs: Vec<u64> = app.fragments(&addr()).iter().map(|f| f.sequence_number).collect();
    assert_eq!(seqs, vec![1, 2, 3, 4, 5]);
    let last = read_all(&*env.volume, &VolumePath::new("example.str/video/1080p.cmfv/0000000005").unwrap()).unwrap();
    assert_eq!(last, *second.fragments().last().unwrap());
}

#[test]
fn second_request_for_active_track_conflicts() {
    let env = Env::new();
    let app = env.cmaf(CmafIngestOptions::default());
    let track = synth_track(&SynthSpec::default());
    let (tx, body) = channel_body();
    let worker = {
        let app = app.clone();
        std::thread::spawn(move || {
            let mut req = Request::new(Method::PUT, TRACK_PATH, body);
            app.serve(&mut req).status
        })
    };
    tx.send(track.header.clone()).unwrap();
    tx.send(track.chunks[0].clone()).unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    while app.fragments(&addr()).is_empty() && app.presentation_ids().is_empty() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(call(&*app, Method::PUT, TRACK_PATH, track.bytes()).status, StatusCode::CONFLICT);
    drop(tx);
    assert_eq!(worker.join().unwrap(), StatusCode::OK);
    assert_eq!(call(&*app, Method::PUT, TRACK_PATH, track.bytes()).status, StatusCode::OK);
}

#[test]
fn bad_requests() {
    let env = Env::new();
    let app = env.cmaf(CmafIngestOptions::default());
    let track = synth_track(&SynthSpec::default());
    assert_eq!(call(&*app, Method::GET, TRACK_PATH, vec![]).status, StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(call(&*app, Method::PUT, "/p/Stream(x)", track.bytes()).status, StatusCode::BAD_REQUEST);
    assert_eq!(call(&*app, Method::PUT, "/p/manifest.mpd", vec![]).status, StatusCode::NOT_IMPLEMENTED);
    assert_eq!(call(&*app, Method::PUT, TRACK_PATH, b"garbage!".to_vec()).status, StatusCode::BAD_REQUEST);

    let mut truncated = track.bytes();
    truncated.truncate(truncated.len() - 10);
    assert_eq!(call(&*app, Method::PUT, TRACK_PATH, truncated).status, StatusCode::BAD_REQUEST);
    // Fragments before the truncated one are kept.
    assert_eq!(app.fragments(&addr()).len(), track.fragments().len() - 1);
}

#[test]
fn oversized_fragment_is_rejected() {
    let env = Env::new();
    let opts = CmafIngestOptions { max_fragment_bytes: 2000, ..Default::default() };
    let app = env.cmaf(opts);
    let track = synth_track(&SynthSpec { chunks_per_fragment: 5, ..Default::default() });
    assert!(track.fragments()[0].len() > 2000);
    let resp = call(&*app, Method::PUT, TRACK_PATH, track.bytes());
    assert_eq!(resp.status, StatusCode::PAYLOAD_TOO_LARGE);
    let events = summary(&env.drain());
    assert!(events.contains(&"fragment.aborted".to_string()));
    assert!(app.fragments(&addr()).is_empty());
}

#[test]
fn idle_presentations_are_collected() {
    let env = Env::new();
    let opts = CmafIngestOptions {
        presentation_timeout: ingest_core::config::GoDuration(Duration::from_millis(100)),
        ..Default::default()
    };
    let app = env.cmaf(opts);
    let track = synth_track(&SynthSpec::default());
    call(&*app, Method::PUT, TRACK_PATH, track.bytes());
    env.drain();
    assert!(app.gc_presentations(Instant::now()).is_empty());
    let removed = app.gc_presentations(Instant::now() + Duration::from_secs(1));
    assert_eq!(removed, vec!["example.str".to_string()]);
    assert_eq!(summary(&env.drain()), ["track.end", "switchingSet.end", "stream.end"]);
    assert!(app.presentation_ids().is_empty());
}

fn dash(env: &Env, max: u64) -> Arc<DashHlsIngest> {
    DashHlsIngest::new(
        "dash",
        env.volume.clone(),
        env.events.clone(),
        DashAndHlsIngestOptions { use_in_place_writers: false, max_file_bytes: max },
    )
}

#[test]
fn dash_hls_ingest_lifecycle() {
    let env = Env::new();
    let app = dash(&env, 1024);
    assert_eq!(call(&*app, Method::PUT, "/live/index.m3u8", b"#EXTM3U\n".to_vec()).status, StatusCode::CREATED);
    assert_eq!(call(&*app, Method::PUT, "/live/index.m3u8", b"#EXTM3U\n#2\n".to_vec()).status, StatusCode::OK);
    assert_eq!(read_all(&*env.volume, &VolumePath::new("live/index.m3u8").unwrap()).unwrap(), b"#EXTM3U\n#2\n");
    assert_eq!(call(&*app, Method::PUT, "/live/big", vec![0; 2000]).status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(call(&*app, Method::DELETE, "/live/index.m3u8", vec![]).status, StatusCode::NO_CONTENT);
    assert_eq!(call(&*app, Method::DELETE, "/live/index.m3u8", vec![]).status, StatusCode::NOT_FOUND);
    assert_eq!(call(&*app, Method::GET, "/live/index.m3u8", vec![]).status, StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(call(&*app, Method::PUT, "/", vec![1]).status, StatusCode::BAD_REQUEST);
    assert_eq!(
        summary(&env.drain()),
        [
            "file.started",
            "file.committed",
            "file.started",
            "file.committed",
            "file.started",
            "file.aborted",
            "file.deleted"
        ]
    );
}

fn serve(env: &Env) -> Arc<GenericServe> {
    GenericServe::new(
        "serve",
        vec![env.volume.clone()],
        GenericServeOptions {
            app: "dash".into(),
            default_content_type: "application/octet-stream".into(),
            sendfile: SendfileMode::Off,
        },
    )
}

#[test]
fn serve_files_and_ranges() {
    let env = Env::new();
    let app = serve(&env);
    let data: Vec<u8> = (0..100u8).collect();
    write_all(&*env.volume, &VolumePath::new("a/seg.cmfv").unwrap(), &data).unwrap();

    let resp = call(&*app, Method::GET, "/a/seg.cmfv", vec![]);
    assert_eq!(resp.status, StatusCode::OK);
    assert_eq!(resp.headers["content-type"], "video/mp4");
    assert!(resp.headers.contains_key("etag"));
    assert_eq!(body_bytes(resp), data);

    let mut req = Request::new(Method::GET, "/a/seg.cmfv", Cursor::new(vec![])).with_header("range", "bytes=10-19");
    let resp = app.serve(&mut req);
    assert_eq!(resp.status, StatusCode::PARTIAL_CONTENT);
    assert_eq!(resp.headers["content-range"], "bytes 10-19/100");
    assert_eq!(body_bytes(resp), &data[10..20]);

    let mut req = Request::new(Method::GET, "/a/seg.cmfv", Cursor::new(vec![])).with_header("range", "bytes=200-");
    let resp = app.serve(&mut req);
    assert_eq!(resp.status, StatusCode::RANGE_NOT_SATISFIABLE);
    assert_eq!(resp.headers["content-range"], "bytes */100");

    assert_eq!(call(&*app, Method::GET, "/a/missing", vec![]).status, StatusCode::NOT_FOUND);
    assert_eq!(call(&*app, Method::PUT, "/a/seg.cmfv", vec![]).status, StatusCode::METHOD_NOT_ALLOWED);
    let resp = call(&*app, Method::GET, "/a/other.bin", vec![]);
    assert_eq!(resp.status, StatusCode::NOT_FOUND);
}

#[test]
fn serve_follows_in_place_writes() {
    let env = Env::new();
    let app = serve(&env);
    let path = VolumePath::new("live/0000000001").unwrap();
    let file = env.volume.open_create(&path).unwrap();
    let mut writer = file.new_writer(true).unwrap();
    use std::io::Write;
    writer.write_all(b"hello ").unwrap();

    let resp = call(&*app, Method::GET, "/live/0000000001", vec![]);
    assert_eq!(resp.status, StatusCode::OK);
    assert!(!resp.headers.contains_key("etag"));
    assert!(matches!(resp.body, ResponseBody::Stream { length: None, .. }));
    let reader = std::thread::spawn(move || body_bytes(resp));
    std::thread::sleep(Duration::from_millis(50));
    writer.write_all(b"world").unwrap();
    writer.commit().unwrap();
    assert_eq!(reader.join().unwrap(), b"hello world");
}
