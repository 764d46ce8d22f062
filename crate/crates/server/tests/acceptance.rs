//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs sequentially with its own harness so timing checks see an otherwise
//! idle process. Exits nonzero when any criterion fails.

use std::collections::HashSet;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant, SystemTime};

use ingest_core::config::{parse_config, VolumeCfg};
use ingest_core::event::{BoundaryKind, Event, EventStream, FileEventKind, Subscription, WriteKind, DEFAULT_CAPACITY};
use ingest_core::functions::RunningFunction;
use ingest_core::http::{App, AppRoute, HttpServer, Request, Response, RouteTable, ServerOptions, StatusCode};
use ingest_core::lifecycle::{CancelToken, Signal, TaskTracker};
use ingest_core::media::{is_fragment_boundary, read_cmaf_header, scan_chunk, PresentationInfo};
use ingest_core::runtime::{build_volume, RunningSystem, RuntimeError, EXIT_OK};
use ingest_core::volume::{
    read_all, write_all, FileReader, FileWriter, FsVolume, MemVolume, NullVolume, Volume, VolumeError, VolumeFile,
    VolumePath, WriterState,
};
use ingest_harness::client::{self, Body};
use ingest_harness::push::{delete_interface2, push_interface1, push_interface2};
use ingest_harness::synth::{synth_track, SynthSpec, TrackKind};
use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use sha2::{Digest, Sha256};
use url::Url;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn sha(b: &[u8]) -> [u8; 32] {
    Sha256::digest(b).into()
}

fn p(s: &str) -> VolumePath {
    VolumePath::new(s).unwrap()
}

fn wait_for(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    cond()
}

// ---------------------------------------------------------------------------
// 1. Volume contract

#[derive(Debug, Clone, Copy, PartialEq)]
enum Backend {
    Null,
    Mem,
    Fs,
}

struct Vol {
    backend: Backend,
    volume: Arc<dyn Volume>,
    _dir: Option<tempfile::TempDir>,
}

impl Vol {
    fn new(backend: Backend) -> Self {
        let (volume, dir): (Arc<dyn Volume>, _) = match backend {
            Backend::Null => (Arc::new(NullVolume::new("null")), None),
            Backend::Mem => (Arc::new(MemVolume::new("mem", 256)), None),
            Backend::Fs => {
                let dir = tempfile::tempdir().unwrap();
                (Arc::new(FsVolume::new("fs", dir.path())), Some(dir))
            }
        };
        volume.init().unwrap();
        Self { backend, volume, _dir: dir }
    }

    /// What a reader of committed `data` gets back.
    fn stored(&self, data: &[u8]) -> Vec<u8> {
        if self.backend == Backend::Null {
            Vec::new()
        } else {
            data.to_vec()
        }
    }
}

fn random_bytes(rng: &mut StdRng, max: usize) -> Vec<u8> {
    let mut b = vec![0u8; rng.gen_range(0..=max)];
    rng.fill_bytes(&mut b);
    b
}

fn split_random(rng: &mut StdRng, data: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut rest = data;
    while !rest.is_empty() {
        let n = rng.gen_range(1..=rest.len().min(700));
        out.push(rest[..n].to_vec());
        rest = &rest[n..];
    }
    out
}

fn read_slowly(mut r: Box<dyn FileReader>, seed: u64) -> Result<Vec<u8>, VolumeError> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::new();
    loop {
        let mut buf = vec![0u8; rng.gen_range(1..512)];
        match r.read(&mut buf) {
            Ok(0) => return Ok(out),
            Ok(n) => out.extend_from_slice(&buf[..n]),
            Err(e) => return Err(VolumeError::from_io(&e).cloned().unwrap_or(VolumeError::Io(e.to_string()))),
        }
        if rng.gen_bool(0.3) {
            std::thread::yield_now();
        }
    }
}

fn single_writer(v: &Vol, rounds: usize) -> Result<(), String> {
    for round in 0..rounds {
        let file = v.volume.open_create(&p(&format!("race/{round}"))).unwrap();
        let barrier = Arc::new(Barrier::new(16));
        let handles: Vec<_> = (0..16)
            .map(|i| {
                let (file, barrier) = (file.clone(), barrier.clone());
                std::thread::spawn(move || {
                    barrier.wait();
                    file.new_writer(i % 2 == 0).map(|w| (w, std::thread::sleep(Duration::from_millis(2))))
                })
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let ok = results.iter().filter(|r| r.is_ok()).count();
        ensure!(ok == 1, "{:?}: {ok} of 16 writers acquired", v.backend);
        ensure!(
            results.iter().all(|r| matches!(r, Ok(_) | Err(VolumeError::WriterExists(_)))),
            "{:?}: unexpected acquisition error",
            v.backend
        );
    }
    Ok(())
}

fn snapshot_isolation(v: &Vol, rng: &mut StdRng, iterations: usize) -> Result<(), String> {
    let path = p("snap/file");
    let file = v.volume.open_create(&path).unwrap();
    let mut committed: Vec<u8> = Vec::new();
    for i in 0..iterations {
        let new = random_bytes(rng, 4096);
        let pieces = split_random(rng, &new);
        let mut w = file.new_writer(false).unwrap();
        let reader_at: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..=pieces.len())).collect();
        let mut readers = Vec::new();
        for (n, piece) in pieces.iter().enumerate() {
            for _ in reader_at.iter().filter(|a| **a == n) {
                let r = file.new_reader().unwrap();
                let seed = rng.next_u64();
                readers.push(std::thread::spawn(move || read_slowly(r, seed)));
            }
            w.write_all(piece).unwrap();
        }
        for _ in reader_at.iter().filter(|a| **a == pieces.len()) {
            let r = file.new_reader().unwrap();
            let seed = rng.next_u64();
            readers.push(std::thread::spawn(move || read_slowly(r, seed)));
        }
        let abort = rng.gen_bool(0.2);
        if abort {
            w.abort().unwrap();
        } else {
            w.commit().unwrap();
        }
        let prior = sha(&v.stored(&committed));
        for r in readers {
            let got = r.join().unwrap().map_err(|e| format!("{:?}: reader failed: {e}", v.backend))?;
            ensure!(sha(&got) == prior, "{:?}: iteration {i}: reader saw uncommitted bytes", v.backend);
        }
        if !abort {
            committed = new;
        }
        let after = read_all(&*v.volume, &path).unwrap();
        ensure!(after == v.stored(&committed), "{:?}: iteration {i}: wrong content after close", v.backend);
    }
    Ok(())
}

fn in_place_prefix(v: &Vol, rng: &mut StdRng, iterations: usize) -> Result<(), String> {
    for i in 0..iterations {
        let path = p(&format!("live/{i}"));
        let file = v.volume.open_create(&path).unwrap();
        let content = random_bytes(rng, 20_000);
        let pieces = split_random(rng, &content);
        let mut w = file.new_writer(true).unwrap();
        let upper = Arc::new(AtomicUsize::new(0));
        let expected = Arc::new(v.stored(&content));
        let readers: Vec<_> = (0..2)
            .map(|_| {
                let mut r = file.new_reader().unwrap();
                let (upper, expected) = (upper.clone(), expected.clone());
                std::thread::spawn(move || -> Result<(Vec<u8>, Option<VolumeError>), String> {
                    let mut seen = Vec::new();
                    let mut buf = [0u8; 333];
                    loop {
                        match r.read(&mut buf) {
                            Ok(0) => return Ok((seen, None)),
                            Ok(n) => {
                                seen.extend_from_slice(&buf[..n]);
                                if seen.len() > upper.load(Ordering::SeqCst) || !expected.starts_with(&seen) {
                                    return Err(format!("read beyond or off the written prefix at {}", seen.len()));
                                }
                            }
                            Err(e) => return Ok((seen, VolumeError::from_io(&e).cloned())),
                        }
                    }
                })
            })
            .collect();
        let commit = rng.gen_bool(0.8);
        for piece in &pieces {
            upper.fetch_add(piece.len(), Ordering::SeqCst);
            w.write_all(piece).unwrap();
        }
        if commit {
            w.commit().unwrap();
        } else {
            w.abort().unwrap();
        }
        for r in readers {
            let (seen, err) = r.join().unwrap().map_err(|e| format!("{:?}: {e}", v.backend))?;
            ensure!(expected.starts_with(&seen), "{:?}: read is not a prefix", v.backend);
            if commit {
                ensure!(seen[..] == expected[..], "{:?}: committed in-place data incomplete", v.backend);
            } else if v.backend != Backend::Null {
                ensure!(err == Some(VolumeError::WriteAborted), "{:?}: abort not signalled: {err:?}", v.backend);
            }
        }
    }
    Ok(())
}

fn restoration(v: &Vol, rng: &mut StdRng, iterations: usize) -> Result<(), String> {
    for i in 0..iterations {
        let path = p(&format!("restore/{i}"));
        let old = random_bytes(rng, 3000);
        let new = random_bytes(rng, 3000);
        write_all(&*v.volume, &path, &old).unwrap();
        let in_place = rng.gen_bool(0.5);
        let commit = rng.gen_bool(0.5);
        let file = v.volume.open(&path).unwrap();
        let mut w = file.new_writer(in_place).unwrap();
        w.write_all(&new).unwrap();
        if commit {
            w.commit().unwrap();
        } else {
            w.abort().unwrap();
        }
        ensure!(w.write(b"x").is_err(), "{:?}: write after close succeeded", v.backend);
        ensure!(file.writer_state() == WriterState::None, "{:?}: writer still registered", v.backend);
        let want = v.stored(if commit { &new } else { &old });
        ensure!(
            read_all(&*v.volume, &path).unwrap() == want,
            "{:?}: in_place={in_place} commit={commit}: wrong content",
            v.backend
        );
    }
    Ok(())
}

fn criterion_1() -> Outcome {
    let mut rng = StdRng::seed_from_u64(1);
    for backend in [Backend::Null, Backend::Mem, Backend::Fs] {
        let v = Vol::new(backend);
        single_writer(&v, 20)?;
        snapshot_isolation(&v, &mut rng, 1000)?;
        in_place_prefix(&v, &mut rng, 100)?;
        restoration(&v, &mut rng, 200)?;
    }
    Ok("null, mem, fs: 16-way writer race, 1000 snapshot interleavings, in-place prefixes, commit/abort restore".into())
}

// ---------------------------------------------------------------------------
// 2. Mem block accounting

fn criterion_2() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    for trial in 0..200 {
        let b = rng.gen_range(1..=4096);
        let vol = MemVolume::new("m", b);
        vol.init().unwrap();
        let path = p("chain");
        let file = vol.open_create(&path).unwrap();
        let mut w = file.new_writer(rng.gen_bool(0.5)).unwrap();
        let mut n = 0usize;
        for _ in 0..rng.gen_range(1..20) {
            let piece = vec![1u8; rng.gen_range(0..3 * b + 1)];
            n += piece.len();
            w.write_all(&piece).unwrap();
        }
        w.commit().unwrap();
        let got = vol.chain_len(&path).unwrap();
        ensure!(got == n.div_ceil(b), "trial {trial}: b={b} N={n}: chain {got} != {}", n.div_ceil(b));
    }

    let b = 1316;
    let vol = MemVolume::new("m", b);
    vol.init().unwrap();
    let baseline = vol.stats().live_blocks;
    let paths: Vec<VolumePath> = (0..8).map(|i| p(&format!("cycle/{i}"))).collect();
    let mut sizes = [0usize; 8];
    let mut held: Vec<Box<dyn FileReader>> = Vec::new();
    for cycle in 0..10_000 {
        let i = rng.gen_range(0..paths.len());
        let file = vol.open_create(&paths[i]).unwrap();
        if rng.gen_bool(0.1) {
            held.push(file.new_reader().unwrap());
        }
        let size = rng.gen_range(0..4 * b);
        let mut w = file.new_writer(rng.gen_bool(0.3)).unwrap();
        w.write_all(&vec![0u8; size]).unwrap();
        if rng.gen_bool(0.9) {
            w.commit().unwrap();
            sizes[i] = size;
        } else {
            w.abort().unwrap();
        }
        drop(w);
        drop(file);
        if held.len() > 4 || cycle % 97 == 0 {
            held.clear();
        }
        if held.is_empty() {
            let expected: usize = sizes.iter().map(|s| s.div_ceil(b)).sum();
            let live = vol.stats().live_blocks;
            ensure!(live == baseline + expected, "cycle {cycle}: {live} live blocks, expected {expected}");
        }
    }
    held.clear();
    for path in &paths {
        vol.delete(path).unwrap();
    }
    let stats = vol.stats();
    ensure!(stats.live_blocks == baseline, "{} live blocks after 10000 cycles", stats.live_blocks);
    ensure!(stats.pending_gc == 0, "{} super-blocks pending collection", stats.pending_gc);
    Ok(format!(
        "chain length = ceil(N/b) over 200 trials; live blocks back to {baseline} after 10000 cycles ({} reused allocations)",
        stats.reused_allocations
    ))
}

// ---------------------------------------------------------------------------
// 3. fs atomicity

fn criterion_3() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let vol: Arc<dyn Volume> = Arc::new(FsVolume::new("fs", dir.path()));
    vol.init().unwrap();
    let path = p("atomic/segment.m4s");
    let mut rng = StdRng::seed_from_u64(3);
    let versions: Vec<Vec<u8>> = (0..501)
        .map(|_| {
            let mut b = vec![0u8; 64 * 1024];
            rng.fill_bytes(&mut b);
            b
        })
        .collect();
    write_all(&*vol, &path, &versions[0]).unwrap();
    let known: Arc<HashSet<[u8; 32]>> = Arc::new(versions.iter().map(|v| sha(v)).collect());
    let versions = Arc::new(versions);
    let next = Arc::new(AtomicUsize::new(1));
    let done = Arc::new(std::sync::atomic::AtomicBool::new(false));

    let writers: Vec<_> = (0..4)
        .map(|_| {
            let (vol, path, versions, next) = (vol.clone(), path.clone(), versions.clone(), next.clone());
            std::thread::spawn(move || -> Result<usize, String> {
                let mut commits = 0;
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= versions.len() {
                        return Ok(commits);
                    }
                    loop {
                        match write_all(&*vol, &path, &versions[i]) {
                            Ok(()) => break,
                            Err(VolumeError::WriterExists(_)) => std::thread::yield_now(),
                            Err(e) => return Err(e.to_string()),
                        }
                    }
                    commits += 1;
                }
            })
        })
        .collect();
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let (vol, path, known, done) = (vol.clone(), path.clone(), known.clone(), done.clone());
            std::thread::spawn(move || -> (usize, usize) {
                let (mut reads, mut mixed) = (0, 0);
                while !done.load(Ordering::SeqCst) {
                    let bytes = read_all(&*vol, &path).unwrap();
                    reads += 1;
                    if !known.contains(&sha(&bytes)) {
                        mixed += 1;
                    }
                }
                (reads, mixed)
            })
        })
        .collect();
    let mut commits = 0;
    for w in writers {
        commits += w.join().unwrap()?;
    }
    done.store(true, Ordering::SeqCst);
    let (mut reads, mut mixed) = (0, 0);
    for r in readers {
        let (a, b) = r.join().unwrap();
        reads += a;
        mixed += b;
    }
    ensure!(commits == 500, "{commits} commits");
    ensure!(mixed == 0, "{mixed} of {reads} reads were mixed");
    ensure!(reads > 0, "no reads completed");
    Ok(format!("{commits} concurrent commits, {reads} parallel reads, 0 mixed"))
}

// ---------------------------------------------------------------------------
// 4. Router

struct Named(String);

impl App for Named {
    fn name(&self) -> &str {
        &self.0
    }
    fn serve(&self, _req: &mut Request<'_>) -> Response {
        Response::bytes(StatusCode::OK, "text/plain", self.0.clone().into_bytes())
    }
}

fn route_table(patterns: &[String]) -> RouteTable {
    let mut t = RouteTable::new();
    for pat in patterns {
        t.register(AppRoute {
            host_pattern: pat.clone(),
            mount_path: "/".into(),
            app: Arc::new(Named(pat.clone())),
            auth: None,
            cors: None,
        })
        .unwrap();
    }
    t
}

fn oracle_regex(pattern: &str) -> regex::Regex {
    let words: Vec<String> = pattern
        .split('.')
        .map(|w| match w {
            "**" => ".*".to_string(),
            "*" => "[^.]*".to_string(),
            lit => regex::escape(lit),
        })
        .collect();
    regex::Regex::new(&format!("(?i)^{}$", words.join(r"\."))).unwrap()
}

fn oracle_candidates(patterns: &[String], regexes: &[regex::Regex], host: &str) -> Vec<String> {
    let mut exact: Vec<String> =
        patterns.iter().filter(|p| !p.contains('*') && p.eq_ignore_ascii_case(host)).cloned().collect();
    exact.sort();
    let mut globs: Vec<String> = patterns
        .iter()
        .zip(regexes)
        .filter(|(p, re)| p.contains('*') && re.is_match(host))
        .map(|(p, _)| p.clone())
        .collect();
    globs.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    exact.extend(globs);
    exact
}

const WORDS: [&str; 6] = ["a", "b", "cdn", "example", "com", "org"];

fn random_name(rng: &mut StdRng, wildcards: bool) -> String {
    let n = rng.gen_range(1..=4);
    (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0 if wildcards => "*".to_string(),
            1 if wildcards => "**".to_string(),
            _ => WORDS[rng.gen_range(0..WORDS.len())].to_string(),
        })
        .collect::<Vec<_>>()
        .join(".")
}

fn criterion_4() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let mut checked = 0;
    for trial in 0..500 {
        let patterns: Vec<String> = (0..rng.gen_range(1..10))
            .map(|_| random_name(&mut rng, true))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let table = route_table(&patterns);
        let regexes: Vec<regex::Regex> = patterns.iter().map(|p| oracle_regex(p)).collect();
        for _ in 0..10 {
            let host = random_name(&mut rng, false);
            let got: Vec<String> = table.candidates(&host).into_iter().map(str::to_string).collect();
            let want = oracle_candidates(&patterns, &regexes, &host);
            ensure!(got == want, "trial {trial}: host {host}: {got:?} != {want:?}");
            checked += 1;
        }
    }
    let t = route_table(&["*.example.com".to_string()]);
    ensure!(t.candidates("primary.example.com") == ["*.example.com"], "*.example.com must match primary.example.com");
    ensure!(t.candidates("primary.example.org").is_empty(), "*.example.com must not match primary.example.org");
    let t = route_table(&["**".to_string()]);
    for h in ["primary.example.com", "primary.example.org", "localhost"] {
        ensure!(t.candidates(h) == ["**"], "** must match {h}");
    }

    let cancel = CancelToken::new();
    let tracker = TaskTracker::new();
    let server =
        HttpServer::bind("http", "127.0.0.1:0", route_table(&["**".to_string()]), ServerOptions::default()).unwrap();
    let addr = server.local_addr().unwrap();
    let (c, t) = (cancel.clone(), tracker.clone());
    let handle = tracker.spawn("server", move || server.run(&c, &t)).unwrap();
    let get = |path: &str| client::get(&Url::parse(&format!("http://{addr}{path}")).unwrap()).unwrap().status;
    let internal = ingest_core::http::internal_host_path("**");
    let statuses = [get("/sys/internal/hosts/"), get(&format!("{internal}/x"))];
    let normal = get("/x");
    cancel.cancel();
    let _ = handle.join();
    ensure!(statuses.iter().all(|s| *s == 404), "direct internal requests answered {statuses:?}");
    ensure!(normal == 200, "ordinary request answered {normal}");
    Ok(format!("{checked} randomized candidate lists match the oracle; host examples and internal 404 hold"))
}

// ---------------------------------------------------------------------------
// 5. Event stream

fn marker(n: usize) -> Event {
    Event::Stream { presentation: Arc::new(PresentationInfo { id: n.to_string() }), kind: BoundaryKind::Begin }
}

fn marker_id(ev: &Event) -> usize {
    match ev {
        Event::Stream { presentation, .. } => presentation.id.parse().unwrap(),
        _ => usize::MAX,
    }
}

fn criterion_5() -> Outcome {
    let n = 1000;
    for k in 1..=8 {
        let cancel = CancelToken::new();
        let tracker = TaskTracker::new();
        let stream = EventStream::new("s");
        stream.start(&cancel, &tracker).unwrap();
        let subs: Vec<Subscription> = (0..k).map(|_| stream.subscribe().unwrap()).collect();
        let readers: Vec<_> = subs
            .into_iter()
            .map(|sub| std::thread::spawn(move || (0..n).map(|_| marker_id(&sub.recv().unwrap())).collect::<Vec<_>>()))
            .collect();
        for i in 0..n {
            stream.publish(marker(i)).unwrap();
        }
        let mut deliveries = 0;
        for r in readers {
            let got = r.join().unwrap();
            ensure!(got.iter().copied().eq(0..n), "k={k}: subscriber order differs from publication order");
            deliveries += got.len();
        }
        ensure!(deliveries == k * n, "k={k}: {deliveries} deliveries");
        cancel.cancel();
        ensure!(tracker.wait_idle(Duration::from_secs(5)) == 0, "dispatcher still running");
    }

    let cancel = CancelToken::new();
    let tracker = TaskTracker::new();
    let stream = EventStream::new("s");
    stream.start(&cancel, &tracker).unwrap();
    let sub = stream.subscribe().unwrap();
    let published = Arc::new(AtomicUsize::new(0));
    let publisher = {
        let (stream, published) = (stream.clone(), published.clone());
        std::thread::spawn(move || {
            for i in 0..DEFAULT_CAPACITY * 2 {
                if stream.publish(marker(i)).is_err() {
                    return;
                }
                published.fetch_add(1, Ordering::SeqCst);
            }
        })
    };
    std::thread::sleep(Duration::from_millis(500));
    let filled = published.load(Ordering::SeqCst);
    let queued = sub.receiver().len();
    drop(sub);
    publisher.join().unwrap();
    cancel.cancel();
    ensure!(filled == 32 && queued == 32, "fill-without-drain stalled after {filled} publications ({queued} queued)");
    Ok(format!("k=1..8 x n={n}: exactly k*n ordered deliveries; undrained subscription holds {queued}"))
}

// ---------------------------------------------------------------------------
// 6. Parser round trip

fn random_spec(rng: &mut StdRng) -> SynthSpec {
    SynthSpec {
        track_kind: if rng.gen_bool(0.5) { TrackKind::Audio } else { TrackKind::Video },
        track_id: rng.gen_range(1..10),
        timescale: [1000, 15360, 48000, 90000][rng.gen_range(0..4)],
        chunk_count: rng.gen_range(1..60),
        chunks_per_fragment: rng.gen_range(1..8),
        samples_per_chunk: rng.gen_range(1..30),
        sample_duration: rng.gen_range(1..3000),
        payload_bytes_per_sample: rng.gen_range(1..300),
        seed: rng.next_u64(),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = StdRng::seed_from_u64(6);
    let mut chunks_total = 0;
    for n in 0..100 {
        let spec = random_spec(&mut rng);
        let track = synth_track(&spec);
        let input = track.bytes();
        let mut r = io::Cursor::new(&input);
        let header = read_cmaf_header(&mut r, u64::MAX).map_err(|e| format!("spec {n}: {e}"))?;
        let mut raw = header.raw.clone();
        let mut boundaries = Vec::new();
        let mut i = 0;
        while let Some(chunk) = scan_chunk(&mut r, &header.defaults, u64::MAX).map_err(|e| format!("spec {n}: {e}"))? {
            if is_fragment_boundary(&chunk, header.handler).map_err(|e| e.to_string())? {
                boundaries.push(i);
            }
            raw.extend_from_slice(&chunk.raw);
            i += 1;
        }
        ensure!(raw == input, "spec {n}: concatenated raw bytes differ from input");
        ensure!(boundaries == track.fragment_boundaries(), "spec {n}: boundaries differ from harness");
        chunks_total += i;
    }
    Ok(format!("100 random specs ({chunks_total} chunks) round-trip bit-exactly with matching boundaries"))
}

// ---------------------------------------------------------------------------
// End-to-end helpers

fn start(yaml: &str) -> RunningSystem {
    RunningSystem::start(&parse_config(yaml).unwrap()).unwrap()
}

fn base(system: &RunningSystem) -> String {
    format!("http://{}", system.addr("http").unwrap())
}

fn url(s: &str) -> Url {
    Url::parse(s).unwrap()
}

fn drain(sub: &Subscription) -> Vec<Event> {
    let mut out = Vec::new();
    while let Ok(Some(ev)) = sub.recv_timeout(Duration::from_millis(200)) {
        out.push(ev);
    }
    out
}

fn shutdown_clean(system: RunningSystem) -> Result<(), String> {
    let report = system.shutdown();
    ensure!(report.exit_code() == EXIT_OK, "shutdown failed: {report:?}");
    Ok(())
}

/// Checks a media playlist independently of the generator.
fn lint_media_playlist(text: &str) -> Result<m3u8_rs::MediaPlaylist, String> {
    let pl = match m3u8_rs::parse_playlist_res(text.as_bytes()) {
        Ok(m3u8_rs::Playlist::MediaPlaylist(pl)) => pl,
        Ok(_) => return Err("not a media playlist".into()),
        Err(e) => return Err(format!("unparsable playlist: {e:?}")),
    };
    ensure!(text.starts_with("#EXTM3U\n"), "missing #EXTM3U");
    ensure!(text.matches("#EXT-X-TARGETDURATION").count() == 1, "TARGETDURATION must appear once");
    ensure!(text.matches("#EXT-X-VERSION").count() <= 1, "VERSION repeated");
    let has_map = pl.segments.iter().any(|s| s.map.is_some());
    ensure!(!has_map || pl.version.unwrap_or(1) >= 6, "EXT-X-MAP requires version 6 here");
    let mut seen = HashSet::new();
    for s in &pl.segments {
        ensure!(s.duration.is_sign_positive() && s.duration != 0.0, "segment {} has non-positive duration", s.uri);
        ensure!(
            (s.duration as f64).round() as u64 <= pl.target_duration,
            "segment {} exceeds target duration",
            s.uri
        );
        ensure!(seen.insert(s.uri.clone()), "duplicate segment {}", s.uri);
    }
    Ok(pl)
}

// ---------------------------------------------------------------------------
// 7. Interface-1 end to end

const CMAF_CONFIG: &str = r#"
apiVersion: ingest/v1alpha1
kind: Config
servers:
  - name: http
    type: http
    address: "127.0.0.1:0"
    apps:
      - name: cmaf
        type: cmafIngest
        mountPath: /cmaf
        volumeRefs: [memVol]
        functions:
          - name: manifest
            type: manifest
      - name: serve
        type: genericServe
        mountPath: /streams
        volumeRefs: [memVol]
        appOptions:
          app: cmaf
volumes:
  - name: memVol
    type: mem
"#;

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let system = start(CMAF_CONFIG);
    let result = interface_1(&system);
    shutdown_clean(system)?;
    let elapsed = started.elapsed();
    let msg = result?;
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("{msg}; {:.1}s", elapsed.as_secs_f64()))
}

fn interface_1(system: &RunningSystem) -> Outcome {
    let base = base(system);
    let app = system.app("cmaf").unwrap();
    let cmaf = app.cmaf.clone().unwrap();
    let sub = app.events.subscribe_buf(100_000).unwrap();
    let track = synth_track(&SynthSpec { chunk_count: 100, chunks_per_fragment: 2, ..Default::default() });
    ensure!(track.fragment_boundaries().len() == 50, "synth produced {} fragments", track.fragment_boundaries().len());
    let body = track.bytes();
    let rate = body.len() as u64 / 8;
    let push_url = url(&format!("{base}/cmaf/show/Switching(video)/Stream(hd.cmfv)"));
    let pusher = {
        let track = track.clone();
        std::thread::spawn(move || push_interface1(&push_url, &track, Some(rate)))
    };

    // Catch a fragment while it is still being written.
    let addr = ingest_core::apps::parse_ingest_path("/show/Switching(video)/Stream(hd.cmfv)").unwrap();
    let mut live = None;
    let deadline = Instant::now() + Duration::from_secs(8);
    while live.is_none() && Instant::now() < deadline && !pusher.is_finished() {
        let seq = cmaf.fragments(&addr).len() + 1;
        let u = url(&format!("{base}/streams/show/video/hd.cmfv/{seq:010}"));
        let Ok(mut resp) = client::send_streaming("GET", &u, &[], Body::Empty) else { continue };
        if resp.status != 200 || !resp.chunked {
            std::thread::sleep(Duration::from_millis(5));
            continue;
        }
        let mut pieces = Vec::new();
        while let Some(piece) = resp.next_piece().map_err(|e| e.to_string())? {
            pieces.push(piece);
        }
        ensure!(resp.header("content-length").is_none(), "live response has Content-Length");
        ensure!(resp.header("etag").is_none(), "live response has ETag");
        live = Some((seq, pieces));
    }
    let report = pusher.join().unwrap();
    ensure!(report.status == Some(200), "push ended with {:?} {:?}", report.status, report.error);
    let (live_seq, pieces) = live.ok_or("no in-progress fragment observed")?;
    let fragments = track.fragments();
    ensure!(pieces.len() >= 2, "live body arrived in {} piece(s)", pieces.len());
    ensure!(pieces.concat() == fragments[live_seq - 1], "live body differs from fragment {live_seq}");

    let vol = system.registry().get("memVol").unwrap();
    let mut stored = read_all(&*vol, &p("show/video/hd.cmfv/init")).map_err(|e| e.to_string())?;
    for seq in 1..=50 {
        let f = read_all(&*vol, &p(&format!("show/video/hd.cmfv/{seq:010}"))).map_err(|e| format!("fragment {seq}: {e}"))?;
        stored.extend_from_slice(&f);
    }
    ensure!(vol.open(&p("show/video/hd.cmfv/0000000051")).is_err(), "unexpected 51st fragment");
    ensure!(stored == body, "header + 50 fragments differ from the request body");

    let events = drain(&sub);
    let inits = events.iter().filter(|e| matches!(e, Event::InitSegment { kind: WriteKind::Committed, .. })).count();
    let committed: Vec<u64> = events
        .iter()
        .filter_map(|e| match e {
            Event::Fragment { fragment, kind: WriteKind::Committed, .. } => Some(fragment.sequence_number),
            _ => None,
        })
        .collect();
    ensure!(inits == 1, "{inits} init segment commits");
    ensure!(committed.iter().copied().eq(1..=50), "fragment commits out of order: {committed:?}");

    let text = wait_playlist(&*vol, "show/video/hd.cmfv.m3u8", 50)?;
    let pl = lint_media_playlist(&text)?;
    ensure!(pl.segments.len() == 50, "playlist lists {} segments", pl.segments.len());

    let mut etags = HashSet::new();
    for (n, frag) in fragments.iter().enumerate() {
        let u = url(&format!("{base}/streams/show/video/hd.cmfv/{:010}", n + 1));
        let resp = client::get(&u).map_err(|e| e.to_string())?;
        ensure!(resp.status == 200 && !resp.chunked, "fragment {}: status {} chunked {}", n + 1, resp.status, resp.chunked);
        ensure!(resp.body == *frag, "fragment {} body differs", n + 1);
        let len: usize = resp.header("content-length").unwrap_or("").parse().map_err(|_| "bad Content-Length")?;
        ensure!(len == frag.len(), "fragment {}: Content-Length {len}", n + 1);
        let etag = resp.header("etag").ok_or("missing ETag")?.to_string();
        ensure!(etag.starts_with('"') && etag.ends_with('"'), "ETag {etag} is not a strong tag");
        let reader = vol.open(&p(&format!("show/video/hd.cmfv/{:010}", n + 1))).unwrap().new_reader().unwrap();
        ensure!(etag == expected_etag(reader.size(), reader.mod_time()), "fragment {}: ETag {etag} does not match size and mtime", n + 1);
        let again = client::get(&u).map_err(|e| e.to_string())?;
        ensure!(again.header("etag") == Some(etag.as_str()), "ETag not stable");
        etags.insert(etag);
    }
    let u = url(&format!("{base}/streams/show/video/hd.cmfv/0000000001"));
    let ranged = client::send("GET", &u, &[("Range", "bytes=0-99")], Body::Empty).map_err(|e| e.to_string())?;
    ensure!(ranged.status == 206, "range status {}", ranged.status);
    ensure!(ranged.body == fragments[0][..100], "range body differs ({} bytes)", ranged.body.len());
    Ok(format!(
        "50 fragments stored and committed in order, playlist lints clean, live GET in {} pieces, 206 range of 100 bytes",
        pieces.len()
    ))
}

/// Strong ETag over size and modification time, as documented for genericServe.
fn expected_etag(size: u64, mtime: SystemTime) -> String {
    let nanos = mtime.duration_since(SystemTime::UNIX_EPOCH).unwrap().as_nanos();
    let digest = Sha256::digest(format!("{size}:{nanos}"));
    format!("\"{}\"", hex::encode(&digest[..16]))
}

fn wait_playlist(vol: &dyn Volume, path: &str, segments: usize) -> Result<String, String> {
    let mut text = String::new();
    let ok = wait_for(Duration::from_secs(5), || {
        text = read_all(vol, &p(path)).map(|b| String::from_utf8_lossy(&b).into_owned()).unwrap_or_default();
        text.matches("#EXTINF").count() == segments
    });
    ensure!(ok, "playlist {path} did not reach {segments} segments:\n{text}");
    Ok(text)
}

// ---------------------------------------------------------------------------
// 8. Interface-2 sliding window

const DASH_CONFIG: &str = r#"
apiVersion: ingest/v1alpha1
kind: Config
servers:
  - name: http
    type: http
    address: "127.0.0.1:0"
    apps:
      - name: upload
        type: dashAndHlsIngest
        mountPath: /upload
        volumeRefs: [memVol]
      - name: serve
        type: genericServe
        mountPath: /streams
        volumeRefs: [memVol]
        appOptions:
          app: upload
volumes:
  - name: memVol
    type: mem
"#;

fn criterion_8() -> Outcome {
    let system = start(DASH_CONFIG);
    let result = sliding_window(&system);
    shutdown_clean(system)?;
    result
}

fn sliding_window(system: &RunningSystem) -> Outcome {
    let base = base(system);
    let sub = system.app("upload").unwrap().events.subscribe_buf(10_000).unwrap();
    let files: Vec<(String, Vec<u8>)> =
        (1..=20).map(|i| (format!("live/seg{i:03}.m4s"), vec![i as u8; 1000 + i * 10])).collect();
    let upload = url(&format!("{base}/upload/"));
    for r in push_interface2(&upload, &files) {
        ensure!(r.status == Some(201), "upload {} answered {:?}", r.url, r.status);
    }
    for (path, _) in &files[..5] {
        let r = delete_interface2(&upload, path);
        ensure!(r.status == Some(204), "delete {path} answered {:?}", r.status);
    }
    for (n, (path, content)) in files.iter().enumerate() {
        let resp = client::get(&url(&format!("{base}/streams/{path}"))).map_err(|e| e.to_string())?;
        if n < 5 {
            ensure!(resp.status == 404, "deleted {path} answered {}", resp.status);
        } else {
            ensure!(resp.status == 200 && resp.body == *content, "{path} answered {}", resp.status);
        }
    }
    let deleted = drain(&sub)
        .iter()
        .filter(|e| matches!(e, Event::File { kind: FileEventKind::Deleted, .. }))
        .count();
    ensure!(deleted == 5, "{deleted} deletion events");
    Ok("20 uploaded, 5 deleted: 404 for deleted, 200 for 15 remaining, 5 deletion events".into())
}

// ---------------------------------------------------------------------------
// 9. Cleanup timing

const CLEANUP_CONFIG: &str = r#"
apiVersion: ingest/v1alpha1
kind: Config
servers:
  - name: http
    type: http
    address: "127.0.0.1:0"
    apps:
      - name: upload
        type: dashAndHlsIngest
        mountPath: /upload
        volumeRefs: [memVol]
        functions:
          - name: cleanup
            type: cleanup
            options:
              patterns: ["live/**"]
              maxAge: 2s
volumes:
  - name: memVol
    type: mem
"#;

fn criterion_9() -> Outcome {
    let system = start(CLEANUP_CONFIG);
    let result = cleanup_timing(&system);
    shutdown_clean(system)?;
    result
}

fn cleanup_timing(system: &RunningSystem) -> Outcome {
    let base = base(system);
    let Some(RunningFunction::Cleanup(cleanup)) = system.function("cleanup") else {
        return Err("cleanup function missing".into());
    };
    let mut commits = Vec::new();
    for i in 0..10 {
        let path = format!("live/seg{i}.m4s");
        let before = Instant::now();
        let r = client::send("PUT", &url(&format!("{base}/upload/{path}")), &[], Body::Bytes(b"data"))
            .map_err(|e| e.to_string())?;
        let after = Instant::now();
        ensure!(r.status == 201, "upload answered {}", r.status);
        commits.push((path, before, after));
        std::thread::sleep(Duration::from_millis(100));
    }
    ensure!(
        wait_for(Duration::from_secs(5), || cleanup.stats().deletions.len() == 10),
        "only {} deletions",
        cleanup.stats().deletions.len()
    );
    let max_age = Duration::from_secs(2);
    let slack = Duration::from_millis(500);
    let mut worst = Duration::ZERO;
    for ((path, before, after), (deleted, at)) in commits.iter().zip(cleanup.stats().deletions) {
        ensure!(deleted.as_str() == path, "deleted {deleted} instead of {path}");
        ensure!(at >= *before + max_age, "{path} deleted {:?} early", (*before + max_age) - at);
        ensure!(at <= *after + max_age + slack, "{path} deleted {:?} late", at - (*after + max_age));
        worst = worst.max(at.saturating_duration_since(*before + max_age));
    }
    let vol = system.registry().get("memVol").unwrap();
    ensure!(commits.iter().all(|(path, _, _)| vol.open(&p(path)).is_err()), "files still present");

    let idle_from = Instant::now();
    ensure!(
        wait_for(Duration::from_secs(25), || cleanup
            .stats()
            .idle_wakeups
            .iter()
            .filter(|t| **t > idle_from)
            .count()
            >= 2),
        "fewer than two idle wake-ups in 25s"
    );
    let wakeups: Vec<Instant> = cleanup.stats().idle_wakeups;
    let gaps: Vec<Duration> = wakeups.windows(2).map(|w| w[1] - w[0]).collect();
    ensure!(!gaps.is_empty(), "no consecutive idle wake-ups");
    for g in &gaps {
        ensure!(
            *g >= Duration::from_millis(9500) && *g <= Duration::from_millis(10_500),
            "idle wake-up interval {g:?}"
        );
    }
    Ok(format!(
        "10 deletions within [t+2s, t+2.5s] (max lateness {} ms); idle wake-up interval {:.2}s",
        worst.as_millis(),
        gaps.last().unwrap().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 10. Shutdown

/// Volume wrapper that slows reads down, keeping copies in flight.
struct SlowVolume {
    inner: Arc<dyn Volume>,
    delay: Duration,
}

struct SlowFile {
    inner: Arc<dyn VolumeFile>,
    delay: Duration,
}

struct SlowReader {
    inner: Box<dyn FileReader>,
    delay: Duration,
}

impl Volume for SlowVolume {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn init(&self) -> ingest_core::volume::Result<()> {
        self.inner.init()
    }
    fn finalize(&self) -> ingest_core::volume::Result<()> {
        self.inner.finalize()
    }
    fn is_finalized(&self) -> bool {
        self.inner.is_finalized()
    }
    fn open(&self, path: &VolumePath) -> ingest_core::volume::Result<Arc<dyn VolumeFile>> {
        Ok(Arc::new(SlowFile { inner: self.inner.open(path)?, delay: self.delay }))
    }
    fn open_create(&self, path: &VolumePath) -> ingest_core::volume::Result<Arc<dyn VolumeFile>> {
        Ok(Arc::new(SlowFile { inner: self.inner.open_create(path)?, delay: self.delay }))
    }
    fn delete(&self, path: &VolumePath) -> ingest_core::volume::Result<()> {
        self.inner.delete(path)
    }
}

impl VolumeFile for SlowFile {
    fn path(&self) -> &VolumePath {
        self.inner.path()
    }
    fn new_writer(&self, in_place: bool) -> ingest_core::volume::Result<Box<dyn FileWriter>> {
        self.inner.new_writer(in_place)
    }
    fn new_reader(&self) -> ingest_core::volume::Result<Box<dyn FileReader>> {
        Ok(Box::new(SlowReader { inner: self.inner.new_reader()?, delay: self.delay }))
    }
    fn writer_state(&self) -> WriterState {
        self.inner.writer_state()
    }
    fn reader_count(&self) -> usize {
        self.inner.reader_count()
    }
}

impl Read for SlowReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        std::thread::sleep(self.delay);
        self.inner.read(buf)
    }
}

impl Seek for SlowReader {
    fn seek(&mut self, pos: SeekFrom) -> io::Result<u64> {
        self.inner.seek(pos)
    }
}

impl FileReader for SlowReader {
    fn size(&self) -> u64 {
        self.inner.size()
    }
    fn mod_time(&self) -> SystemTime {
        self.inner.mod_time()
    }
    fn write_done(&self) -> Signal {
        self.inner.write_done()
    }
    fn in_place(&self) -> bool {
        self.inner.in_place()
    }
    fn close(&mut self) -> ingest_core::volume::Result<()> {
        self.inner.close()
    }
}

fn shutdown_config(root: &std::path::Path) -> String {
    format!(
        r#"
apiVersion: ingest/v1alpha1
kind: Config
servers:
  - name: http
    type: http
    address: "127.0.0.1:0"
    apps:
      - name: cmaf
        type: cmafIngest
        mountPath: /cmaf
        volumeRefs: [srcVol]
      - name: upload
        type: dashAndHlsIngest
        mountPath: /upload
        volumeRefs: [srcVol]
        functions:
          - name: copy
            type: copy
            options:
              volume: dstVol
volumes:
  - name: srcVol
    type: mem
  - name: dstVol
    type: fs
    options:
      rootPath: {}
"#,
        root.display()
    )
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&shutdown_config(dir.path())).unwrap();
    let system = RunningSystem::start_with_volumes(&cfg, |v: &VolumeCfg| -> Result<Arc<dyn Volume>, RuntimeError> {
        let volume = build_volume(v)?;
        Ok(if v.name == "srcVol" {
            Arc::new(SlowVolume { inner: volume, delay: Duration::from_millis(150) })
        } else {
            volume
        })
    })
    .map_err(|e| e.to_string())?;
    let base = base(&system);
    let Some(RunningFunction::Copy(copy)) = system.function("copy") else {
        return Err("copy function missing".into());
    };
    let stats = copy.stats();

    let track = synth_track(&SynthSpec { chunk_count: 200, chunks_per_fragment: 2, ..Default::default() });
    let push_url = url(&format!("{base}/cmaf/live/Switching(v)/Stream(t)"));
    let pusher = std::thread::spawn(move || push_interface1(&push_url, &track, Some(20_000)));
    std::thread::sleep(Duration::from_millis(500));

    let mut rng = StdRng::seed_from_u64(10);
    let files: Vec<(String, Vec<u8>)> = (0..3)
        .map(|i| {
            let mut b = vec![0u8; 96 * 1024];
            rng.fill_bytes(&mut b);
            (format!("files/{i}.bin"), b)
        })
        .collect();
    for r in push_interface2(&url(&format!("{base}/upload/")), &files) {
        ensure!(r.status == Some(201), "upload answered {:?}", r.status);
    }
    ensure!(
        wait_for(Duration::from_secs(5), || stats.in_flight() == 3),
        "{} copies in flight",
        stats.in_flight()
    );
    ensure!(!pusher.is_finished(), "ingest finished before shutdown");

    let in_flight = stats.in_flight();
    let started = Instant::now();
    let report = system.shutdown();
    let elapsed = started.elapsed();
    let push = pusher.join().unwrap();

    ensure!(report.exit_code() == EXIT_OK, "exit code {} ({report:?})", report.exit_code());
    ensure!(elapsed < Duration::from_secs(30), "shutdown took {elapsed:?}");
    ensure!(report.functions_drained, "functions did not drain");
    ensure!(report.leaked_threads == 0, "{} threads leaked", report.leaked_threads);
    ensure!(report.finalized == ["dstVol", "srcVol"], "finalized {:?}", report.finalized);
    ensure!(push.status != Some(200), "ingest was not interrupted");
    ensure!(stats.completed.load(Ordering::SeqCst) == 3, "{} copies completed", stats.completed.load(Ordering::SeqCst));
    for (path, content) in &files {
        let copied = std::fs::read(dir.path().join(path)).map_err(|e| format!("{path}: {e}"))?;
        ensure!(sha(&copied) == sha(content), "{path}: target hash differs");
    }
    Ok(format!(
        "{in_flight} in-flight copies completed with matching hashes; ingest answered {:?}; stopped in {:.2}s, 0 leaked",
        push.status,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        ("volume contract", criterion_1),
        ("mem block accounting", criterion_2),
        ("fs atomicity", criterion_3),
        ("router", criterion_4),
        ("event stream", criterion_5),
        ("parser round trip", criterion_6),
        ("interface-1 end to end", criterion_7),
        ("interface-2 sliding window", criterion_8),
        ("cleanup timing", criterion_9),
        ("shutdown", criterion_10),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let n = n + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {why}");
            }
        }
        io::stdout().flush().unwrap();
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
