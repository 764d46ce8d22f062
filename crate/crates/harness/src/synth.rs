//! Deterministic synthetic CMAF track muxer.
//!
//! Produces a CMAF header (`ftyp` + `moov`) followed by `moof`/`mdat` chunks
//! carrying pseudo-random sample payloads. The box layout is written by hand
//! here and shares no code with the server's parser, so the expectations it
//! returns can serve as an independent oracle.
//!
//! The encoding of sample flags and durations varies from chunk to chunk
//! (explicit trun fields, trun first-sample flags, tfhd defaults, trex
//! defaults) so every branch of a defaulting cascade gets exercised.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sample flags for an independently decodable sample
/// (sample_depends_on = 2, sample_is_non_sync_sample = 0).
pub const SYNC_SAMPLE_FLAGS: u32 = 0x0200_0000;
/// Sample flags for a dependent sample
/// (sample_depends_on = 1, sample_is_non_sync_sample = 1).
pub const NON_SYNC_SAMPLE_FLAGS: u32 = 0x0101_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackKind {
    Video,
    Audio,
}

/// Parameters of a synthesized track.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub track_kind: TrackKind,
    pub track_id: u32,
    pub timescale: u32,
    pub chunk_count: u32,
    pub chunks_per_fragment: u32,
    pub samples_per_chunk: u32,
    pub sample_duration: u32,
    pub payload_bytes_per_sample: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            track_kind: TrackKind::Video,
            track_id: 1,
            timescale: 15360,
            chunk_count: 10,
            chunks_per_fragment: 2,
            samples_per_chunk: 15,
            sample_duration: 512,
            payload_bytes_per_sample: 64,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("track_id", self.track_id),
            ("timescale", self.timescale),
            ("chunk_count", self.chunk_count),
            ("chunks_per_fragment", self.chunks_per_fragment),
            ("samples_per_chunk", self.samples_per_chunk),
            ("sample_duration", self.sample_duration),
            ("payload_bytes_per_sample", self.payload_bytes_per_sample),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Number of fragments the muxer groups chunks into.
    pub fn fragment_count(&self) -> u32 {
        self.chunk_count.div_ceil(self.chunks_per_fragment)
    }
}

/// What the muxer wrote for one chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedChunk {
    /// First chunk of a muxer fragment.
    pub fragment_start: bool,
    /// Whether the first sample of the chunk is a sync sample.
    pub first_sample_sync: bool,
    pub sequence_number: u32,
    pub base_decode_time: u64,
    pub sample_count: u32,
    pub duration: u64,
    /// Total chunk size, including any leading styp/prft/emsg.
    pub size: usize,
}

/// A synthesized track: the header, its chunks and the expectations.
#[derive(Debug, Clone)]
pub struct SynthTrack {
    pub spec: SynthSpec,
    pub header: Vec<u8>,
    pub chunks: Vec<Vec<u8>>,
    pub expected: Vec<ExpectedChunk>,
}

impl SynthTrack {
    /// The whole track as one byte stream.
    pub fn bytes(&self) -> Vec<u8> {
        let mut out = self.header.clone();
        for c in &self.chunks {
            out.extend_from_slice(c);
        }
        out
    }

    /// Chunk indices at which a new CMAF fragment starts. Every audio sample
    /// is a switching point, so for audio tracks this is every chunk.
    pub fn fragment_boundaries(&self) -> Vec<usize> {
        self.expected
            .iter()
            .enumerate()
            .filter(|(_, c)| match self.spec.track_kind {
                TrackKind::Audio => true,
                TrackKind::Video => c.first_sample_sync,
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Fragment payloads (concatenated chunk bytes) split at the boundaries.
    pub fn fragments(&self) -> Vec<Vec<u8>> {
        let bounds = self.fragment_boundaries();
        let mut out = Vec::with_capacity(bounds.len());
        for (n, start) in bounds.iter().enumerate() {
            let end = bounds.get(n + 1).copied().unwrap_or(self.chunks.len());
            out.push(self.chunks[*start..end].concat());
        }
        out
    }

    /// Duration in ticks of every fragment, in order.
    pub fn fragment_durations(&self) -> Vec<u64> {
        let bounds = self.fragment_boundaries();
        bounds
            .iter()
            .enumerate()
            .map(|(n, start)| {
                let end = bounds.get(n + 1).copied().unwrap_or(self.expected.len());
                self.expected[*start..end].iter().map(|c| c.duration).sum()
            })
            .collect()
    }

    pub fn total_samples(&self) -> u64 {
        self.expected.iter().map(|c| u64::from(c.sample_count)).sum()
    }
}

/// Builds the track described by `spec`. Output is a pure function of the spec.
pub fn synth_track(spec: &SynthSpec) -> SynthTrack {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let header = write_header(spec);
    let mut chunks = Vec::with_capacity(spec.chunk_count as usize);
    let mut expected = Vec::with_capacity(spec.chunk_count as usize);
    let mut decode_time: u64 = if rng.gen_bool(0.3) {
        // exercise 64-bit tfdt values
        u64::from(u32::MAX) + u64::from(rng.gen::<u16>())
    } else {
        0
    };
    for index in 0..spec.chunk_count {
        let fragment_start = index % spec.chunks_per_fragment == 0;
        let chunk = write_chunk(spec, &mut rng, index + 1, fragment_start, decode_time);
        decode_time += chunk.1.duration;
        chunks.push(chunk.0);
        expected.push(chunk.1);
    }
    SynthTrack {
        spec: spec.clone(),
        header,
        chunks,
        expected,
    }
}

fn bx(kind: &[u8; 4], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(&((body.len() + 8) as u32).to_be_bytes());
    out.extend_from_slice(kind);
    out.extend_from_slice(body);
    out
}

fn full_box(kind: &[u8; 4], version: u8, flags: u32, body: &[u8]) -> Vec<u8> {
    let mut inner = Vec::with_capacity(body.len() + 4);
    inner.extend_from_slice(&((u32::from(version) << 24) | (flags & 0xFF_FFFF)).to_be_bytes());
    inner.extend_from_slice(body);
    bx(kind, &inner)
}

fn large_box(kind: &[u8; 4], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 16);
    out.extend_from_slice(&1u32.to_be_bytes());
    out.extend_from_slice(kind);
    out.extend_from_slice(&((body.len() + 16) as u64).to_be_bytes());
    out.extend_from_slice(body);
    out
}

struct Buf(Vec<u8>);

impl Buf {
    fn new() -> Self {
        Buf(Vec::new())
    }
    fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    fn u16(&mut self, v: u16) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.0.extend_from_slice(v);
        self
    }
    fn zeros(&mut self, n: usize) -> &mut Self {
        self.0.resize(self.0.len() + n, 0);
        self
    }
    fn take(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.0)
    }
}

const MATRIX: [u32; 9] = [0x0001_0000, 0, 0, 0, 0x0001_0000, 0, 0, 0, 0x4000_0000];

fn write_header(spec: &SynthSpec) -> Vec<u8> {
    let mut b = Buf::new();
    let ftyp = bx(
        b"ftyp",
        b.bytes(b"cmfc").u32(0).bytes(b"cmfc").bytes(b"iso6").bytes(b"cmf2").take().as_slice(),
    );

    b.u32(0).u32(0).u32(1000).u32(0).u32(0x0001_0000).u16(0x0100).zeros(10);
    for m in MATRIX {
        b.u32(m);
    }
    b.zeros(24).u32(spec.track_id + 1);
    let mvhd = full_box(b"mvhd", 0, 0, &b.take());

    let video = spec.track_kind == TrackKind::Video;
    b.u32(0).u32(0).u32(spec.track_id).u32(0).u32(0).zeros(8).u16(0).u16(0);
    b.u16(if video { 0 } else { 0x0100 }).u16(0);
    for m in MATRIX {
        b.u32(m);
    }
    if video {
        b.u32(640 << 16).u32(360 << 16);
    } else {
        b.u32(0).u32(0);
    }
    let tkhd = full_box(b"tkhd", 0, 0x7, &b.take());

    // language "und"
    b.u32(0).u32(0).u32(spec.timescale).u32(0).u16(0x55C4).u16(0);
    let mdhd = full_box(b"mdhd", 0, 0, &b.take());

    let handler: &[u8; 4] = if video { b"vide" } else { b"soun" };
    b.u32(0).bytes(handler).zeros(12).bytes(b"synth\0");
    let hdlr = full_box(b"hdlr", 0, 0, &b.take());

    let media_header = if video {
        full_box(b"vmhd", 0, 1, &[0u8; 8])
    } else {
        full_box(b"smhd", 0, 0, &[0u8; 4])
    };
    let url = full_box(b"url ", 0, 1, &[]);
    let dref = full_box(b"dref", 0, 0, &[&1u32.to_be_bytes()[..], &url].concat());
    let dinf = bx(b"dinf", &dref);

    let entry = if video {
        avc1_entry()
    } else {
        mp4a_entry(spec.timescale)
    };
    let stsd = full_box(b"stsd", 0, 0, &[&1u32.to_be_bytes()[..], &entry].concat());
    let stts = full_box(b"stts", 0, 0, &0u32.to_be_bytes());
    let stsc = full_box(b"stsc", 0, 0, &0u32.to_be_bytes());
    let stsz = full_box(b"stsz", 0, 0, &[0u8; 8]);
    let stco = full_box(b"stco", 0, 0, &0u32.to_be_bytes());
    let stbl = bx(b"stbl", &[stsd, stts, stsc, stsz, stco].concat());
    let minf = bx(b"minf", &[media_header, dinf, stbl].concat());
    let mdia = bx(b"mdia", &[mdhd, hdlr, minf].concat());
    let trak = bx(b"trak", &[tkhd, mdia].concat());

    let default_flags = if video {
        NON_SYNC_SAMPLE_FLAGS
    } else {
        SYNC_SAMPLE_FLAGS
    };
    b.u32(spec.track_id)
        .u32(1)
        .u32(spec.sample_duration)
        .u32(spec.payload_bytes_per_sample)
        .u32(default_flags);
    let trex = full_box(b"trex", 0, 0, &b.take());
    let mvex = bx(b"mvex", &trex);

    let moov = bx(b"moov", &[mvhd, trak, mvex].concat());
    [ftyp, moov].concat()
}

fn avc1_entry() -> Vec<u8> {
    let sps: &[u8] = &[0x67, 0x42, 0xC0, 0x1E, 0xDA, 0x02, 0x80, 0xBF, 0xE5];
    let pps: &[u8] = &[0x68, 0xCE, 0x3C, 0x80];
    let mut b = Buf::new();
    b.u8(1).u8(0x42).u8(0xC0).u8(0x1E).u8(0xFF).u8(0xE1);
    b.u16(sps.len() as u16).bytes(sps).u8(1).u16(pps.len() as u16).bytes(pps);
    let avcc = bx(b"avcC", &b.take());

    let mut name = [0u8; 32];
    name[0] = 5;
    name[1..6].copy_from_slice(b"synth");
    b.zeros(6).u16(1).zeros(16).u16(640).u16(360).u32(0x0048_0000).u32(0x0048_0000);
    b.u32(0).u16(1).bytes(&name).u16(0x0018).u16(0xFFFF).bytes(&avcc);
    bx(b"avc1", &b.take())
}

fn mp4a_entry(timescale: u32) -> Vec<u8> {
    let rate = if timescale <= 0xFFFF { timescale << 16 } else { 0 };
    let mut b = Buf::new();
    // DecoderSpecificInfo: AAC-LC, 44.1 kHz, stereo
    let dsi = [0x05u8, 0x02, 0x12, 0x10];
    let mut dcd = Buf::new();
    dcd.u8(0x40).u8(0x15).bytes(&[0, 0, 0]).u32(128_000).u32(128_000).bytes(&dsi);
    let dcd = dcd.take();
    let mut es = Buf::new();
    es.u16(1).u8(0).u8(0x04).u8(dcd.len() as u8).bytes(&dcd).bytes(&[0x06, 0x01, 0x02]);
    let es = es.take();
    let mut esds_body = Buf::new();
    esds_body.u8(0x03).u8(es.len() as u8).bytes(&es);
    let esds = full_box(b"esds", 0, 0, &esds_body.take());

    b.zeros(6).u16(1).zeros(8).u16(2).u16(16).u16(0).u16(0).u32(rate).bytes(&esds);
    bx(b"mp4a", &b.take())
}

#[derive(Clone, Copy)]
enum FlagsMode {
    /// trun first-sample-flags, remaining samples from tfhd default.
    FirstSample,
    /// trun sample-flags for every sample.
    PerSample,
    /// tfhd default-sample-flags only.
    TfhdDefault,
    /// nothing in the moof; trex default applies.
    TrexDefault,
}

#[derive(Clone, Copy)]
enum DurationMode {
    PerSample,
    TfhdDefault,
    TrexDefault,
}

fn write_chunk(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    sequence_number: u32,
    fragment_start: bool,
    base_decode_time: u64,
) -> (Vec<u8>, ExpectedChunk) {
    let video = spec.track_kind == TrackKind::Video;
    let samples = spec.samples_per_chunk as usize;
    let first_sync = !video || fragment_start;

    let flags: Vec<u32> = (0..samples)
        .map(|i| {
            if !video || (i == 0 && first_sync) {
                SYNC_SAMPLE_FLAGS
            } else {
                NON_SYNC_SAMPLE_FLAGS
            }
        })
        .collect();
    let uniform_flags = flags.iter().all(|f| *f == flags[0]);
    let trex_flags = if video {
        NON_SYNC_SAMPLE_FLAGS
    } else {
        SYNC_SAMPLE_FLAGS
    };

    let mut flag_modes = vec![FlagsMode::PerSample];
    if !video || flags[1..].iter().all(|f| *f == NON_SYNC_SAMPLE_FLAGS) {
        flag_modes.push(FlagsMode::FirstSample);
    }
    if uniform_flags {
        flag_modes.push(FlagsMode::TfhdDefault);
        if flags[0] == trex_flags {
            flag_modes.push(FlagsMode::TrexDefault);
        }
    }
    let flags_mode = flag_modes[rng.gen_range(0..flag_modes.len())];

    let duration_mode = match rng.gen_range(0..3) {
        0 => DurationMode::PerSample,
        1 => DurationMode::TfhdDefault,
        _ => DurationMode::TrexDefault,
    };
    let durations: Vec<u32> = match duration_mode {
        DurationMode::PerSample => (0..samples)
            .map(|_| rng.gen_range(1..=spec.sample_duration * 2))
            .collect(),
        _ => vec![spec.sample_duration; samples],
    };
    let per_sample_sizes = rng.gen_bool(0.5);

    let mut payload = vec![0u8; samples * spec.payload_bytes_per_sample as usize];
    rng.fill_bytes(&mut payload);

    // tfhd
    let mut tfhd_flags = 0x02_0000; // default-base-is-moof
    let mut b = Buf::new();
    b.u32(spec.track_id);
    if matches!(duration_mode, DurationMode::TfhdDefault) {
        tfhd_flags |= 0x08;
        b.u32(spec.sample_duration);
    }
    if !per_sample_sizes {
        tfhd_flags |= 0x10;
        b.u32(spec.payload_bytes_per_sample);
    }
    match flags_mode {
        FlagsMode::FirstSample => {
            tfhd_flags |= 0x20;
            b.u32(if video { NON_SYNC_SAMPLE_FLAGS } else { SYNC_SAMPLE_FLAGS });
        }
        FlagsMode::TfhdDefault => {
            tfhd_flags |= 0x20;
            b.u32(flags[0]);
        }
        _ => {}
    }
    let tfhd = full_box(b"tfhd", 0, tfhd_flags, &b.take());

    let tfdt = if base_decode_time > u64::from(u32::MAX) || rng.gen_bool(0.5) {
        full_box(b"tfdt", 1, 0, &base_decode_time.to_be_bytes())
    } else {
        full_box(b"tfdt", 0, 0, &(base_decode_time as u32).to_be_bytes())
    };

    let mut trun_flags = 0x01; // data-offset
    if matches!(flags_mode, FlagsMode::FirstSample) {
        trun_flags |= 0x04;
    }
    if matches!(duration_mode, DurationMode::PerSample) {
        trun_flags |= 0x100;
    }
    if per_sample_sizes {
        trun_flags |= 0x200;
    }
    if matches!(flags_mode, FlagsMode::PerSample) {
        trun_flags |= 0x400;
    }
    // data_offset is patched once the moof size is known
    let build_trun = |data_offset: i32| {
        let mut b = Buf::new();
        b.u32(samples as u32).u32(data_offset as u32);
        if trun_flags & 0x04 != 0 {
            b.u32(flags[0]);
        }
        for i in 0..samples {
            if trun_flags & 0x100 != 0 {
                b.u32(durations[i]);
            }
            if trun_flags & 0x200 != 0 {
                b.u32(spec.payload_bytes_per_sample);
            }
            if trun_flags & 0x400 != 0 {
                b.u32(flags[i]);
            }
        }
        full_box(b"trun", 0, trun_flags, &b.take())
    };

    let mfhd = full_box(b"mfhd", 0, 0, &sequence_number.to_be_bytes());
    let large_mdat = rng.gen_bool(0.15);
    let mdat_header_len = if large_mdat { 16 } else { 8 };
    let assemble = |data_offset: i32| {
        let traf = bx(b"traf", &[tfhd.clone(), tfdt.clone(), build_trun(data_offset)].concat());
        bx(b"moof", &[mfhd.clone(), traf].concat())
    };
    let moof_len = assemble(0).len();
    let moof = assemble((moof_len + mdat_header_len) as i32);
    let mdat = if large_mdat {
        large_box(b"mdat", &payload)
    } else {
        bx(b"mdat", &payload)
    };

    let mut chunk = Vec::with_capacity(moof.len() + mdat.len() + 64);
    if fragment_start && rng.gen_bool(0.5) {
        chunk.extend(bx(b"styp", b"msdh\0\0\0\0msdhmsixcmfs"));
    }
    if rng.gen_bool(0.2) {
        let mut b = Buf::new();
        b.u32(spec.track_id).u64(0xE000_0000_0000_0000 + base_decode_time).u32(base_decode_time as u32);
        chunk.extend(full_box(b"prft", 0, 0, &b.take()));
    }
    if rng.gen_bool(0.1) {
        let mut b = Buf::new();
        b.bytes(b"urn:example:synth\0").bytes(b"1\0").u32(spec.timescale).u32(0).u32(0).u32(sequence_number);
        chunk.extend(full_box(b"emsg", 0, 0, &b.take()));
    }
    chunk.extend_from_slice(&moof);
    chunk.extend_from_slice(&mdat);

    let expected = ExpectedChunk {
        fragment_start,
        first_sample_sync: first_sync,
        sequence_number,
        base_decode_time,
        sample_count: samples as u32,
        duration: durations.iter().map(|d| u64::from(*d)).sum(),
        size: chunk.len(),
    };
    (chunk, expected)
}
