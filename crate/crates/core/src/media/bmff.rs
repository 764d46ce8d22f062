//! ISO-BMFF box reading and CMAF header/chunk parsing.
//!
//! Only metadata boxes are decoded. Media payloads are carried through
//! verbatim.

use std::fmt;
use std::io::{self, Read};

#[derive(Debug, thiserror::Error)]
pub enum MediaError {
    #[error("truncated box header")]
    TruncatedHeader,
    #[error("box {kind} declares size {size} smaller than its header")]
    InvalidSize { kind: FourCC, size: u64 },
    #[error("unexpected box {found}, expected {expected}")]
    UnexpectedBox {
        expected: &'static str,
        found: FourCC,
    },
    #[error("missing {0} box")]
    MissingBox(&'static str),
    #[error("header carries {0} tracks, exactly one is supported")]
    TrackCount(usize),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("{what} exceeds the limit of {limit} bytes")]
    TooLarge { what: &'static str, limit: u64 },
    #[error("malformed {kind} box: {reason}")]
    Malformed {
        kind: &'static str,
        reason: &'static str,
    },
    #[error("cannot determine whether the first sample is a sync sample")]
    UnknownSyncFlags,
    #[error("no sample durations or defaults available")]
    UnknownDuration,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = MediaError> = std::result::Result<T, E>;

/// Four character box type code.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct FourCC(pub [u8; 4]);

impl FourCC {
    pub const fn new(b: &[u8; 4]) -> Self {
        Self(*b)
    }
}

impl fmt::Display for FourCC {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            let c = if b.is_ascii_graphic() || b == b' ' {
                b as char
            } else {
                '.'
            };
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for FourCC {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "\"{self}\"")
    }
}

impl PartialEq<&[u8; 4]> for FourCC {
    fn eq(&self, other: &&[u8; 4]) -> bool {
        self.0 == **other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxHeader {
    /// Total box size including the header; 0 means "to end of input".
    pub size: u64,
    pub kind: FourCC,
    pub header_len: u8,
}

impl BoxHeader {
    /// Payload length, or `None` for a box extending to the end of input.
    pub fn body_len(&self) -> Option<u64> {
        (self.size != 0).then(|| self.size - u64::from(self.header_len))
    }
}

fn read_full<R: Read + ?Sized>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted && e.get_ref().is_none() => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads the next box header. Returns `None` on a clean end of input.
pub fn read_box_header<R: Read + ?Sized>(r: &mut R) -> Result<Option<BoxHeader>> {
    let mut buf = [0u8; 16];
    match read_full(r, &mut buf[..8])? {
        0 => return Ok(None),
        8 => {}
        _ => return Err(MediaError::TruncatedHeader),
    }
    let kind = FourCC([buf[4], buf[5], buf[6], buf[7]]);
    let size32 = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]);
    let (size, header_len) = if size32 == 1 {
        if read_full(r, &mut buf[8..16])? != 8 {
            return Err(MediaError::TruncatedHeader);
        }
        (u64::from_be_bytes(buf[8..16].try_into().unwrap()), 16u8)
    } else {
        (u64::from(size32), 8u8)
    };
    if size != 0 && size < u64::from(header_len) {
        return Err(MediaError::InvalidSize { kind, size });
    }
    Ok(Some(BoxHeader {
        size,
        kind,
        header_len,
    }))
}

/// Decodes a box header from the start of `buf`.
pub fn parse_box_header(buf: &[u8]) -> Result<BoxHeader> {
    let mut r = buf;
    read_box_header(&mut r)?.ok_or(MediaError::TruncatedHeader)
}

/// Iterates over the boxes inside an in-memory buffer.
pub struct Boxes<'a> {
    buf: &'a [u8],
    pos: usize,
}

pub fn boxes(buf: &[u8]) -> Boxes<'_> {
    Boxes { buf, pos: 0 }
}

impl<'a> Iterator for Boxes<'a> {
    /// Header, body and offset of the box within the buffer.
    type Item = Result<(BoxHeader, &'a [u8], usize)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.buf.len() {
            return None;
        }
        let rest = &self.buf[self.pos..];
        let hdr = match parse_box_header(rest) {
            Ok(h) => h,
            Err(e) => {
                self.pos = self.buf.len();
                return Some(Err(e));
            }
        };
        let total = if hdr.size == 0 {
            rest.len() as u64
        } else {
            hdr.size
        };
        if total > rest.len() as u64 {
            self.pos = self.buf.len();
            return Some(Err(MediaError::Truncated("box")));
        }
        let total = total as usize;
        let body = &rest[hdr.header_len as usize..total];
        let offset = self.pos;
        self.pos += total;
        Some(Ok((hdr, body, offset)))
    }
}

fn find<'a>(buf: &'a [u8], kind: &[u8; 4]) -> Result<Option<&'a [u8]>> {
    for b in boxes(buf) {
        let (h, body, _) = b?;
        if h.kind == kind {
            return Ok(Some(body));
        }
    }
    Ok(None)
}

fn require<'a>(buf: &'a [u8], kind: &'static [u8; 4], name: &'static str) -> Result<&'a [u8]> {
    find(buf, kind)?.ok_or(MediaError::MissingBox(name))
}

/// Big-endian field cursor over a box body.
struct Fields<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Fields<'a> {
    fn new(buf: &'a [u8], kind: &'static str) -> Self {
        Self { buf, pos: 0, kind }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or(MediaError::Malformed {
                kind: self.kind,
                reason: "body too short",
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn skip(&mut self, n: usize) -> Result<()> {
        self.take(n).map(|_| ())
    }

    /// Version and 24-bit flags of a full box.
    fn full(&mut self) -> Result<(u8, u32)> {
        let v = self.u32()?;
        Ok(((v >> 24) as u8, v & 0x00FF_FFFF))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HandlerType {
    Video,
    Audio,
    Other,
}

impl HandlerType {
    pub fn as_str(self) -> &'static str {
        match self {
            HandlerType::Video => "video",
            HandlerType::Audio => "audio",
            HandlerType::Other => "other",
        }
    }
}

/// Per-track sample defaults from `moov/mvex/trex`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrackDefaults {
    pub sample_duration: Option<u32>,
    pub sample_size: Option<u32>,
    pub sample_flags: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmafHeader {
    /// `ftyp` followed by `moov`, verbatim.
    pub raw: Vec<u8>,
    pub track_id: u32,
    pub timescale: u32,
    pub handler: HandlerType,
    pub brands: Vec<FourCC>,
    pub defaults: TrackDefaults,
}

impl CmafHeader {
    pub fn has_cmaf_brand(&self) -> bool {
        self.brands.iter().any(|b| *b == b"cmfc" || *b == b"cmf2")
    }
}

/// Reads one complete box into `out`, returning its header.
fn read_box_into<R: Read + ?Sized>(
    r: &mut R,
    hdr: &BoxHeader,
    out: &mut Vec<u8>,
    limit: u64,
    what: &'static str,
) -> Result<()> {
    let start = out.len() as u64;
    write_header_bytes(hdr, out);
    match hdr.body_len() {
        Some(len) => {
            if start + hdr.size > limit {
                return Err(MediaError::TooLarge { what, limit });
            }
            let before = out.len();
            r.take(len).read_to_end(out)?;
            if ((out.len() - before) as u64) < len {
                return Err(MediaError::Truncated(what));
            }
        }
        None => {
            let remaining = limit.saturating_sub(out.len() as u64);
            r.take(remaining + 1).read_to_end(out)?;
            if out.len() as u64 > limit {
                return Err(MediaError::TooLarge { what, limit });
            }
        }
    }
    Ok(())
}

fn write_header_bytes(hdr: &BoxHeader, out: &mut Vec<u8>) {
    if hdr.header_len == 16 {
        out.extend_from_slice(&1u32.to_be_bytes());
        out.extend_from_slice(&hdr.kind.0);
        out.extend_from_slice(&hdr.size.to_be_bytes());
    } else {
        out.extend_from_slice(&(hdr.size as u32).to_be_bytes());
        out.extend_from_slice(&hdr.kind.0);
    }
}

/// Reads `ftyp` and `moov` from a stream and parses them.
pub fn read_cmaf_header<R: Read + ?Sized>(r: &mut R, limit: u64) -> Result<CmafHeader> {
    let mut raw = Vec::new();
    for (kind, name) in [(b"ftyp", "ftyp"), (b"moov", "moov")] {
        let hdr = read_box_header(r)?.ok_or(MediaError::MissingBox(name))?;
        if hdr.kind != kind {
            return Err(MediaError::UnexpectedBox {
                expected: name,
                found: hdr.kind,
            });
        }
        if hdr.size == 0 {
            return Err(MediaError::Malformed {
                kind: name,
                reason: "open-ended box in header",
            });
        }
        read_box_into(r, &hdr, &mut raw, limit, "header")?;
    }
    parse_cmaf_header(&raw)
}

/// Parses a CMAF header held in memory.
pub fn parse_cmaf_header(bytes: &[u8]) -> Result<CmafHeader> {
    let mut iter = boxes(bytes);
    let (first, ftyp, _) = iter.next().ok_or(MediaError::MissingBox("ftyp"))??;
    if first.kind != b"ftyp" {
        return Err(MediaError::UnexpectedBox {
            expected: "ftyp",
            found: first.kind,
        });
    }
    let mut moov = None;
    for b in iter {
        let (h, body, _) = b?;
        if h.kind == b"moov" {
            if moov.is_some() {
                return Err(MediaError::Malformed {
                    kind: "moov",
                    reason: "more than one moov box",
                });
            }
            moov = Some(body);
        }
    }
    let moov = moov.ok_or(MediaError::MissingBox("moov"))?;

    let mut f = Fields::new(ftyp, "ftyp");
    let mut brands = vec![FourCC(f.take(4)?.try_into().unwrap())];
    f.skip(4)?;
    while f.pos + 4 <= ftyp.len() {
        let b = FourCC(f.take(4)?.try_into().unwrap());
        if !brands.contains(&b) {
            brands.push(b);
        }
    }

    let mut traks = Vec::new();
    let mut mvex = None;
    for b in boxes(moov) {
        let (h, body, _) = b?;
        if h.kind == b"trak" {
            traks.push(body);
        } else if h.kind == b"mvex" {
            mvex = Some(body);
        }
    }
    if traks.len() != 1 {
        return Err(MediaError::TrackCount(traks.len()));
    }
    let trak = traks[0];

    let tkhd = require(trak, b"tkhd", "tkhd")?;
    let mut f = Fields::new(tkhd, "tkhd");
    let (version, _) = f.full()?;
    f.skip(if version == 1 { 16 } else { 8 })?;
    let track_id = f.u32()?;

    let mdia = require(trak, b"mdia", "mdia")?;
    let mdhd = require(mdia, b"mdhd", "mdhd")?;
    let mut f = Fields::new(mdhd, "mdhd");
    let (version, _) = f.full()?;
    f.skip(if version == 1 { 16 } else { 8 })?;
    let timescale = f.u32()?;
    if timescale == 0 {
        return Err(MediaError::Malformed {
            kind: "mdhd",
            reason: "zero timescale",
        });
    }

    let hdlr = require(mdia, b"hdlr", "hdlr")?;
    let mut f = Fields::new(hdlr, "hdlr");
    f.full()?;
    f.skip(4)?;
    let handler = match f.take(4)? {
        b"vide" => HandlerType::Video,
        b"soun" => HandlerType::Audio,
        _ => HandlerType::Other,
    };

    let mut defaults = TrackDefaults::default();
    if let Some(mvex) = mvex {
        for b in boxes(mvex) {
            let (h, body, _) = b?;
            if h.kind != b"trex" {
                continue;
            }
            let mut f = Fields::new(body, "trex");
            f.full()?;
            if f.u32()? != track_id {
                continue;
            }
            f.skip(4)?;
            defaults = TrackDefaults {
                sample_duration: Some(f.u32()?),
                sample_size: Some(f.u32()?),
                sample_flags: Some(f.u32()?),
            };
        }
    }

    Ok(CmafHeader {
        raw: bytes.to_vec(),
        track_id,
        timescale,
        handler,
        brands,
        defaults,
    })
}

/// `sample_is_non_sync_sample` bit of the sample flags.
pub const NON_SYNC_FLAG: u32 = 0x0001_0000;

/// One `moof`/`mdat` pair with any leading `styp`/`prft`/`emsg` boxes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub raw: Vec<u8>,
    pub moof_offset: usize,
    pub moof_len: usize,
    pub mdat_offset: usize,
    pub mdat_len: usize,
    pub sequence_number: u32,
    pub base_decode_time: u64,
    /// `None` when no flags are present anywhere in the cascade.
    pub first_sample_sync: Option<bool>,
    pub sample_count: u32,
    /// `None` when no durations are present anywhere in the cascade.
    pub duration: Option<u64>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Whether the chunk starts a new CMAF fragment. Every audio sample is a
/// switching point.
pub fn is_fragment_boundary(chunk: &Chunk, handler: HandlerType) -> Result<bool> {
    match handler {
        HandlerType::Audio => Ok(true),
        _ => chunk.first_sample_sync.ok_or(MediaError::UnknownSyncFlags),
    }
}

pub fn chunk_duration_ticks(chunk: &Chunk) -> Result<u64> {
    chunk.duration.ok_or(MediaError::UnknownDuration)
}

/// Metadata decoded from a `moof` box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoofInfo {
    pub sequence_number: u32,
    pub base_decode_time: u64,
    pub first_sample_sync: Option<bool>,
    pub sample_count: u32,
    pub duration: Option<u64>,
}

pub fn parse_moof(moof: &[u8], defaults: &TrackDefaults) -> Result<MoofInfo> {
    let mfhd = require(moof, b"mfhd", "mfhd")?;
    let mut f = Fields::new(mfhd, "mfhd");
    f.full()?;
    let sequence_number = f.u32()?;

    let mut trafs = Vec::new();
    for b in boxes(moof) {
        let (h, body, _) = b?;
        if h.kind == b"traf" {
            trafs.push(body);
        }
    }
    let traf = match trafs.as_slice() {
        [t] => *t,
        [] => return Err(MediaError::MissingBox("traf")),
        _ => {
            return Err(MediaError::Malformed {
                kind: "moof",
                reason: "more than one traf box",
            })
        }
    };

    let tfhd = require(traf, b"tfhd", "tfhd")?;
    let mut f = Fields::new(tfhd, "tfhd");
    let (_, flags) = f.full()?;
    f.skip(4)?;
    if flags & 0x01 != 0 {
        f.skip(8)?;
    }
    if flags & 0x02 != 0 {
        f.skip(4)?;
    }
    let tfhd_duration = if flags & 0x08 != 0 {
        Some(f.u32()?)
    } else {
        None
    };
    if flags & 0x10 != 0 {
        f.skip(4)?;
    }
    let tfhd_flags = if flags & 0x20 != 0 {
        Some(f.u32()?)
    } else {
        None
    };

    let base_decode_time = match find(traf, b"tfdt")? {
        Some(tfdt) => {
            let mut f = Fields::new(tfdt, "tfdt");
            let (version, _) = f.full()?;
            if version == 1 {
                f.u64()?
            } else {
                u64::from(f.u32()?)
            }
        }
        None => 0,
    };

    let default_duration = tfhd_duration.or(defaults.sample_duration);
    let default_flags = tfhd_flags.or(defaults.sample_flags);
    let mut sample_count: u32 = 0;
    let mut duration: Option<u64> = Some(0);
    let mut first_flags: Option<u32> = None;
    let mut seen_sample = false;
    for b in boxes(traf) {
        let (h, body, _) = b?;
        if h.kind != b"trun" {
            continue;
        }
        let mut f = Fields::new(body, "trun");
        let (_, flags) = f.full()?;
        let count = f.u32()?;
        if flags & 0x01 != 0 {
            f.skip(4)?;
        }
        let trun_first = if flags & 0x04 != 0 {
            Some(f.u32()?)
        } else {
            None
        };
        for i in 0..count {
            let d = if flags & 0x100 != 0 {
                Some(f.u32()?)
            } else {
                default_duration
            };
            if flags & 0x200 != 0 {
                f.skip(4)?;
            }
            let sf = if flags & 0x400 != 0 {
                Some(f.u32()?)
            } else {
                None
            };
            if flags & 0x800 != 0 {
                f.skip(4)?;
            }
            if !seen_sample {
                first_flags = if i == 0 { trun_first.or(sf) } else { sf }.or(default_flags);
                seen_sample = true;
            }
            duration = match (duration, d) {
                (Some(acc), Some(d)) => Some(acc + u64::from(d)),
                _ => None,
            };
        }
        sample_count = sample_count
            .checked_add(count)
            .ok_or(MediaError::Malformed {
                kind: "trun",
                reason: "sample count overflow",
            })?;
    }
    if sample_count == 0 {
        return Err(MediaError::Malformed {
            kind: "traf",
            reason: "no samples",
        });
    }
    Ok(MoofInfo {
        sequence_number,
        base_decode_time,
        first_sample_sync: first_flags.map(|f| f & NON_SYNC_FLAG == 0),
        sample_count,
        duration,
    })
}

/// Reads the next chunk from a stream. Returns `None` on a clean end of
/// input at a chunk boundary.
pub fn scan_chunk<R: Read + ?Sized>(
    r: &mut R,
    defaults: &TrackDefaults,
    limit: u64,
) -> Result<Option<Chunk>> {
    let mut raw = Vec::new();
    let mut moof: Option<(usize, usize)> = None;
    loop {
        let Some(hdr) = read_box_header(r)? else {
            if raw.is_empty() {
                return Ok(None);
            }
            return Err(MediaError::Truncated(if moof.is_some() {
                "chunk without mdat"
            } else {
                "chunk"
            }));
        };
        let offset = raw.len();
        match (&hdr.kind.0, moof) {
            (b"styp" | b"prft" | b"emsg", None) => {
                if hdr.size == 0 {
                    return Err(MediaError::Malformed {
                        kind: "chunk",
                        reason: "open-ended metadata box",
                    });
                }
                read_box_into(r, &hdr, &mut raw, limit, "chunk")?;
            }
            (b"moof", None) => {
                if hdr.size == 0 {
                    return Err(MediaError::Malformed {
                        kind: "moof",
                        reason: "open-ended moof",
                    });
                }
                read_box_into(r, &hdr, &mut raw, limit, "chunk")?;
                moof = Some((offset, raw.len() - offset));
            }
            (b"mdat", Some((moof_offset, moof_len))) => {
                read_box_into(r, &hdr, &mut raw, limit, "chunk")?;
                let info = parse_moof(
                    &raw[moof_offset + body_start(&raw[moof_offset..])..moof_offset + moof_len],
                    defaults,
                )?;
                let mdat_len = raw.len() - offset;
                return Ok(Some(Chunk {
                    raw,
                    moof_offset,
                    moof_len,
                    mdat_offset: offset,
                    mdat_len,
                    sequence_number: info.sequence_number,
                    base_decode_time: info.base_decode_time,
                    first_sample_sync: info.first_sample_sync,
                    sample_count: info.sample_count,
                    duration: info.duration,
                }));
            }
            (_, None) => {
                return Err(MediaError::UnexpectedBox {
                    expected: "styp, prft, emsg or moof",
                    found: hdr.kind,
                })
            }
            (_, Some(_)) => {
                return Err(MediaError::UnexpectedBox {
                    expected: "mdat",
                    found: hdr.kind,
                })
            }
        }
    }
}

fn body_start(buf: &[u8]) -> usize {
    parse_box_header(buf)
        .map(|h| h.header_len as usize)
        .unwrap_or(8)
}

/// Parses a single in-memory chunk.
pub fn parse_chunk(bytes: &[u8], defaults: &TrackDefaults) -> Result<Chunk> {
    let mut r = bytes;
    let chunk = scan_chunk(&mut r, defaults, u64::MAX)?.ok_or(MediaError::MissingBox("moof"))?;
    if !r.is_empty() {
        return Err(MediaError::Malformed {
            kind: "chunk",
            reason: "trailing data",
        });
    }
    Ok(chunk)
}
