//! HTTP/1.1 message framing: request heads, request bodies (length
//! delimited and chunked) and response serialization.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::time::SystemTime;

use super::{header, HeaderMap, HeaderValue, Method, Response, ResponseBody, StatusCode};

pub(crate) const MAX_HEAD_BYTES: usize = 64 * 1024;
const MAX_HEADERS: usize = 100;
const MAX_LINE: usize = 4096;

/// Buffered reader over a connection that keeps unread bytes between
/// requests.
pub(crate) struct Conn {
    pub stream: TcpStream,
    buf: Vec<u8>,
    pos: usize,
    /// Whether a `100 Continue` interim response is owed before the body is
    /// read.
    pub continue_pending: bool,
}

impl Conn {
    pub fn new(stream: TcpStream) -> Self {
        Self {
            stream,
            buf: Vec::with_capacity(8192),
            pos: 0,
            continue_pending: false,
        }
    }

    pub fn buffered(&self) -> &[u8] {
        &self.buf[self.pos..]
    }

    pub fn has_buffered(&self) -> bool {
        self.pos < self.buf.len()
    }

    /// Reads more bytes from the socket into the buffer. Returns 0 on EOF.
    pub fn fill(&mut self) -> io::Result<usize> {
        if self.pos > 0 && self.pos == self.buf.len() {
            self.buf.clear();
            self.pos = 0;
        }
        let mut tmp = [0u8; 8192];
        let n = self.stream.read(&mut tmp)?;
        self.buf.extend_from_slice(&tmp[..n]);
        Ok(n)
    }

    pub fn consume(&mut self, n: usize) {
        self.pos = (self.pos + n).min(self.buf.len());
        if self.pos == self.buf.len() {
            self.buf.clear();
            self.pos = 0;
        }
    }

    fn send_continue(&mut self) -> io::Result<()> {
        if self.continue_pending {
            self.continue_pending = false;
            self.stream.write_all(b"HTTP/1.1 100 Continue\r\n\r\n")?;
        }
        Ok(())
    }

    fn read_line(&mut self) -> io::Result<Vec<u8>> {
        loop {
            if let Some(i) = self.buffered().iter().position(|b| *b == b'\n') {
                let mut line = self.buffered()[..i].to_vec();
                self.consume(i + 1);
                if line.last() == Some(&b'\r') {
                    line.pop();
                }
                return Ok(line);
            }
            if self.buffered().len() > MAX_LINE {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "line too long"));
            }
            if self.fill()? == 0 {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "connection closed mid-body",
                ));
            }
        }
    }
}

impl Read for Conn {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        self.send_continue()?;
        if self.has_buffered() {
            let n = self.buffered().len().min(out.len());
            out[..n].copy_from_slice(&self.buffered()[..n]);
            self.consume(n);
            return Ok(n);
        }
        self.stream.read(out)
    }
}

#[derive(Debug)]
pub(crate) struct Head {
    pub method: Method,
    pub target: String,
    pub minor_version: u8,
    pub headers: HeaderMap,
}

#[derive(Debug)]
pub(crate) enum HeadError {
    /// Connection closed before any byte of a new request.
    Closed,
    Io(io::Error),
    Malformed(&'static str),
    TooLarge,
}

impl From<io::Error> for HeadError {
    fn from(e: io::Error) -> Self {
        HeadError::Io(e)
    }
}

/// Parses a request head from bytes already buffered in `conn`. Returns
/// `None` when more input is needed.
pub(crate) fn try_parse_head(conn: &mut Conn) -> Result<Option<Head>, HeadError> {
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut req = httparse::Request::new(&mut headers);
    let status = match req.parse(conn.buffered()) {
        Ok(s) => s,
        Err(httparse::Error::TooManyHeaders) => return Err(HeadError::TooLarge),
        Err(_) => return Err(HeadError::Malformed("malformed request head")),
    };
    let len = match status {
        httparse::Status::Complete(n) => n,
        httparse::Status::Partial => {
            if conn.buffered().len() > MAX_HEAD_BYTES {
                return Err(HeadError::TooLarge);
            }
            return Ok(None);
        }
    };
    let method = Method::from_bytes(req.method.unwrap_or("").as_bytes())
        .map_err(|_| HeadError::Malformed("bad method"))?;
    let target = req.path.unwrap_or("/").to_string();
    let minor_version = req.version.unwrap_or(1);
    let mut map = HeaderMap::new();
    for h in req.headers.iter() {
        let name = header::HeaderName::from_bytes(h.name.as_bytes())
            .map_err(|_| HeadError::Malformed("bad header name"))?;
        let value = HeaderValue::from_bytes(h.value)
            .map_err(|_| HeadError::Malformed("bad header value"))?;
        map.append(name, value);
    }
    conn.consume(len);
    Ok(Some(Head {
        method,
        target,
        minor_version,
        headers: map,
    }))
}

/// Request body framing derived from the head.
pub(crate) fn body_framing(head: &Head) -> Result<super::BodyKind, &'static str> {
    let te: Vec<&str> = head
        .headers
        .get_all(header::TRANSFER_ENCODING)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if !te.is_empty() {
        if te.last().is_some_and(|t| t.eq_ignore_ascii_case("chunked")) {
            return Ok(super::BodyKind::Chunked);
        }
        return Err("unsupported transfer encoding");
    }
    let mut lengths = head.headers.get_all(header::CONTENT_LENGTH).iter();
    match lengths.next() {
        None => Ok(super::BodyKind::Empty),
        Some(v) => {
            let n: u64 = v
                .to_str()
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .ok_or("invalid content-length")?;
            if lengths.any(|o| o != v) {
                return Err("conflicting content-length");
            }
            Ok(if n == 0 {
                super::BodyKind::Empty
            } else {
                super::BodyKind::Length(n)
            })
        }
    }
}

/// Body reader over a borrowed connection.
pub(crate) struct BodyReader<'c> {
    conn: &'c mut Conn,
    state: BodyState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BodyState {
    Length(u64),
    /// Bytes left in the current chunk, or `None` at a size line.
    Chunked(Option<u64>),
    Done,
    Broken,
}

impl<'c> BodyReader<'c> {
    pub fn new(conn: &'c mut Conn, kind: super::BodyKind) -> Self {
        let state = match kind {
            super::BodyKind::Empty => BodyState::Done,
            super::BodyKind::Length(n) => BodyState::Length(n),
            super::BodyKind::Chunked => BodyState::Chunked(None),
        };
        Self { conn, state }
    }

    pub fn is_done(&self) -> bool {
        self.state == BodyState::Done
    }

    fn read_chunk_size(&mut self) -> io::Result<u64> {
        let line = self.conn.read_line()?;
        let line = std::str::from_utf8(&line).map_err(|_| bad("invalid chunk size line"))?;
        let size = line.split(';').next().unwrap_or("").trim();
        u64::from_str_radix(size, 16).map_err(|_| bad("invalid chunk size"))
    }

    fn read_trailers(&mut self) -> io::Result<()> {
        loop {
            if self.conn.read_line()?.is_empty() {
                return Ok(());
            }
        }
    }
}

fn bad(msg: &'static str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

impl Read for BodyReader<'_> {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        let result = self.read_inner(out);
        if result.is_err() {
            self.state = BodyState::Broken;
        }
        result
    }
}

impl BodyReader<'_> {
    fn read_inner(&mut self, out: &mut [u8]) -> io::Result<usize> {
        loop {
            match self.state {
                BodyState::Done => return Ok(0),
                BodyState::Broken => {
                    return Err(bad("request body is unusable after an earlier error"))
                }
                BodyState::Length(0) => {
                    self.state = BodyState::Done;
                    return Ok(0);
                }
                BodyState::Length(left) => {
                    let want = left.min(out.len() as u64) as usize;
                    let n = self.conn.read(&mut out[..want])?;
                    if n == 0 {
                        return Err(io::Error::new(
                            io::ErrorKind::UnexpectedEof,
                            "request body truncated",
                        ));
                    }
                    self.state = BodyState::Length(left - n as u64);
                    return Ok(n);
                }
                BodyState::Chunked(None) => {
                    self.conn.send_continue()?;
                    let size = self.read_chunk_size()?;
                    if size == 0 {
                        self.read_trailers()?;
                        self.state = BodyState::Done;
                        return Ok(0);
                    }
                    self.state = BodyState::Chunked(Some(size));
                }
                BodyState::Chunked(Some(0)) => {
                    if !self.conn.read_line()?.is_empty() {
                        return Err(bad("missing CRLF after chunk data"));
                    }
                    self.state = BodyState::Chunked(None);
                }
                BodyState::Chunked(Some(left)) => {
                    let want = left.min(out.len() as u64) as usize;
                    let n = self.conn.read(&mut out[..want])?;
                    if n == 0 {
                        return Err(io::Error::new(
                            io::ErrorKind::UnexpectedEof,
                            "chunked body truncated",
                        ));
                    }
                    self.state = BodyState::Chunked(Some(left - n as u64));
                    return Ok(n);
                }
            }
        }
    }
}

/// Serializes a response. `head_only` suppresses the body for HEAD.
/// Returns whether the body was fully written (streams can fail midway).
pub(crate) fn write_response(
    stream: &mut TcpStream,
    resp: &mut Response,
    head_only: bool,
    close: bool,
    request_id: &str,
) -> io::Result<()> {
    let mut head = Vec::with_capacity(512);
    let reason = resp.status.canonical_reason().unwrap_or("");
    write!(head, "HTTP/1.1 {} {}\r\n", resp.status.as_u16(), reason)?;
    let no_body_status = resp.status.is_informational()
        || resp.status == StatusCode::NO_CONTENT
        || resp.status == StatusCode::NOT_MODIFIED;

    let length = match &resp.body {
        ResponseBody::Empty => Some(0),
        ResponseBody::Bytes(b) => Some(b.len() as u64),
        ResponseBody::Stream { length, .. } => *length,
    };
    let explicit_length = resp.headers.contains_key(header::CONTENT_LENGTH);
    if !no_body_status && !explicit_length {
        match length {
            Some(n) => write!(head, "content-length: {n}\r\n")?,
            None => head.extend_from_slice(b"transfer-encoding: chunked\r\n"),
        }
    }
    if !resp.headers.contains_key(header::DATE) {
        write!(
            head,
            "date: {}\r\n",
            httpdate::fmt_http_date(SystemTime::now())
        )?;
    }
    if !request_id.is_empty() {
        write!(head, "x-request-id: {request_id}\r\n")?;
    }
    if close {
        head.extend_from_slice(b"connection: close\r\n");
    }
    for (name, value) in resp.headers.iter() {
        head.extend_from_slice(name.as_str().as_bytes());
        head.extend_from_slice(b": ");
        head.extend_from_slice(value.as_bytes());
        head.extend_from_slice(b"\r\n");
    }
    head.extend_from_slice(b"\r\n");

    if head_only || no_body_status {
        return stream.write_all(&head);
    }
    match std::mem::replace(&mut resp.body, ResponseBody::Empty) {
        ResponseBody::Empty => stream.write_all(&head),
        ResponseBody::Bytes(b) => {
            head.extend_from_slice(&b);
            stream.write_all(&head)
        }
        ResponseBody::Stream { mut reader, length } => {
            stream.write_all(&head)?;
            let mut buf = vec![0u8; 64 * 1024];
            match length {
                Some(n) => {
                    let copied = io::copy(&mut reader.by_ref().take(n), stream)?;
                    if copied < n {
                        return Err(io::Error::new(
                            io::ErrorKind::UnexpectedEof,
                            "response body ended early",
                        ));
                    }
                    Ok(())
                }
                None => {
                    loop {
                        let n = match reader.read(&mut buf) {
                            Ok(0) => break,
                            Ok(n) => n,
                            Err(e)
                                if e.kind() == io::ErrorKind::Interrupted
                                    && e.get_ref().is_none() =>
                            {
                                continue
                            }
                            Err(e) => return Err(e),
                        };
                        let mut frame = Vec::with_capacity(n + 16);
                        write!(frame, "{n:x}\r\n")?;
                        frame.extend_from_slice(&buf[..n]);
                        frame.extend_from_slice(b"\r\n");
                        stream.write_all(&frame)?;
                    }
                    stream.write_all(b"0\r\n\r\n")
                }
            }
        }
    }
}
