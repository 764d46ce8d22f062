//! Minimal blocking HTTP/1.1 client used to drive ingests.
//!
//! One connection per request (`Connection: close`). Request bodies can be
//! sent with a `Content-Length` or with chunked transfer encoding, one HTTP
//! chunk per caller-supplied piece, optionally paced to a byte rate.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use url::Url;

const MAX_HEAD: usize = 64 * 1024;

/// Request body.
pub enum Body<'a> {
    Empty,
    Bytes(&'a [u8]),
    /// Sent with `Transfer-Encoding: chunked`, one HTTP chunk per piece.
    Chunked {
        pieces: &'a [&'a [u8]],
        /// Bytes per second; `None` sends as fast as possible.
        rate: Option<u64>,
    },
}

#[derive(Debug, Clone)]
pub struct Response {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
    /// Whether the body arrived with chunked transfer encoding.
    pub chunked: bool,
}

impl Response {
    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }
}

fn find_header<'h>(headers: &'h [(String, String)], name: &str) -> Option<&'h str> {
    headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

/// Response whose body is consumed incrementally.
pub struct StreamingResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub chunked: bool,
    body: BodyReader,
}

impl StreamingResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    /// Reads the next piece of the body as it arrives. For chunked bodies
    /// this is exactly one HTTP chunk. Returns `None` at the end.
    pub fn next_piece(&mut self) -> io::Result<Option<Vec<u8>>> {
        self.body.next_piece()
    }

    pub fn read_to_end(mut self) -> io::Result<Vec<u8>> {
        let mut out = Vec::new();
        while let Some(p) = self.next_piece()? {
            out.extend_from_slice(&p);
        }
        Ok(out)
    }
}

enum BodyKind {
    Length(u64),
    Chunked { done: bool },
    UntilClose,
    None,
}

struct BodyReader {
    reader: BufReader<TcpStream>,
    kind: BodyKind,
}

impl BodyReader {
    fn next_piece(&mut self) -> io::Result<Option<Vec<u8>>> {
        match &mut self.kind {
            BodyKind::None => Ok(None),
            BodyKind::Length(remaining) => {
                if *remaining == 0 {
                    return Ok(None);
                }
                let want = (*remaining).min(64 * 1024) as usize;
                let mut buf = vec![0u8; want];
                let n = self.reader.read(&mut buf)?;
                if n == 0 {
                    return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "body truncated"));
                }
                *remaining -= n as u64;
                buf.truncate(n);
                Ok(Some(buf))
            }
            BodyKind::UntilClose => {
                let mut buf = vec![0u8; 64 * 1024];
                let n = self.reader.read(&mut buf)?;
                if n == 0 {
                    return Ok(None);
                }
                buf.truncate(n);
                Ok(Some(buf))
            }
            BodyKind::Chunked { done } => {
                if *done {
                    return Ok(None);
                }
                let line = read_line(&mut self.reader)?;
                let size_str = line.split(';').next().unwrap_or("").trim();
                let size = usize::from_str_radix(size_str, 16).map_err(|_| {
                    io::Error::new(io::ErrorKind::InvalidData, format!("bad chunk size {line:?}"))
                })?;
                if size == 0 {
                    // trailers
                    loop {
                        if read_line(&mut self.reader)?.is_empty() {
                            break;
                        }
                    }
                    *done = true;
                    return Ok(None);
                }
                let mut buf = vec![0u8; size];
                self.reader.read_exact(&mut buf)?;
                let crlf = read_line(&mut self.reader)?;
                if !crlf.is_empty() {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, "missing chunk CRLF"));
                }
                Ok(Some(buf))
            }
        }
    }
}

fn read_line(r: &mut impl BufRead) -> io::Result<String> {
    let mut line = Vec::new();
    let n = r.read_until(b'\n', &mut line)?;
    if n == 0 {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"));
    }
    while matches!(line.last(), Some(b'\n' | b'\r')) {
        line.pop();
    }
    String::from_utf8(line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn connect(url: &Url) -> io::Result<TcpStream> {
    let host = url
        .host_str()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "url has no host"))?;
    let port = url.port_or_known_default().unwrap_or(80);
    let stream = TcpStream::connect((host, port))?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

fn request_target(url: &Url) -> String {
    match url.query() {
        Some(q) => format!("{}?{}", url.path(), q),
        None => url.path().to_string(),
    }
}

fn host_header(url: &Url) -> String {
    let host = url.host_str().unwrap_or_default();
    match url.port() {
        Some(p) => format!("{host}:{p}"),
        None => host.to_string(),
    }
}

/// Sends a request and returns the response with its body still unread.
pub fn send_streaming(
    method: &str,
    url: &Url,
    headers: &[(&str, &str)],
    body: Body<'_>,
) -> io::Result<StreamingResponse> {
    let mut stream = connect(url)?;
    let mut head = format!("{method} {} HTTP/1.1\r\n", request_target(url));
    let has_host = headers.iter().any(|(k, _)| k.eq_ignore_ascii_case("host"));
    if !has_host {
        head.push_str(&format!("Host: {}\r\n", host_header(url)));
    }
    for (k, v) in headers {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    head.push_str("Connection: close\r\n");
    match &body {
        Body::Empty => {
            if matches!(method, "POST" | "PUT") {
                head.push_str("Content-Length: 0\r\n");
            }
        }
        Body::Bytes(b) => head.push_str(&format!("Content-Length: {}\r\n", b.len())),
        Body::Chunked { .. } => head.push_str("Transfer-Encoding: chunked\r\n"),
    }
    head.push_str("\r\n");
    stream.write_all(head.as_bytes())?;

    match body {
        Body::Empty => {}
        Body::Bytes(b) => stream.write_all(b)?,
        Body::Chunked { pieces, rate } => {
            let start = Instant::now();
            let mut sent: u64 = 0;
            for piece in pieces {
                if piece.is_empty() {
                    continue;
                }
                if let Some(rate) = rate.filter(|r| *r > 0) {
                    let due = Duration::from_secs_f64(sent as f64 / rate as f64);
                    let elapsed = start.elapsed();
                    if due > elapsed {
                        std::thread::sleep(due - elapsed);
                    }
                }
                let frame_head = format!("{:x}\r\n", piece.len());
                // A server that rejected the stream may close early; keep the
                // response readable in that case.
                if write_frame(&mut stream, frame_head.as_bytes(), piece).is_err() {
                    break;
                }
                sent += piece.len() as u64;
            }
            let _ = stream.write_all(b"0\r\n\r\n");
        }
    }
    stream.flush()?;
    read_response(stream, method == "HEAD")
}

fn write_frame(stream: &mut TcpStream, head: &[u8], piece: &[u8]) -> io::Result<()> {
    stream.write_all(head)?;
    stream.write_all(piece)?;
    stream.write_all(b"\r\n")?;
    stream.flush()
}

fn read_response(stream: TcpStream, head_only: bool) -> io::Result<StreamingResponse> {
    let mut reader = BufReader::new(stream);
    let mut raw = Vec::new();
    loop {
        let n = reader.read_until(b'\n', &mut raw)?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "no response"));
        }
        if raw.ends_with(b"\r\n\r\n") {
            break;
        }
        if raw.len() > MAX_HEAD {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "response head too large"));
        }
    }
    let mut header_buf = [httparse::EMPTY_HEADER; 64];
    let mut parsed = httparse::Response::new(&mut header_buf);
    match parsed.parse(&raw) {
        Ok(httparse::Status::Complete(_)) => {}
        Ok(httparse::Status::Partial) => {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "partial response head"))
        }
        Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e.to_string())),
    }
    let status = parsed.code.unwrap_or(0);
    let headers: Vec<(String, String)> = parsed
        .headers
        .iter()
        .map(|h| (h.name.to_string(), String::from_utf8_lossy(h.value).into_owned()))
        .collect();
    let chunked = find_header(&headers, "transfer-encoding")
        .map(|v| v.to_ascii_lowercase().contains("chunked"))
        .unwrap_or(false);
    let kind = if head_only || status == 204 || status == 304 || (100..200).contains(&status) {
        BodyKind::None
    } else if chunked {
        BodyKind::Chunked { done: false }
    } else if let Some(len) = find_header(&headers, "content-length") {
        BodyKind::Length(len.trim().parse().map_err(|_| {
            io::Error::new(io::ErrorKind::InvalidData, "bad content-length")
        })?)
    } else {
        BodyKind::UntilClose
    };
    Ok(StreamingResponse {
        status,
        headers,
        chunked,
        body: BodyReader { reader, kind },
    })
}

/// Sends a request and reads the whole response.
pub fn send(method: &str, url: &Url, headers: &[(&str, &str)], body: Body<'_>) -> io::Result<Response> {
    let resp = send_streaming(method, url, headers, body)?;
    let status = resp.status;
    let headers = resp.headers.clone();
    let chunked = resp.chunked;
    let body = resp.read_to_end()?;
    Ok(Response {
        status,
        headers,
        body,
        chunked,
    })
}

pub fn get(url: &Url) -> io::Result<Response> {
    send("GET", url, &[], Body::Empty)
}
