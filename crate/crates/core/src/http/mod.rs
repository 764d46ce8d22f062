//! HTTP/1.1 server hosting applications behind host-pattern routing.

mod router;
mod server;
mod wire;

use std::fmt;
use std::io::{self, Read};
use std::net::SocketAddr;

pub use http::{header, HeaderMap, HeaderValue, Method, StatusCode};
pub use router::{internal_host_path, AppRoute, RouteError, RouteTable, INTERNAL_HOSTS_PREFIX};
pub use server::{HttpServer, ServerOptions, DRAIN_BUDGET};

use crate::lifecycle::CancelToken;

/// An incoming request as seen by handlers.
pub struct Request<'a> {
    pub method: Method,
    /// Path without query, percent-decoding not applied.
    pub path: String,
    pub query: Option<String>,
    /// Host header value without port, lower-cased.
    pub host: String,
    pub headers: HeaderMap,
    pub request_id: String,
    /// Set by the root router when it forwards the request to a host
    /// handler. Never derived from client input.
    pub internally_redirected: bool,
    pub peer: Option<SocketAddr>,
    /// Cancelled when the server shuts down.
    pub shutdown: CancelToken,
    pub(crate) body: Box<dyn Read + Send + 'a>,
    pub(crate) body_kind: BodyKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BodyKind {
    Empty,
    Length(u64),
    Chunked,
}

impl<'a> Request<'a> {
    /// Builds a request with an in-memory body, for tests and internal use.
    pub fn new(method: Method, path: &str, body: impl Read + Send + 'a) -> Self {
        let (path, query) = match path.split_once('?') {
            Some((p, q)) => (p.to_string(), Some(q.to_string())),
            None => (path.to_string(), None),
        };
        Self {
            method,
            path,
            query,
            host: String::new(),
            headers: HeaderMap::new(),
            request_id: String::new(),
            internally_redirected: false,
            peer: None,
            shutdown: CancelToken::new(),
            body: Box::new(body),
            body_kind: BodyKind::Chunked,
        }
    }

    pub fn with_host(mut self, host: &str) -> Self {
        self.host = normalize_host(host);
        self
    }

    pub fn with_header(mut self, name: &'static str, value: &str) -> Self {
        if let Ok(v) = HeaderValue::from_str(value) {
            self.headers.append(name, v);
        }
        self
    }

    pub fn body(&mut self) -> &mut (dyn Read + Send + 'a) {
        &mut *self.body
    }

    /// Declared body length, if the request carried Content-Length.
    pub fn content_length(&self) -> Option<u64> {
        match self.body_kind {
            BodyKind::Length(n) => Some(n),
            BodyKind::Empty => Some(0),
            BodyKind::Chunked => None,
        }
    }

    pub fn header(&self, name: impl header::AsHeaderName) -> Option<&str> {
        self.headers.get(name).and_then(|v| v.to_str().ok())
    }
}

impl fmt::Debug for Request<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Request")
            .field("method", &self.method)
            .field("host", &self.host)
            .field("path", &self.path)
            .field("request_id", &self.request_id)
            .finish()
    }
}

/// Strips any port and lower-cases a Host header value.
pub fn normalize_host(host: &str) -> String {
    let h = host.trim();
    let h = if let Some(rest) = h.strip_prefix('[') {
        rest.split(']').next().unwrap_or(rest)
    } else {
        h.rsplit_once(':')
            .filter(|(_, port)| port.chars().all(|c| c.is_ascii_digit()))
            .map(|(name, _)| name)
            .unwrap_or(h)
    };
    h.trim_end_matches('.').to_ascii_lowercase()
}

pub enum ResponseBody {
    Empty,
    Bytes(Vec<u8>),
    /// Streamed body; sent chunked when `length` is `None`.
    Stream {
        reader: Box<dyn Read + Send>,
        length: Option<u64>,
    },
}

impl fmt::Debug for ResponseBody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResponseBody::Empty => write!(f, "Empty"),
            ResponseBody::Bytes(b) => write!(f, "Bytes({})", b.len()),
            ResponseBody::Stream { length, .. } => write!(f, "Stream({length:?})"),
        }
    }
}

#[derive(Debug)]
pub struct Response {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: ResponseBody,
    /// Close the connection after this response.
    pub close: bool,
}

impl Response {
    pub fn new(status: StatusCode) -> Self {
        Self {
            status,
            headers: HeaderMap::new(),
            body: ResponseBody::Empty,
            close: false,
        }
    }

    /// Plain-text error response.
    pub fn error(status: StatusCode, message: impl fmt::Display) -> Self {
        let mut r = Self::new(status);
        r.headers.insert(
            header::CONTENT_TYPE,
            HeaderValue::from_static("text/plain; charset=utf-8"),
        );
        r.body = ResponseBody::Bytes(format!("{message}\n").into_bytes());
        r
    }

    pub fn bytes(status: StatusCode, content_type: &str, body: Vec<u8>) -> Self {
        let mut r = Self::new(status);
        if let Ok(v) = HeaderValue::from_str(content_type) {
            r.headers.insert(header::CONTENT_TYPE, v);
        }
        r.body = ResponseBody::Bytes(body);
        r
    }

    pub fn with_header(mut self, name: header::HeaderName, value: &str) -> Self {
        if let Ok(v) = HeaderValue::from_str(value) {
            self.headers.insert(name, v);
        }
        self
    }

    pub fn closing(mut self) -> Self {
        self.close = true;
        self
    }

    pub fn method_not_allowed(allowed: &str) -> Self {
        Self::error(StatusCode::METHOD_NOT_ALLOWED, "method not allowed")
            .with_header(header::ALLOW, allowed)
    }
}

/// An HTTP application mounted on a server.
pub trait App: Send + Sync {
    fn name(&self) -> &str;
    /// Handles a request whose path has the mount prefix stripped.
    fn serve(&self, req: &mut Request<'_>) -> Response;
}

/// Reads a request body to its end, failing once `limit` is exceeded.
pub fn read_body_limited(req: &mut Request<'_>, limit: u64) -> io::Result<Option<Vec<u8>>> {
    let mut out = Vec::new();
    req.body().take(limit + 1).read_to_end(&mut out)?;
    if out.len() as u64 > limit {
        return Ok(None);
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn host_normalization() {
        assert_eq!(
            normalize_host("Primary.Example.com:8080"),
            "primary.example.com"
        );
        assert_eq!(normalize_host("[::1]:80"), "::1");
        assert_eq!(normalize_host("example.com."), "example.com");
    }
}
