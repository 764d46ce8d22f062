//! Connection handling: accept loop, per-connection threads, keep-alive,
//! idle timeouts and graceful shutdown.

use std::collections::HashMap;
use std::io::{self, Read};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::RngCore;

use super::wire::{self, BodyReader, Conn, HeadError};
use super::{header, normalize_host, BodyKind, Method, Request, Response, RouteTable, StatusCode};
use crate::lifecycle::{CancelToken, TaskTracker};

/// Time granted to in-flight requests after shutdown begins.
pub const DRAIN_BUDGET: Duration = Duration::from_secs(30);
const POLL: Duration = Duration::from_millis(100);
const LINGER: Duration = Duration::from_secs(2);
const LINGER_BYTES: u64 = 16 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Maximum silence between reads, both between requests and within a
    /// request body.
    pub idle_timeout: Duration,
    pub drain_budget: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            idle_timeout: Duration::from_secs(75),
            drain_budget: DRAIN_BUDGET,
        }
    }
}

struct ConnEntry {
    stream: TcpStream,
    idle: Arc<AtomicBool>,
}

#[derive(Default)]
struct Registry {
    conns: Mutex<HashMap<u64, ConnEntry>>,
    cond: Condvar,
    next: AtomicU64,
}

impl Registry {
    fn remove(&self, id: u64) {
        let mut conns = self.conns.lock().unwrap();
        conns.remove(&id);
        self.cond.notify_all();
    }
}

pub struct HttpServer {
    name: String,
    listener: TcpListener,
    routes: Arc<RouteTable>,
    opts: ServerOptions,
}

impl HttpServer {
    pub fn bind(
        name: &str,
        addr: impl ToSocketAddrs,
        routes: RouteTable,
        opts: ServerOptions,
    ) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Ok(Self {
            name: name.to_string(),
            listener,
            routes: Arc::new(routes),
            opts,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Serves until `cancel` fires, then drains open connections for up to
    /// the drain budget and force-closes the rest.
    pub fn run(self, cancel: &CancelToken, tracker: &TaskTracker) -> io::Result<()> {
        self.listener.set_nonblocking(true)?;
        let registry = Arc::new(Registry::default());
        let addr = self.listener.local_addr()?;
        tracing::info!(server = %self.name, %addr, "listening");
        while !cancel.is_cancelled() {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    if let Err(e) = self.spawn_conn(stream, peer, &registry, cancel, tracker) {
                        tracing::warn!(server = %self.name, error = %e, "dropping connection");
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    cancel.wait_timeout(Duration::from_millis(20));
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    tracing::warn!(server = %self.name, error = %e, "accept failed");
                    cancel.wait_timeout(Duration::from_millis(50));
                }
            }
        }
        let HttpServer {
            name,
            listener,
            opts,
            ..
        } = self;
        drop(listener);
        drain(&name, &opts, &registry);
        Ok(())
    }

    fn spawn_conn(
        &self,
        stream: TcpStream,
        peer: SocketAddr,
        registry: &Arc<Registry>,
        cancel: &CancelToken,
        tracker: &TaskTracker,
    ) -> io::Result<()> {
        stream.set_nonblocking(false)?;
        stream.set_nodelay(true)?;
        let id = registry.next.fetch_add(1, Ordering::Relaxed);
        let idle = Arc::new(AtomicBool::new(true));
        registry.conns.lock().unwrap().insert(
            id,
            ConnEntry {
                stream: stream.try_clone()?,
                idle: idle.clone(),
            },
        );
        let routes = self.routes.clone();
        let opts = self.opts.clone();
        let cancel = cancel.clone();
        let reg = registry.clone();
        let spawned = tracker.spawn(&format!("{}-conn", self.name), move || {
            let mut conn = Conn::new(stream);
            serve_conn(&mut conn, peer, &routes, &opts, &cancel, &idle);
            let _ = conn.stream.shutdown(Shutdown::Both);
            reg.remove(id);
        });
        if let Err(e) = spawned {
            registry.remove(id);
            return Err(e);
        }
        Ok(())
    }
}

fn drain(name: &str, opts: &ServerOptions, registry: &Registry) {
    let deadline = Instant::now() + opts.drain_budget;
    let mut conns = registry.conns.lock().unwrap();
    loop {
        for c in conns.values() {
            if c.idle.load(Ordering::SeqCst) {
                let _ = c.stream.shutdown(Shutdown::Read);
            }
        }
        if conns.is_empty() {
            return;
        }
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        conns = registry
            .cond
            .wait_timeout(conns, (deadline - now).min(POLL))
            .unwrap()
            .0;
    }
    tracing::warn!(server = %name, open = conns.len(), "drain budget exhausted, closing connections");
    for c in conns.values() {
        let _ = c.stream.shutdown(Shutdown::Both);
    }
}

fn request_id() -> String {
    let mut b = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut b);
    hex::encode(b)
}

/// Waits for a complete request head.
fn read_head(
    conn: &mut Conn,
    opts: &ServerOptions,
    cancel: &CancelToken,
) -> Result<wire::Head, HeadError> {
    let mut last_progress = Instant::now();
    let _ = conn
        .stream
        .set_read_timeout(Some(POLL.min(opts.idle_timeout)));
    loop {
        if let Some(head) = wire::try_parse_head(conn)? {
            return Ok(head);
        }
        if cancel.is_cancelled() && !conn.has_buffered() {
            return Err(HeadError::Closed);
        }
        match conn.fill() {
            Ok(0) => {
                return Err(if conn.has_buffered() {
                    HeadError::Malformed("connection closed mid-head")
                } else {
                    HeadError::Closed
                })
            }
            Ok(_) => last_progress = Instant::now(),
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                if last_progress.elapsed() >= opts.idle_timeout {
                    return Err(HeadError::Closed);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(HeadError::Io(e)),
        }
    }
}

fn serve_conn(
    conn: &mut Conn,
    peer: SocketAddr,
    routes: &RouteTable,
    opts: &ServerOptions,
    cancel: &CancelToken,
    idle: &AtomicBool,
) {
    loop {
        idle.store(true, Ordering::SeqCst);
        let head = match read_head(conn, opts, cancel) {
            Ok(h) => h,
            Err(HeadError::Closed) => return,
            Err(HeadError::Io(e)) => {
                tracing::debug!(%peer, error = %e, "connection read failed");
                return;
            }
            Err(HeadError::Malformed(msg)) => {
                early_error(conn, StatusCode::BAD_REQUEST, msg);
                return;
            }
            Err(HeadError::TooLarge) => {
                early_error(
                    conn,
                    StatusCode::REQUEST_HEADER_FIELDS_TOO_LARGE,
                    "request head too large",
                );
                return;
            }
        };
        idle.store(false, Ordering::SeqCst);
        let _ = conn.stream.set_read_timeout(Some(opts.idle_timeout));
        if !serve_request(conn, head, peer, routes, cancel) {
            return;
        }
        if cancel.is_cancelled() {
            return;
        }
    }
}

fn early_error(conn: &mut Conn, status: StatusCode, msg: &str) {
    let mut resp = Response::error(status, msg);
    let _ = wire::write_response(&mut conn.stream, &mut resp, false, true, "");
    linger(&conn.stream);
}

/// Half-closes and discards incoming bytes for a while so the client can
/// read the response instead of seeing a reset.
fn linger(stream: &TcpStream) {
    let _ = stream.shutdown(Shutdown::Write);
    let _ = stream.set_read_timeout(Some(POLL));
    let deadline = Instant::now() + LINGER;
    let mut drained = 0u64;
    let mut buf = [0u8; 16 * 1024];
    let mut s = stream;
    while Instant::now() < deadline && drained < LINGER_BYTES {
        match s.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => drained += n as u64,
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) => {}
            Err(_) => break,
        }
    }
}

fn target_path(target: &str) -> Option<String> {
    if target.starts_with('/') || target == "*" {
        return Some(target.to_string());
    }
    // absolute-form
    let rest = target.split_once("://")?.1;
    Some(match rest.find('/') {
        Some(i) => rest[i..].to_string(),
        None => "/".to_string(),
    })
}

/// Handles one request. Returns whether the connection may be reused.
fn serve_request(
    conn: &mut Conn,
    head: wire::Head,
    peer: SocketAddr,
    routes: &RouteTable,
    cancel: &CancelToken,
) -> bool {
    let started = Instant::now();
    let id = request_id();
    let Some(target) = target_path(&head.target) else {
        early_error(conn, StatusCode::BAD_REQUEST, "invalid request target");
        return false;
    };
    let host = match head.headers.get(header::HOST).and_then(|h| h.to_str().ok()) {
        Some(h) => normalize_host(h),
        None if head.minor_version == 0 => String::new(),
        None => {
            early_error(conn, StatusCode::BAD_REQUEST, "missing Host header");
            return false;
        }
    };
    let kind = match wire::body_framing(&head) {
        Ok(k) => k,
        Err(msg) => {
            early_error(conn, StatusCode::BAD_REQUEST, msg);
            return false;
        }
    };
    let wants_close = head
        .headers
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .any(|v| v.split(',').any(|t| t.trim().eq_ignore_ascii_case("close")));
    let keep_alive_10 = head
        .headers
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .any(|v| {
            v.split(',')
                .any(|t| t.trim().eq_ignore_ascii_case("keep-alive"))
        });
    let mut close = wants_close || (head.minor_version == 0 && !keep_alive_10);
    conn.continue_pending = head.minor_version >= 1
        && kind != BodyKind::Empty
        && head
            .headers
            .get(header::EXPECT)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.eq_ignore_ascii_case("100-continue"));

    let method = head.method.clone();
    let (path, query) = match target.split_once('?') {
        Some((p, q)) => (p.to_string(), Some(q.to_string())),
        None => (target.clone(), None),
    };
    let body_done = Arc::new(AtomicBool::new(false));
    let mut resp = {
        let body = DoneTracking {
            inner: BodyReader::new(conn, kind),
            done: body_done.clone(),
        };
        if body.inner.is_done() {
            body_done.store(true, Ordering::SeqCst);
        }
        let mut req = Request {
            method: method.clone(),
            path: path.clone(),
            query,
            host: host.clone(),
            headers: head.headers,
            request_id: id.clone(),
            internally_redirected: false,
            peer: Some(peer),
            shutdown: cancel.clone(),
            body: Box::new(body),
            body_kind: kind,
        };
        routes.handle(&mut req)
    };
    let body_complete = body_done.load(Ordering::SeqCst);
    conn.continue_pending = false;
    close = close || resp.close || !body_complete || cancel.is_cancelled();
    let status = resp.status;
    let result = wire::write_response(
        &mut conn.stream,
        &mut resp,
        method == Method::HEAD,
        close,
        &id,
    );
    tracing::info!(
        target: "http",
        id = %id,
        method = %method,
        host = %host,
        path = %path,
        status = status.as_u16(),
        duration_ms = started.elapsed().as_millis() as u64,
        "request"
    );
    if result.is_err() {
        return false;
    }
    if close {
        if !body_complete {
            linger(&conn.stream);
        }
        return false;
    }
    true
}

struct DoneTracking<'c> {
    inner: BodyReader<'c>,
    done: Arc<AtomicBool>,
}

impl Read for DoneTracking<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        if self.inner.is_done() {
            self.done.store(true, Ordering::SeqCst);
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::{App, AppRoute};
    use std::io::Write;

    struct Upload;

    impl App for Upload {
        fn name(&self) -> &str {
            "upload"
        }

        fn serve(&self, req: &mut Request<'_>) -> Response {
            match req.method {
                Method::PUT => match crate::http::read_body_limited(req, 16) {
                    Ok(Some(b)) => Response::bytes(StatusCode::OK, "text/plain", b),
                    Ok(None) => Response::error(StatusCode::PAYLOAD_TOO_LARGE, "too large"),
                    Err(e) => Response::error(StatusCode::BAD_REQUEST, e),
                },
                _ => Response::bytes(StatusCode::OK, "text/plain", req.path.clone().into_bytes()),
            }
        }
    }

    fn start() -> (
        SocketAddr,
        CancelToken,
        TaskTracker,
        std::thread::JoinHandle<()>,
    ) {
        let mut t = RouteTable::new();
        t.register(AppRoute {
            host_pattern: "**".into(),
            mount_path: "/up".into(),
            app: Arc::new(Upload),
            auth: None,
            cors: None,
        })
        .unwrap();
        let server = HttpServer::bind(
            "t",
            "127.0.0.1:0",
            t,
            ServerOptions {
                idle_timeout: Duration::from_secs(5),
                drain_budget: Duration::from_secs(2),
            },
        )
        .unwrap();
        let addr = server.local_addr().unwrap();
        let cancel = CancelToken::new();
        let tracker = TaskTracker::new();
        let (c, tr) = (cancel.clone(), tracker.clone());
        let h = std::thread::spawn(move || server.run(&c, &tr).unwrap());
        (addr, cancel, tracker, h)
    }

    fn roundtrip(addr: SocketAddr, raw: &[u8]) -> String {
        let mut s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        s.write_all(raw).unwrap();
        let mut out = Vec::new();
        let _ = s.read_to_end(&mut out);
        String::from_utf8_lossy(&out).into_owned()
    }

    #[test]
    fn keep_alive_pipelining_and_request_ids() {
        let (addr, cancel, tracker, h) = start();
        let out = roundtrip(
            addr,
            b"GET /up/a HTTP/1.1\r\nHost: x\r\n\r\nGET /up/b HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n",
        );
        assert_eq!(out.matches("HTTP/1.1 200 OK").count(), 2, "{out}");
        assert!(out.contains("\r\n\r\n/a") && out.ends_with("/b"));
        assert_eq!(out.matches("x-request-id: ").count(), 2);
        cancel.cancel();
        h.join().unwrap();
        assert_eq!(tracker.wait_idle(Duration::from_secs(3)), 0);
    }

    #[test]
    fn chunked_upload_and_expect_continue() {
        let (addr, cancel, _tracker, h) = start();
        let out = roundtrip(
            addr,
            b"PUT /up/x HTTP/1.1\r\nHost: x\r\nExpect: 100-continue\r\nTransfer-Encoding: chunked\r\nConnection: close\r\n\r\n3\r\nabc\r\n0\r\n\r\n",
        );
        assert!(
            out.starts_with("HTTP/1.1 100 Continue\r\n\r\nHTTP/1.1 200 OK"),
            "{out}"
        );
        assert!(out.ends_with("abc"));
        cancel.cancel();
        h.join().unwrap();
    }

    #[test]
    fn oversized_body_gets_response_before_close() {
        let (addr, cancel, _tracker, h) = start();
        let mut raw = b"PUT /up/x HTTP/1.1\r\nHost: x\r\nContent-Length: 100000\r\n\r\n".to_vec();
        raw.extend(vec![b'a'; 100_000]);
        let out = roundtrip(addr, &raw);
        assert!(out.starts_with("HTTP/1.1 413"), "{out}");
        assert!(out.contains("connection: close"));
        cancel.cancel();
        h.join().unwrap();
    }

    #[test]
    fn malformed_and_unknown() {
        let (addr, cancel, _tracker, h) = start();
        assert!(roundtrip(addr, b"GARBAGE\r\n\r\n").starts_with("HTTP/1.1 400"));
        assert!(roundtrip(
            addr,
            b"GET /nope HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n"
        )
        .starts_with("HTTP/1.1 404"));
        assert!(roundtrip(addr, b"GET /up HTTP/1.1\r\n\r\n").starts_with("HTTP/1.1 400"));
        cancel.cancel();
        h.join().unwrap();
    }

    #[test]
    fn idle_connections_close_on_shutdown() {
        let (addr, cancel, tracker, h) = start();
        let mut s = TcpStream::connect(addr).unwrap();
        s.write_all(b"GET /up/a HTTP/1.1\r\nHost: x\r\n\r\n")
            .unwrap();
        let mut buf = [0u8; 512];
        let _ = s.read(&mut buf).unwrap();
        let t0 = Instant::now();
        cancel.cancel();
        h.join().unwrap();
        assert!(t0.elapsed() < Duration::from_secs(1));
        assert_eq!(tracker.wait_idle(Duration::from_secs(2)), 0);
    }
}
