//! Host-pattern routing.
//!
//! Every host pattern owns an internal path `/sys/internal/hosts/<sha256>`.
//! The root router picks candidate patterns for the request's host (exact
//! patterns first, then globs by descending length) and internally
//! redirects the request to each candidate's host handler until one of them
//! has a route for it.

use std::collections::HashMap;
use std::sync::Arc;

use base64::Engine;
use sha2::{Digest, Sha256};

use super::{header, App, HeaderValue, Method, Request, Response, StatusCode};
use crate::config::{BasicAuthCfg, CorsCfg};
use crate::glob::{Glob, GlobError};

pub const INTERNAL_HOSTS_PREFIX: &str = "/sys/internal/hosts/";

#[derive(Debug, thiserror::Error)]
pub enum RouteError {
    #[error(transparent)]
    Pattern(#[from] GlobError),
    #[error("mount path {0:?} must start with '/'")]
    MountPath(String),
    #[error("route {mount_path:?} is already registered for host pattern {pattern:?}")]
    Duplicate { pattern: String, mount_path: String },
}

/// Internal path of a host pattern.
pub fn internal_host_path(pattern: &str) -> String {
    format!(
        "{INTERNAL_HOSTS_PREFIX}{}",
        hex::encode(Sha256::digest(pattern.as_bytes()))
    )
}

/// An application registration.
pub struct AppRoute {
    pub host_pattern: String,
    pub mount_path: String,
    pub app: Arc<dyn App>,
    pub auth: Option<BasicAuthCfg>,
    pub cors: Option<CorsCfg>,
}

struct Mounted {
    mount: String,
    app: Arc<dyn App>,
    auth: Option<BasicAuthCfg>,
    cors: Option<CorsCfg>,
}

struct HostEntry {
    glob: Glob,
    internal_path: String,
    /// Sorted by mount path length, longest first.
    routes: Vec<Mounted>,
}

#[derive(Default)]
pub struct RouteTable {
    hosts: Vec<HostEntry>,
    by_internal: HashMap<String, usize>,
}

fn normalize_mount(mount: &str) -> Result<String, RouteError> {
    if !mount.starts_with('/') {
        return Err(RouteError::MountPath(mount.to_string()));
    }
    let trimmed = mount.trim_end_matches('/');
    Ok(if trimmed.is_empty() {
        "/".into()
    } else {
        trimmed.into()
    })
}

/// Path relative to `mount`, or `None` when the mount does not cover it.
fn strip_mount<'p>(mount: &str, path: &'p str) -> Option<&'p str> {
    if mount == "/" {
        return Some(path);
    }
    let rest = path.strip_prefix(mount)?;
    if rest.is_empty() {
        Some("/")
    } else if rest.starts_with('/') {
        Some(rest)
    } else {
        None
    }
}

impl RouteTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, route: AppRoute) -> Result<(), RouteError> {
        let glob = Glob::host(&route.host_pattern)?;
        let mount = normalize_mount(&route.mount_path)?;
        let internal = internal_host_path(glob.as_str());
        let idx = match self.by_internal.get(&internal) {
            Some(i) => *i,
            None => {
                self.hosts.push(HostEntry {
                    glob,
                    internal_path: internal.clone(),
                    routes: Vec::new(),
                });
                self.by_internal.insert(internal, self.hosts.len() - 1);
                self.hosts.len() - 1
            }
        };
        let entry = &mut self.hosts[idx];
        if entry.routes.iter().any(|r| r.mount == mount) {
            return Err(RouteError::Duplicate {
                pattern: route.host_pattern,
                mount_path: mount,
            });
        }
        entry.routes.push(Mounted {
            mount,
            app: route.app,
            auth: route.auth,
            cors: route.cors,
        });
        entry.routes.sort_by(|a, b| {
            b.mount
                .len()
                .cmp(&a.mount.len())
                .then_with(|| a.mount.cmp(&b.mount))
        });
        Ok(())
    }

    /// Registered host patterns.
    pub fn patterns(&self) -> Vec<&str> {
        self.hosts.iter().map(|h| h.glob.as_str()).collect()
    }

    fn candidate_indices(&self, host: &str) -> Vec<usize> {
        let mut exact = Vec::new();
        let mut globs = Vec::new();
        for (i, h) in self.hosts.iter().enumerate() {
            if h.glob.is_literal() {
                if h.glob.as_str().eq_ignore_ascii_case(host) {
                    exact.push(i);
                }
            } else if h.glob.is_match(host) {
                globs.push(i);
            }
        }
        exact.sort_by(|a, b| {
            self.hosts[*a]
                .glob
                .as_str()
                .cmp(self.hosts[*b].glob.as_str())
        });
        globs.sort_by(|a, b| {
            let (pa, pb) = (self.hosts[*a].glob.as_str(), self.hosts[*b].glob.as_str());
            pb.len().cmp(&pa.len()).then_with(|| pa.cmp(pb))
        });
        exact.extend(globs);
        exact
    }

    /// Host patterns tried for `host`, in order.
    pub fn candidates(&self, host: &str) -> Vec<&str> {
        self.candidate_indices(host)
            .into_iter()
            .map(|i| self.hosts[i].glob.as_str())
            .collect()
    }

    /// Entry point below telemetry and request-id assignment.
    pub fn handle(&self, req: &mut Request<'_>) -> Response {
        if req.path.starts_with(INTERNAL_HOSTS_PREFIX)
            || req.path == INTERNAL_HOSTS_PREFIX.trim_end_matches('/')
        {
            let idx = self.by_internal.get(internal_key(&req.path)).copied();
            return match idx.and_then(|i| self.host_chain(i, req)) {
                Some(r) => r,
                None => deny(),
            };
        }
        self.root(req)
    }

    fn root(&self, req: &mut Request<'_>) -> Response {
        let original = std::mem::take(&mut req.path);
        for idx in self.candidate_indices(&req.host) {
            req.path = format!("{}{}", self.hosts[idx].internal_path, original);
            req.internally_redirected = true;
            if let Some(resp) = self.host_chain(idx, req) {
                return resp;
            }
        }
        req.path = original;
        req.internally_redirected = false;
        deny()
    }

    /// Runs a host handler. `None` hands control back to the root router.
    fn host_chain(&self, idx: usize, req: &mut Request<'_>) -> Option<Response> {
        // Direct requests to internal paths never reach an application.
        if !req.internally_redirected {
            return Some(deny());
        }
        let entry = &self.hosts[idx];
        let path = req
            .path
            .strip_prefix(&entry.internal_path)
            .unwrap_or("/")
            .to_string();
        let path = if path.is_empty() {
            "/".to_string()
        } else {
            path
        };
        let route = entry
            .routes
            .iter()
            .find(|r| strip_mount(&r.mount, &path).is_some())?;

        if let Some(auth) = &route.auth {
            if !check_basic_auth(req, auth) {
                let realm = auth.realm.as_deref().unwrap_or("restricted");
                return Some(
                    Response::error(StatusCode::UNAUTHORIZED, "unauthorized").with_header(
                        header::WWW_AUTHENTICATE,
                        &format!("Basic realm=\"{realm}\""),
                    ),
                );
            }
        }

        let origin = req.header(header::ORIGIN).map(str::to_string);
        if let (Some(cors), Some(origin)) = (&route.cors, &origin) {
            if req.method == Method::OPTIONS
                && req
                    .headers
                    .contains_key(header::ACCESS_CONTROL_REQUEST_METHOD)
            {
                let mut resp = Response::new(StatusCode::NO_CONTENT);
                if origin_allowed(cors, origin) {
                    preflight_headers(cors, origin, &mut resp);
                }
                return Some(resp);
            }
        }

        req.path = strip_mount(&route.mount, &path).unwrap_or("/").to_string();
        let mut resp = route.app.serve(req);
        if let (Some(cors), Some(origin)) = (&route.cors, &origin) {
            if origin_allowed(cors, origin) {
                allow_origin_headers(cors, origin, &mut resp);
                if !cors.expose_headers.is_empty() {
                    set(
                        &mut resp,
                        header::ACCESS_CONTROL_EXPOSE_HEADERS,
                        &cors.expose_headers.join(", "),
                    );
                }
            }
        }
        Some(resp)
    }
}

fn internal_key(path: &str) -> &str {
    let rest = path.strip_prefix(INTERNAL_HOSTS_PREFIX).unwrap_or("");
    let hash_len = rest.find('/').unwrap_or(rest.len());
    &path[..INTERNAL_HOSTS_PREFIX.len() + hash_len]
}

fn deny() -> Response {
    Response::error(StatusCode::NOT_FOUND, "not found")
}

fn set(resp: &mut Response, name: header::HeaderName, value: &str) {
    if let Ok(v) = HeaderValue::from_str(value) {
        resp.headers.insert(name, v);
    }
}

pub(crate) fn check_basic_auth(req: &Request<'_>, auth: &BasicAuthCfg) -> bool {
    let Some(value) = req.header(header::AUTHORIZATION) else {
        return false;
    };
    let Some((scheme, token)) = value.trim().split_once(' ') else {
        return false;
    };
    if !scheme.eq_ignore_ascii_case("basic") {
        return false;
    }
    let Ok(decoded) = base64::engine::general_purpose::STANDARD.decode(token.trim()) else {
        return false;
    };
    let expected = format!("{}:{}", auth.username, auth.password);
    constant_time_eq(&decoded, expected.as_bytes())
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn origin_allowed(cors: &CorsCfg, origin: &str) -> bool {
    cors.allow_origins
        .iter()
        .any(|o| o == "*" || o.eq_ignore_ascii_case(origin))
}

fn allow_origin_headers(cors: &CorsCfg, origin: &str, resp: &mut Response) {
    if cors.allow_origins.iter().any(|o| o == "*") {
        set(resp, header::ACCESS_CONTROL_ALLOW_ORIGIN, "*");
    } else {
        set(resp, header::ACCESS_CONTROL_ALLOW_ORIGIN, origin);
        resp.headers
            .append(header::VARY, HeaderValue::from_static("Origin"));
    }
}

fn preflight_headers(cors: &CorsCfg, origin: &str, resp: &mut Response) {
    allow_origin_headers(cors, origin, resp);
    set(
        resp,
        header::ACCESS_CONTROL_ALLOW_METHODS,
        &cors.allow_methods.join(", "),
    );
    if !cors.allow_headers.is_empty() {
        set(
            resp,
            header::ACCESS_CONTROL_ALLOW_HEADERS,
            &cors.allow_headers.join(", "),
        );
    }
    if let Some(max_age) = &cors.max_age {
        set(
            resp,
            header::ACCESS_CONTROL_MAX_AGE,
            &max_age.0.as_secs().to_string(),
        );
    }
}
