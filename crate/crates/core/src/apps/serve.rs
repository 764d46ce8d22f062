//! Serves files from one or more volumes over GET and HEAD.
//!
//! Files under an in-place writer are streamed with chunked encoding while
//! they grow. Completed files get validators and byte range support.

use std::io::{Read, Seek, SeekFrom};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::config::{GenericServeOptions, SendfileMode};
use crate::http::{header, App, Method, Request, Response, ResponseBody, StatusCode};
use crate::volume::{FileReader, Volume, VolumeError, VolumePath};

/// Content type by file extension, `None` when unknown.
pub fn content_type_for(path: &str) -> Option<&'static str> {
    let ext = path.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase())?;
    Some(match ext.as_str() {
        "m3u8" => "application/vnd.apple.mpegurl",
        "mpd" => "application/dash+xml",
        "cmfv" | "mp4" | "m4s" => "video/mp4",
        "cmfa" => "audio/mp4",
        _ => return None,
    })
}

pub struct GenericServe {
    name: String,
    volumes: Vec<Arc<dyn Volume>>,
    opts: GenericServeOptions,
}

#[derive(Debug, PartialEq, Eq)]
enum RangeSpec {
    Full,
    Partial(u64, u64),
    Unsatisfiable,
}

/// Evaluates the first range of a `Range` header against a size. Unknown
/// units and malformed headers fall back to the full body.
fn parse_range(value: &str, size: u64) -> RangeSpec {
    let Some(spec) = value.trim().strip_prefix("bytes=") else {
        return RangeSpec::Full;
    };
    let first = spec.split(',').next().unwrap_or("").trim();
    let Some((start, end)) = first.split_once('-') else {
        return RangeSpec::Full;
    };
    let (start, end) = (start.trim(), end.trim());
    if start.is_empty() {
        let Ok(suffix) = end.parse::<u64>() else {
            return RangeSpec::Full;
        };
        if suffix == 0 || size == 0 {
            return RangeSpec::Unsatisfiable;
        }
        return RangeSpec::Partial(size.saturating_sub(suffix), size - 1);
    }
    let Ok(start) = start.parse::<u64>() else {
        return RangeSpec::Full;
    };
    let end = if end.is_empty() {
        u64::MAX
    } else {
        match end.parse::<u64>() {
            Ok(e) if e >= start => e,
            _ => return RangeSpec::Full,
        }
    };
    if start >= size {
        return RangeSpec::Unsatisfiable;
    }
    RangeSpec::Partial(start, end.min(size - 1))
}

fn etag(size: u64, mtime: std::time::SystemTime) -> String {
    let nanos = mtime
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let digest = Sha256::digest(format!("{size}:{nanos}"));
    format!("\"{}\"", hex::encode(&digest[..16]))
}

/// The volume holding a file and a reader on it.
type Found = (Arc<dyn Volume>, Box<dyn FileReader>);

impl GenericServe {
    pub fn new(name: impl Into<String>, volumes: Vec<Arc<dyn Volume>>, opts: GenericServeOptions) -> Arc<Self> {
        Arc::new(Self {
            name: name.into(),
            volumes,
            opts,
        })
    }

    fn lookup(&self, path: &VolumePath) -> Result<Found, VolumeError> {
        let mut last = VolumeError::NotFound(path.to_string());
        for v in &self.volumes {
            match v.open(path).and_then(|f| f.new_reader()) {
                Ok(r) => return Ok((v.clone(), r)),
                Err(VolumeError::NotFound(_)) => continue,
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    fn content_type(&self, path: &VolumePath) -> String {
        content_type_for(path.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| self.opts.default_content_type.clone())
    }
}

impl App for GenericServe {
    fn name(&self) -> &str {
        &self.name
    }

    fn serve(&self, req: &mut Request<'_>) -> Response {
        // The connection layer drops bodies of HEAD responses.
        if req.method != Method::GET && req.method != Method::HEAD {
            return Response::method_not_allowed("GET, HEAD");
        }
        let path = match VolumePath::from_url_path(&req.path) {
            Ok(p) => p,
            Err(_) => return Response::error(StatusCode::NOT_FOUND, "not found"),
        };
        let (volume, mut reader) = match self.lookup(&path) {
            Ok(found) => found,
            Err(VolumeError::NotFound(_)) => return Response::error(StatusCode::NOT_FOUND, "not found"),
            Err(e) => {
                tracing::warn!(app = %self.name, %path, error = %e, "open failed");
                return Response::error(StatusCode::INTERNAL_SERVER_ERROR, e);
            }
        };
        let ctype = self.content_type(&path);

        if reader.in_place() {
            let mut resp = Response::new(StatusCode::OK).with_header(header::CONTENT_TYPE, &ctype);
            resp.body = ResponseBody::Stream { reader: Box::new(reader), length: None };
            return resp;
        }

        let size = reader.size();
        let mtime = reader.mod_time();
        let tag = etag(size, mtime);
        let mut resp = Response::new(StatusCode::OK)
            .with_header(header::CONTENT_TYPE, &ctype)
            .with_header(header::ETAG, &tag)
            .with_header(header::ACCEPT_RANGES, "bytes")
            .with_header(header::LAST_MODIFIED, &httpdate::fmt_http_date(mtime));

        if self.opts.sendfile != SendfileMode::Off {
            if let Some(local) = volume.local_path(&path) {
                let name = match self.opts.sendfile {
                    SendfileMode::XAccelRedirect => "x-accel-redirect",
                    _ => "x-sendfile",
                };
                let value = local.to_string_lossy();
                resp.headers.insert(name, value.parse().expect("path is a valid header"));
                resp.headers.insert(header::CONTENT_LENGTH, 0.into());
                return resp;
            }
        }

        let range = req
            .header(header::RANGE)
            .map(|v| parse_range(v, size))
            .unwrap_or(RangeSpec::Full);
        match range {
            RangeSpec::Unsatisfiable => {
                return Response::error(StatusCode::RANGE_NOT_SATISFIABLE, "range not satisfiable")
                    .with_header(header::CONTENT_RANGE, &format!("bytes */{size}"));
            }
            RangeSpec::Partial(start, end) => {
                if let Err(e) = reader.seek(SeekFrom::Start(start)) {
                    return Response::error(StatusCode::INTERNAL_SERVER_ERROR, e);
                }
                let len = end - start + 1;
                resp.status = StatusCode::PARTIAL_CONTENT;
                resp = resp.with_header(header::CONTENT_RANGE, &format!("bytes {start}-{end}/{size}"));
                resp.body = ResponseBody::Stream { reader: Box::new(reader.take(len)), length: Some(len) };
            }
            RangeSpec::Full => {
                resp.body = ResponseBody::Stream { reader: Box::new(reader), length: Some(size) };
            }
        }
        resp
    }
}
