//! Generic DASH and HLS ingest: every request path is a file.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::config::DashAndHlsIngestOptions;
use crate::event::{Event, EventStream, FileEventKind, FileRef};
use crate::http::{App, Method, Request, Response, StatusCode};
use crate::volume::{Volume, VolumeError, VolumePath, WriterState};

use super::emit;

pub struct DashHlsIngest {
    name: String,
    volume: Arc<dyn Volume>,
    events: EventStream,
    opts: DashAndHlsIngestOptions,
}

fn volume_status(e: &VolumeError) -> StatusCode {
    match e {
        VolumeError::NotFound(_) => StatusCode::NOT_FOUND,
        VolumeError::WriterExists(_) => StatusCode::CONFLICT,
        VolumeError::InvalidPath { .. } => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl DashHlsIngest {
    pub fn new(
        name: impl Into<String>,
        volume: Arc<dyn Volume>,
        events: EventStream,
        opts: DashAndHlsIngestOptions,
    ) -> Arc<Self> {
        Arc::new(Self {
            name: name.into(),
            volume,
            events,
            opts,
        })
    }

    fn put(&self, req: &mut Request<'_>, path: VolumePath) -> Response {
        let existed = self.volume.open(&path).is_ok();
        let file = match self.volume.open_create(&path) {
            Ok(f) => f,
            Err(e) => return Response::error(volume_status(&e), e),
        };
        if file.writer_state() != WriterState::None {
            return Response::error(StatusCode::CONFLICT, "file is being written");
        }
        let mut writer = match file.new_writer(self.opts.use_in_place_writers) {
            Ok(w) => w,
            Err(e) => return Response::error(volume_status(&e), e),
        };
        let fref = FileRef::new(self.volume.clone(), path.clone());
        emit(&self.events, Event::File { file: fref.clone(), kind: FileEventKind::Started });

        let limit = self.opts.max_file_bytes;
        let mut body = req.body().take(limit + 1);
        let mut buf = vec![0u8; 64 * 1024];
        let mut total = 0u64;
        let failure = loop {
            let n = match body.read(&mut buf) {
                Ok(0) => break None,
                Ok(n) => n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => break Some((StatusCode::BAD_REQUEST, format!("reading request body: {e}"))),
            };
            total += n as u64;
            if total > limit {
                break Some((StatusCode::PAYLOAD_TOO_LARGE, format!("file exceeds {limit} bytes")));
            }
            if let Err(e) = writer.write_all(&buf[..n]) {
                break Some((StatusCode::INTERNAL_SERVER_ERROR, e.to_string()));
            }
        };
        let failure = failure.or_else(|| {
            writer
                .commit()
                .err()
                .map(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
        });
        match failure {
            None => {
                emit(&self.events, Event::File { file: fref, kind: FileEventKind::Committed });
                tracing::debug!(app = %self.name, %path, bytes = total, "file written");
                Response::new(if existed { StatusCode::OK } else { StatusCode::CREATED })
            }
            Some((status, msg)) => {
                let _ = writer.abort();
                emit(&self.events, Event::File { file: fref, kind: FileEventKind::Aborted });
                tracing::warn!(app = %self.name, %path, %status, error = %msg, "upload failed");
                let resp = Response::error(status, msg);
                if status == StatusCode::PAYLOAD_TOO_LARGE {
                    resp.closing()
                } else {
                    resp
                }
            }
        }
    }

    fn delete(&self, path: VolumePath) -> Response {
        match self.volume.delete(&path) {
            Ok(()) => {
                let file = FileRef::new(self.volume.clone(), path);
                emit(&self.events, Event::File { file, kind: FileEventKind::Deleted });
                Response::new(StatusCode::NO_CONTENT)
            }
            Err(e) => Response::error(volume_status(&e), e),
        }
    }
}

impl App for DashHlsIngest {
    fn name(&self) -> &str {
        &self.name
    }

    fn serve(&self, req: &mut Request<'_>) -> Response {
        let is_write = req.method == Method::PUT || req.method == Method::POST;
        if !is_write && req.method != Method::DELETE {
            return Response::method_not_allowed("DELETE, POST, PUT");
        }
        let path = match VolumePath::from_url_path(&req.path) {
            Ok(p) => p,
            Err(e) => return Response::error(StatusCode::BAD_REQUEST, e),
        };
        if is_write {
            self.put(req, path)
        } else {
            self.delete(path)
        }
    }
}
