//! Ingest drivers for both DASH-IF ingest interfaces.

use std::time::Instant;

use serde::Serialize;
use url::Url;

use crate::client::{self, Body};
use crate::synth::SynthTrack;

/// Outcome of one interface-1 push.
#[derive(Debug, Clone, Serialize)]
pub struct PushReport {
    pub url: String,
    pub status: Option<u16>,
    pub error: Option<String>,
    pub bytes_sent: u64,
    pub chunks_sent: usize,
    pub fragments_sent: usize,
    pub duration_ms: u128,
}

impl PushReport {
    pub fn ok(&self) -> bool {
        matches!(self.status, Some(s) if (200..300).contains(&s))
    }
}

/// Result of one interface-2 request.
#[derive(Debug, Clone, Serialize)]
pub struct FileReport {
    pub url: String,
    pub method: String,
    pub status: Option<u16>,
    pub error: Option<String>,
    pub bytes: u64,
    pub duration_ms: u128,
}

impl FileReport {
    pub fn ok(&self) -> bool {
        matches!(self.status, Some(s) if (200..300).contains(&s))
    }
}

/// Pushes a whole track as one long-running PUT with chunked transfer
/// encoding: the header goes out as the first HTTP chunk, then one HTTP
/// chunk per CMAF chunk.
pub fn push_interface1(url: &Url, track: &SynthTrack, rate: Option<u64>) -> PushReport {
    let mut pieces: Vec<&[u8]> = Vec::with_capacity(track.chunks.len() + 1);
    pieces.push(&track.header);
    pieces.extend(track.chunks.iter().map(|c| c.as_slice()));
    let bytes_sent = pieces.iter().map(|p| p.len() as u64).sum();
    let started = Instant::now();
    let result = client::send(
        "PUT",
        url,
        &[("Content-Type", "video/mp4")],
        Body::Chunked {
            pieces: &pieces,
            rate,
        },
    );
    let (status, error) = match result {
        Ok(r) => (Some(r.status), None),
        Err(e) => (None, Some(e.to_string())),
    };
    PushReport {
        url: url.to_string(),
        status,
        error,
        bytes_sent,
        chunks_sent: track.chunks.len(),
        fragments_sent: track.fragment_boundaries().len(),
        duration_ms: started.elapsed().as_millis(),
    }
}

/// Uploads each `(relative path, content)` pair with its own PUT request.
pub fn push_interface2(base: &Url, files: &[(String, Vec<u8>)]) -> Vec<FileReport> {
    files
        .iter()
        .map(|(path, data)| {
            let started = Instant::now();
            let url = join(base, path);
            let result = url
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|u| client::send("PUT", u, &[], Body::Bytes(data)).map_err(|e| e.to_string()));
            FileReport {
                url: url.map(|u| u.to_string()).unwrap_or_else(|_| path.clone()),
                method: "PUT".into(),
                status: result.as_ref().ok().map(|r| r.status),
                error: result.err(),
                bytes: data.len() as u64,
                duration_ms: started.elapsed().as_millis(),
            }
        })
        .collect()
}

pub fn delete_interface2(base: &Url, path: &str) -> FileReport {
    let started = Instant::now();
    let url = join(base, path);
    let result = url
        .as_ref()
        .map_err(|e| e.to_string())
        .and_then(|u| client::send("DELETE", u, &[], Body::Empty).map_err(|e| e.to_string()));
    FileReport {
        url: url.map(|u| u.to_string()).unwrap_or_else(|_| path.to_string()),
        method: "DELETE".into(),
        status: result.as_ref().ok().map(|r| r.status),
        error: result.err(),
        bytes: 0,
        duration_ms: started.elapsed().as_millis(),
    }
}

/// Joins a relative object path onto a base URL, treating the base as a
/// directory even without a trailing slash.
pub fn join(base: &Url, path: &str) -> Result<Url, url::ParseError> {
    let mut base = base.clone();
    if !base.path().ends_with('/') {
        let p = format!("{}/", base.path());
        base.set_path(&p);
    }
    base.join(path.trim_start_matches('/'))
}
