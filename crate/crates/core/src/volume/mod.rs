//! File-oriented storage contract shared by all volume backends.
//!
//! A file has at most one writer at any time and any number of readers.
//! In-place writers make written bytes visible immediately, with readers
//! blocking at the end of the written data until the writer closes. Snapshot
//! writers publish their data atomically on commit; readers opened before the
//! commit keep reading the previous content.

mod fs;
mod mem;
mod null;

use std::fmt;
use std::io::{self, Read, Seek, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::SystemTime;

use crate::lifecycle::Signal;

pub use fs::FsVolume;
pub use mem::{MemStats, MemVolume};
pub use null::NullVolume;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VolumeError {
    #[error("file not found: {0}")]
    NotFound(String),
    #[error("invalid path {path:?}: {reason}")]
    InvalidPath { path: String, reason: &'static str },
    #[error("file {0} already has a writer")]
    WriterExists(String),
    #[error("writer is closed")]
    WriterClosed,
    #[error("reader is closed")]
    ReaderClosed,
    #[error("the concurrent write was aborted")]
    WriteAborted,
    #[error("seek to {offset} beyond extent {size}")]
    SeekOutOfRange { offset: i128, size: u64 },
    #[error("volume is finalized")]
    Finalized,
    #[error("volume is not initialized")]
    NotInitialized,
    #[error("i/o error: {0}")]
    Io(String),
}

impl VolumeError {
    pub fn io(e: io::Error) -> Self {
        match VolumeError::from_io(&e) {
            Some(v) => v.clone(),
            None => VolumeError::Io(e.to_string()),
        }
    }

    /// Extracts a volume error carried inside an [`io::Error`].
    pub fn from_io(e: &io::Error) -> Option<&VolumeError> {
        e.get_ref()
            .and_then(|inner| inner.downcast_ref::<VolumeError>())
    }

    pub fn into_io(self) -> io::Error {
        let kind = match &self {
            VolumeError::NotFound(_) => io::ErrorKind::NotFound,
            VolumeError::SeekOutOfRange { .. } | VolumeError::InvalidPath { .. } => {
                io::ErrorKind::InvalidInput
            }
            VolumeError::WriteAborted => io::ErrorKind::Interrupted,
            _ => io::ErrorKind::Other,
        };
        io::Error::new(kind, self)
    }
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Normalized, relative, `/`-separated path inside a volume.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VolumePath(String);

/// Suffix reserved for the fs backend's transaction files.
pub(crate) const RESERVED_SUFFIX: &str = ".tmp";

impl VolumePath {
    pub fn new(path: impl Into<String>) -> Result<Self> {
        let path = path.into();
        let err = |reason| VolumeError::InvalidPath {
            path: path.clone(),
            reason,
        };
        if path.is_empty() {
            return Err(err("empty path"));
        }
        if path.starts_with('/') {
            return Err(err("path must be relative"));
        }
        if path.contains(['\\', '\0']) {
            return Err(err("path contains a forbidden character"));
        }
        for seg in path.split('/') {
            match seg {
                "" => return Err(err("empty segment")),
                "." | ".." => return Err(err("dot segment")),
                s if s.ends_with(RESERVED_SUFFIX) => return Err(err("reserved suffix")),
                _ => {}
            }
        }
        Ok(Self(path))
    }

    /// Builds a path from a URL path such as `/a/b`, dropping the leading
    /// slash.
    pub fn from_url_path(path: &str) -> Result<Self> {
        Self::new(path.strip_prefix('/').unwrap_or(path))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn join(&self, segment: &str) -> Result<Self> {
        Self::new(format!("{}/{}", self.0, segment))
    }

    pub fn file_name(&self) -> &str {
        self.0.rsplit('/').next().unwrap_or(&self.0)
    }
}

impl fmt::Display for VolumePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for VolumePath {
    type Err = VolumeError;
    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriterState {
    None,
    InPlace,
    Snapshot,
}

pub trait Volume: Send + Sync {
    fn name(&self) -> &str;
    fn init(&self) -> Result<()>;
    /// Force-aborts open writers and fails open readers.
    fn finalize(&self) -> Result<()>;
    fn is_finalized(&self) -> bool;
    fn open(&self, path: &VolumePath) -> Result<Arc<dyn VolumeFile>>;
    fn open_create(&self, path: &VolumePath) -> Result<Arc<dyn VolumeFile>>;
    /// Fails with `WriterExists` while a writer is open on the file.
    fn delete(&self, path: &VolumePath) -> Result<()>;
    /// On-disk location of a file, for backends that have one.
    fn local_path(&self, _path: &VolumePath) -> Option<PathBuf> {
        None
    }
}

pub trait VolumeFile: Send + Sync {
    fn path(&self) -> &VolumePath;
    fn new_writer(&self, in_place: bool) -> Result<Box<dyn FileWriter>>;
    fn new_reader(&self) -> Result<Box<dyn FileReader>>;
    fn writer_state(&self) -> WriterState;
    fn reader_count(&self) -> usize;
}

/// Dropping a writer without committing aborts it.
pub trait FileWriter: Write + Send {
    fn in_place(&self) -> bool;
    fn bytes_written(&self) -> u64;
    fn commit(&mut self) -> Result<()>;
    fn abort(&mut self) -> Result<()>;
}

/// Read errors carry a [`VolumeError`] retrievable with
/// [`VolumeError::from_io`]. Dropping a reader closes it.
pub trait FileReader: Read + Seek + Send {
    /// Size observable right now; grows under an in-place writer.
    fn size(&self) -> u64;
    fn mod_time(&self) -> SystemTime;
    /// Fires once no writer is active on the file.
    fn write_done(&self) -> Signal;
    /// Whether an in-place writer was active when the reader was acquired.
    fn in_place(&self) -> bool;
    fn close(&mut self) -> Result<()>;
}

/// Resolves a seek against an extent, returning the new position.
pub(crate) fn resolve_seek(pos: io::SeekFrom, current: u64, size: u64) -> io::Result<u64> {
    let target: i128 = match pos {
        io::SeekFrom::Start(o) => o as i128,
        io::SeekFrom::Current(d) => current as i128 + d as i128,
        io::SeekFrom::End(d) => size as i128 + d as i128,
    };
    if target < 0 || target > size as i128 {
        return Err(VolumeError::SeekOutOfRange {
            offset: target,
            size,
        }
        .into_io());
    }
    Ok(target as u64)
}

/// Reads a whole file's committed content.
pub fn read_all(volume: &dyn Volume, path: &VolumePath) -> Result<Vec<u8>> {
    let file = volume.open(path)?;
    let mut reader = file.new_reader()?;
    let mut out = Vec::new();
    reader.read_to_end(&mut out).map_err(VolumeError::io)?;
    Ok(out)
}

/// Replaces a file's content with a snapshot write.
pub fn write_all(volume: &dyn Volume, path: &VolumePath, data: &[u8]) -> Result<()> {
    let file = volume.open_create(path)?;
    let mut writer = file.new_writer(false)?;
    if let Err(e) = writer.write_all(data) {
        let _ = writer.abort();
        return Err(VolumeError::io(e));
    }
    writer.commit()
}


#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown volume {0:?}")]
pub struct UnknownVolume(pub String);

/// Volumes by name, in registration order.
#[derive(Default, Clone)]
pub struct VolumeRegistry {
    volumes: Vec<(String, Arc<dyn Volume>)>,
}

impl VolumeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a volume; a later volume with the same name replaces the earlier.
    pub fn insert(&mut self, volume: Arc<dyn Volume>) {
        let name = volume.name().to_string();
        self.volumes.retain(|(n, _)| *n != name);
        self.volumes.push((name, volume));
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Volume>, UnknownVolume> {
        self.volumes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| UnknownVolume(name.to_string()))
    }

    /// Resolves a list of names, failing on the first unknown one.
    pub fn resolve(&self, names: &[String]) -> Result<Vec<Arc<dyn Volume>>, UnknownVolume> {
        names.iter().map(|n| self.get(n)).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.volumes.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &Arc<dyn Volume>> {
        self.volumes.iter().map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

impl fmt::Debug for VolumeRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}
