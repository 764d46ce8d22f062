//! Filesystem volume rooted at a directory.
//!
//! Snapshot writers write to a temporary sibling and rename it over the
//! target on commit. In-place writers park the previous file under a
//! temporary name and write the target directly; readers attached to such a
//! write block at the writer's written-byte count.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::SystemTime;

use rand::Rng;

use super::{
    FileReader, FileWriter, Result, Volume, VolumeError, VolumeFile, VolumePath, WriterState,
    RESERVED_SUFFIX,
};
use crate::lifecycle::Signal;

pub struct FsVolume {
    name: String,
    inner: Arc<FsInner>,
}

struct FsInner {
    root: PathBuf,
    initialized: AtomicBool,
    finalized: AtomicBool,
    open_files: Mutex<HashMap<VolumePath, Weak<FsFile>>>,
}

struct FsFile {
    me: Weak<FsFile>,
    path: VolumePath,
    abs: PathBuf,
    volume: Arc<FsInner>,
    writer: Mutex<Option<Arc<Txn>>>,
    readers: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TxnStatus {
    Writing,
    Committed,
    Aborted,
}

struct Txn {
    in_place: bool,
    abs: PathBuf,
    state: Mutex<TxnState>,
    cond: Condvar,
    done: Signal,
    forced: AtomicBool,
}

struct TxnState {
    written: u64,
    status: TxnStatus,
    // Snapshot: the file being written. In-place: the parked previous file.
    temp: Option<PathBuf>,
}

fn io_err(path: &VolumePath, e: io::Error) -> VolumeError {
    if e.kind() == io::ErrorKind::NotFound {
        VolumeError::NotFound(path.to_string())
    } else {
        VolumeError::Io(format!("{path}: {e}"))
    }
}

fn temp_sibling(abs: &Path) -> PathBuf {
    let suffix: u64 = rand::thread_rng().gen();
    let name = abs
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    abs.with_file_name(format!("{name}.{suffix:016x}{RESERVED_SUFFIX}"))
}

impl Txn {
    fn finish(&self, commit: bool) -> io::Result<()> {
        let mut st = self.state.lock().unwrap();
        if st.status != TxnStatus::Writing {
            return Err(VolumeError::WriterClosed.into_io());
        }
        let result = match (self.in_place, commit) {
            (false, true) => match st.temp.take() {
                Some(t) => fs::rename(&t, &self.abs),
                None => Ok(()),
            },
            (false, false) => match st.temp.take() {
                Some(t) => fs::remove_file(t),
                None => Ok(()),
            },
            (true, true) => match st.temp.take() {
                Some(old) => fs::remove_file(old),
                None => Ok(()),
            },
            (true, false) => match st.temp.take() {
                Some(old) => fs::rename(old, &self.abs),
                None => fs::remove_file(&self.abs),
            },
        };
        st.status = if commit && result.is_ok() {
            TxnStatus::Committed
        } else {
            TxnStatus::Aborted
        };
        self.cond.notify_all();
        result
    }
}

impl FsVolume {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            inner: Arc::new(FsInner {
                root: root.into(),
                initialized: AtomicBool::new(false),
                finalized: AtomicBool::new(false),
                open_files: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    /// Number of files with open handles.
    pub fn open_file_count(&self) -> usize {
        let map = self.inner.open_files.lock().unwrap();
        map.values().filter(|w| w.strong_count() > 0).count()
    }

    fn check(&self) -> Result<()> {
        if self.inner.finalized.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized);
        }
        if !self.inner.initialized.load(Ordering::SeqCst) {
            return Err(VolumeError::NotInitialized);
        }
        Ok(())
    }

    fn abs(&self, path: &VolumePath) -> PathBuf {
        self.inner.root.join(path.as_str())
    }

    fn file(&self, path: &VolumePath) -> Arc<FsFile> {
        let mut map = self.inner.open_files.lock().unwrap();
        if let Some(f) = map.get(path).and_then(Weak::upgrade) {
            return f;
        }
        let f = Arc::new_cyclic(|me| FsFile {
            me: me.clone(),
            path: path.clone(),
            abs: self.abs(path),
            volume: self.inner.clone(),
            writer: Mutex::new(None),
            readers: AtomicUsize::new(0),
        });
        map.insert(path.clone(), Arc::downgrade(&f));
        f
    }

    fn reject_symlink(&self, path: &VolumePath, abs: &Path) -> Result<()> {
        match fs::symlink_metadata(abs) {
            Ok(m) if m.file_type().is_symlink() => Err(VolumeError::InvalidPath {
                path: path.to_string(),
                reason: "symlinks are not supported",
            }),
            Ok(m) if m.is_dir() => Err(VolumeError::InvalidPath {
                path: path.to_string(),
                reason: "is a directory",
            }),
            _ => Ok(()),
        }
    }
}

impl Volume for FsVolume {
    fn name(&self) -> &str {
        &self.name
    }

    fn init(&self) -> Result<()> {
        let root = &self.inner.root;
        fs::create_dir_all(root)
            .map_err(|e| VolumeError::Io(format!("creating {}: {e}", root.display())))?;
        if !root.is_dir() {
            return Err(VolumeError::Io(format!(
                "{} is not a directory",
                root.display()
            )));
        }
        for entry in walkdir::WalkDir::new(root)
            .into_iter()
            .filter_map(|e| e.ok())
        {
            if entry.file_type().is_file()
                && entry
                    .file_name()
                    .to_string_lossy()
                    .ends_with(RESERVED_SUFFIX)
            {
                tracing::warn!(path = %entry.path().display(), "removing orphaned transaction file");
                let _ = fs::remove_file(entry.path());
            }
        }
        self.inner.initialized.store(true, Ordering::SeqCst);
        Ok(())
    }

    fn finalize(&self) -> Result<()> {
        self.inner.finalized.store(true, Ordering::SeqCst);
        let files: Vec<_> = self
            .inner
            .open_files
            .lock()
            .unwrap()
            .values()
            .filter_map(Weak::upgrade)
            .collect();
        for f in files {
            let txn = f.writer.lock().unwrap().clone();
            if let Some(txn) = txn {
                txn.forced.store(true, Ordering::SeqCst);
                if let Err(e) = txn.finish(false) {
                    if VolumeError::from_io(&e).is_none() {
                        tracing::warn!(path = %f.path, error = %e, "restoring file during finalize failed");
                    }
                }
                txn.done.fire();
            }
        }
        Ok(())
    }

    fn is_finalized(&self) -> bool {
        self.inner.finalized.load(Ordering::SeqCst)
    }

    fn open(&self, path: &VolumePath) -> Result<Arc<dyn VolumeFile>> {
        self.check()?;
        let abs = self.abs(path);
        self.reject_symlink(path, &abs)?;
        let f = self.file(path);
        let has_writer = f.writer.lock().unwrap().is_some();
        if has_writer || abs.is_file() {
            Ok(f)
        } else {
            Err(VolumeError::NotFound(path.to_string()))
        }
    }

    fn open_create(&self, path: &VolumePath) -> Result<Arc<dyn VolumeFile>> {
        self.check()?;
        let abs = self.abs(path);
        self.reject_symlink(path, &abs)?;
        if let Some(parent) = abs.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
        let f = self.file(path);
        let slot = f.writer.lock().unwrap();
        if slot.is_none() {
            OpenOptions::new()
                .write(true)
                .create(true)
                .truncate(false)
                .open(&abs)
                .map_err(|e| io_err(path, e))?;
        }
        drop(slot);
        Ok(f)
    }

    fn delete(&self, path: &VolumePath) -> Result<()> {
        self.check()?;
        let f = self.file(path);
        let slot = f.writer.lock().unwrap();
        if slot.is_some() {
            return Err(VolumeError::WriterExists(path.to_string()));
        }
        self.reject_symlink(path, &f.abs)?;
        fs::remove_file(&f.abs).map_err(|e| io_err(path, e))
    }

    fn local_path(&self, path: &VolumePath) -> Option<PathBuf> {
        let abs = self.abs(path);
        abs.is_file().then_some(abs)
    }
}

impl Drop for FsFile {
    fn drop(&mut self) {
        let mut map = self.volume.open_files.lock().unwrap();
        if map
            .get(&self.path)
            .is_some_and(|w| Weak::ptr_eq(w, &self.me))
        {
            map.remove(&self.path);
        }
    }
}

impl VolumeFile for FsFile {
    fn path(&self) -> &VolumePath {
        &self.path
    }

    fn new_writer(&self, in_place: bool) -> Result<Box<dyn FileWriter>> {
        if self.volume.finalized.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized);
        }
        let mut slot = self.writer.lock().unwrap();
        if slot.is_some() {
            return Err(VolumeError::WriterExists(self.path.to_string()));
        }
        if let Some(parent) = self.abs.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(&self.path, e))?;
        }
        let (file, temp) = if in_place {
            let parked = if self.abs.is_file() {
                let t = temp_sibling(&self.abs);
                fs::rename(&self.abs, &t).map_err(|e| io_err(&self.path, e))?;
                Some(t)
            } else {
                None
            };
            match File::create(&self.abs) {
                Ok(f) => (f, parked),
                Err(e) => {
                    if let Some(t) = parked {
                        let _ = fs::rename(t, &self.abs);
                    }
                    return Err(io_err(&self.path, e));
                }
            }
        } else {
            let t = temp_sibling(&self.abs);
            let f = OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&t)
                .map_err(|e| io_err(&self.path, e))?;
            (f, Some(t))
        };
        let txn = Arc::new(Txn {
            in_place,
            abs: self.abs.clone(),
            state: Mutex::new(TxnState {
                written: 0,
                status: TxnStatus::Writing,
                temp,
            }),
            cond: Condvar::new(),
            done: Signal::new(),
            forced: AtomicBool::new(false),
        });
        *slot = Some(txn.clone());
        Ok(Box::new(FsWriter {
            file: self.me.upgrade().expect("live handle"),
            txn,
            fd: Some(file),
            written: 0,
            closed: false,
        }))
    }

    fn new_reader(&self) -> Result<Box<dyn FileReader>> {
        if self.volume.finalized.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized);
        }
        let slot = self.writer.lock().unwrap();
        let txn = slot.clone();
        let (fd, attached) = match &txn {
            Some(t) if t.in_place => {
                let st = t.state.lock().unwrap();
                let fd = File::open(&self.abs).map_err(|e| io_err(&self.path, e))?;
                (fd, (st.status == TxnStatus::Writing).then(|| t.clone()))
            }
            _ => (
                File::open(&self.abs).map_err(|e| io_err(&self.path, e))?,
                None,
            ),
        };
        drop(slot);
        let done = txn
            .as_ref()
            .map(|t| t.done.clone())
            .unwrap_or_else(Signal::fired);
        self.readers.fetch_add(1, Ordering::SeqCst);
        Ok(Box::new(FsReader {
            file: self.me.upgrade().expect("live handle"),
            in_place: attached.is_some(),
            txn: attached,
            fd,
            pos: 0,
            closed: false,
            done,
        }))
    }

    fn writer_state(&self) -> WriterState {
        match &*self.writer.lock().unwrap() {
            None => WriterState::None,
            Some(t) if t.in_place => WriterState::InPlace,
            Some(_) => WriterState::Snapshot,
        }
    }

    fn reader_count(&self) -> usize {
        self.readers.load(Ordering::SeqCst)
    }
}

struct FsWriter {
    file: Arc<FsFile>,
    txn: Arc<Txn>,
    fd: Option<File>,
    written: u64,
    closed: bool,
}

impl FsWriter {
    fn finish(&mut self, commit: bool) -> Result<()> {
        if self.closed {
            return Err(VolumeError::WriterClosed);
        }
        self.closed = true;
        if self.txn.forced.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized);
        }
        let fd = self.fd.take();
        if commit {
            if let Some(fd) = &fd {
                if let Err(e) = fd.sync_data() {
                    tracing::debug!(path = %self.file.path, error = %e, "sync before commit failed");
                }
            }
        }
        drop(fd);
        let result = self
            .txn
            .finish(commit)
            .map_err(|e| io_err(&self.file.path, e));
        let mut slot = self.file.writer.lock().unwrap();
        if slot.as_ref().is_some_and(|t| Arc::ptr_eq(t, &self.txn)) {
            *slot = None;
        }
        drop(slot);
        self.txn.done.fire();
        result
    }
}

impl Write for FsWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.txn.forced.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized.into_io());
        }
        if self.closed {
            return Err(VolumeError::WriterClosed.into_io());
        }
        let fd = self
            .fd
            .as_mut()
            .ok_or_else(|| VolumeError::WriterClosed.into_io())?;
        fd.write_all(buf)?;
        self.written += buf.len() as u64;
        if self.txn.in_place {
            let mut st = self.txn.state.lock().unwrap();
            st.written = self.written;
            self.txn.cond.notify_all();
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        match self.fd.as_mut() {
            Some(fd) => fd.flush(),
            None => Ok(()),
        }
    }
}

impl FileWriter for FsWriter {
    fn in_place(&self) -> bool {
        self.txn.in_place
    }

    fn bytes_written(&self) -> u64 {
        self.written
    }

    fn commit(&mut self) -> Result<()> {
        self.finish(true)
    }

    fn abort(&mut self) -> Result<()> {
        self.finish(false)
    }
}

impl Drop for FsWriter {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.finish(false);
        }
    }
}

struct FsReader {
    file: Arc<FsFile>,
    txn: Option<Arc<Txn>>,
    in_place: bool,
    fd: File,
    pos: u64,
    closed: bool,
    done: Signal,
}

impl FsReader {
    fn check(&self) -> io::Result<()> {
        if self.closed {
            return Err(VolumeError::ReaderClosed.into_io());
        }
        if self.file.volume.finalized.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized.into_io());
        }
        Ok(())
    }

    fn extent(&self) -> u64 {
        match &self.txn {
            Some(t) => t.state.lock().unwrap().written,
            None => self.fd.metadata().map(|m| m.len()).unwrap_or(0),
        }
    }
}

impl Read for FsReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.check()?;
        if buf.is_empty() {
            return Ok(0);
        }
        let Some(txn) = self.txn.clone() else {
            let n = self.fd.read_at(buf, self.pos)?;
            self.pos += n as u64;
            return Ok(n);
        };
        let mut st = txn.state.lock().unwrap();
        loop {
            self.check()?;
            match st.status {
                TxnStatus::Aborted => return Err(VolumeError::WriteAborted.into_io()),
                _ if self.pos < st.written => {
                    let avail = (st.written - self.pos).min(buf.len() as u64) as usize;
                    drop(st);
                    let n = self.fd.read_at(&mut buf[..avail], self.pos)?;
                    self.pos += n as u64;
                    return Ok(n);
                }
                TxnStatus::Committed => return Ok(0),
                TxnStatus::Writing => st = txn.cond.wait(st).unwrap(),
            }
        }
    }
}

impl Seek for FsReader {
    fn seek(&mut self, pos: SeekFrom) -> io::Result<u64> {
        if self.closed {
            return Err(VolumeError::ReaderClosed.into_io());
        }
        self.pos = super::resolve_seek(pos, self.pos, self.extent())?;
        Ok(self.pos)
    }
}

impl FileReader for FsReader {
    fn size(&self) -> u64 {
        self.extent()
    }

    fn mod_time(&self) -> SystemTime {
        self.fd
            .metadata()
            .and_then(|m| m.modified())
            .unwrap_or(SystemTime::UNIX_EPOCH)
    }

    fn write_done(&self) -> Signal {
        self.done.clone()
    }

    fn in_place(&self) -> bool {
        self.in_place
    }

    fn close(&mut self) -> Result<()> {
        if self.closed {
            return Err(VolumeError::ReaderClosed);
        }
        self.closed = true;
        self.file.readers.fetch_sub(1, Ordering::SeqCst);
        Ok(())
    }
}

impl Drop for FsReader {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.close();
        }
    }
}
