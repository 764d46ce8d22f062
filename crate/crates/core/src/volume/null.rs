//! Volume that stores nothing: reads hit EOF immediately and writes are
//! discarded. Single-writer exclusivity is still enforced.

use std::collections::{HashMap, HashSet};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::SystemTime;

use super::{
    FileReader, FileWriter, Result, Volume, VolumeError, VolumeFile, VolumePath, WriterState,
};
use crate::lifecycle::Signal;

pub struct NullVolume {
    name: String,
    state: Arc<NullState>,
}

struct NullState {
    init_time: Mutex<Option<SystemTime>>,
    finalized: AtomicBool,
    files: Mutex<HashMap<VolumePath, Weak<NullFile>>>,
    // Deleted paths report not-found until they are created again.
    deleted: Mutex<HashSet<VolumePath>>,
}

struct NullFile {
    me: Weak<NullFile>,
    path: VolumePath,
    volume: Arc<NullState>,
    writer: Mutex<Option<ActiveWriter>>,
    readers: AtomicUsize,
}

#[derive(Clone)]
struct ActiveWriter {
    in_place: bool,
    done: Signal,
    closed: Arc<AtomicBool>,
}

impl NullVolume {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            state: Arc::new(NullState {
                init_time: Mutex::new(None),
                finalized: AtomicBool::new(false),
                files: Mutex::new(HashMap::new()),
                deleted: Mutex::new(HashSet::new()),
            }),
        }
    }

    fn check(&self) -> Result<()> {
        if self.state.finalized.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized);
        }
        if self.state.init_time.lock().unwrap().is_none() {
            return Err(VolumeError::NotInitialized);
        }
        Ok(())
    }

    fn file(&self, path: &VolumePath) -> Arc<NullFile> {
        let mut files = self.state.files.lock().unwrap();
        if let Some(f) = files.get(path).and_then(Weak::upgrade) {
            return f;
        }
        files.retain(|_, w| w.strong_count() > 0);
        let f = Arc::new_cyclic(|me| NullFile {
            me: me.clone(),
            path: path.clone(),
            volume: self.state.clone(),
            writer: Mutex::new(None),
            readers: AtomicUsize::new(0),
        });
        files.insert(path.clone(), Arc::downgrade(&f));
        f
    }
}

impl Volume for NullVolume {
    fn name(&self) -> &str {
        &self.name
    }

    fn init(&self) -> Result<()> {
        let mut t = self.state.init_time.lock().unwrap();
        if t.is_none() {
            *t = Some(SystemTime::now());
        }
        Ok(())
    }

    fn finalize(&self) -> Result<()> {
        self.state.finalized.store(true, Ordering::SeqCst);
        let files: Vec<_> = self
            .state
            .files
            .lock()
            .unwrap()
            .values()
            .filter_map(Weak::upgrade)
            .collect();
        for f in files {
            if let Some(w) = f.writer.lock().unwrap().take() {
                w.closed.store(true, Ordering::SeqCst);
                w.done.fire();
            }
        }
        Ok(())
    }

    fn is_finalized(&self) -> bool {
        self.state.finalized.load(Ordering::SeqCst)
    }

    fn open(&self, path: &VolumePath) -> Result<Arc<dyn VolumeFile>> {
        self.check()?;
        if self.state.deleted.lock().unwrap().contains(path) {
            return Err(VolumeError::NotFound(path.to_string()));
        }
        Ok(self.file(path))
    }

    fn open_create(&self, path: &VolumePath) -> Result<Arc<dyn VolumeFile>> {
        self.check()?;
        self.state.deleted.lock().unwrap().remove(path);
        Ok(self.file(path))
    }

    fn delete(&self, path: &VolumePath) -> Result<()> {
        self.check()?;
        let file = self
            .state
            .files
            .lock()
            .unwrap()
            .get(path)
            .and_then(Weak::upgrade);
        if let Some(f) = file {
            if f.writer.lock().unwrap().is_some() {
                return Err(VolumeError::WriterExists(path.to_string()));
            }
        }
        if !self.state.deleted.lock().unwrap().insert(path.clone()) {
            return Err(VolumeError::NotFound(path.to_string()));
        }
        Ok(())
    }
}

impl VolumeFile for NullFile {
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
        let active = ActiveWriter {
            in_place,
            done: Signal::new(),
            closed: Arc::new(AtomicBool::new(false)),
        };
        *slot = Some(active.clone());
        Ok(Box::new(NullWriter {
            file: self.self_arc(),
            active,
            written: 0,
        }))
    }

    fn new_reader(&self) -> Result<Box<dyn FileReader>> {
        if self.volume.finalized.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized);
        }
        let writer = self.writer.lock().unwrap().clone();
        self.readers.fetch_add(1, Ordering::SeqCst);
        Ok(Box::new(NullReader {
            file: self.self_arc(),
            mod_time: self
                .volume
                .init_time
                .lock()
                .unwrap()
                .unwrap_or(SystemTime::UNIX_EPOCH),
            done: writer
                .as_ref()
                .map(|w| w.done.clone())
                .unwrap_or_else(Signal::fired),
            in_place: writer.is_some_and(|w| w.in_place),
            closed: false,
        }))
    }

    fn writer_state(&self) -> WriterState {
        match &*self.writer.lock().unwrap() {
            None => WriterState::None,
            Some(w) if w.in_place => WriterState::InPlace,
            Some(_) => WriterState::Snapshot,
        }
    }

    fn reader_count(&self) -> usize {
        self.readers.load(Ordering::SeqCst)
    }
}

impl NullFile {
    fn self_arc(&self) -> Arc<NullFile> {
        self.me.upgrade().expect("called through a live handle")
    }
}

struct NullWriter {
    file: Arc<NullFile>,
    active: ActiveWriter,
    written: u64,
}

impl NullWriter {
    fn close(&mut self) -> Result<()> {
        if self.active.closed.swap(true, Ordering::SeqCst) {
            return Err(VolumeError::WriterClosed);
        }
        let mut slot = self.file.writer.lock().unwrap();
        if slot
            .as_ref()
            .is_some_and(|w| Arc::ptr_eq(&w.closed, &self.active.closed))
        {
            *slot = None;
        }
        self.active.done.fire();
        Ok(())
    }
}

impl Write for NullWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.active.closed.load(Ordering::SeqCst) {
            return Err(VolumeError::WriterClosed.into_io());
        }
        self.written += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl FileWriter for NullWriter {
    fn in_place(&self) -> bool {
        self.active.in_place
    }

    fn bytes_written(&self) -> u64 {
        self.written
    }

    fn commit(&mut self) -> Result<()> {
        self.close()
    }

    fn abort(&mut self) -> Result<()> {
        self.close()
    }
}

impl Drop for NullWriter {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

struct NullReader {
    file: Arc<NullFile>,
    mod_time: SystemTime,
    done: Signal,
    in_place: bool,
    closed: bool,
}

impl Read for NullReader {
    fn read(&mut self, _buf: &mut [u8]) -> io::Result<usize> {
        if self.closed {
            return Err(VolumeError::ReaderClosed.into_io());
        }
        if self.file.volume.finalized.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized.into_io());
        }
        Ok(0)
    }
}

impl Seek for NullReader {
    fn seek(&mut self, pos: SeekFrom) -> io::Result<u64> {
        if self.closed {
            return Err(VolumeError::ReaderClosed.into_io());
        }
        super::resolve_seek(pos, 0, 0)
    }
}

impl FileReader for NullReader {
    fn size(&self) -> u64 {
        0
    }

    fn mod_time(&self) -> SystemTime {
        self.mod_time
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

impl Drop for NullReader {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.close();
        }
    }
}
