//! In-memory volume.
//!
//! File content lives in chains of fixed-size blocks owned by a super-block.
//! A snapshot commit swaps the file's super-block; the previous one is kept
//! alive until its last reader closes and then its blocks go back to a pool
//! that is preferred over fresh allocations.

use std::collections::HashMap;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::SystemTime;

use super::{
    FileReader, FileWriter, Result, Volume, VolumeError, VolumeFile, VolumePath, WriterState,
};
use crate::lifecycle::Signal;

type Block = Box<[u8]>;

/// Block accounting snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemStats {
    pub block_size: usize,
    /// Blocks currently handed out (in chains or writer buffers).
    pub live_blocks: usize,
    /// Blocks waiting in the pool for reuse.
    pub pooled_blocks: usize,
    /// Allocations that could not be served from the pool.
    pub fresh_allocations: u64,
    /// Allocations served from the pool.
    pub reused_allocations: u64,
    /// Retired super-blocks still held by readers.
    pub pending_gc: usize,
}

struct Pool {
    free: Vec<Block>,
    live: usize,
    fresh: u64,
    reused: u64,
    closed: bool,
}

struct MemInner {
    block_size: usize,
    initialized: AtomicBool,
    finalized: AtomicBool,
    files: Mutex<HashMap<VolumePath, Arc<MemFile>>>,
    pool: Mutex<Pool>,
    pending_gc: Mutex<Vec<Arc<SuperBlock>>>,
    next_id: AtomicU64,
}

impl MemInner {
    fn allocate(&self) -> Block {
        let mut pool = self.pool.lock().unwrap();
        pool.live += 1;
        match pool.free.pop() {
            Some(b) => {
                pool.reused += 1;
                b
            }
            None => {
                pool.fresh += 1;
                drop(pool);
                vec![0u8; self.block_size].into_boxed_slice()
            }
        }
    }

    fn release(&self, blocks: impl IntoIterator<Item = Block>) {
        let mut pool = self.pool.lock().unwrap();
        for b in blocks {
            pool.live -= 1;
            if !pool.closed {
                pool.free.push(b);
            }
        }
    }

    /// Takes a super-block out of service; its chain is reclaimed now or
    /// when its last reader closes.
    fn retire(&self, sb: Arc<SuperBlock>) {
        let mut pending = self.pending_gc.lock().unwrap();
        sb.retired.store(true, Ordering::SeqCst);
        if sb.readers.load(Ordering::SeqCst) == 0 {
            self.reclaim(&sb);
        } else {
            pending.push(sb);
        }
    }

    fn reclaim(&self, sb: &SuperBlock) {
        let blocks = std::mem::take(&mut sb.data.lock().unwrap().blocks);
        self.release(blocks);
    }

    fn reader_closed(&self, sb: &Arc<SuperBlock>) {
        let mut pending = self.pending_gc.lock().unwrap();
        sb.readers.fetch_sub(1, Ordering::SeqCst);
        pending.retain(|p| {
            if p.readers.load(Ordering::SeqCst) == 0 {
                self.reclaim(p);
                false
            } else {
                true
            }
        });
    }

    fn new_super(&self, blocks: Vec<Block>, len: u64, status: SbStatus) -> Arc<SuperBlock> {
        Arc::new(SuperBlock {
            data: Mutex::new(SbData {
                blocks,
                len,
                mod_time: SystemTime::now(),
                status,
            }),
            cond: Condvar::new(),
            readers: AtomicUsize::new(0),
            retired: AtomicBool::new(false),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SbStatus {
    Complete,
    Writing,
    Aborted,
}

struct SuperBlock {
    data: Mutex<SbData>,
    cond: Condvar,
    readers: AtomicUsize,
    retired: AtomicBool,
}

struct SbData {
    blocks: Vec<Block>,
    len: u64,
    mod_time: SystemTime,
    status: SbStatus,
}

fn append(inner: &MemInner, blocks: &mut Vec<Block>, len: &mut u64, mut buf: &[u8]) {
    let bs = inner.block_size;
    while !buf.is_empty() {
        let offset = (*len % bs as u64) as usize;
        if offset == 0 && *len as usize >= blocks.len() * bs {
            blocks.push(inner.allocate());
        }
        let tail = blocks.last_mut().expect("tail block");
        let n = (bs - offset).min(buf.len());
        tail[offset..offset + n].copy_from_slice(&buf[..n]);
        *len += n as u64;
        buf = &buf[n..];
    }
}

fn copy_out(bs: usize, blocks: &[Block], len: u64, pos: u64, buf: &mut [u8]) -> usize {
    let mut done = 0;
    let mut pos = pos;
    while done < buf.len() && pos < len {
        let idx = (pos / bs as u64) as usize;
        let off = (pos % bs as u64) as usize;
        let avail = ((len - pos) as usize).min(bs - off).min(buf.len() - done);
        buf[done..done + avail].copy_from_slice(&blocks[idx][off..off + avail]);
        done += avail;
        pos += avail as u64;
    }
    done
}

#[derive(Clone)]
struct WriterSlot {
    id: u64,
    in_place: bool,
    done: Signal,
    forced: Arc<AtomicBool>,
    sb: Option<Arc<SuperBlock>>,
}

struct FileState {
    current: Arc<SuperBlock>,
    writer: Option<WriterSlot>,
    deleted: bool,
}

struct MemFile {
    me: Weak<MemFile>,
    path: VolumePath,
    volume: Arc<MemInner>,
    state: Mutex<FileState>,
    readers: AtomicUsize,
}

pub struct MemVolume {
    name: String,
    inner: Arc<MemInner>,
}

impl MemVolume {
    /// # Panics
    /// If `block_size` is zero.
    pub fn new(name: impl Into<String>, block_size: usize) -> Self {
        assert!(block_size > 0, "block size must be positive");
        Self {
            name: name.into(),
            inner: Arc::new(MemInner {
                block_size,
                initialized: AtomicBool::new(false),
                finalized: AtomicBool::new(false),
                files: Mutex::new(HashMap::new()),
                pool: Mutex::new(Pool {
                    free: Vec::new(),
                    live: 0,
                    fresh: 0,
                    reused: 0,
                    closed: false,
                }),
                pending_gc: Mutex::new(Vec::new()),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    pub fn block_size(&self) -> usize {
        self.inner.block_size
    }

    pub fn stats(&self) -> MemStats {
        let pending_gc = self.inner.pending_gc.lock().unwrap().len();
        let pool = self.inner.pool.lock().unwrap();
        MemStats {
            block_size: self.inner.block_size,
            live_blocks: pool.live,
            pooled_blocks: pool.free.len(),
            fresh_allocations: pool.fresh,
            reused_allocations: pool.reused,
            pending_gc,
        }
    }

    /// Number of blocks in the committed chain of a file.
    pub fn chain_len(&self, path: &VolumePath) -> Option<usize> {
        let file = self.inner.files.lock().unwrap().get(path).cloned()?;
        let current = file.state.lock().unwrap().current.clone();
        let n = current.data.lock().unwrap().blocks.len();
        Some(n)
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
}

impl Volume for MemVolume {
    fn name(&self) -> &str {
        &self.name
    }

    fn init(&self) -> Result<()> {
        self.inner.initialized.store(true, Ordering::SeqCst);
        Ok(())
    }

    fn finalize(&self) -> Result<()> {
        self.inner.finalized.store(true, Ordering::SeqCst);
        let files: Vec<_> = self.inner.files.lock().unwrap().values().cloned().collect();
        for f in files {
            let state = f.state.lock().unwrap();
            if let Some(w) = &state.writer {
                w.forced.store(true, Ordering::SeqCst);
                if let Some(sb) = &w.sb {
                    sb.data.lock().unwrap().status = SbStatus::Aborted;
                    sb.cond.notify_all();
                }
                w.done.fire();
            }
            let current = state.current.clone();
            drop(state);
            let _g = current.data.lock().unwrap();
            current.cond.notify_all();
        }
        let mut pool = self.inner.pool.lock().unwrap();
        pool.closed = true;
        pool.free.clear();
        Ok(())
    }

    fn is_finalized(&self) -> bool {
        self.inner.finalized.load(Ordering::SeqCst)
    }

    fn open(&self, path: &VolumePath) -> Result<Arc<dyn VolumeFile>> {
        self.check()?;
        match self.inner.files.lock().unwrap().get(path) {
            Some(f) => Ok(f.clone()),
            None => Err(VolumeError::NotFound(path.to_string())),
        }
    }

    fn open_create(&self, path: &VolumePath) -> Result<Arc<dyn VolumeFile>> {
        self.check()?;
        let mut files = self.inner.files.lock().unwrap();
        if let Some(f) = files.get(path) {
            return Ok(f.clone());
        }
        let f = Arc::new_cyclic(|me| MemFile {
            me: me.clone(),
            path: path.clone(),
            volume: self.inner.clone(),
            state: Mutex::new(FileState {
                current: self.inner.new_super(Vec::new(), 0, SbStatus::Complete),
                writer: None,
                deleted: false,
            }),
            readers: AtomicUsize::new(0),
        });
        files.insert(path.clone(), f.clone());
        Ok(f)
    }

    fn delete(&self, path: &VolumePath) -> Result<()> {
        self.check()?;
        let mut files = self.inner.files.lock().unwrap();
        let file = files
            .get(path)
            .cloned()
            .ok_or_else(|| VolumeError::NotFound(path.to_string()))?;
        let mut state = file.state.lock().unwrap();
        if state.writer.is_some() {
            return Err(VolumeError::WriterExists(path.to_string()));
        }
        state.deleted = true;
        files.remove(path);
        let old = std::mem::replace(
            &mut state.current,
            self.inner.new_super(Vec::new(), 0, SbStatus::Complete),
        );
        drop(state);
        drop(files);
        self.inner.retire(old);
        Ok(())
    }
}

impl VolumeFile for MemFile {
    fn path(&self) -> &VolumePath {
        &self.path
    }

    fn new_writer(&self, in_place: bool) -> Result<Box<dyn FileWriter>> {
        if self.volume.finalized.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized);
        }
        let mut state = self.state.lock().unwrap();
        if state.deleted {
            return Err(VolumeError::NotFound(self.path.to_string()));
        }
        if state.writer.is_some() {
            return Err(VolumeError::WriterExists(self.path.to_string()));
        }
        let id = self.volume.next_id.fetch_add(1, Ordering::SeqCst);
        let (sb, previous) = if in_place {
            let sb = self.volume.new_super(Vec::new(), 0, SbStatus::Writing);
            let previous = std::mem::replace(&mut state.current, sb.clone());
            (Some(sb), Some(previous))
        } else {
            (None, None)
        };
        let slot = WriterSlot {
            id,
            in_place,
            done: Signal::new(),
            forced: Arc::new(AtomicBool::new(false)),
            sb: sb.clone(),
        };
        state.writer = Some(slot.clone());
        Ok(Box::new(MemWriter {
            file: self.me.upgrade().expect("live handle"),
            slot,
            closed: false,
            written: 0,
            chain: Vec::new(),
            previous,
        }))
    }

    fn new_reader(&self) -> Result<Box<dyn FileReader>> {
        if self.volume.finalized.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized);
        }
        let state = self.state.lock().unwrap();
        if state.deleted {
            return Err(VolumeError::NotFound(self.path.to_string()));
        }
        let sb = state.current.clone();
        sb.readers.fetch_add(1, Ordering::SeqCst);
        let done = state
            .writer
            .as_ref()
            .map(|w| w.done.clone())
            .unwrap_or_else(Signal::fired);
        let in_place = state.writer.as_ref().is_some_and(|w| w.in_place);
        drop(state);
        self.readers.fetch_add(1, Ordering::SeqCst);
        Ok(Box::new(MemReader {
            file: self.me.upgrade().expect("live handle"),
            sb,
            pos: 0,
            closed: false,
            done,
            in_place,
        }))
    }

    fn writer_state(&self) -> WriterState {
        match &self.state.lock().unwrap().writer {
            None => WriterState::None,
            Some(w) if w.in_place => WriterState::InPlace,
            Some(_) => WriterState::Snapshot,
        }
    }

    fn reader_count(&self) -> usize {
        self.readers.load(Ordering::SeqCst)
    }
}

struct MemWriter {
    file: Arc<MemFile>,
    slot: WriterSlot,
    closed: bool,
    written: u64,
    // Private chain of a snapshot writer.
    chain: Vec<Block>,
    // Content an in-place writer replaced, restored on abort.
    previous: Option<Arc<SuperBlock>>,
}

impl MemWriter {
    fn check_open(&self) -> Result<()> {
        if self.slot.forced.load(Ordering::SeqCst) {
            return Err(VolumeError::Finalized);
        }
        if self.closed {
            return Err(VolumeError::WriterClosed);
        }
        Ok(())
    }

    fn release_slot(&self, state: &mut FileState) {
        if state.writer.as_ref().is_some_and(|w| w.id == self.slot.id) {
            state.writer = None;
        }
    }

    fn finish(&mut self, commit: bool) -> Result<()> {
        if self.closed {
            return Err(VolumeError::WriterClosed);
        }
        self.closed = true;
        let volume = self.file.volume.clone();
        if self.slot.forced.load(Ordering::SeqCst) {
            volume.release(std::mem::take(&mut self.chain));
            self.abort_in_place(&volume);
            return Err(VolumeError::Finalized);
        }
        let result = match (self.slot.in_place, commit) {
            (false, true) => {
                let chain = std::mem::take(&mut self.chain);
                let sb = volume.new_super(chain, self.written, SbStatus::Complete);
                let mut state = self.file.state.lock().unwrap();
                let old = std::mem::replace(&mut state.current, sb);
                self.release_slot(&mut state);
                drop(state);
                volume.retire(old);
                Ok(())
            }
            (false, false) => {
                volume.release(std::mem::take(&mut self.chain));
                let mut state = self.file.state.lock().unwrap();
                self.release_slot(&mut state);
                Ok(())
            }
            (true, true) => {
                let sb = self.slot.sb.clone().expect("in-place super-block");
                {
                    let mut data = sb.data.lock().unwrap();
                    data.status = SbStatus::Complete;
                    data.mod_time = SystemTime::now();
                    sb.cond.notify_all();
                }
                let mut state = self.file.state.lock().unwrap();
                self.release_slot(&mut state);
                drop(state);
                if let Some(prev) = self.previous.take() {
                    volume.retire(prev);
                }
                Ok(())
            }
            (true, false) => {
                self.abort_in_place(&volume);
                Ok(())
            }
        };
        self.slot.done.fire();
        result
    }

    fn abort_in_place(&mut self, volume: &Arc<MemInner>) {
        let Some(sb) = self.slot.sb.clone() else {
            let mut state = self.file.state.lock().unwrap();
            self.release_slot(&mut state);
            return;
        };
        {
            let mut data = sb.data.lock().unwrap();
            data.status = SbStatus::Aborted;
            sb.cond.notify_all();
        }
        let mut state = self.file.state.lock().unwrap();
        let mut unused_previous = None;
        if Arc::ptr_eq(&state.current, &sb) {
            if let Some(prev) = self.previous.take() {
                state.current = prev;
            }
        } else {
            unused_previous = self.previous.take();
        }
        self.release_slot(&mut state);
        drop(state);
        volume.retire(sb);
        if let Some(prev) = unused_previous {
            volume.retire(prev);
        }
    }
}

impl Write for MemWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.check_open().map_err(VolumeError::into_io)?;
        let volume = &self.file.volume;
        match &self.slot.sb {
            None => {
                let mut len = self.written;
                append(volume, &mut self.chain, &mut len, buf);
            }
            Some(sb) => {
                let mut data = sb.data.lock().unwrap();
                if data.status != SbStatus::Writing {
                    return Err(VolumeError::Finalized.into_io());
                }
                let SbData { blocks, len, .. } = &mut *data;
                append(volume, blocks, len, buf);
                sb.cond.notify_all();
            }
        }
        self.written += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl FileWriter for MemWriter {
    fn in_place(&self) -> bool {
        self.slot.in_place
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

impl Drop for MemWriter {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.finish(false);
        }
    }
}

struct MemReader {
    file: Arc<MemFile>,
    sb: Arc<SuperBlock>,
    pos: u64,
    closed: bool,
    done: Signal,
    in_place: bool,
}

impl Read for MemReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.closed {
            return Err(VolumeError::ReaderClosed.into_io());
        }
        if buf.is_empty() {
            return Ok(0);
        }
        let volume = &self.file.volume;
        let mut data = self.sb.data.lock().unwrap();
        loop {
            if volume.finalized.load(Ordering::SeqCst) {
                return Err(VolumeError::Finalized.into_io());
            }
            if data.status == SbStatus::Aborted {
                return Err(VolumeError::WriteAborted.into_io());
            }
            if self.pos < data.len {
                let n = copy_out(volume.block_size, &data.blocks, data.len, self.pos, buf);
                self.pos += n as u64;
                return Ok(n);
            }
            if data.status == SbStatus::Complete {
                return Ok(0);
            }
            data = self.sb.cond.wait(data).unwrap();
        }
    }
}

impl Seek for MemReader {
    fn seek(&mut self, pos: SeekFrom) -> io::Result<u64> {
        if self.closed {
            return Err(VolumeError::ReaderClosed.into_io());
        }
        let size = self.sb.data.lock().unwrap().len;
        self.pos = super::resolve_seek(pos, self.pos, size)?;
        Ok(self.pos)
    }
}

impl FileReader for MemReader {
    fn size(&self) -> u64 {
        self.sb.data.lock().unwrap().len
    }

    fn mod_time(&self) -> SystemTime {
        self.sb.data.lock().unwrap().mod_time
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
        self.file.volume.reader_closed(&self.sb);
        Ok(())
    }
}

impl Drop for MemReader {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.close();
        }
    }
}
