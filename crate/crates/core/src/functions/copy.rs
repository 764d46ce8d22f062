//! Copies every committed file to a second volume.

use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::event::{Event, FileEventKind, FileRef};
use crate::volume::{Volume, VolumeError};

use super::{event_loop, join_until, FunctionCtx, FunctionError};

#[derive(Debug, Default)]
pub struct CopyStats {
    pub started: AtomicU64,
    pub completed: AtomicU64,
    pub failed: AtomicU64,
}

impl CopyStats {
    pub fn in_flight(&self) -> u64 {
        let done = self.completed.load(Ordering::SeqCst) + self.failed.load(Ordering::SeqCst);
        self.started.load(Ordering::SeqCst).saturating_sub(done)
    }
}

pub struct Copy {
    pub(crate) name: String,
    handle: JoinHandle<()>,
    copies: Arc<Mutex<Vec<JoinHandle<()>>>>,
    stats: Arc<CopyStats>,
}

fn copy_file(src: &FileRef, target: &dyn Volume) -> Result<u64, VolumeError> {
    let mut reader = src.volume.open(&src.path)?.new_reader()?;
    let mut writer = target.open_create(&src.path)?.new_writer(false)?;
    let copied = io::copy(&mut reader, &mut writer).and_then(|n| writer.flush().map(|_| n));
    match copied {
        Ok(n) => writer.commit().map(|_| n),
        Err(e) => {
            let _ = writer.abort();
            Err(VolumeError::io(e))
        }
    }
}

impl Copy {
    pub fn spawn(name: String, ctx: FunctionCtx, target: Arc<dyn Volume>) -> Result<Self, FunctionError> {
        let sub = ctx.events.subscribe()?;
        let copies: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
        let stats = Arc::new(CopyStats::default());
        let (c, s, n) = (copies.clone(), stats.clone(), name.clone());
        let handle = ctx.tracker.clone().spawn(&format!("fn-{name}"), move || {
            event_loop(sub, &ctx.cancel, |ev| {
                let Event::File { file, kind: FileEventKind::Committed } = ev else { return };
                if file.volume.name() == target.name() {
                    return;
                }
                let target = target.clone();
                let stats = s.clone();
                let fn_name = n.clone();
                stats.started.fetch_add(1, Ordering::SeqCst);
                let spawned = ctx.tracker.spawn(&format!("fn-{n}-copy"), move || {
                    match copy_file(&file, &*target) {
                        Ok(bytes) => {
                            stats.completed.fetch_add(1, Ordering::SeqCst);
                            tracing::debug!(function = %fn_name, path = %file.path, bytes, "copied");
                        }
                        Err(e) => {
                            stats.failed.fetch_add(1, Ordering::SeqCst);
                            tracing::warn!(function = %fn_name, path = %file.path, error = %e, "copy failed");
                        }
                    }
                });
                match spawned {
                    Ok(h) => {
                        let mut list = c.lock().unwrap();
                        list.retain(|h| !h.is_finished());
                        list.push(h);
                    }
                    Err(e) => {
                        s.failed.fetch_add(1, Ordering::SeqCst);
                        tracing::error!(function = %n, error = %e, "cannot start copy");
                    }
                }
            });
        })?;
        Ok(Self { name, handle, copies, stats })
    }

    pub fn stats(&self) -> Arc<CopyStats> {
        self.stats.clone()
    }

    /// Waits for the loop and every in-flight copy.
    pub fn join(self, budget: Duration) -> bool {
        let deadline = Instant::now() + budget;
        let mut ok = join_until(self.handle, deadline);
        let copies = std::mem::take(&mut *self.copies.lock().unwrap());
        for h in copies {
            ok &= join_until(h, deadline);
        }
        if !ok {
            tracing::warn!(function = %self.name, in_flight = self.stats.in_flight(), "copies still running at deadline");
        }
        ok
    }
}
