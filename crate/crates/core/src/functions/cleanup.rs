//! Deletes files matching glob patterns once they reach a maximum age.
//!
//! The event loop appends committed files to a list kept in commit order.
//! A timer thread sleeps until the head entry expires, then deletes entries
//! from the head until it reaches one that is not old enough yet.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::config::CleanupOptions;
use crate::event::{Event, EventStream, FileEventKind, FileRef};
use crate::glob::Glob;
use crate::volume::{Volume, VolumeError, VolumePath};

use super::{event_loop, join_until, FunctionCtx, FunctionError};

/// Sleep time of the timer when the list is empty.
pub const IDLE_INTERVAL: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct CleanupEntry {
    pub path: VolumePath,
    pub committed_at: Instant,
}

#[derive(Debug, Clone, Default)]
pub struct CleanupStats {
    /// Wake-ups of the timer that found the list empty.
    pub idle_wakeups: Vec<Instant>,
    /// Deleted paths with the time of deletion.
    pub deletions: Vec<(VolumePath, Instant)>,
}

#[derive(Default)]
struct Queue {
    entries: VecDeque<CleanupEntry>,
    stopped: bool,
    stats: CleanupStats,
}

struct Shared {
    queue: Mutex<Queue>,
    cond: Condvar,
}

pub struct Cleanup {
    pub(crate) name: String,
    handle: JoinHandle<()>,
    timer: JoinHandle<()>,
    shared: Arc<Shared>,
}

fn delete_everywhere(path: &VolumePath, volumes: &[Arc<dyn Volume>], events: &EventStream, fn_name: &str) {
    for v in volumes {
        match v.delete(path) {
            Ok(()) => crate::apps::emit(
                events,
                Event::File { file: FileRef::new(v.clone(), path.clone()), kind: FileEventKind::Deleted },
            ),
            Err(VolumeError::NotFound(_)) => {}
            Err(e) => tracing::warn!(function = %fn_name, volume = v.name(), %path, error = %e, "delete failed"),
        }
    }
}

fn timer_loop(shared: &Shared, max_age: Duration, idle: Duration, volumes: &[Arc<dyn Volume>], events: &EventStream, fn_name: &str) {
    let mut q = shared.queue.lock().unwrap();
    loop {
        if q.stopped {
            return;
        }
        let now = Instant::now();
        let Some(head) = q.entries.front() else {
            q = shared.cond.wait_timeout(q, idle).unwrap().0;
            if q.entries.is_empty() && !q.stopped {
                q.stats.idle_wakeups.push(Instant::now());
            }
            continue;
        };
        let due = head.committed_at + max_age;
        if due > now {
            q = shared.cond.wait_timeout(q, due - now).unwrap().0;
            continue;
        }
        let entry = q.entries.pop_front().expect("head exists");
        drop(q);
        delete_everywhere(&entry.path, volumes, events, fn_name);
        q = shared.queue.lock().unwrap();
        q.stats.deletions.push((entry.path, Instant::now()));
    }
}

impl Cleanup {
    pub fn spawn(
        name: String,
        ctx: FunctionCtx,
        opts: CleanupOptions,
        volumes: Vec<Arc<dyn Volume>>,
    ) -> Result<Self, FunctionError> {
        Self::spawn_with_idle(name, ctx, opts, volumes, IDLE_INTERVAL)
    }

    /// Like [`Cleanup::spawn`] with a custom empty-list sleep time.
    pub fn spawn_with_idle(
        name: String,
        ctx: FunctionCtx,
        opts: CleanupOptions,
        volumes: Vec<Arc<dyn Volume>>,
        idle: Duration,
    ) -> Result<Self, FunctionError> {
        let patterns = opts
            .patterns
            .iter()
            .map(|p| Glob::path(p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| FunctionError::Options(e.to_string()))?;
        let shared = Arc::new(Shared { queue: Mutex::default(), cond: Condvar::new() });
        let sub = ctx.events.subscribe()?;

        let timer = {
            let shared = shared.clone();
            let events = ctx.events.clone();
            let fn_name = name.clone();
            let max_age = opts.max_age.0;
            ctx.tracker.spawn(&format!("fn-{name}-timer"), move || {
                timer_loop(&shared, max_age, idle, &volumes, &events, &fn_name)
            })?
        };

        let s = shared.clone();
        let handle = ctx.tracker.spawn(&format!("fn-{name}"), move || {
            event_loop(sub, &ctx.cancel, |ev| {
                let Event::File { file, kind: FileEventKind::Committed } = ev else { return };
                if !patterns.iter().any(|g| g.is_match(file.path.as_str())) {
                    return;
                }
                let mut q = s.queue.lock().unwrap();
                // A recommitted file restarts its age.
                q.entries.retain(|e| e.path != file.path);
                let was_empty = q.entries.is_empty();
                q.entries.push_back(CleanupEntry { path: file.path, committed_at: Instant::now() });
                if was_empty {
                    s.cond.notify_all();
                }
            });
            s.queue.lock().unwrap().stopped = true;
            s.cond.notify_all();
        });
        let handle = match handle {
            Ok(h) => h,
            Err(e) => {
                shared.queue.lock().unwrap().stopped = true;
                shared.cond.notify_all();
                return Err(e.into());
            }
        };
        Ok(Self { name, handle, timer, shared })
    }

    pub fn stats(&self) -> CleanupStats {
        self.shared.queue.lock().unwrap().stats.clone()
    }

    pub fn pending(&self) -> Vec<CleanupEntry> {
        self.shared.queue.lock().unwrap().entries.iter().cloned().collect()
    }

    pub fn join(self, budget: Duration) -> bool {
        let deadline = Instant::now() + budget;
        let ok = join_until(self.handle, deadline);
        self.shared.queue.lock().unwrap().stopped = true;
        self.shared.cond.notify_all();
        ok & join_until(self.timer, deadline)
    }
}
