//! Cancellation, completion signals and thread accounting.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};

struct TokenInner {
    // Keeps intermediate tokens alive so cancellation reaches descendants
    // even after every handle to the intermediate token is gone.
    _parent: Option<Arc<TokenInner>>,
    cancelled: AtomicBool,
    lock: Mutex<TokenState>,
    cond: Condvar,
}

#[derive(Default)]
struct TokenState {
    children: Vec<Weak<TokenInner>>,
    // Dropped on cancel so that receivers observe disconnection.
    senders: Vec<Sender<()>>,
}

/// Hierarchical cancellation signal. Cancelling a token cancels every
/// token derived from it with [`CancelToken::child`].
#[derive(Clone)]
pub struct CancelToken {
    inner: Arc<TokenInner>,
}

impl Default for CancelToken {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for CancelToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CancelToken")
            .field("cancelled", &self.is_cancelled())
            .finish()
    }
}

impl CancelToken {
    pub fn new() -> Self {
        Self::with_parent(None)
    }

    fn with_parent(parent: Option<Arc<TokenInner>>) -> Self {
        Self {
            inner: Arc::new(TokenInner {
                _parent: parent,
                cancelled: AtomicBool::new(false),
                lock: Mutex::new(TokenState::default()),
                cond: Condvar::new(),
            }),
        }
    }

    /// Derives a token that is cancelled together with `self` but can also
    /// be cancelled on its own.
    pub fn child(&self) -> CancelToken {
        let child = CancelToken::with_parent(Some(self.inner.clone()));
        let mut state = self.inner.lock.lock().unwrap();
        if self.is_cancelled() {
            drop(state);
            child.cancel();
        } else {
            state.children.retain(|w| w.strong_count() > 0);
            state.children.push(Arc::downgrade(&child.inner));
        }
        child
    }

    pub fn cancel(&self) {
        cancel_inner(&self.inner);
    }

    pub fn is_cancelled(&self) -> bool {
        self.inner.cancelled.load(Ordering::SeqCst)
    }

    /// Blocks until cancelled.
    pub fn wait(&self) {
        let mut state = self.inner.lock.lock().unwrap();
        while !self.is_cancelled() {
            state = self.inner.cond.wait(state).unwrap();
        }
    }

    /// Blocks for at most `timeout`; returns whether the token is cancelled.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut state = self.inner.lock.lock().unwrap();
        while !self.is_cancelled() {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            state = self
                .inner
                .cond
                .wait_timeout(state, deadline - now)
                .unwrap()
                .0;
        }
        true
    }

    /// A receiver that never yields a value and disconnects on cancellation,
    /// for use in `crossbeam_channel::select!`.
    pub fn receiver(&self) -> Receiver<()> {
        let (tx, rx) = crossbeam_channel::bounded(0);
        let mut state = self.inner.lock.lock().unwrap();
        if !self.is_cancelled() {
            state.senders.push(tx);
        }
        rx
    }
}

fn cancel_inner(inner: &Arc<TokenInner>) {
    let children = {
        let mut state = inner.lock.lock().unwrap();
        if inner.cancelled.swap(true, Ordering::SeqCst) {
            return;
        }
        state.senders.clear();
        inner.cond.notify_all();
        std::mem::take(&mut state.children)
    };
    for child in children.iter().filter_map(Weak::upgrade) {
        cancel_inner(&child);
    }
}

/// One-shot, multi-consumer completion signal.
#[derive(Clone)]
pub struct Signal {
    inner: Arc<(Mutex<bool>, Condvar)>,
}

impl Default for Signal {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Signal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Signal")
            .field("fired", &self.is_fired())
            .finish()
    }
}

impl Signal {
    pub fn new() -> Self {
        Self {
            inner: Arc::new((Mutex::new(false), Condvar::new())),
        }
    }

    pub fn fired() -> Self {
        let s = Self::new();
        s.fire();
        s
    }

    pub fn fire(&self) {
        let mut fired = self.inner.0.lock().unwrap();
        *fired = true;
        self.inner.1.notify_all();
    }

    pub fn is_fired(&self) -> bool {
        *self.inner.0.lock().unwrap()
    }

    pub fn wait(&self) {
        let mut fired = self.inner.0.lock().unwrap();
        while !*fired {
            fired = self.inner.1.wait(fired).unwrap();
        }
    }

    /// Returns whether the signal fired within `timeout`.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let fired = self.inner.0.lock().unwrap();
        let (fired, _) = self
            .inner
            .1
            .wait_timeout_while(fired, timeout, |f| !*f)
            .unwrap();
        *fired
    }
}

/// Counts live threads spawned through it, so shutdown can prove that no
/// execution context outlived the system.
#[derive(Clone, Default)]
pub struct TaskTracker {
    inner: Arc<TrackerInner>,
}

#[derive(Default)]
struct TrackerInner {
    live: AtomicUsize,
    spawned: AtomicUsize,
    lock: Mutex<()>,
    cond: Condvar,
}

struct LiveGuard(Arc<TrackerInner>);

impl Drop for LiveGuard {
    fn drop(&mut self) {
        let _g = self.0.lock.lock().unwrap();
        self.0.live.fetch_sub(1, Ordering::SeqCst);
        self.0.cond.notify_all();
    }
}

impl TaskTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn spawn<F, T>(&self, name: &str, f: F) -> std::io::Result<JoinHandle<T>>
    where
        F: FnOnce() -> T + Send + 'static,
        T: Send + 'static,
    {
        self.inner.live.fetch_add(1, Ordering::SeqCst);
        self.inner.spawned.fetch_add(1, Ordering::SeqCst);
        let guard = LiveGuard(self.inner.clone());
        let result = std::thread::Builder::new()
            .name(name.to_string())
            .spawn(move || {
                let _guard = guard;
                f()
            });
        // On spawn failure the closure, and with it the guard, is dropped.
        result
    }

    pub fn live(&self) -> usize {
        self.inner.live.load(Ordering::SeqCst)
    }

    pub fn spawned(&self) -> usize {
        self.inner.spawned.load(Ordering::SeqCst)
    }

    /// Waits until no tracked thread is running; returns the live count
    /// left when the timeout expired (0 on success).
    pub fn wait_idle(&self, timeout: Duration) -> usize {
        let deadline = Instant::now() + timeout;
        let mut g = self.inner.lock.lock().unwrap();
        loop {
            let live = self.live();
            let now = Instant::now();
            if live == 0 || now >= deadline {
                return live;
            }
            g = self.inner.cond.wait_timeout(g, deadline - now).unwrap().0;
        }
    }
}
