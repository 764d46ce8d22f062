//! In-process publish/subscribe stream connecting applications to functions.
//!
//! A dedicated dispatcher thread fans each published event out to every
//! subscription in turn. Delivery is lossless: when a subscriber's queue is
//! full the dispatcher waits for it, which in turn holds up the publisher.

use std::fmt;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, select, Receiver, RecvTimeoutError, Sender, TryRecvError};

use crate::lifecycle::{CancelToken, TaskTracker};
use crate::media::{FragmentInfo, PresentationInfo, SwitchingSetInfo, TrackInfo};
use crate::volume::{Volume, VolumePath};

pub const DEFAULT_CAPACITY: usize = 32;

/// A file on a specific volume.
#[derive(Clone)]
pub struct FileRef {
    pub volume: Arc<dyn Volume>,
    pub path: VolumePath,
}

impl FileRef {
    pub fn new(volume: Arc<dyn Volume>, path: VolumePath) -> Self {
        Self { volume, path }
    }
}

impl fmt::Debug for FileRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.volume.name(), self.path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FileEventKind {
    Started,
    Committed,
    Aborted,
    Deleted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WriteKind {
    Started,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryKind {
    Begin,
    End,
}

#[derive(Debug, Clone)]
pub enum Event {
    File {
        file: FileRef,
        kind: FileEventKind,
    },
    InitSegment {
        file: FileRef,
        track: Arc<TrackInfo>,
        kind: WriteKind,
    },
    Fragment {
        file: FileRef,
        fragment: Arc<FragmentInfo>,
        kind: WriteKind,
    },
    Stream {
        presentation: Arc<PresentationInfo>,
        kind: BoundaryKind,
    },
    SwitchingSet {
        switching_set: Arc<SwitchingSetInfo>,
        kind: BoundaryKind,
    },
    Track {
        track: Arc<TrackInfo>,
        kind: BoundaryKind,
    },
}

impl Event {
    /// Event family name, e.g. `file` or `fragment`.
    pub fn family(&self) -> &'static str {
        match self {
            Event::File { .. } => "file",
            Event::InitSegment { .. } => "initSegment",
            Event::Fragment { .. } => "fragment",
            Event::Stream { .. } => "stream",
            Event::SwitchingSet { .. } => "switchingSet",
            Event::Track { .. } => "track",
        }
    }

    /// Lower-case kind name, e.g. `committed` or `begin`.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Event::File { kind, .. } => match kind {
                FileEventKind::Started => "started",
                FileEventKind::Committed => "committed",
                FileEventKind::Aborted => "aborted",
                FileEventKind::Deleted => "deleted",
            },
            Event::InitSegment { kind, .. } | Event::Fragment { kind, .. } => match kind {
                WriteKind::Started => "started",
                WriteKind::Committed => "committed",
                WriteKind::Aborted => "aborted",
            },
            Event::Stream { kind, .. }
            | Event::SwitchingSet { kind, .. }
            | Event::Track { kind, .. } => match kind {
                BoundaryKind::Begin => "begin",
                BoundaryKind::End => "end",
            },
        }
    }

    pub fn file(&self) -> Option<&FileRef> {
        match self {
            Event::File { file, .. }
            | Event::InitSegment { file, .. }
            | Event::Fragment { file, .. } => Some(file),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EventError {
    #[error("event stream already started")]
    AlreadyStarted,
    #[error("event stream not started")]
    NotStarted,
    #[error("event stream stopped")]
    Stopped,
    #[error("unknown subscription")]
    UnknownSubscription,
}

type Envelope = (Event, Sender<()>);

struct SubEntry {
    id: u64,
    tx: Sender<Event>,
}

#[derive(Default)]
struct State {
    started: bool,
    stopped: bool,
    next_id: u64,
    subs: Vec<SubEntry>,
    input: Option<Sender<Envelope>>,
    cancel: Option<CancelToken>,
    stop: Option<Receiver<()>>,
    handle: Option<JoinHandle<()>>,
}

struct Inner {
    name: String,
    state: Mutex<State>,
}

/// Cloneable handle to one event stream.
#[derive(Clone)]
pub struct EventStream {
    inner: Arc<Inner>,
}

impl fmt::Debug for EventStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventStream")
            .field("name", &self.inner.name)
            .finish()
    }
}

impl EventStream {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            inner: Arc::new(Inner {
                name: name.into(),
                state: Mutex::new(State::default()),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// Starts the dispatcher. Cancelling `parent` stops the stream.
    pub fn start(&self, parent: &CancelToken, tracker: &TaskTracker) -> Result<(), EventError> {
        let mut st = self.inner.state.lock().unwrap();
        if st.started {
            return Err(EventError::AlreadyStarted);
        }
        let cancel = parent.child();
        let (tx, rx) = bounded::<Envelope>(0);
        let inner = self.inner.clone();
        let stop = cancel.receiver();
        let handle = tracker
            .spawn(&format!("events-{}", self.inner.name), move || {
                dispatch(inner, rx, stop)
            })
            .map_err(|_| EventError::Stopped)?;
        st.started = true;
        st.input = Some(tx);
        st.stop = Some(cancel.receiver());
        st.cancel = Some(cancel);
        st.handle = Some(handle);
        Ok(())
    }

    /// Stops the dispatcher and closes all subscriptions.
    pub fn stop(&self) {
        let (cancel, handle) = {
            let mut st = self.inner.state.lock().unwrap();
            (st.cancel.take(), st.handle.take())
        };
        if let Some(c) = cancel {
            c.cancel();
        }
        if let Some(h) = handle {
            let _ = h.join();
        }
        close(&self.inner);
    }

    pub fn is_running(&self) -> bool {
        let st = self.inner.state.lock().unwrap();
        st.started && !st.stopped
    }

    /// Publishes an event and waits until every subscription has accepted it.
    pub fn publish(&self, event: Event) -> Result<(), EventError> {
        let (input, stop) = {
            let st = self.inner.state.lock().unwrap();
            if !st.started {
                return Err(EventError::NotStarted);
            }
            if st.stopped {
                return Err(EventError::Stopped);
            }
            match (&st.input, &st.stop) {
                (Some(i), Some(c)) => (i.clone(), c.clone()),
                _ => return Err(EventError::Stopped),
            }
        };
        let (ack_tx, ack_rx) = bounded(1);
        select! {
            send(input, (event, ack_tx)) -> r => r.map_err(|_| EventError::Stopped)?,
            recv(stop) -> _ => return Err(EventError::Stopped),
        }
        select! {
            recv(ack_rx) -> r => r.map_err(|_| EventError::Stopped),
            recv(stop) -> _ => Err(EventError::Stopped),
        }
    }

    pub fn subscribe(&self) -> Result<Subscription, EventError> {
        self.subscribe_buf(DEFAULT_CAPACITY)
    }

    /// Subscribes with a queue of `capacity` events; 0 gives rendezvous
    /// delivery.
    pub fn subscribe_buf(&self, capacity: usize) -> Result<Subscription, EventError> {
        let mut st = self.inner.state.lock().unwrap();
        if !st.started {
            return Err(EventError::NotStarted);
        }
        if st.stopped {
            return Err(EventError::Stopped);
        }
        let (tx, rx) = bounded(capacity);
        let id = st.next_id;
        st.next_id += 1;
        st.subs.push(SubEntry { id, tx });
        Ok(Subscription {
            id,
            capacity,
            rx: Some(rx),
            stream: Arc::downgrade(&self.inner),
        })
    }

    pub fn subscriber_count(&self) -> usize {
        self.inner.state.lock().unwrap().subs.len()
    }
}

fn close(inner: &Inner) {
    let mut st = inner.state.lock().unwrap();
    st.stopped = true;
    st.input = None;
    st.subs.clear();
}

fn remove(inner: &Inner, id: u64) -> bool {
    let mut st = inner.state.lock().unwrap();
    let before = st.subs.len();
    st.subs.retain(|s| s.id != id);
    st.subs.len() != before
}

fn dispatch(inner: Arc<Inner>, input: Receiver<Envelope>, stop: Receiver<()>) {
    loop {
        let (event, ack) = select! {
            recv(input) -> r => match r {
                Ok(env) => env,
                Err(_) => break,
            },
            recv(stop) -> _ => break,
        };
        let targets: Vec<(u64, Sender<Event>)> = {
            let st = inner.state.lock().unwrap();
            st.subs.iter().map(|s| (s.id, s.tx.clone())).collect()
        };
        for (id, tx) in targets {
            select! {
                send(tx, event.clone()) -> r => {
                    if r.is_err() {
                        remove(&inner, id);
                    }
                }
                recv(stop) -> _ => {
                    close(&inner);
                    return;
                }
            }
        }
        let _ = ack.send(());
    }
    close(&inner);
    tracing::debug!(stream = %inner.name, "event stream stopped");
}

/// Receiving end of a subscription. Dropping it unsubscribes.
pub struct Subscription {
    id: u64,
    capacity: usize,
    rx: Option<Receiver<Event>>,
    stream: std::sync::Weak<Inner>,
}

impl fmt::Debug for Subscription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Subscription")
            .field("id", &self.id)
            .field("capacity", &self.capacity)
            .finish()
    }
}

impl Subscription {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn rx(&self) -> &Receiver<Event> {
        self.rx.as_ref().expect("receiver present until drop")
    }

    /// The underlying receiver, for use with `select!`. It disconnects when
    /// the stream stops.
    pub fn receiver(&self) -> &Receiver<Event> {
        self.rx()
    }

    /// Blocks for the next event; `None` once the stream has stopped.
    pub fn recv(&self) -> Option<Event> {
        self.rx().recv().ok()
    }

    pub fn try_recv(&self) -> Result<Option<Event>, EventError> {
        match self.rx().try_recv() {
            Ok(e) => Ok(Some(e)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(EventError::Stopped),
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Event>, EventError> {
        match self.rx().recv_timeout(timeout) {
            Ok(e) => Ok(Some(e)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(EventError::Stopped),
        }
    }

    /// Unsubscribes. No event is delivered to this subscription afterwards.
    pub fn desub(mut self) -> Result<(), EventError> {
        self.detach()
    }

    fn detach(&mut self) -> Result<(), EventError> {
        // Dropping the receiver first makes any in-flight send fail.
        self.rx = None;
        match self.stream.upgrade() {
            Some(inner) if remove(&inner, self.id) => Ok(()),
            _ => Err(EventError::UnknownSubscription),
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if self.rx.is_some() {
            let _ = self.detach();
        }
    }
}
