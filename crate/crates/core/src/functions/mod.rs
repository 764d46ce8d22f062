//! Functions: event loops bound to one application's event stream.
//!
//! Every function subscribes when it is spawned, runs its loop on its own
//! thread and unsubscribes when the loop ends. Cancelling the context token
//! ends the loop without waiting for another event.

pub mod cleanup;
pub mod cloud_event;
pub mod copy;
pub mod manifest;

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::select;

use crate::config::{
    typed_options, CleanupOptions, CloudEventOptions, CopyOptions, FunctionCfg, FunctionKind, ManifestOptions,
};
use crate::event::{Event, EventStream, Subscription};
use crate::lifecycle::{CancelToken, TaskTracker};
use crate::volume::{UnknownVolume, Volume, VolumeRegistry};

pub use cleanup::{Cleanup, CleanupStats};
pub use cloud_event::{cloud_event_json, CloudEvent};
pub use copy::{Copy, CopyStats};
pub use manifest::{Manifest, ManifestModel};

#[derive(Debug, thiserror::Error)]
pub enum FunctionError {
    #[error("unknown function type {0:?}")]
    UnknownType(String),
    #[error("invalid options: {0}")]
    Options(String),
    #[error(transparent)]
    Volume(#[from] UnknownVolume),
    #[error("function needs a volume but the app has none")]
    NoVolume,
    #[error("event stream: {0}")]
    Events(#[from] crate::event::EventError),
    #[error("spawning thread: {0}")]
    Spawn(#[from] std::io::Error),
}

/// What a function gets from the application it is bound to.
#[derive(Clone)]
pub struct FunctionCtx {
    pub app: String,
    pub events: EventStream,
    pub volumes: Arc<VolumeRegistry>,
    /// Volumes the app writes to, in configuration order.
    pub app_volumes: Vec<String>,
    pub cancel: CancelToken,
    pub tracker: TaskTracker,
}

impl FunctionCtx {
    fn app_volume(&self, name: Option<&str>) -> Result<Arc<dyn Volume>, FunctionError> {
        match name.or(self.app_volumes.first().map(String::as_str)) {
            Some(n) => Ok(self.volumes.get(n)?),
            None => Err(FunctionError::NoVolume),
        }
    }
}

/// A running function.
pub enum RunningFunction {
    Copy(Copy),
    Manifest(Manifest),
    CloudEvent(CloudEvent),
    Cleanup(Cleanup),
}

impl RunningFunction {
    pub fn name(&self) -> &str {
        match self {
            RunningFunction::Copy(f) => &f.name,
            RunningFunction::Manifest(f) => &f.name,
            RunningFunction::CloudEvent(f) => &f.name,
            RunningFunction::Cleanup(f) => &f.name,
        }
    }

    /// Waits for the function to finish after its token was cancelled.
    /// Returns false when work was still running at the deadline.
    pub fn join(self, budget: Duration) -> bool {
        match self {
            RunningFunction::Copy(f) => f.join(budget),
            RunningFunction::Manifest(f) => join_until(f.handle, Instant::now() + budget),
            RunningFunction::CloudEvent(f) => join_until(f.handle, Instant::now() + budget),
            RunningFunction::Cleanup(f) => f.join(budget),
        }
    }
}

/// Builds and starts the function described by `cfg`.
pub fn spawn_function(cfg: &FunctionCfg, ctx: FunctionCtx) -> Result<RunningFunction, FunctionError> {
    let kind = cfg.kind().ok_or_else(|| FunctionError::UnknownType(cfg.type_name.clone()))?;
    let opts = &cfg.options;
    let name = cfg.name.clone();
    Ok(match kind {
        FunctionKind::Copy => {
            let o: CopyOptions = typed_options(opts).map_err(FunctionError::Options)?;
            let target = ctx.volumes.get(&o.volume)?;
            RunningFunction::Copy(Copy::spawn(name, ctx, target)?)
        }
        FunctionKind::Manifest => {
            let o: ManifestOptions = typed_options(opts).map_err(FunctionError::Options)?;
            let out = ctx.app_volume(o.volume.as_deref())?;
            RunningFunction::Manifest(Manifest::spawn(name, ctx, out)?)
        }
        FunctionKind::CloudEvent => {
            let o: CloudEventOptions = typed_options(opts).map_err(FunctionError::Options)?;
            RunningFunction::CloudEvent(CloudEvent::spawn(name, ctx, o)?)
        }
        FunctionKind::Cleanup => {
            let o: CleanupOptions = typed_options(opts).map_err(FunctionError::Options)?;
            let volumes = match &o.volumes {
                Some(names) => ctx.volumes.resolve(names)?,
                None => ctx.volumes.resolve(&ctx.app_volumes)?,
            };
            RunningFunction::Cleanup(Cleanup::spawn(name, ctx, o, volumes)?)
        }
    })
}

/// Delivers events to `handle` until the token is cancelled or the stream
/// closes, then unsubscribes.
pub(crate) fn event_loop(sub: Subscription, cancel: &CancelToken, mut handle: impl FnMut(Event)) {
    let stop = cancel.receiver();
    loop {
        select! {
            recv(sub.receiver()) -> ev => match ev {
                Ok(ev) if !cancel.is_cancelled() => handle(ev),
                _ => break,
            },
            recv(stop) -> _ => break,
        }
    }
    let _ = sub.desub();
}

/// Joins a thread, giving up at `deadline`.
pub(crate) fn join_until(handle: JoinHandle<()>, deadline: Instant) -> bool {
    while !handle.is_finished() {
        if Instant::now() >= deadline {
            return false;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    handle.join().is_ok()
}
