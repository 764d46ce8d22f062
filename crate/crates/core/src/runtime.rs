//! Assembles and runs a system from a configuration.
//!
//! Startup order is volumes, event streams, apps, functions, servers.
//! Shutdown runs in reverse: servers stop accepting and drain, apps stop,
//! functions finish their work, streams close and volumes are finalized
//! last.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::unbounded;

use crate::apps::{CmafIngest, DashHlsIngest, GenericServe};
use crate::config::{
    parse_address, typed_options, validate_config, AppCfg, AppKind, CmafIngestOptions, Config, DashAndHlsIngestOptions,
    FsVolumeOptions, GenericServeOptions, MemVolumeOptions, NullVolumeOptions, Violation, VolumeCfg, VolumeKind,
};
use crate::event::EventStream;
use crate::functions::{spawn_function, FunctionCtx, FunctionError, RunningFunction};
use crate::http::{App, AppRoute, HttpServer, RouteTable, ServerOptions, DRAIN_BUDGET};
use crate::lifecycle::{CancelToken, TaskTracker};
use crate::volume::{FsVolume, MemVolume, NullVolume, Volume, VolumeRegistry};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("invalid configuration: {}", join_violations(.0))]
    Config(Vec<Violation>),
    #[error("volume {name}: {reason}")]
    Volume { name: String, reason: String },
    #[error("app {name}: {reason}")]
    App { name: String, reason: String },
    #[error("function {name}: {source}")]
    Function { name: String, source: FunctionError },
    #[error("server {name}: {reason}")]
    Server { name: String, reason: String },
}

impl RuntimeError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RuntimeError::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Failure of a controller group.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GroupError {
    #[error("{name} failed: {error}")]
    Failed { name: String, error: String },
    #[error("cancelled")]
    Cancelled,
}

/// A named unit of work that runs until its token is cancelled.
pub type Controller = Box<dyn FnOnce(&CancelToken) -> Result<(), String> + Send>;

/// Runs controllers concurrently. The first failure cancels the others and
/// is returned once all have ended. When every controller ends cleanly the
/// result is success, or `Cancelled` if `cancel` fired.
pub fn group_run(controllers: Vec<(String, Controller)>, cancel: &CancelToken, tracker: &TaskTracker) -> Result<(), GroupError> {
    let group = cancel.child();
    let (tx, rx) = unbounded();
    let mut running = 0;
    let mut first: Option<GroupError> = None;
    for (name, run) in controllers {
        let token = group.child();
        let tx = tx.clone();
        let n = name.clone();
        match tracker.spawn(&format!("ctl-{name}"), move || {
            let _ = tx.send((n, run(&token)));
        }) {
            Ok(_) => running += 1,
            Err(e) => {
                group.cancel();
                first.get_or_insert(GroupError::Failed { name, error: e.to_string() });
            }
        }
    }
    drop(tx);
    for _ in 0..running {
        let Ok((name, result)) = rx.recv() else { break };
        if let Err(error) = result {
            tracing::error!(controller = %name, %error, "controller failed");
            group.cancel();
            first.get_or_insert(GroupError::Failed { name, error });
        }
    }
    match first {
        Some(e) => Err(e),
        None if cancel.is_cancelled() => Err(GroupError::Cancelled),
        None => Ok(()),
    }
}

fn volume_err(cfg: &VolumeCfg, reason: impl ToString) -> RuntimeError {
    RuntimeError::Volume { name: cfg.name.clone(), reason: reason.to_string() }
}

fn app_err(cfg: &AppCfg, reason: impl ToString) -> RuntimeError {
    RuntimeError::App { name: cfg.name.clone(), reason: reason.to_string() }
}

/// Constructs a volume without initializing it.
pub fn build_volume(cfg: &VolumeCfg) -> Result<Arc<dyn Volume>, RuntimeError> {
    let kind = cfg.kind().ok_or_else(|| volume_err(cfg, format!("unknown type {:?}", cfg.type_name)))?;
    Ok(match kind {
        VolumeKind::Null => {
            let _: NullVolumeOptions = typed_options(&cfg.options).map_err(|e| volume_err(cfg, e))?;
            Arc::new(NullVolume::new(&cfg.name))
        }
        VolumeKind::Mem => {
            let o: MemVolumeOptions = typed_options(&cfg.options).map_err(|e| volume_err(cfg, e))?;
            Arc::new(MemVolume::new(&cfg.name, o.block_size))
        }
        VolumeKind::Fs => {
            let o: FsVolumeOptions = typed_options(&cfg.options).map_err(|e| volume_err(cfg, e))?;
            Arc::new(FsVolume::new(&cfg.name, o.root_path))
        }
    })
}

/// A running application with the handles the runtime and tests need.
pub struct AppHandle {
    pub name: String,
    pub kind: AppKind,
    pub app: Arc<dyn App>,
    pub events: EventStream,
    pub cmaf: Option<Arc<CmafIngest>>,
}

struct ServerHandle {
    name: String,
    addr: SocketAddr,
}

pub struct RunningSystem {
    root: CancelToken,
    servers_cancel: CancelToken,
    apps_cancel: CancelToken,
    functions_cancel: CancelToken,
    streams_cancel: CancelToken,
    tracker: TaskTracker,
    registry: Arc<VolumeRegistry>,
    servers: Vec<ServerHandle>,
    server_group: Option<JoinHandle<()>>,
    failure: Arc<Mutex<Option<GroupError>>>,
    failed: CancelToken,
    apps: BTreeMap<String, AppHandle>,
    gc_threads: Vec<JoinHandle<()>>,
    functions: Vec<(String, RunningFunction)>,
}

/// What happened during shutdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShutdownReport {
    pub elapsed: Duration,
    /// Whether every function finished its work within the budget.
    pub functions_drained: bool,
    /// Volumes finalized, in order.
    pub finalized: Vec<String>,
    /// Tracked threads still alive afterwards.
    pub leaked_threads: usize,
    pub failure: Option<GroupError>,
}

impl ShutdownReport {
    pub fn exit_code(&self) -> i32 {
        if self.failure.is_some() || self.leaked_threads > 0 {
            EXIT_RUNTIME
        } else {
            EXIT_OK
        }
    }
}

/// Tears down a partially started system.
struct Partial<'a> {
    registry: &'a VolumeRegistry,
    streams: Vec<EventStream>,
    root: &'a CancelToken,
    tracker: &'a TaskTracker,
    functions: Vec<(String, RunningFunction)>,
    armed: bool,
}

impl Drop for Partial<'_> {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        self.root.cancel();
        for (_, f) in self.functions.drain(..) {
            f.join(DRAIN_BUDGET);
        }
        for s in &self.streams {
            s.stop();
        }
        for v in self.registry.iter().rev() {
            if let Err(e) = v.finalize() {
                tracing::warn!(volume = v.name(), error = %e, "finalize failed");
            }
        }
        self.tracker.wait_idle(Duration::from_secs(5));
    }
}

impl RunningSystem {
    /// Validates `cfg`, then starts every component. On failure everything
    /// already started is stopped again.
    pub fn start(cfg: &Config) -> Result<Self, RuntimeError> {
        Self::start_with_volumes(cfg, build_volume)
    }

    /// Like [`RunningSystem::start`] with a custom volume constructor, for
    /// embedding backends that are not part of the configuration schema.
    pub fn start_with_volumes(
        cfg: &Config,
        mut build: impl FnMut(&VolumeCfg) -> Result<Arc<dyn Volume>, RuntimeError>,
    ) -> Result<Self, RuntimeError> {
        let violations = validate_config(cfg);
        if !violations.is_empty() {
            return Err(RuntimeError::Config(violations));
        }
        let root = CancelToken::new();
        let tracker = TaskTracker::new();

        let mut registry = VolumeRegistry::new();
        for v in &cfg.volumes {
            registry.insert(build(v)?);
        }
        let registry = Arc::new(registry);
        let mut partial = Partial {
            registry: &registry,
            streams: Vec::new(),
            root: &root,
            tracker: &tracker,
            functions: Vec::new(),
            armed: true,
        };
        for (v, vcfg) in registry.iter().zip(&cfg.volumes) {
            v.init().map_err(|e| volume_err(vcfg, e))?;
            tracing::debug!(volume = v.name(), "volume initialized");
        }

        let servers_cancel = root.child();
        let apps_cancel = root.child();
        let functions_cancel = root.child();
        let streams_cancel = root.child();

        let all_apps: Vec<&AppCfg> = cfg.servers.iter().flat_map(|s| &s.apps).collect();
        let mut apps = BTreeMap::new();
        let mut gc_threads = Vec::new();
        for a in &all_apps {
            let kind = a.kind().ok_or_else(|| app_err(a, format!("unknown type {:?}", a.type_name)))?;
            let events = EventStream::new(&a.name);
            events.start(&streams_cancel, &tracker).map_err(|e| app_err(a, e))?;
            partial.streams.push(events.clone());
            let first_volume = || {
                a.volume_refs
                    .first()
                    .ok_or_else(|| app_err(a, "no volume"))
                    .and_then(|n| registry.get(n).map_err(|e| app_err(a, e)))
            };
            let (app, cmaf): (Arc<dyn App>, _) = match kind {
                AppKind::CmafIngest => {
                    let o: CmafIngestOptions = typed_options(&a.app_options).map_err(|e| app_err(a, e))?;
                    let app = CmafIngest::new(&a.name, first_volume()?, events.clone(), o, apps_cancel.child());
                    gc_threads.push(app.spawn_gc(&apps_cancel, &tracker).map_err(|e| app_err(a, e))?);
                    (app.clone(), Some(app))
                }
                AppKind::DashAndHlsIngest => {
                    let o: DashAndHlsIngestOptions = typed_options(&a.app_options).map_err(|e| app_err(a, e))?;
                    (DashHlsIngest::new(&a.name, first_volume()?, events.clone(), o), None)
                }
                AppKind::GenericServe => {
                    let o: GenericServeOptions = typed_options(&a.app_options).map_err(|e| app_err(a, e))?;
                    let names = if a.volume_refs.is_empty() {
                        all_apps
                            .iter()
                            .find(|t| t.name == o.app)
                            .map(|t| t.volume_refs.clone())
                            .unwrap_or_default()
                    } else {
                        a.volume_refs.clone()
                    };
                    let volumes = registry.resolve(&names).map_err(|e| app_err(a, e))?;
                    (GenericServe::new(&a.name, volumes, o), None)
                }
            };
            apps.insert(a.name.clone(), AppHandle { name: a.name.clone(), kind, app, events, cmaf });
        }

        for a in &all_apps {
            let handle = &apps[&a.name];
            for f in &a.functions {
                let ctx = FunctionCtx {
                    app: a.name.clone(),
                    events: handle.events.clone(),
                    volumes: registry.clone(),
                    app_volumes: a.volume_refs.clone(),
                    cancel: functions_cancel.child(),
                    tracker: tracker.clone(),
                };
                let running = spawn_function(f, ctx)
                    .map_err(|source| RuntimeError::Function { name: f.name.clone(), source })?;
                tracing::debug!(app = %a.name, function = %f.name, "function started");
                partial.functions.push((a.name.clone(), running));
            }
        }

        let mut bound = Vec::new();
        let mut servers = Vec::new();
        for s in &cfg.servers {
            let server_err = |reason: String| RuntimeError::Server { name: s.name.clone(), reason };
            let mut routes = RouteTable::new();
            for a in &s.apps {
                routes
                    .register(AppRoute {
                        host_pattern: a.host_pattern.clone(),
                        mount_path: a.mount_path.clone(),
                        app: apps[&a.name].app.clone(),
                        auth: a.auth.clone(),
                        cors: a.cors.clone(),
                    })
                    .map_err(|e| server_err(e.to_string()))?;
            }
            let o = s.http_options().map_err(server_err)?;
            let (host, port) = parse_address(&s.address).map_err(server_err)?;
            let opts = ServerOptions { idle_timeout: o.idle_timeout.0, drain_budget: DRAIN_BUDGET };
            let server = HttpServer::bind(&s.name, (host.as_str(), port), routes, opts)
                .map_err(|e| server_err(e.to_string()))?;
            let addr = server.local_addr().map_err(|e| server_err(e.to_string()))?;
            servers.push(ServerHandle { name: s.name.clone(), addr });
            bound.push(server);
        }

        let failure: Arc<Mutex<Option<GroupError>>> = Arc::default();
        let failed = CancelToken::new();
        let controllers: Vec<(String, Controller)> = bound
            .into_iter()
            .map(|server| {
                let tracker = tracker.clone();
                let name = server.name().to_string();
                let run: Controller = Box::new(move |token: &CancelToken| server.run(token, &tracker).map_err(|e| e.to_string()));
                (name, run)
            })
            .collect();
        let server_group = {
            let (token, t, failure, failed) = (servers_cancel.clone(), tracker.clone(), failure.clone(), failed.clone());
            tracker
                .spawn("servers", move || {
                    if let Err(GroupError::Failed { name, error }) = group_run(controllers, &token, &t) {
                        *failure.lock().unwrap() = Some(GroupError::Failed { name, error });
                        failed.cancel();
                    }
                })
                .map_err(|e| RuntimeError::Server { name: "servers".into(), reason: e.to_string() })?
        };

        partial.armed = false;
        let functions = std::mem::take(&mut partial.functions);
        drop(partial);
        tracing::info!(
            servers = servers.len(),
            apps = apps.len(),
            functions = functions.len(),
            volumes = registry.len(),
            "system started"
        );
        Ok(Self {
            root,
            servers_cancel,
            apps_cancel,
            functions_cancel,
            streams_cancel,
            tracker,
            registry,
            servers,
            server_group: Some(server_group),
            failure,
            failed,
            apps,
            gc_threads,
            functions,
        })
    }

    pub fn addr(&self, server: &str) -> Option<SocketAddr> {
        self.servers.iter().find(|s| s.name == server).map(|s| s.addr)
    }

    pub fn app(&self, name: &str) -> Option<&AppHandle> {
        self.apps.get(name)
    }

    pub fn registry(&self) -> &Arc<VolumeRegistry> {
        &self.registry
    }

    pub fn tracker(&self) -> &TaskTracker {
        &self.tracker
    }

    pub fn functions(&self) -> impl Iterator<Item = (&str, &RunningFunction)> {
        self.functions.iter().map(|(a, f)| (a.as_str(), f))
    }

    pub fn function(&self, name: &str) -> Option<&RunningFunction> {
        self.functions.iter().map(|(_, f)| f).find(|f| f.name() == name)
    }

    /// Fires when a server fails.
    pub fn failed(&self) -> &CancelToken {
        &self.failed
    }

    /// Stops everything in reverse startup order.
    pub fn shutdown(mut self) -> ShutdownReport {
        let started = Instant::now();
        let deadline = started + DRAIN_BUDGET;
        self.servers_cancel.cancel();
        if let Some(g) = self.server_group.take() {
            // Servers bound their own drain to the budget.
            let _ = g.join();
        }
        self.apps_cancel.cancel();
        for h in self.gc_threads.drain(..) {
            let _ = h.join();
        }
        self.functions_cancel.cancel();
        let mut functions_drained = true;
        for (app, f) in self.functions.drain(..) {
            let name = f.name().to_string();
            let remaining = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(100));
            if !f.join(remaining) {
                tracing::warn!(%app, function = %name, "function did not finish in time");
                functions_drained = false;
            }
        }
        self.streams_cancel.cancel();
        for a in self.apps.values() {
            a.events.stop();
        }
        let mut finalized = Vec::new();
        for v in self.registry.iter().rev() {
            match v.finalize() {
                Ok(()) => finalized.push(v.name().to_string()),
                Err(e) => tracing::warn!(volume = v.name(), error = %e, "finalize failed"),
            }
        }
        self.root.cancel();
        self.apps.clear();
        let leaked_threads = self.tracker.wait_idle(Duration::from_secs(5));
        let failure = self.failure.lock().unwrap().clone();
        let report = ShutdownReport {
            elapsed: started.elapsed(),
            functions_drained,
            finalized,
            leaked_threads,
            failure,
        };
        tracing::info!(
            elapsed_ms = report.elapsed.as_millis() as u64,
            drained = report.functions_drained,
            finalized = report.finalized.len(),
            leaked = leaked_threads,
            "system stopped"
        );
        report
    }
}

/// Runs a system until `cancel` fires or a server fails. Returns the exit
/// code.
pub fn run_system(cfg: &Config, cancel: &CancelToken) -> i32 {
    let system = match RunningSystem::start(cfg) {
        Ok(s) => s,
        Err(e) => {
            tracing::error!(error = %e, "startup failed");
            return e.exit_code();
        }
    };
    let stop = cancel.receiver();
    let failed = system.failed().receiver();
    crossbeam_channel::select! {
        recv(stop) -> _ => {},
        recv(failed) -> _ => {},
    }
    system.shutdown().exit_code()
}
