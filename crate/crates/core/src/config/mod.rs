//! Versioned YAML configuration declaring servers, apps, functions and
//! volumes by name.
//!
//! Parsing keeps component options as raw maps so a document round-trips
//! unchanged; the typed option structs below are derived on demand and
//! reject unknown keys.

mod duration;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

use crate::glob::Glob;

pub use duration::{format_duration, parse_duration, GoDuration, ParseDurationError};

pub const API_VERSION: &str = "ingest/v1alpha1";
pub const KIND: &str = "Config";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("syntax error: {0}")]
    Invalid(String),
    #[error("unsupported document: expected apiVersion {API_VERSION:?} and kind {KIND:?}, got {api_version:?} / {kind:?}")]
    UnsupportedDocument { api_version: String, kind: String },
}

impl ConfigError {
    fn from_yaml(e: serde_yaml::Error) -> Self {
        match e.location() {
            Some(loc) => ConfigError::Syntax {
                line: loc.line(),
                column: loc.column(),
                message: e.to_string(),
            },
            None => ConfigError::Invalid(e.to_string()),
        }
    }
}

fn is_empty_map(m: &Mapping) -> bool {
    m.is_empty()
}

fn default_host_pattern() -> String {
    "**".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Config {
    pub api_version: String,
    pub kind: String,
    #[serde(default)]
    pub servers: Vec<ServerCfg>,
    #[serde(default)]
    pub volumes: Vec<VolumeCfg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ServerCfg {
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
    pub address: String,
    #[serde(default, skip_serializing_if = "is_empty_map")]
    pub options: Mapping,
    #[serde(default)]
    pub apps: Vec<AppCfg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AppCfg {
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
    pub mount_path: String,
    #[serde(default = "default_host_pattern")]
    pub host_pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth: Option<BasicAuthCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cors: Option<CorsCfg>,
    #[serde(default)]
    pub volume_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "is_empty_map")]
    pub app_options: Mapping,
    #[serde(default)]
    pub functions: Vec<FunctionCfg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BasicAuthCfg {
    pub username: String,
    pub password: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realm: Option<String>,
}

fn default_cors_methods() -> Vec<String> {
    ["GET", "HEAD", "PUT", "POST", "DELETE", "OPTIONS"]
        .into_iter()
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CorsCfg {
    pub allow_origins: Vec<String>,
    #[serde(default = "default_cors_methods")]
    pub allow_methods: Vec<String>,
    #[serde(default)]
    pub allow_headers: Vec<String>,
    #[serde(default)]
    pub expose_headers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_age: Option<GoDuration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FunctionCfg {
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
    #[serde(default, skip_serializing_if = "is_empty_map")]
    pub options: Mapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct VolumeCfg {
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
    #[serde(default, skip_serializing_if = "is_empty_map")]
    pub options: Mapping,
}

macro_rules! kind_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($s => Some($name::$variant),)+ _ => None }
            }

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

kind_enum!(ServerKind { Http => "http" });
kind_enum!(AppKind {
    CmafIngest => "cmafIngest",
    DashAndHlsIngest => "dashAndHlsIngest",
    GenericServe => "genericServe",
});
kind_enum!(FunctionKind {
    Copy => "copy",
    Manifest => "manifest",
    CloudEvent => "cloudEvent",
    Cleanup => "cleanup",
});
kind_enum!(VolumeKind { Null => "null", Mem => "mem", Fs => "fs" });

impl ServerCfg {
    pub fn kind(&self) -> Option<ServerKind> {
        ServerKind::parse(&self.type_name)
    }
}

impl AppCfg {
    pub fn kind(&self) -> Option<AppKind> {
        AppKind::parse(&self.type_name)
    }
}

impl FunctionCfg {
    pub fn kind(&self) -> Option<FunctionKind> {
        FunctionKind::parse(&self.type_name)
    }
}

impl VolumeCfg {
    pub fn kind(&self) -> Option<VolumeKind> {
        VolumeKind::parse(&self.type_name)
    }
}

// Typed options. Every struct rejects unknown keys.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct HttpServerOptions {
    pub idle_timeout: GoDuration,
}

impl Default for HttpServerOptions {
    fn default() -> Self {
        Self {
            idle_timeout: GoDuration(Duration::from_secs(75)),
        }
    }
}

pub const DEFAULT_BLOCK_SIZE: usize = 65536;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct MemVolumeOptions {
    pub block_size: usize,
}

impl Default for MemVolumeOptions {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FsVolumeOptions {
    pub root_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct NullVolumeOptions {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct CmafIngestOptions {
    pub max_header_bytes: u64,
    pub max_fragment_bytes: u64,
    pub presentation_timeout: GoDuration,
    pub gc_interval: GoDuration,
}

impl Default for CmafIngestOptions {
    fn default() -> Self {
        Self {
            max_header_bytes: 1 << 20,
            max_fragment_bytes: 64 << 20,
            presentation_timeout: GoDuration(Duration::from_secs(60)),
            gc_interval: GoDuration(Duration::from_secs(10)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct DashAndHlsIngestOptions {
    pub use_in_place_writers: bool,
    pub max_file_bytes: u64,
}

impl Default for DashAndHlsIngestOptions {
    fn default() -> Self {
        Self {
            use_in_place_writers: false,
            max_file_bytes: 64 << 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SendfileMode {
    #[default]
    Off,
    XSendfile,
    XAccelRedirect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GenericServeOptions {
    /// Name of the ingest app whose files are served.
    pub app: String,
    #[serde(default = "default_content_type")]
    pub default_content_type: String,
    #[serde(default)]
    pub sendfile: SendfileMode,
}

fn default_content_type() -> String {
    "application/octet-stream".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CopyOptions {
    /// Target volume.
    pub volume: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ManifestOptions {
    /// Output volume; defaults to the app's first volume.
    #[serde(default)]
    pub volume: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CloudEventOptions {
    pub url: String,
    /// CloudEvents `source` attribute; defaults to `/apps/<app name>`.
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default = "default_event_timeout")]
    pub timeout: GoDuration,
}

fn default_event_timeout() -> GoDuration {
    GoDuration(Duration::from_secs(5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CleanupOptions {
    pub patterns: Vec<String>,
    pub max_age: GoDuration,
    /// Volumes to delete from; defaults to the app's volumes.
    #[serde(default)]
    pub volumes: Option<Vec<String>>,
}

/// Deserializes a raw option map into its typed form.
pub fn typed_options<T: DeserializeOwned>(options: &Mapping) -> Result<T, String> {
    serde_yaml::from_value(Value::Mapping(options.clone())).map_err(|e| e.to_string())
}

impl ServerCfg {
    pub fn http_options(&self) -> Result<HttpServerOptions, String> {
        typed_options(&self.options)
    }
}

/// Splits `host:port` (or `:port` for all interfaces) into its parts.
pub fn parse_address(address: &str) -> Result<(String, u16), String> {
    let (host, port) = address
        .rsplit_once(':')
        .ok_or_else(|| format!("address {address:?} lacks a port"))?;
    let port: u16 = port
        .parse()
        .map_err(|_| format!("address {address:?} has an invalid port"))?;
    let host = host.trim_start_matches('[').trim_end_matches(']');
    let host = if host.is_empty() { "0.0.0.0" } else { host };
    if host.contains(char::is_whitespace) {
        return Err(format!("address {address:?} has an invalid host"));
    }
    Ok((host.to_string(), port))
}

/// Parses and checks the document header. Schema invariants are checked by
/// [`validate_config`].
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let raw: Value = serde_yaml::from_str(text).map_err(ConfigError::from_yaml)?;
    let field = |k: &str| {
        raw.get(k)
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string()
    };
    let (api_version, kind) = (field("apiVersion"), field("kind"));
    if api_version != API_VERSION || kind != KIND {
        return Err(ConfigError::UnsupportedDocument { api_version, kind });
    }
    serde_yaml::from_str(text).map_err(ConfigError::from_yaml)
}

pub fn to_yaml(cfg: &Config) -> String {
    serde_yaml::to_string(cfg).expect("config serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    UnsupportedDocument,
    EmptyName,
    DuplicateName,
    UnknownType,
    UnresolvedReference,
    InvalidOption,
    InvalidValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Location in the document, e.g. `servers[0].apps[1].volumeRefs[0]`.
    pub path: String,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, path: impl Into<String>, kind: ViolationKind, message: impl Into<String>) {
        self.out.push(Violation {
            path: path.into(),
            kind,
            message: message.into(),
        });
    }

    fn names<'a>(&mut self, category: &str, items: impl Iterator<Item = (String, &'a str)>) {
        let mut seen = HashSet::new();
        for (path, name) in items {
            if name.is_empty() {
                self.push(
                    format!("{path}.name"),
                    ViolationKind::EmptyName,
                    format!("{category} name must not be empty"),
                );
            } else if !seen.insert(name) {
                self.push(
                    format!("{path}.name"),
                    ViolationKind::DuplicateName,
                    format!("duplicate {category} name {name:?}"),
                );
            }
        }
    }

    fn options<T: DeserializeOwned>(&mut self, path: &str, options: &Mapping) -> Option<T> {
        match typed_options::<T>(options) {
            Ok(t) => Some(t),
            Err(e) => {
                self.push(path, ViolationKind::InvalidOption, e);
                None
            }
        }
    }

    fn volume_ref(&mut self, path: String, name: &str, volumes: &HashSet<&str>) {
        if !volumes.contains(name) {
            self.push(
                path,
                ViolationKind::UnresolvedReference,
                format!("unknown volume {name:?}"),
            );
        }
    }
}

/// Checks every invariant of the document and returns all violations found.
pub fn validate_config(cfg: &Config) -> Vec<Violation> {
    let mut c = Checker { out: Vec::new() };
    if cfg.api_version != API_VERSION {
        c.push(
            "apiVersion",
            ViolationKind::UnsupportedDocument,
            format!("expected {API_VERSION:?}"),
        );
    }
    if cfg.kind != KIND {
        c.push(
            "kind",
            ViolationKind::UnsupportedDocument,
            format!("expected {KIND:?}"),
        );
    }

    c.names(
        "volume",
        cfg.volumes
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("volumes[{i}]"), v.name.as_str())),
    );
    c.names(
        "server",
        cfg.servers
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("servers[{i}]"), s.name.as_str())),
    );
    let apps: Vec<(String, &AppCfg)> = cfg
        .servers
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.apps
                .iter()
                .enumerate()
                .map(move |(j, a)| (format!("servers[{i}].apps[{j}]"), a))
        })
        .collect();
    c.names(
        "app",
        apps.iter().map(|(p, a)| (p.clone(), a.name.as_str())),
    );
    let functions: Vec<(String, &AppCfg, &FunctionCfg)> = apps
        .iter()
        .flat_map(|(p, a)| {
            a.functions
                .iter()
                .enumerate()
                .map(move |(k, f)| (format!("{p}.functions[{k}]"), *a, f))
        })
        .collect();
    c.names(
        "function",
        functions
            .iter()
            .map(|(p, _, f)| (p.clone(), f.name.as_str())),
    );

    let volume_names: HashSet<&str> = cfg.volumes.iter().map(|v| v.name.as_str()).collect();
    let app_by_name: HashMap<&str, &AppCfg> =
        apps.iter().map(|(_, a)| (a.name.as_str(), *a)).collect();

    for (i, v) in cfg.volumes.iter().enumerate() {
        let path = format!("volumes[{i}]");
        match v.kind() {
            None => c.push(
                format!("{path}.type"),
                ViolationKind::UnknownType,
                format!("unknown volume type {:?}", v.type_name),
            ),
            Some(VolumeKind::Null) => {
                c.options::<NullVolumeOptions>(&format!("{path}.options"), &v.options);
            }
            Some(VolumeKind::Mem) => {
                if let Some(o) =
                    c.options::<MemVolumeOptions>(&format!("{path}.options"), &v.options)
                {
                    if o.block_size == 0 {
                        c.push(
                            format!("{path}.options.blockSize"),
                            ViolationKind::InvalidValue,
                            "blockSize must be positive",
                        );
                    }
                }
            }
            Some(VolumeKind::Fs) => {
                if let Some(o) =
                    c.options::<FsVolumeOptions>(&format!("{path}.options"), &v.options)
                {
                    if o.root_path.as_os_str().is_empty() {
                        c.push(
                            format!("{path}.options.rootPath"),
                            ViolationKind::InvalidValue,
                            "rootPath must not be empty",
                        );
                    }
                }
            }
        }
    }

    for (i, s) in cfg.servers.iter().enumerate() {
        let path = format!("servers[{i}]");
        match s.kind() {
            None => c.push(
                format!("{path}.type"),
                ViolationKind::UnknownType,
                format!("unknown server type {:?}", s.type_name),
            ),
            Some(ServerKind::Http) => {
                c.options::<HttpServerOptions>(&format!("{path}.options"), &s.options);
            }
        }
        if let Err(e) = parse_address(&s.address) {
            c.push(format!("{path}.address"), ViolationKind::InvalidValue, e);
        }
    }

    for (path, a) in &apps {
        if !a.mount_path.starts_with('/') {
            c.push(
                format!("{path}.mountPath"),
                ViolationKind::InvalidValue,
                "mountPath must begin with \"/\"",
            );
        }
        if let Err(e) = Glob::host(&a.host_pattern) {
            c.push(
                format!("{path}.hostPattern"),
                ViolationKind::InvalidValue,
                e.to_string(),
            );
        }
        for (k, v) in a.volume_refs.iter().enumerate() {
            c.volume_ref(format!("{path}.volumeRefs[{k}]"), v, &volume_names);
        }
        if let Some(cors) = &a.cors {
            if cors.allow_origins.is_empty() {
                c.push(
                    format!("{path}.cors.allowOrigins"),
                    ViolationKind::InvalidValue,
                    "allowOrigins must not be empty",
                );
            }
        }
        let opts = format!("{path}.appOptions");
        match a.kind() {
            None => c.push(
                format!("{path}.type"),
                ViolationKind::UnknownType,
                format!("unknown app type {:?}", a.type_name),
            ),
            Some(AppKind::CmafIngest) => {
                if let Some(o) = c.options::<CmafIngestOptions>(&opts, &a.app_options) {
                    if o.max_header_bytes == 0 || o.max_fragment_bytes == 0 {
                        c.push(
                            opts.clone(),
                            ViolationKind::InvalidValue,
                            "size limits must be positive",
                        );
                    }
                    if o.presentation_timeout.0.is_zero() || o.gc_interval.0.is_zero() {
                        c.push(
                            opts.clone(),
                            ViolationKind::InvalidValue,
                            "presentationTimeout and gcInterval must be positive",
                        );
                    }
                }
                if a.volume_refs.is_empty() {
                    c.push(
                        format!("{path}.volumeRefs"),
                        ViolationKind::InvalidValue,
                        "an ingest app needs a volume",
                    );
                }
            }
            Some(AppKind::DashAndHlsIngest) => {
                if let Some(o) = c.options::<DashAndHlsIngestOptions>(&opts, &a.app_options) {
                    if o.max_file_bytes == 0 {
                        c.push(
                            format!("{opts}.maxFileBytes"),
                            ViolationKind::InvalidValue,
                            "maxFileBytes must be positive",
                        );
                    }
                }
                if a.volume_refs.is_empty() {
                    c.push(
                        format!("{path}.volumeRefs"),
                        ViolationKind::InvalidValue,
                        "an ingest app needs a volume",
                    );
                }
            }
            Some(AppKind::GenericServe) => {
                if let Some(o) = c.options::<GenericServeOptions>(&opts, &a.app_options) {
                    match app_by_name.get(o.app.as_str()) {
                        None => c.push(
                            format!("{opts}.app"),
                            ViolationKind::UnresolvedReference,
                            format!("unknown app {:?}", o.app),
                        ),
                        Some(target) => {
                            if a.volume_refs.is_empty() && target.volume_refs.is_empty() {
                                c.push(
                                    format!("{path}.volumeRefs"),
                                    ViolationKind::InvalidValue,
                                    "no volumes to serve from",
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    for (path, app, f) in &functions {
        let opts = format!("{path}.options");
        match f.kind() {
            None => c.push(
                format!("{path}.type"),
                ViolationKind::UnknownType,
                format!("unknown function type {:?}", f.type_name),
            ),
            Some(FunctionKind::Copy) => {
                if let Some(o) = c.options::<CopyOptions>(&opts, &f.options) {
                    c.volume_ref(format!("{opts}.volume"), &o.volume, &volume_names);
                }
            }
            Some(FunctionKind::Manifest) => {
                if let Some(o) = c.options::<ManifestOptions>(&opts, &f.options) {
                    match o.volume {
                        Some(v) => c.volume_ref(format!("{opts}.volume"), &v, &volume_names),
                        None if app.volume_refs.is_empty() => c.push(
                            format!("{opts}.volume"),
                            ViolationKind::InvalidValue,
                            "no output volume",
                        ),
                        None => {}
                    }
                }
            }
            Some(FunctionKind::CloudEvent) => {
                if let Some(o) = c.options::<CloudEventOptions>(&opts, &f.options) {
                    let ok = o
                        .url
                        .parse::<http::Uri>()
                        .map(|u| {
                            matches!(u.scheme_str(), Some("http" | "https")) && u.host().is_some()
                        })
                        .unwrap_or(false);
                    if !ok {
                        c.push(
                            format!("{opts}.url"),
                            ViolationKind::InvalidValue,
                            format!("invalid endpoint URL {:?}", o.url),
                        );
                    }
                }
            }
            Some(FunctionKind::Cleanup) => {
                if let Some(o) = c.options::<CleanupOptions>(&opts, &f.options) {
                    if o.patterns.is_empty() {
                        c.push(
                            format!("{opts}.patterns"),
                            ViolationKind::InvalidValue,
                            "at least one pattern is required",
                        );
                    }
                    for (k, p) in o.patterns.iter().enumerate() {
                        if let Err(e) = Glob::path(p) {
                            c.push(
                                format!("{opts}.patterns[{k}]"),
                                ViolationKind::InvalidValue,
                                e.to_string(),
                            );
                        }
                    }
                    if o.max_age.0.is_zero() {
                        c.push(
                            format!("{opts}.maxAge"),
                            ViolationKind::InvalidValue,
                            "maxAge must be positive",
                        );
                    }
                    match &o.volumes {
                        Some(vs) => {
                            for (k, v) in vs.iter().enumerate() {
                                c.volume_ref(format!("{opts}.volumes[{k}]"), v, &volume_names);
                            }
                        }
                        None if app.volume_refs.is_empty() => c.push(
                            format!("{opts}.volumes"),
                            ViolationKind::InvalidValue,
                            "no volumes to clean",
                        ),
                        None => {}
                    }
                }
            }
        }
    }
    c.out
}
