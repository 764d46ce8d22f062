//! System startup and shutdown from a configuration document.

use std::time::Duration;

use ingest_core::config::parse_config;
use ingest_core::lifecycle::CancelToken;
use ingest_core::runtime::{run_system, RunningSystem, RuntimeError, EXIT_CONFIG, EXIT_OK};
use url::Url;

fn config(root: &std::path::Path) -> String {
    format!(
        r#"
apiVersion: ingest/v1alpha1
kind: Config
servers:
  - name: http
    type: http
    address: "127.0.0.1:0"
    apps:
      - name: cmaf
        type: cmafIngest
        hostPattern: ingest.example.com
        mountPath: /cmaf
        volumeRefs: [memVol]
        functions:
          - name: manifest
            type: manifest
      - name: serve
        type: genericServe
        mountPath: /streams
        volumeRefs: [memVol, fsVol]
        appOptions:
          app: cmaf
volumes:
  - name: memVol
    type: mem
  - name: fsVol
    type: fs
    options:
      rootPath: {}
"#,
        root.display()
    )
}

#[test]
fn starts_routes_and_stops_without_leaks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&config(dir.path())).unwrap();
    let system = RunningSystem::start(&cfg).unwrap();
    let addr = system.addr("http").unwrap();
    assert!(system.app("cmaf").is_some() && system.app("serve").is_some());
    assert_eq!(system.functions().count(), 1);
    assert_eq!(system.registry().names(), vec!["memVol", "fsVol"]);

    let get = |host: &str, path: &str| {
        let url = Url::parse(&format!("http://{addr}{path}")).unwrap();
        ingest_harness::client::send("GET", &url, &[("Host", host)], ingest_harness::client::Body::Empty)
            .unwrap()
            .status
    };
    // Ingest only answers for its host; GET is not an ingest method.
    assert_eq!(get("ingest.example.com", "/cmaf/p/Switching(a)/Stream(b)"), 405);
    assert_eq!(get("other.example.com", "/cmaf/p/Switching(a)/Stream(b)"), 404);
    assert_eq!(get("other.example.com", "/streams/missing"), 404);

    let report = system.shutdown();
    assert_eq!(report.exit_code(), EXIT_OK);
    assert_eq!(report.finalized, vec!["fsVol", "memVol"]);
    assert_eq!(report.leaked_threads, 0);
    assert!(report.functions_drained);
    assert!(report.elapsed < Duration::from_secs(30));
}

#[test]
fn unknown_volume_type_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&config(dir.path()).replace("type: fs", "type: tape")).unwrap();
    let err = RunningSystem::start(&cfg).err().unwrap();
    assert!(matches!(err, RuntimeError::Config(_)));
    assert_eq!(err.exit_code(), EXIT_CONFIG);
}

#[test]
fn bind_failure_tears_everything_down() {
    let dir = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let text = config(dir.path()).replace("127.0.0.1:0", &taken.local_addr().unwrap().to_string());
    let err = RunningSystem::start(&parse_config(&text).unwrap()).err().unwrap();
    assert_ne!(err.exit_code(), EXIT_OK);
}

#[test]
fn run_system_returns_after_cancel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&config(dir.path())).unwrap();
    let cancel = CancelToken::new();
    let c = cancel.clone();
    let runner = std::thread::spawn(move || run_system(&cfg, &c));
    std::thread::sleep(Duration::from_millis(200));
    cancel.cancel();
    assert_eq!(runner.join().unwrap(), EXIT_OK);
}
