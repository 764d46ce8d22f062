//! Runs the `ingest` binary as a child process.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use ingest_harness::client;

const BIN: &str = env!("CARGO_BIN_EXE_ingest");

fn config(root: &std::path::Path) -> String {
    format!(
        r#"apiVersion: ingest/v1alpha1
kind: Config
servers:
  - name: http
    type: http
    address: "127.0.0.1:0"
    apps:
      - name: upload
        type: dashAndHlsIngest
        mountPath: /upload
        volumeRefs: [memVol]
        functions:
          - name: copy
            type: copy
            options:
              volume: fsVol
      - name: serve
        type: genericServe
        mountPath: /streams
        volumeRefs: [fsVol]
        appOptions:
          app: upload
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

fn write_config(dir: &std::path::Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.yaml");
    std::fs::File::create(&path).unwrap().write_all(text.as_bytes()).unwrap();
    path
}

/// Starts the binary and returns it with its listening address and the
/// remaining stderr lines.
fn spawn(config: &std::path::Path) -> (Child, String, mpsc::Receiver<String>) {
    let mut child = Command::new(BIN)
        .args(["--config", config.to_str().unwrap(), "--log-level", "info"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let stderr = child.stderr.take().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let Ok(line) = rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) else {
            let _ = child.kill();
            let _ = child.wait();
            panic!("server did not start");
        };
        if let Some(rest) = line.split("addr=").nth(1).filter(|_| line.contains("listening")) {
            let addr = rest.split_whitespace().next().unwrap().to_string();
            return (child, addr, rx);
        }
    }
}

fn url(addr: &str, path: &str) -> url::Url {
    url::Url::parse(&format!("http://{addr}{path}")).unwrap()
}

fn wait_exit(child: &mut Child, budget: Duration) -> Option<i32> {
    let deadline = Instant::now() + budget;
    while Instant::now() < deadline {
        if let Some(status) = child.try_wait().unwrap() {
            return status.code();
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let _ = child.kill();
    None
}

#[test]
fn invalid_config_exits_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let text = config(dir.path()).replace("type: mem", "type: tape");
    let path = write_config(dir.path(), &text);
    let out = Command::new(BIN).args(["--config", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("volumes[0]"));

    let path = write_config(dir.path(), "apiVersion: [\n");
    let out = Command::new(BIN).args(["--config", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[cfg(unix)]
#[test]
fn serves_until_terminated() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let path = write_config(dir.path(), &config(&root));
    let (mut child, addr, rx) = spawn(&path);

    let body = b"#EXTM3U\n".to_vec();
    let resp = client::send("PUT", &url(&addr, "/upload/live/index.m3u8"), &[], client::Body::Bytes(&body)).unwrap();
    assert_eq!(resp.status, 201);
    let deadline = Instant::now() + Duration::from_secs(5);
    let served = loop {
        let r = client::get(&url(&addr, "/streams/live/index.m3u8")).unwrap();
        if r.status == 200 || Instant::now() > deadline {
            break r;
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(served.status, 200);
    assert_eq!(served.body, body);

    let status = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    assert_eq!(wait_exit(&mut child, Duration::from_secs(30)), Some(0));
    let log: Vec<String> = rx.try_iter().collect();
    let stopped = log.iter().find(|l| l.contains("system stopped")).expect("shutdown report logged");
    assert!(stopped.contains("leaked=0"), "{stopped}");
    assert!(stopped.contains("finalized=2"), "{stopped}");
}
