//! Fetches through the real HTTP transport from a loopback server.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use edgecost::model_io::zoo::HttpTransport;
use edgecost::model_io::{load_model, CacheManifest, Fetcher, ModelIoError, ZooEntry};

const SQUEEZENET_SHA256: &str = "c5c0bfc20137fc861956b872d81e240b9365275d742f4b4d0187ccf712c0ac55";

fn full_model() -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/squeezenet1.0-full.onnx");
    std::fs::read(p).unwrap()
}

/// Serves `body` to every GET; returns the base URL and a request counter.
fn serve(body: Vec<u8>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            loop {
                line.clear();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
            }
            counter.fetch_add(1, Ordering::SeqCst);
            let head = format!(
                "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nContent-Type: application/octet-stream\r\nConnection: close\r\n\r\n",
                body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&body);
        }
    });
    (format!("http://{addr}"), hits)
}

fn fetcher(base: &str, sha256: Option<&'static str>) -> Fetcher<HttpTransport> {
    Fetcher {
        registry: vec![ZooEntry {
            name: "squeezenet1.0",
            url: Some(format!("{base}/squeezenet1.0-12.onnx")),
            sha256,
            description: "SqueezeNet 1.0",
        }],
        transport: HttpTransport,
    }
}

#[test]
fn download_verifies_and_caches() {
    let (base, hits) = serve(full_model());
    let dir = tempfile::tempdir().unwrap();
    let f = fetcher(&base, Some(SQUEEZENET_SHA256));

    let path = f.fetch("squeezenet1.0", dir.path()).unwrap();
    let raw = load_model(&path).unwrap();
    assert_eq!(raw.initializers.len(), 52);
    let payload: u64 = raw.initializers.iter().map(|t| t.payload_byte_length).sum();
    assert_eq!(payload, 1_248_424 * 4);

    let rec = &CacheManifest::load(dir.path()).unwrap().models["squeezenet1.0"];
    assert_eq!(rec.sha256, SQUEEZENET_SHA256);
    assert_eq!(rec.bytes, 5_014_740);

    f.fetch("squeezenet1.0", dir.path()).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 1, "warm cache must not download");
}

#[test]
fn concurrent_fetches_download_once() {
    let (base, hits) = serve(full_model());
    let dir = tempfile::tempdir().unwrap();
    std::thread::scope(|s| {
        for _ in 0..4 {
            s.spawn(|| {
                let f = fetcher(&base, Some(SQUEEZENET_SHA256));
                f.fetch("squeezenet1.0", dir.path()).unwrap();
            });
        }
    });
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert_eq!(
        std::fs::metadata(dir.path().join("squeezenet1.0.onnx")).unwrap().len(),
        5_014_740
    );
}

#[test]
fn digest_mismatch_leaves_cache_empty() {
    let (base, _) = serve(full_model());
    let dir = tempfile::tempdir().unwrap();
    let wrong = "0000000000000000000000000000000000000000000000000000000000000000";
    let err = fetcher(&base, Some(wrong)).fetch("squeezenet1.0", dir.path()).unwrap_err();
    assert!(matches!(err, ModelIoError::ChecksumMismatch { .. }));
    assert!(!dir.path().join("squeezenet1.0.onnx").exists());
}

#[test]
fn unreachable_host_is_network_error() {
    // Bind then drop to get a port with nothing listening.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let err = fetcher(&format!("http://127.0.0.1:{port}"), None)
        .fetch("squeezenet1.0", dir.path())
        .unwrap_err();
    assert!(matches!(err, ModelIoError::NetworkError(_)));
    assert!(std::fs::read_dir(dir.path()).unwrap().all(|e| {
        let name = e.unwrap().file_name();
        !name.to_string_lossy().ends_with(".onnx")
    }));
}
