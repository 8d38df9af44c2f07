//! Built-in model registry and the local download cache.
//!
//! Cache layout: one `<name>.onnx` per model plus a `manifest.json` mapping
//! model name to `{url, sha256, bytes, fetched_at}`. Downloads land in a temp
//! file and are renamed into place only after the digest check, so a failed
//! fetch never touches existing cache contents. Writers for one model name are
//! serialized through an exclusive lock on `<name>.lock`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelIoError;

pub const CACHE_ENV: &str = "EDGECOST_CACHE";
const MANIFEST: &str = "manifest.json";
const ZOO: &str = "https://github.com/onnx/models/raw/main/validated/vision/classification";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZooEntry {
    pub name: &'static str,
    /// `None` for architectures the public zoo does not host.
    pub url: Option<String>,
    /// Expected SHA-256 (lowercase hex); `None` means trust-on-first-use.
    pub sha256: Option<&'static str>,
    pub description: &'static str,
}

fn zoo(path: &str) -> Option<String> {
    Some(format!("{ZOO}/{path}"))
}

/// The analyzer's model set.
pub fn registry() -> Vec<ZooEntry> {
    let e = |name, url, description| ZooEntry {
        name,
        url,
        sha256: None,
        description,
    };
    vec![
        e("alexnet", zoo("alexnet/model/bvlcalexnet-12.onnx"), "AlexNet"),
        e("vgg16", zoo("vgg/model/vgg16-12.onnx"), "VGG-16"),
        e("vgg19", zoo("vgg/model/vgg19-7.onnx"), "VGG-19"),
        e(
            "googlenet",
            zoo("inception_and_googlenet/googlenet/model/googlenet-12.onnx"),
            "GoogLeNet (Inception V1)",
        ),
        e("resnet18", zoo("resnet/model/resnet18-v1-7.onnx"), "ResNet-18"),
        e("resnet34", zoo("resnet/model/resnet34-v1-7.onnx"), "ResNet-34"),
        e("resnet50", zoo("resnet/model/resnet50-v1-12.onnx"), "ResNet-50"),
        e("resnet101", zoo("resnet/model/resnet101-v1-7.onnx"), "ResNet-101"),
        e("resnet152", zoo("resnet/model/resnet152-v1-7.onnx"), "ResNet-152"),
        e("densenet121", zoo("densenet-121/model/densenet-12.onnx"), "DenseNet-121"),
        e("squeezenet1.0", zoo("squeezenet/model/squeezenet1.0-12.onnx"), "SqueezeNet 1.0"),
        e("mobilenetv2", zoo("mobilenet/model/mobilenetv2-12.onnx"), "MobileNet V2"),
        e("shufflenetv2", zoo("shufflenet/model/shufflenet-v2-12.onnx"), "ShuffleNet V2"),
        e("efficientnet-b0", None, "EfficientNet-B0"),
    ]
}

pub fn lookup(name: &str) -> Option<ZooEntry> {
    registry().into_iter().find(|e| e.name == name)
}

/// `$EDGECOST_CACHE`, else `$XDG_CACHE_HOME/edgecost`, else `~/.cache/edgecost`.
pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    if let Some(xdg) = std::env::var_os("XDG_CACHE_HOME").filter(|v| !v.is_empty()) {
        return PathBuf::from(xdg).join("edgecost");
    }
    std::env::var_os("HOME")
        .map(|h| PathBuf::from(h).join(".cache").join("edgecost"))
        .unwrap_or_else(|| PathBuf::from(".edgecost-cache"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub url: String,
    pub sha256: String,
    pub bytes: u64,
    pub fetched_at: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheManifest {
    pub models: BTreeMap<String, CacheRecord>,
}

impl CacheManifest {
    pub fn load(cache_dir: &Path) -> Result<Self, ModelIoError> {
        let path = cache_dir.join(MANIFEST);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| ModelIoError::Cache(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(ModelIoError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    fn store(&self, cache_dir: &Path) -> Result<(), ModelIoError> {
        let tmp = cache_dir.join(format!("{MANIFEST}.tmp"));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&tmp, text + "\n").map_err(cache_err)?;
        fs::rename(&tmp, cache_dir.join(MANIFEST)).map_err(cache_err)
    }
}

fn cache_err(e: std::io::Error) -> ModelIoError {
    ModelIoError::Cache(e.to_string())
}

/// Network access behind fetch; swapped out in tests.
pub trait Transport {
    fn get(&self, url: &str) -> Result<Vec<u8>, String>;
}

pub struct HttpTransport;

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> Result<Vec<u8>, String> {
        let resp = ureq::get(url).call().map_err(|e| e.to_string())?;
        let mut body = Vec::new();
        resp.into_reader()
            .read_to_end(&mut body)
            .map_err(|e| e.to_string())?;
        Ok(body)
    }
}

pub struct Fetcher<T: Transport = HttpTransport> {
    pub registry: Vec<ZooEntry>,
    pub transport: T,
}

impl Default for Fetcher<HttpTransport> {
    fn default() -> Self {
        Fetcher {
            registry: registry(),
            transport: HttpTransport,
        }
    }
}

/// Lock released when dropped.
struct NameLock(File);

impl NameLock {
    fn acquire(path: &Path) -> Result<Self, ModelIoError> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)
            .map_err(cache_err)?;
        file.lock().map_err(cache_err)?;
        Ok(NameLock(file))
    }
}

impl Drop for NameLock {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn file_sha256(path: &Path) -> Result<String, ModelIoError> {
    let mut hasher = Sha256::new();
    let mut f = File::open(path).map_err(cache_err)?;
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(cache_err)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl<T: Transport> Fetcher<T> {
    /// Path of `name` in the cache, downloading it first if needed.
    ///
    /// A cached file is reused when its size matches the manifest record; no
    /// transport call is made in that case.
    pub fn fetch(&self, name: &str, cache_dir: &Path) -> Result<PathBuf, ModelIoError> {
        let entry = self
            .registry
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ModelIoError::UnknownModel(name.to_string()))?;
        let target = cache_dir.join(format!("{name}.onnx"));
        if self.cached(name, &target, cache_dir)? {
            return Ok(target);
        }
        let url = entry
            .url
            .as_deref()
            .ok_or_else(|| ModelIoError::NotDownloadable(name.to_string()))?;

        fs::create_dir_all(cache_dir).map_err(cache_err)?;
        let _lock = NameLock::acquire(&cache_dir.join(format!("{name}.lock")))?;
        // Another writer may have finished while we waited.
        if self.cached(name, &target, cache_dir)? {
            return Ok(target);
        }

        let body = self.transport.get(url).map_err(ModelIoError::NetworkError)?;
        let digest = sha256_hex(&body);
        if let Some(expected) = entry.sha256 {
            if expected != digest {
                return Err(ModelIoError::ChecksumMismatch {
                    name: name.to_string(),
                    expected: expected.to_string(),
                    actual: digest,
                });
            }
        }
        let tmp = cache_dir.join(format!("{name}.onnx.part"));
        {
            let mut f = File::create(&tmp).map_err(cache_err)?;
            f.write_all(&body).map_err(cache_err)?;
            f.sync_all().map_err(cache_err)?;
        }
        fs::rename(&tmp, &target).map_err(cache_err)?;

        let _manifest_lock = NameLock::acquire(&cache_dir.join("manifest.lock"))?;
        let mut manifest = CacheManifest::load(cache_dir)?;
        manifest.models.insert(
            name.to_string(),
            CacheRecord {
                url: url.to_string(),
                sha256: digest,
                bytes: body.len() as u64,
                fetched_at: humantime::format_rfc3339_seconds(SystemTime::now()).to_string(),
            },
        );
        manifest.store(cache_dir)?;
        Ok(target)
    }

    fn cached(&self, name: &str, target: &Path, cache_dir: &Path) -> Result<bool, ModelIoError> {
        let Ok(meta) = fs::metadata(target) else {
            return Ok(false);
        };
        let manifest = CacheManifest::load(cache_dir)?;
        Ok(match manifest.models.get(name) {
            Some(rec) => rec.bytes == meta.len(),
            // Files placed by hand (no manifest record) are trusted as-is.
            None => true,
        })
    }
}

/// Fetches `name` from the built-in registry over HTTP.
pub fn fetch_model(name: &str, cache_dir: &Path) -> Result<PathBuf, ModelIoError> {
    Fetcher::default().fetch(name, cache_dir)
}

/// Recomputes the digest of a cached model and compares it to the manifest.
pub fn verify_cached(name: &str, cache_dir: &Path) -> Result<bool, ModelIoError> {
    let manifest = CacheManifest::load(cache_dir)?;
    let rec = manifest
        .models
        .get(name)
        .ok_or_else(|| ModelIoError::Cache(format!("{name} is not in the cache manifest")))?;
    Ok(file_sha256(&cache_dir.join(format!("{name}.onnx")))? == rec.sha256)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct Fake {
        body: Result<Vec<u8>, String>,
        calls: Cell<usize>,
    }

    impl Transport for Fake {
        fn get(&self, _url: &str) -> Result<Vec<u8>, String> {
            self.calls.set(self.calls.get() + 1);
            self.body.clone()
        }
    }

    fn fetcher(body: Result<Vec<u8>, String>, sha: Option<&'static str>) -> Fetcher<Fake> {
        Fetcher {
            registry: vec![ZooEntry {
                name: "tiny",
                url: Some("http://example.invalid/tiny.onnx".into()),
                sha256: sha,
                description: "test",
            }],
            transport: Fake {
                body,
                calls: Cell::new(0),
            },
        }
    }

    #[test]
    fn warm_cache_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let f = fetcher(Ok(b"hello".to_vec()), None);
        let p1 = f.fetch("tiny", dir.path()).unwrap();
        assert_eq!(f.transport.calls.get(), 1);
        let p2 = f.fetch("tiny", dir.path()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(f.transport.calls.get(), 1);

        let m = CacheManifest::load(dir.path()).unwrap();
        let rec = &m.models["tiny"];
        assert_eq!(rec.bytes, 5);
        assert_eq!(rec.sha256, sha256_hex(b"hello"));
        assert!(verify_cached("tiny", dir.path()).unwrap());
    }

    #[test]
    fn unknown_name() {
        let dir = tempfile::tempdir().unwrap();
        let err = fetcher(Ok(vec![]), None)
            .fetch("not-a-model", dir.path())
            .unwrap_err();
        assert!(matches!(err, ModelIoError::UnknownModel(_)));
    }

    #[test]
    fn network_failure_leaves_cache_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let err = fetcher(Err("connection refused".into()), None)
            .fetch("tiny", dir.path())
            .unwrap_err();
        assert!(matches!(err, ModelIoError::NetworkError(_)));
        assert!(!dir.path().join("tiny.onnx").exists());
        assert!(!dir.path().join(MANIFEST).exists());
    }

    #[test]
    fn digest_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = fetcher(Ok(b"tampered".to_vec()), Some("00"))
            .fetch("tiny", dir.path())
            .unwrap_err();
        assert!(matches!(err, ModelIoError::ChecksumMismatch { .. }));
        assert!(!dir.path().join("tiny.onnx").exists());
    }

    #[test]
    fn size_mismatch_refetches() {
        let dir = tempfile::tempdir().unwrap();
        let f = fetcher(Ok(b"hello".to_vec()), None);
        f.fetch("tiny", dir.path()).unwrap();
        fs::write(dir.path().join("tiny.onnx"), b"hel").unwrap();
        f.fetch("tiny", dir.path()).unwrap();
        assert_eq!(f.transport.calls.get(), 2);
        assert_eq!(fs::read(dir.path().join("tiny.onnx")).unwrap(), b"hello");
    }

    #[test]
    fn registry_names_unique_and_cover_reference_set() {
        let reg = registry();
        let mut names: Vec<_> = reg.iter().map(|e| e.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), reg.len());
        for n in ["alexnet", "vgg16", "squeezenet1.0", "mobilenetv2", "resnet50"] {
            assert!(lookup(n).is_some(), "{n}");
        }
    }
}
