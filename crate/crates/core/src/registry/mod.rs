//! File-backed stand-ins for the platform's image registry and config
//! store. Layout: `<root>/images/<digest>` for content-addressed blobs,
//! `<root>/configs/<function>.json` for function records.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::types::{is_valid_digest, FunctionConfig, FunctionId};

/// Maximum image blob size.
pub const MAX_IMAGE_BYTES: usize = 512 * 1024 * 1024;

/// How long a worker trusts a cached function config.
pub const CONFIG_CACHE_TTL_MS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("integrity error: blob does not match digest {digest}")]
    Integrity { digest: String },
    #[error("image must be non-empty")]
    EmptyImage,
    #[error("image exceeds {MAX_IMAGE_BYTES} byte cap")]
    ImageTooLarge,
    #[error("invalid digest: {0}")]
    InvalidDigest(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write-to-temp-then-rename so readers never observe partial files.
fn atomic_write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, dir.join(name))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content-addressed image store under `<root>/images`.
#[derive(Debug, Clone)]
pub struct ImageStore {
    dir: PathBuf,
}

impl ImageStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = root.as_ref().join("images");
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    /// Store a blob and return its lowercase hex SHA-256. Idempotent.
    pub fn put(&self, bytes: &[u8]) -> Result<String, StoreError> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyImage);
        }
        if bytes.len() > MAX_IMAGE_BYTES {
            return Err(StoreError::ImageTooLarge);
        }
        let digest = sha256_hex(bytes);
        if !self.dir.join(&digest).exists() {
            atomic_write(&self.dir, &digest, bytes)?;
        }
        Ok(digest)
    }

    /// Fetch a blob, re-verifying its digest on the way out.
    pub fn get(&self, digest: &str) -> Result<Vec<u8>, StoreError> {
        if !is_valid_digest(digest) {
            return Err(StoreError::InvalidDigest(digest.to_string()));
        }
        let path = self.dir.join(digest);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(digest.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        if sha256_hex(&bytes) != digest {
            return Err(StoreError::Integrity { digest: digest.to_string() });
        }
        Ok(bytes)
    }

    pub fn contains(&self, digest: &str) -> bool {
        is_valid_digest(digest) && self.dir.join(digest).exists()
    }
}

/// Key-value function config store under `<root>/configs`, one JSON
/// file per function, last write wins.
#[derive(Debug, Clone)]
pub struct ConfigStore {
    dir: PathBuf,
}

impl ConfigStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = root.as_ref().join("configs");
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn put(&self, cfg: &FunctionConfig) -> Result<(), StoreError> {
        cfg.validate().map_err(|e| StoreError::InvalidConfig(e.to_string()))?;
        let json = serde_json::to_vec_pretty(cfg)
            .map_err(|e| StoreError::InvalidConfig(e.to_string()))?;
        atomic_write(&self.dir, &format!("{}.json", cfg.function), &json)
    }

    pub fn get(&self, function: &FunctionId) -> Result<FunctionConfig, StoreError> {
        let path = self.dir.join(format!("{function}.json"));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(function.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let cfg: FunctionConfig = serde_json::from_slice(&bytes)
            .map_err(|e| StoreError::InvalidConfig(format!("{function}: {e}")))?;
        cfg.validate().map_err(|e| StoreError::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn list(&self) -> Result<Vec<FunctionConfig>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".json") {
                if let Ok(f) = FunctionId::new(stem) {
                    if let Ok(cfg) = self.get(&f) {
                        out.push(cfg);
                    }
                }
            }
        }
        out.sort_by(|a, b| a.function.cmp(&b.function));
        Ok(out)
    }
}

/// Read-through config cache with a freshness TTL (workers keep one).
pub struct ConfigCache {
    store: ConfigStore,
    ttl: Duration,
    map: Mutex<HashMap<FunctionId, (Instant, FunctionConfig)>>,
}

impl ConfigCache {
    pub fn new(store: ConfigStore) -> Self {
        Self::with_ttl(store, Duration::from_millis(CONFIG_CACHE_TTL_MS))
    }

    pub fn with_ttl(store: ConfigStore, ttl: Duration) -> Self {
        Self { store, ttl, map: Mutex::new(HashMap::new()) }
    }

    pub fn get(&self, function: &FunctionId) -> Result<FunctionConfig, StoreError> {
        {
            let map = self.map.lock().unwrap();
            if let Some((at, cfg)) = map.get(function) {
                if at.elapsed() < self.ttl {
                    return Ok(cfg.clone());
                }
            }
        }
        let cfg = self.store.get(function)?;
        self.map.lock().unwrap().insert(function.clone(), (Instant::now(), cfg.clone()));
        Ok(cfg)
    }
}

/// Read-through image cache; blobs are immutable by digest so entries
/// never expire.
pub struct ImageCache {
    store: ImageStore,
    map: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

impl ImageCache {
    pub fn new(store: ImageStore) -> Self {
        Self { store, map: Mutex::new(HashMap::new()) }
    }

    pub fn get(&self, digest: &str) -> Result<Arc<Vec<u8>>, StoreError> {
        if let Some(blob) = self.map.lock().unwrap().get(digest) {
            return Ok(Arc::clone(blob));
        }
        let blob = Arc::new(self.store.get(digest)?);
        self.map.lock().unwrap().insert(digest.to_string(), Arc::clone(&blob));
        Ok(blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::types::ConcurrencyMode;

    fn sample_config(name: &str, digest: &str) -> FunctionConfig {
        FunctionConfig {
            function: FunctionId::new(name).unwrap(),
            image_digest: digest.to_string(),
            memory_limit_mb: 128,
            cpu_millis: 1000,
            concurrency: ConcurrencyMode::HardLimit { limit: 4 },
            idle_timeout_ms: 1000,
            exec_deadline_ms: 30_000,
        }
    }

    #[test]
    fn image_round_trip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let d1 = store.put(b"image bytes").unwrap();
        let d2 = store.put(b"image bytes").unwrap();
        assert_eq!(d1, d2);
        assert_eq!(store.get(&d1).unwrap(), b"image bytes");
        let blobs = fs::read_dir(dir.path().join("images")).unwrap().count();
        assert_eq!(blobs, 1);
    }

    #[test]
    fn empty_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        assert!(matches!(store.put(b""), Err(StoreError::EmptyImage)));
    }

    #[test]
    fn unknown_digest_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let missing = "0".repeat(64);
        assert!(matches!(store.get(&missing), Err(StoreError::NotFound(_))));
        assert!(matches!(store.get("zz"), Err(StoreError::InvalidDigest(_))));
    }

    #[test]
    fn tampered_blob_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let digest = store.put(b"genuine").unwrap();
        fs::write(dir.path().join("images").join(&digest), b"tampered").unwrap();
        assert!(matches!(store.get(&digest), Err(StoreError::Integrity { .. })));
    }

    #[test]
    fn config_round_trip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let store = ConfigStore::open(dir.path()).unwrap();
        let f = FunctionId::new("echo").unwrap();
        assert!(matches!(store.get(&f), Err(StoreError::NotFound(_))));

        let v1 = sample_config("echo", &"a".repeat(64));
        store.put(&v1).unwrap();
        assert_eq!(store.get(&f).unwrap(), v1);

        let mut v2 = v1.clone();
        v2.memory_limit_mb = 256;
        store.put(&v2).unwrap();
        assert_eq!(store.get(&f).unwrap(), v2);

        assert_eq!(store.list().unwrap(), vec![v2]);
    }

    #[test]
    fn config_cache_serves_within_ttl() {
        let dir = tempfile::tempdir().unwrap();
        let store = ConfigStore::open(dir.path()).unwrap();
        let cfg = sample_config("echo", &"b".repeat(64));
        store.put(&cfg).unwrap();

        let cache = ConfigCache::with_ttl(store.clone(), Duration::from_secs(60));
        let f = FunctionId::new("echo").unwrap();
        assert_eq!(cache.get(&f).unwrap(), cfg);

        // Remove the backing file: the cache still answers inside the TTL.
        fs::remove_file(dir.path().join("configs/echo.json")).unwrap();
        assert_eq!(cache.get(&f).unwrap(), cfg);
    }
}
