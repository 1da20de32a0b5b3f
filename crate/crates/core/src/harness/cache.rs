//! Content-addressed artifact cache: a stage's output is stored under the
//! hash of everything that determines it, so unchanged upstream stages are
//! loaded instead of recomputed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradstore::GradientStore;
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};

/// Hex digest of the JSON encoding of `value`.
pub fn content_key(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("cache keys serialize");
    let digest = Sha256::digest(bytes);
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Sub-seed for a named stage, so stages draw independent streams from one seed.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Clone, Debug, Default)]
pub struct Cache {
    dir: Option<PathBuf>,
}

impl Cache {
    pub fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Error::file(d, e))?;
        }
        Ok(Self { dir })
    }

    pub fn disabled() -> Self {
        Self { dir: None }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path(&self, kind: &str, key: &str, ext: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{kind}-{key}.{ext}")))
    }

    pub fn checkpoint(&self, key: &str, make: impl FnOnce() -> Result<ModelParams>) -> Result<ModelParams> {
        let Some(path) = self.path("checkpoint", key, "selc") else {
            return make();
        };
        if path.exists() {
            log::debug!("cache hit {}", path.display());
            return load_checkpoint(&path);
        }
        let params = make()?;
        save_checkpoint(&params, &path)?;
        Ok(params)
    }

    /// `make` receives the path the store should be streamed to, if any.
    pub fn store(
        &self,
        key: &str,
        make: impl FnOnce(Option<&Path>) -> Result<GradientStore>,
    ) -> Result<GradientStore> {
        let Some(path) = self.path("store", key, "selg") else {
            return make(None);
        };
        if path.exists() {
            log::debug!("cache hit {}", path.display());
            return GradientStore::load(&path);
        }
        let partial = path.with_extension("selg.partial");
        let store = make(Some(&partial))?;
        fs::rename(&partial, &path).map_err(|e| Error::file(&path, e))?;
        Ok(store)
    }

    pub fn json<T: Serialize + DeserializeOwned>(
        &self,
        kind: &str,
        key: &str,
        make: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let Some(path) = self.path(kind, key, "json") else {
            return make();
        };
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
            return Ok(serde_json::from_str(&text)?);
        }
        let value = make()?;
        fs::write(&path, serde_json::to_vec_pretty(&value)?).map_err(|e| Error::file(&path, e))?;
        Ok(value)
    }
}
