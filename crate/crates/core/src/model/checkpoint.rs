//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "SELC" | version u32 = 1 | header_len u32 | JSON header | tensors as row-major f32
//! ```
//!
//! The header lists `{task, V, h, C, hidden_layer, tensors: [{name, shape}]}`.
//! An optional `<path>.meta.json` sidecar records how the weights were trained.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{tensor_shapes, ModelConfig, ModelParams, OptimizerKind, Task};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SELC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    task: Task,
    #[serde(rename = "V")]
    vocab_size: usize,
    h: usize,
    #[serde(rename = "C")]
    num_classes: usize,
    hidden_layer: bool,
    tensors: Vec<TensorEntry>,
}

/// Sidecar training provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub optimizer: Option<OptimizerKind>,
    pub seed: u64,
    pub epochs: usize,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub(crate) fn encode(params: &ModelParams) -> Vec<u8> {
    let c = params.config;
    let header = Header {
        task: c.task,
        vocab_size: c.vocab_size,
        h: c.embed_dim,
        num_classes: c.num_classes,
        hidden_layer: c.hidden_layer,
        tensors: tensor_shapes(&c)
            .into_iter()
            .map(|(name, shape)| TensorEntry {
                name: name.to_string(),
                shape,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for block in params.blocks() {
        for x in block {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected \"SELC\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let header_len = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let config = ModelConfig {
        task: header.task,
        vocab_size: header.vocab_size,
        embed_dim: header.h,
        num_classes: header.num_classes,
        hidden_layer: header.hidden_layer,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let expected = tensor_shapes(&config);
    let listed: Vec<(&str, [usize; 2])> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.shape))
        .collect();
    if listed != expected {
        return Err(Error::Checkpoint(format!(
            "tensor list {listed:?} does not match header config, expected {expected:?}"
        )));
    }
    let mut params = ModelParams::zeros(config);
    for block in params.blocks_mut() {
        let raw = cur.take(block.len() * 4)?;
        for (x, b) in block.iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensors",
            bytes.len() - cur.pos
        )));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(params))?;
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint_with_meta(
    params: &ModelParams,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    save_checkpoint(params, path)?;
    let side = meta_path(path);
    let file = File::create(&side).map_err(|e| Error::file(&side, e))?;
    serde_json::to_writer_pretty(file, meta)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for cfg in [
            ModelConfig::classification(30, 6, 4).with_hidden(true),
            ModelConfig::next_token(25, 3),
        ] {
            let p = init_params(cfg, 9).unwrap();
            let path = dir.path().join("m.selc");
            save_checkpoint(&p, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, p);
            assert_eq!(encode(&back), std::fs::read(&path).unwrap());
        }
    }

    #[test]
    fn meta_sidecar_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.selc");
        let p = init_params(ModelConfig::classification(5, 2, 2), 0).unwrap();
        let meta = CheckpointMeta {
            optimizer: Some(OptimizerKind::Adam),
            seed: 4,
            epochs: 3,
        };
        save_checkpoint_with_meta(&p, &meta, &path).unwrap();
        let side = std::fs::read_to_string(dir.path().join("m.selc.meta.json")).unwrap();
        let back: CheckpointMeta = serde_json::from_str(&side).unwrap();
        assert_eq!(back, meta);
    }

    #[test]
    fn truncated_checkpoint() {
        let p = init_params(ModelConfig::classification(30, 6, 4), 1).unwrap();
        let bytes = encode(&p);
        for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("unexpected end of checkpoint"), "{err}");
        }
    }

    #[test]
    fn wrong_magic() {
        let p = init_params(ModelConfig::classification(30, 6, 4), 1).unwrap();
        let mut bytes = encode(&p);
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("expected \"SELC\""), "{err}");
    }

    #[test]
    fn wrong_version() {
        let p = init_params(ModelConfig::classification(30, 6, 4), 1).unwrap();
        let mut bytes = encode(&p);
        bytes[4] = 7;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn header_shape_mismatch() {
        let p = init_params(ModelConfig::classification(30, 6, 4), 1).unwrap();
        let bytes = encode(&p);
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        let tampered = header.replacen("[30,6]", "[31,6]", 1);
        assert_eq!(tampered.len(), header.len());
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[12 + header_len..]);
        assert!(decode(&out).unwrap_err().to_string().contains("does not match"));
    }
}
