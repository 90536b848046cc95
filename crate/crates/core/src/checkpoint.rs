//! Binary parameter file plus a text manifest of hyperparameters.
//!
//! Binary layout (little-endian): magic `CSCKPT01`, tensor count (u32), then
//! per tensor: name length (u32), UTF-8 name, rank (u32), extents (u64 each),
//! values (f32 each).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::SeqLengths;
use crate::matching::PoolAxis;
use crate::model::{Model, ModelConfig, ModelError, Variant};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"CSCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("manifest key `{key}`: {message}")]
    Manifest { key: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Manifest path that accompanies a checkpoint file.
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes the named tensors of `model` and its manifest. `extra` lines are
/// appended to the manifest verbatim as `key=value`.
pub fn save<T: Scalar>(path: &Path, model: &Model<T>, extra: &[(String, String)]) -> Result<(), CheckpointError> {
    let params = model.params();
    let mut buf = Vec::with_capacity(16 + params.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        let t = params.get(id);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;

    let mut manifest = config_lines(model.config());
    for id in params.ids() {
        let shape: Vec<String> = params.get(id).shape().iter().map(usize::to_string).collect();
        manifest.push((format!("param.{}", params.name(id)), shape.join("x")));
    }
    manifest.extend(extra.iter().cloned());
    let text: String = manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mpath = manifest_path(path);
    std::fs::write(&mpath, text).map_err(io_err(&mpath))
}

fn config_lines(c: &ModelConfig) -> Vec<(String, String)> {
    [
        ("dim", c.dim.to_string()),
        ("hidden", c.hidden.to_string()),
        ("desc_len", c.lengths.desc.to_string()),
        ("name_len", c.lengths.name.to_string()),
        ("api_len", c.lengths.api.to_string()),
        ("tokens_len", c.lengths.tokens.to_string()),
        ("code_vocab", c.code_vocab.to_string()),
        ("desc_vocab", c.desc_vocab.to_string()),
        ("variant", c.variant.name()),
        ("relevance_pool_axis", c.pool_axis.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Parsed manifest: `key=value` pairs in file order.
pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>, CheckpointError> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Format {
            path: mpath.display().to_string(),
            message: format!("line `{line}` is not key=value"),
        })?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

/// Model config recorded in a manifest.
pub fn manifest_config(manifest: &BTreeMap<String, String>) -> Result<ModelConfig, CheckpointError> {
    let text = |key: &str| {
        manifest.get(key).ok_or_else(|| CheckpointError::Manifest {
            key: key.into(),
            message: "missing".into(),
        })
    };
    let count = |key: &str| -> Result<usize, CheckpointError> {
        text(key)?.parse().map_err(|_| CheckpointError::Manifest {
            key: key.into(),
            message: "not a count".into(),
        })
    };
    let variant: Variant = text("variant")?.parse().map_err(|m| CheckpointError::Manifest {
        key: "variant".into(),
        message: m,
    })?;
    let pool_axis: PoolAxis = text("relevance_pool_axis")?
        .parse()
        .map_err(|m| CheckpointError::Manifest {
            key: "relevance_pool_axis".into(),
            message: m,
        })?;
    Ok(ModelConfig {
        dim: count("dim")?,
        hidden: count("hidden")?,
        lengths: SeqLengths {
            desc: count("desc_len")?,
            name: count("name_len")?,
            api: count("api_len")?,
            tokens: count("tokens_len")?,
        },
        code_vocab: count("code_vocab")?,
        desc_vocab: count("desc_vocab")?,
        variant,
        pool_axis,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Format {
                path: self.path.display().to_string(),
                message: format!("truncated at byte {}", self.at),
            }
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Named tensors in file order.
pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let format = |message: String| CheckpointError::Format {
        path: path.display().to_string(),
        message,
    };
    let mut cur = Cursor { bytes: &bytes, at: 0, path };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(format("not a checkpoint file".into()));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| format("tensor name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| format(format!("`{name}` is too large")))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    if cur.at != bytes.len() {
        return Err(format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Loads a checkpoint, validating every tensor against the manifest config.
pub fn load(path: &Path) -> Result<Model<f32>, CheckpointError> {
    let config = manifest_config(&read_manifest(path)?)?;
    load_with_config(path, config)
}

/// Loads the tensors of a checkpoint into a model built from `config`.
pub fn load_with_config(path: &Path, config: ModelConfig) -> Result<Model<f32>, CheckpointError> {
    Ok(Model::from_named(config, read_tensors(path)?)?)
}
