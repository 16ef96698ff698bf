//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MDTSCKPT" | version u32 | sha256(config json) [32]
//! meta_len u64 | meta json
//! blob_count u64 | { name_len u32 | name | rows u64 | cols u64 | f64 × rows·cols }*
//! sha256(everything above) [32]
//! ```
//!
//! Parameters are stored as 64-bit floats so that a round trip is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::finetune::TaskSpec;
use crate::matrix::Matrix;
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tokeniser::DomainRegistry;
use crate::training::TrainState;

pub const MAGIC: &[u8; 8] = b"MDTSCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamW>,
    pub train_state: Option<TrainState>,
    pub task: Option<TaskSpec>,
}

impl Checkpoint {
    pub fn from_model(model: Model) -> Self {
        Self { model, optimizer: None, train_state: None, task: None }
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    registry: DomainRegistry,
    optimizer: Option<OptimizerMeta>,
    train_state: Option<TrainState>,
    task: Option<TaskSpec>,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Corrupted(format!("metadata: {e}"))
}

/// Serialises a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(&ckpt.model.config).map_err(json_err)?;
    let meta = Meta {
        config: ckpt.model.config.clone(),
        registry: ckpt.model.registry.clone(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerMeta { config: o.config, step: o.step }),
        train_state: ckpt.train_state.clone(),
        task: ckpt.task.clone(),
    };
    let meta_json = serde_json::to_vec(&meta).map_err(json_err)?;

    let mut blobs: Vec<(String, &Matrix)> =
        ckpt.model.params.iter().map(|(_, n, m)| (format!("param/{n}"), m)).collect();
    if let Some(opt) = &ckpt.optimizer {
        for (i, m) in opt.first.iter().enumerate() {
            blobs.push((format!("adam.m/{i}"), m));
        }
        for (i, m) in opt.second.iter().enumerate() {
            blobs.push((format!("adam.v/{i}"), m));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&config_json));
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
    for (name, m) in blobs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupted("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Corrupted("length overflow".into()))
    }
}

/// Parses bytes produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let header = MAGIC.len() + 4;
    if bytes.len() < header || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupted("missing checkpoint header".into()));
    }
    let found = u32::from_le_bytes(bytes[MAGIC.len()..header].try_into().expect("4 bytes"));
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found, expected: FORMAT_VERSION });
    }
    if bytes.len() < header + 2 * DIGEST_LEN {
        return Err(Error::Corrupted("file is truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Corrupted("content digest does not match".into()));
    }

    let mut c = Cursor { buf: body, pos: header };
    let config_digest = c.take(DIGEST_LEN)?.to_vec();
    let meta_len = c.len()?;
    let meta: Meta = serde_json::from_slice(c.take(meta_len)?).map_err(json_err)?;
    let config_json = serde_json::to_vec(&meta.config).map_err(json_err)?;
    if Sha256::digest(&config_json).as_slice() != config_digest.as_slice() {
        return Err(Error::Corrupted("config digest does not match".into()));
    }

    let count = c.len()?;
    let mut params = ParamStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Corrupted("blob name is not UTF-8".into()))?
            .to_string();
        let rows = c.len()?;
        let cols = c.len()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Corrupted("blob size overflow".into()))?;
        let data: Vec<f64> =
            c.take(n)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let m = Matrix::from_vec(rows, cols, data);
        if let Some(p) = name.strip_prefix("param/") {
            params.insert(p, m).map_err(|_| Error::Corrupted(format!("duplicate blob {name}")))?;
        } else if name.starts_with("adam.m/") {
            first.push(m);
        } else if name.starts_with("adam.v/") {
            second.push(m);
        } else {
            return Err(Error::Corrupted(format!("unknown blob {name}")));
        }
    }
    if c.pos != body.len() {
        return Err(Error::Corrupted("trailing bytes after blobs".into()));
    }
    let optimizer = meta.optimizer.map(|o| AdamW { config: o.config, step: o.step, first, second });
    Ok(Checkpoint {
        model: Model { config: meta.config, params, registry: meta.registry },
        optimizer,
        train_state: meta.train_state,
        task: meta.task,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
