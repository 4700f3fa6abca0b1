//! Binary checkpoint layout:
//!
//! ```text
//! b"EEGLCKPT" | version: u32 LE | header_len: u64 LE | header (JSON)
//! | parameter values (f64 LE, store order)
//! | first then second moments of every parameter that has them
//! | SHA-256 of everything above
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamW, EpochProgress, LossCurve, Moments, Schedule, Stage};
use crate::config::RunConfig;
use crate::instruct::TaskSet;
use crate::model::VariantTags;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"EEGLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: RunConfig,
    /// Seed the run was configured with.
    pub seed: u64,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub schedule: Schedule,
    /// Prototype banks and instruction vectors, present after tuning.
    pub tasks: Option<TaskSet>,
    pub tags: VariantTags,
    pub curve: LossCurve,
    pub progress: EpochProgress,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    /// Optimizer step count when moments exist.
    adam_steps: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    config: RunConfig,
    seed: u64,
    params: Vec<ParamMeta>,
    optimizer: OptimizerMeta,
    schedule: Schedule,
    /// Index of the last applied update, for readers of the header.
    schedule_step: Option<usize>,
    tasks: Option<TaskSet>,
    tags: VariantTags,
    curve: LossCurve,
    progress: EpochProgress,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self
            .store
            .iter()
            .map(|(id, p)| ParamMeta {
                name: p.name.clone(),
                group: p.group,
                rows: p.value.rows(),
                cols: p.value.cols(),
                adam_steps: self.optimizer.moments.get(id.index()).and_then(|m| m.as_ref()).map(|m| m.steps),
            })
            .collect();
        let header = Header {
            stage: self.stage,
            config: self.config.clone(),
            seed: self.seed,
            params,
            optimizer: OptimizerMeta {
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                weight_decay: self.optimizer.weight_decay,
            },
            schedule: self.schedule.clone(),
            schedule_step: self.schedule.step(),
            tasks: self.tasks.clone(),
            tags: self.tags.clone(),
            curve: self.curve.clone(),
            progress: self.progress,
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(json.len() + 8 * 3 * self.store.num_trainable() + 64);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let put = |buf: &mut Vec<u8>, m: &Matrix| {
            for x in m.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (_, p) in self.store.iter() {
            put(&mut buf, &p.value);
        }
        for m in self.optimizer.moments.iter().flatten() {
            put(&mut buf, &m.m);
            put(&mut buf, &m.v);
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(digest.as_slice());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        if bytes.len() < 20 + HASH_LEN {
            return Err(Error::Corrupt("file truncated".into()));
        }
        let (body, hash) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != hash {
            return Err(Error::Corrupt("checksum mismatch (truncated or modified file)".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Corrupt("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])?;
        let mut payload = &body[header_end..];
        let mut take = |rows: usize, cols: usize| -> Result<Matrix> {
            let n = rows * cols;
            if payload.len() < 8 * n {
                return Err(Error::Corrupt("payload shorter than the header declares".into()));
            }
            let data = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[8 * n..];
            Ok(Matrix::from_vec(rows, cols, data))
        };
        let mut store = ParamStore::new();
        for p in &header.params {
            let value = take(p.rows, p.cols)?;
            if store.id(&p.name).is_some() {
                return Err(Error::Corrupt(format!("duplicate parameter {}", p.name)));
            }
            store.add(p.name.clone(), p.group, value);
        }
        let mut moments = Vec::with_capacity(header.params.len());
        for p in &header.params {
            moments.push(match p.adam_steps {
                Some(steps) => Some(Moments {
                    m: take(p.rows, p.cols)?,
                    v: take(p.rows, p.cols)?,
                    steps,
                }),
                None => None,
            });
        }
        if !payload.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing payload bytes", payload.len())));
        }
        let o = header.optimizer;
        Ok(Self {
            stage: header.stage,
            config: header.config,
            seed: header.seed,
            store,
            optimizer: AdamW {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                moments,
            },
            schedule: header.schedule,
            tasks: header.tasks,
            tags: header.tags,
            curve: header.curve,
            progress: header.progress,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
