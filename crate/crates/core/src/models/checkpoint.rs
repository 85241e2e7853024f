//! `TAVC` checkpoint files.
//!
//! Layout: magic `TAVC`, `u16` version, `u32` manifest length, TOML
//! manifest, raw little-endian `f32` parameter values in manifest order,
//! then (if an optimizer is stored) first and second moments of every
//! trainable entry, and a trailing FNV-1a 64 checksum of everything before
//! it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::ParamKind;
use crate::train::{AdamW, AdamWConfig};
use crate::util::{atomic_write, fnv64, put_f32s, read_file, Reader};

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"TAVC";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointParam {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub seed: u64,
    pub epoch: u64,
    /// Free-form snapshot of the run configuration.
    pub config_snapshot: String,
    pub params: Vec<CheckpointParam>,
    pub optimizer: Option<AdamW<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: String,
    epoch: u64,
    config_snapshot: String,
    model: ModelConfig,
    optimizer: Option<OptimizerManifest>,
    params: Vec<ManifestParam>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerManifest {
    step: u64,
    hyper: AdamWConfig,
}

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    buffer: bool,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, epoch: u64, optimizer: Option<&AdamW<f32>>, config_snapshot: &str) -> Self {
        Self {
            model: model.config().clone(),
            seed: model.params().seed(),
            epoch,
            config_snapshot: config_snapshot.to_string(),
            params: model
                .params()
                .entries()
                .iter()
                .map(|e| CheckpointParam {
                    name: e.name.clone(),
                    kind: e.kind,
                    shape: e.tensor.shape().to_vec(),
                    data: e.tensor.data().to_vec(),
                })
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model described by the checkpoint and loads its values.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut m = Model::build(&self.model, self.seed)?;
        self.apply_to(&mut m)?;
        Ok(m)
    }

    /// Copies parameters into an existing model after checking that the
    /// configuration and every entry match.
    pub fn apply_to(&self, model: &mut Model<f32>) -> Result<()> {
        if model.config() != &self.model {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint was written for {:?}, model is {:?}",
                self.model,
                model.config()
            )));
        }
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} entries, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, p) in ids.into_iter().zip(&self.params) {
            let e = store.entry(id);
            if e.name != p.name || e.tensor.shape() != p.shape.as_slice() || e.kind != p.kind {
                return Err(Error::CheckpointMismatch(format!(
                    "entry {} {:?} does not match model entry {} {:?}",
                    p.name,
                    p.shape,
                    e.name,
                    e.tensor.shape()
                )));
            }
            store.get_mut(id).data_mut().copy_from_slice(&p.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            seed: self.seed.to_string(),
            epoch: self.epoch,
            config_snapshot: self.config_snapshot.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerManifest {
                step: o.step,
                hyper: o.cfg.clone(),
            }),
            params: self
                .params
                .iter()
                .map(|p| ManifestParam {
                    name: p.name.clone(),
                    buffer: p.kind == ParamKind::Buffer,
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let len = u32::try_from(text.len()).map_err(|_| Error::InvalidArgument("manifest too large".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for p in &self.params {
            put_f32s(&mut out, &p.data);
        }
        if let Some(o) = &self.optimizer {
            if o.m.len() != self.params.len() {
                return Err(Error::InvalidArgument(
                    "optimizer state does not match parameters".into(),
                ));
            }
            for (moments, p) in [&o.m, &o.v].into_iter().flat_map(|mv| mv.iter().zip(&self.params)) {
                let expect = if p.kind == ParamKind::Trainable {
                    p.data.len()
                } else {
                    0
                };
                if moments.len() != expect {
                    return Err(Error::InvalidArgument(format!("moment size mismatch for {}", p.name)));
                }
                put_f32s(&mut out, moments);
            }
        }
        let sum = fnv64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "TAVC".into(),
            });
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let len = r.u32("manifest length")? as usize;
        let text = std::str::from_utf8(r.take(len, "manifest")?)
            .map_err(|e| Error::CheckpointMismatch(format!("manifest is not UTF-8: {e}")))?;
        let man: Manifest =
            toml::from_str(text).map_err(|e| Error::CheckpointMismatch(format!("unreadable manifest: {e}")))?;
        let overflow = |name: &str| Error::ExtentOverflow {
            path: path.to_path_buf(),
            detail: format!("shape of {name}"),
        };
        let mut params = Vec::with_capacity(man.params.len());
        for p in &man.params {
            let n = p
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| overflow(&p.name))?;
            params.push(CheckpointParam {
                name: p.name.clone(),
                kind: if p.buffer {
                    ParamKind::Buffer
                } else {
                    ParamKind::Trainable
                },
                shape: p.shape.clone(),
                data: r.f32s(n, &p.name)?,
            });
        }
        let optimizer = match man.optimizer {
            None => None,
            Some(o) => {
                let read_moments = |r: &mut Reader<'_>| -> Result<Vec<Vec<f32>>> {
                    params
                        .iter()
                        .map(|p| {
                            let n = if p.kind == ParamKind::Trainable {
                                p.data.len()
                            } else {
                                0
                            };
                            r.f32s(n, "optimizer moments")
                        })
                        .collect()
                };
                let m = read_moments(&mut r)?;
                let v = read_moments(&mut r)?;
                Some(AdamW {
                    cfg: o.hyper,
                    step: o.step,
                    m,
                    v,
                })
            }
        };
        let body_end = r.pos();
        let stored = r.u64("checksum")?;
        if r.pos() != bytes.len() {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("{} unexpected trailing bytes", bytes.len() - r.pos()),
            });
        }
        if fnv64(&bytes[..body_end]) != stored {
            return Err(Error::ChecksumMismatch {
                path: path.to_path_buf(),
            });
        }
        let seed = man
            .seed
            .parse()
            .map_err(|_| Error::CheckpointMismatch(format!("bad seed {:?}", man.seed)))?;
        Ok(Self {
            model: man.model,
            seed,
            epoch: man.epoch,
            config_snapshot: man.config_snapshot,
            params,
            optimizer,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?, path)
}
