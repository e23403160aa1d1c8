use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, Result};
use crate::tasks::{Adam, FrozenEncoder, Model, Optimizer, TaskBundle, TrainState};
use crate::tensor::{ParamStore, RngState, Tensor};

const MAGIC: &[u8; 4] = b"ETFC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub config: RunConfig,
    pub step: usize,
    /// Drop-mask generator positioned for the next step.
    pub rng: RngState,
    pub encoder_digests: Vec<String>,
    pub adam: Option<AdamMeta>,
    pub tensors: Vec<TensorEntry>,
}

/// Frozen encoders, trainable model and optimizer state of one run.
///
/// Layout: `"ETFC"`, version `u32`, manifest length `u64`, manifest JSON,
/// then the tensor blob as little-endian `f32`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    blob: Vec<f32>,
}

fn push_store(prefix: &str, store: &ParamStore<f32>, tensors: &mut Vec<TensorEntry>, blob: &mut Vec<f32>) {
    for (_, e) in store.iter() {
        tensors.push(TensorEntry {
            name: format!("{prefix}/{}", e.name),
            shape: e.value.shape().to_vec(),
            offset: (blob.len() * 4) as u64,
        });
        blob.extend_from_slice(e.value.data());
    }
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, bundle: &TaskBundle, state: &TrainState) -> Self {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        for (t, enc) in bundle.encoders.iter().enumerate() {
            push_store(&format!("encoder{t}"), enc.store(), &mut tensors, &mut blob);
        }
        push_store("model", &state.model.store, &mut tensors, &mut blob);
        let adam = match &state.optimizer {
            Optimizer::Adam(a) => {
                for (prefix, moments) in [("adam.m", &a.m), ("adam.v", &a.v)] {
                    for ((_, e), m) in state.model.store.iter().zip(moments) {
                        tensors.push(TensorEntry {
                            name: format!("{prefix}/{}", e.name),
                            shape: m.shape().to_vec(),
                            offset: (blob.len() * 4) as u64,
                        });
                        blob.extend_from_slice(m.data());
                    }
                }
                Some(AdamMeta {
                    beta1: a.beta1,
                    beta2: a.beta2,
                    eps: a.eps,
                    t: a.t,
                })
            }
            Optimizer::Sgd => None,
        };
        let rng = crate::tensor::Rng::keyed(config.train.seed, crate::fuser::MASK_STREAM, state.step as u64).state();
        Self {
            manifest: Manifest {
                config_digest: config.digest(),
                // Where a run was written is not part of its identity.
                config: RunConfig {
                    output_dir: PathBuf::new(),
                    ..config.clone()
                },
                step: state.step,
                rng,
                encoder_digests: bundle.digests(),
                adam,
                tensors,
            },
            blob,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(16 + manifest.len() + self.blob.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for v in &self.blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let raw = &bytes[16 + len..];
        if !raw.len().is_multiple_of(4) {
            return Err(Error::Format("tensor blob is not a whole number of f32 values".into()));
        }
        let blob: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        for e in &manifest.tensors {
            let end = e.offset as usize / 4 + e.shape.iter().product::<usize>();
            if e.offset % 4 != 0 || end > blob.len() {
                return Err(Error::Format(format!("tensor `{}` lies outside the blob", e.name)));
            }
        }
        Ok(Self { manifest, blob })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Refuses a checkpoint written under a different config unless `force`.
    pub fn check_config(&self, config: &RunConfig, force: bool) -> Result<()> {
        let found = config.digest();
        if found != self.manifest.config_digest && !force {
            return Err(Error::DigestMismatch {
                expected: self.manifest.config_digest.clone(),
                found,
            });
        }
        Ok(())
    }

    fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let e = self
            .manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        let start = e.offset as usize / 4;
        let n: usize = e.shape.iter().product();
        Tensor::new(e.shape.clone(), self.blob[start..start + n].to_vec())
    }

    fn fill_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.entry(id).name);
            store.set_value(id, self.tensor(&name)?)?;
        }
        Ok(())
    }

    /// Rebuilds the frozen encoders and checks them against the recorded
    /// digests.
    pub fn bundle(&self) -> Result<TaskBundle> {
        let cfg = &self.manifest.config;
        let tasks = cfg.dataset.tasks.clone();
        let canonical = cfg.canonical();
        let mut encoders = Vec::with_capacity(tasks.len());
        for t in 0..tasks.len() {
            let prefix = format!("encoder{t}/");
            let mut store = ParamStore::new();
            for e in self.manifest.tensors.iter().filter(|e| e.name.starts_with(&prefix)) {
                store.insert(&e.name[prefix.len()..], self.tensor(&e.name)?, false);
            }
            let width = if t == canonical {
                cfg.structure.canonical
            } else {
                cfg.structure.prior
            };
            let enc = FrozenEncoder::from_store(t, width, store)?;
            let expected = self.manifest.encoder_digests.get(t).cloned().unwrap_or_default();
            if enc.digest() != expected {
                return Err(Error::DigestMismatch {
                    expected,
                    found: enc.digest().to_string(),
                });
            }
            encoders.push(enc);
        }
        let shape = vec![cfg.dataset.channels, cfg.dataset.image_size, cfg.dataset.image_size];
        TaskBundle::from_encoders(tasks, canonical, encoders, shape)
    }

    /// Rebuilds the trainable model and optimizer at the saved step.
    pub fn state(&self, bundle: &TaskBundle) -> Result<TrainState> {
        let cfg = &self.manifest.config;
        let mut model = Model::new(bundle, cfg.fuser_config(), cfg.train.decoder_hidden, cfg.train.seed)?;
        self.fill_store("model", &mut model.store)?;
        let optimizer = match &self.manifest.adam {
            None => Optimizer::Sgd,
            Some(meta) => {
                let mut adam = Adam::new(&model.store);
                adam.beta1 = meta.beta1;
                adam.beta2 = meta.beta2;
                adam.eps = meta.eps;
                adam.t = meta.t;
                for (i, (_, e)) in model.store.iter().enumerate() {
                    adam.m[i] = self.tensor(&format!("adam.m/{}", e.name))?;
                    adam.v[i] = self.tensor(&format!("adam.v/{}", e.name))?;
                }
                Optimizer::Adam(adam)
            }
        };
        Ok(TrainState {
            model,
            optimizer,
            step: self.manifest.step,
        })
    }
}
