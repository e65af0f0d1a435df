//! Single-file model checkpoints.
//!
//! Layout: magic `TSMNCKPT`, version byte, manifest length (u64 LE), the
//! JSON manifest, then every tensor listed in the manifest encoded as a
//! tensor container (see [`crate::synthdata::tensor`]), in manifest order.
//! Cached eigendecompositions of statistic matrices are stored alongside
//! them so that a reloaded model evaluates bit-identically.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::artifact::{read_file, write_file, ArtifactMeta};
use crate::error::{Error, Result};
use crate::harness::TrainLog;
use crate::matfun::{EigenPair, SpdMatrix, SymMatrix};
use crate::net::{ModelConfig, MomentStats, Network};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::sampling::rng;
use crate::spdbn::{DomainId, RunningGeoStats, SpdMbn};
use crate::synthdata::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSMNCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub key: DomainId,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u8,
    pub meta: ArtifactMeta,
    pub model: ModelConfig,
    pub layers: Vec<LayerEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub log: Option<TrainLog>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: ArtifactMeta,
    pub model: Network,
    pub optimizer: Option<Adam>,
    pub log: Option<TrainLog>,
}

#[derive(Default)]
struct Tensors(Vec<(String, Tensor)>);

impl Tensors {
    fn matrix(&mut self, name: String, m: &DMatrix<f64>) {
        self.0.push((name, Tensor::from_matrix(m)));
    }

    fn vector(&mut self, name: String, v: &DVector<f64>) {
        self.0.push((name, Tensor { dims: vec![v.len()], data: v.iter().copied().collect() }));
    }

    fn scalar(&mut self, name: String, x: f64) {
        self.0.push((name, Tensor { dims: vec![1], data: vec![x] }));
    }

    fn spd(&mut self, name: String, z: &SpdMatrix) {
        if let Some(e) = z.as_sym().cached_eig() {
            self.vector(format!("{name}.eigvals"), &e.values);
            self.matrix(format!("{name}.eigvecs"), &e.vectors);
        }
        self.matrix(name, z.matrix());
    }
}

struct Lookup<'a> {
    tensors: BTreeMap<String, Tensor>,
    file: &'a Path,
}

impl Lookup<'_> {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors.remove(name).ok_or_else(|| Error::format(self.file, name, "tensor missing from checkpoint"))
    }

    fn matrix(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let t = self.take(name)?;
        t.to_matrix().map_err(|e| Error::format(self.file, name, e.to_string()))
    }

    fn vector(&mut self, name: &str) -> Result<DVector<f64>> {
        let t = self.take(name)?;
        if t.dims.len() != 1 {
            return Err(Error::format(self.file, name, format!("expected a vector, got dims {:?}", t.dims)));
        }
        Ok(DVector::from_vec(t.data))
    }

    fn scalar(&mut self, name: &str) -> Result<f64> {
        let t = self.take(name)?;
        match t.data[..] {
            [x] => Ok(x),
            _ => Err(Error::format(self.file, name, "expected a scalar")),
        }
    }

    fn spd(&mut self, name: &str) -> Result<SpdMatrix> {
        let vals = format!("{name}.eigvals");
        let eig = if self.tensors.contains_key(&vals) {
            Some(EigenPair { values: self.vector(&vals)?, vectors: self.matrix(&format!("{name}.eigvecs"))? })
        } else {
            None
        };
        let m = self.matrix(name)?;
        SpdMatrix::from_sym(SymMatrix::from_parts(m, eig)).map_err(|e| Error::format(self.file, name, e.to_string()))
    }
}

fn layer_prefix(key: DomainId) -> String {
    format!("bn/{}", key.0)
}

impl Checkpoint {
    fn collect(&self) -> (Vec<LayerEntry>, Tensors) {
        let mut t = Tensors::default();
        let mut layers = Vec::new();
        let mut model = self.model.clone();
        for p in model.params_mut() {
            t.matrix(format!("param/{}", p.name), p.value);
        }
        match &self.model {
            Network::Spd(n) => {
                for (key, layer) in n.bn.layers() {
                    let s = &layer.stats;
                    let pre = layer_prefix(*key);
                    t.spd(format!("{pre}/train_mean"), &s.train_mean);
                    t.scalar(format!("{pre}/train_var"), s.train_var);
                    t.spd(format!("{pre}/test_mean"), &s.test_mean);
                    t.scalar(format!("{pre}/test_var"), s.test_var);
                    layers.push(LayerEntry { key: *key, step: s.step });
                }
            }
            Network::Euclidean(n) => {
                for (key, s) in n.bn.layers() {
                    let pre = layer_prefix(*key);
                    t.vector(format!("{pre}/train_mean"), &s.train_mean);
                    t.vector(format!("{pre}/train_var"), &s.train_var);
                    t.vector(format!("{pre}/test_mean"), &s.test_mean);
                    t.vector(format!("{pre}/test_var"), &s.test_var);
                    layers.push(LayerEntry { key: *key, step: s.step });
                }
            }
        }
        if let Some(adam) = &self.optimizer {
            for (name, m) in &adam.moments {
                t.matrix(format!("adam/{name}/first"), &m.first);
                t.matrix(format!("adam/{name}/second"), &m.second);
            }
        }
        (layers, t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (layers, tensors) = self.collect();
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            model: *self.model.config(),
            layers,
            optimizer: self.optimizer.as_ref().map(|a| OptimizerEntry {
                config: a.config,
                step: a.step,
                moments: a.moments.keys().cloned().collect(),
            }),
            log: self.log.clone(),
            tensors: tensors.0.iter().map(|(n, t)| TensorEntry { name: n.clone(), dims: t.dims.clone() }).collect(),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::invalid(format!("checkpoint manifest: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors.0 {
            t.encode(&mut out);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8], file: &Path) -> Result<(Self, CheckpointManifest)> {
        if bytes.len() < 17 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(file, "magic", "not a checkpoint file"));
        }
        if bytes[8] != CHECKPOINT_VERSION {
            return Err(Error::format(file, "version", format!("unsupported version {}, expected {CHECKPOINT_VERSION}", bytes[8])));
        }
        let len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
        let end = 17usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::format(file, "manifest", "truncated"))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[17..end]).map_err(|e| Error::format(file, "manifest", e.to_string()))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::format(file, "format_version", "manifest version does not match the header"));
        }
        let mut pos = end;
        let mut tensors = BTreeMap::new();
        for entry in &manifest.tensors {
            let (t, used) = Tensor::decode(&bytes[pos..], file)?;
            if t.dims != entry.dims {
                return Err(Error::format(file, &entry.name, format!("dims {:?} differ from manifest {:?}", t.dims, entry.dims)));
            }
            pos += used;
            tensors.insert(entry.name.clone(), t);
        }
        if pos != bytes.len() {
            return Err(Error::format(file, "tensors", format!("{} trailing bytes", bytes.len() - pos)));
        }
        let mut look = Lookup { tensors, file };

        let mut model = Network::new(manifest.model, &mut rng(0)).map_err(|e| Error::format(file, "model", e.to_string()))?;
        for p in model.params_mut() {
            let name = format!("param/{}", p.name);
            let m = look.matrix(&name)?;
            if m.shape() != p.value.shape() {
                return Err(Error::format(file, &name, format!("shape {:?}, model expects {:?}", m.shape(), p.value.shape())));
            }
            *p.value = m;
        }
        for entry in &manifest.layers {
            let pre = layer_prefix(entry.key);
            let bad = |e: Error| Error::format(file, &pre, e.to_string());
            match &mut model {
                Network::Spd(n) => {
                    let stats = RunningGeoStats {
                        train_mean: look.spd(&format!("{pre}/train_mean"))?,
                        train_var: look.scalar(&format!("{pre}/train_var"))?,
                        test_mean: look.spd(&format!("{pre}/test_mean"))?,
                        test_var: look.scalar(&format!("{pre}/test_var"))?,
                        step: entry.step,
                    };
                    let config = n.bn.config;
                    n.bn.insert_layer(entry.key, SpdMbn { config, stats }).map_err(bad)?;
                }
                Network::Euclidean(n) => {
                    let stats = MomentStats {
                        train_mean: look.vector(&format!("{pre}/train_mean"))?,
                        train_var: look.vector(&format!("{pre}/train_var"))?,
                        test_mean: look.vector(&format!("{pre}/test_mean"))?,
                        test_var: look.vector(&format!("{pre}/test_var"))?,
                        step: entry.step,
                    };
                    n.bn.insert_layer(entry.key, stats).map_err(bad)?;
                }
            }
        }
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                let mut adam = Adam::new(o.config);
                adam.step = o.step;
                for name in &o.moments {
                    let first = look.matrix(&format!("adam/{name}/first"))?;
                    let second = look.matrix(&format!("adam/{name}/second"))?;
                    adam.moments.insert(name.clone(), Moments { first, second });
                }
                Some(adam)
            }
        };
        if let Some(extra) = look.tensors.keys().next() {
            return Err(Error::format(file, extra, "tensor not used by the model"));
        }
        Ok((Self { meta: manifest.meta.clone(), model, optimizer, log: manifest.log.clone() }, manifest))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointManifest)> {
        Self::from_bytes(&read_file(path)?, path)
    }
}
