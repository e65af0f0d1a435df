//! TSMNet: `h = g_ψ ∘ m_φ ∘ f_θ` with a linear convolutional front end
//! `f_θ`, SPD domain-specific normalization plus tangent space mapping
//! `m_φ`, and a softmax classifier `g_ψ`. A Euclidean variant replaces the
//! SPD path by log-variance features for the ablation study.

mod euclid;
pub mod layers;
mod tsm;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use euclid::{EuclideanMbn, EuclideanNet, MomentStats};
pub use tsm::TsmNet;

use crate::error::{Error, Result};
use crate::optim::{ParamKind, ParamSlot};
use crate::sampling::SeededRng;
use crate::spdbn::{DomainId, Mode, SpdBnConfig};

/// Minibatch of trials; `data[j]` is the `P × T` trial `X_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochBatch {
    pub data: Vec<DMatrix<f64>>,
    pub labels: Vec<usize>,
    pub domains: Vec<DomainId>,
}

impl EpochBatch {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Unlabeled batches carry an empty `labels` vector.
    fn validate(&self, channels: usize, time: usize, classes: usize, labelled: bool) -> Result<()> {
        let want_labels = if labelled { self.data.len() } else { 0 };
        if self.labels.len() != want_labels || self.domains.len() != self.data.len() {
            return Err(Error::invalid(format!(
                "batch has {} trials, {} labels and {} domain ids",
                self.data.len(),
                self.labels.len(),
                self.domains.len()
            )));
        }
        if let Some(j) = self.data.iter().position(|x| x.shape() != (channels, time)) {
            return Err(Error::invalid(format!(
                "trial {j} has shape {:?}, model expects ({channels}, {time})",
                self.data[j].shape()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsmNetConfig {
    pub temporal_filters: usize,
    pub temporal_kernel: usize,
    pub spatio_spectral_filters: usize,
    pub subspace_dim: usize,
    pub reeig_eps: f64,
    pub classes: usize,
    pub channels: usize,
    pub time: usize,
}

impl Default for TsmNetConfig {
    fn default() -> Self {
        Self {
            temporal_filters: 4,
            temporal_kernel: 25,
            spatio_spectral_filters: 40,
            subspace_dim: 20,
            reeig_eps: 1e-4,
            classes: 2,
            channels: 12,
            time: 250,
        }
    }
}

impl TsmNetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("temporal_filters", self.temporal_filters),
            ("temporal_kernel", self.temporal_kernel),
            ("spatio_spectral_filters", self.spatio_spectral_filters),
            ("subspace_dim", self.subspace_dim),
            ("classes", self.classes),
            ("channels", self.channels),
            ("time", self.time),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.subspace_dim > self.spatio_spectral_filters {
            return Err(Error::config(format!(
                "subspace_dim ({}) exceeds spatio_spectral_filters ({})",
                self.subspace_dim, self.spatio_spectral_filters
            )));
        }
        if self.time < self.temporal_kernel {
            return Err(Error::config(format!("time ({}) is shorter than temporal_kernel ({})", self.time, self.temporal_kernel)));
        }
        if !(self.reeig_eps > 0.0) {
            return Err(Error::config("reeig_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Spd,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub net: TsmNetConfig,
    pub bn: SpdBnConfig,
    pub domain_specific: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { architecture: Architecture::Spd, net: TsmNetConfig::default(), bn: SpdBnConfig::default(), domain_specific: true }
    }
}

/// Named parameter gradients, in the order of [`Network::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<(&'static str, DMatrix<f64>)>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.0.iter().find(|(n, _)| *n == name).map(|(_, g)| g)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flat_map(|(_, g)| g.iter()).fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Parameter tensor with its optimizer treatment.
pub struct ParamRef<'a> {
    pub name: &'static str,
    pub kind: ParamKind,
    pub value: &'a mut DMatrix<f64>,
}

/// Result of a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// `M × C` class probabilities.
    pub probs: DMatrix<f64>,
    /// Mean cross-entropy.
    pub loss: f64,
    /// Eigenvalues clipped by ReEig over the batch.
    pub reeig_activations: usize,
    pub fallback_domains: Vec<DomainId>,
    pub tape: T,
}

fn argmax_rows(probs: &DMatrix<f64>) -> Vec<usize> {
    probs.row_iter().map(|r| r.transpose().argmax().0).collect()
}

impl<T> ForwardPass<T> {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }

    fn map_tape<U>(self, f: impl FnOnce(T) -> U) -> ForwardPass<U> {
        ForwardPass {
            probs: self.probs,
            loss: self.loss,
            reeig_activations: self.reeig_activations,
            fallback_domains: self.fallback_domains,
            tape: f(self.tape),
        }
    }
}

/// Label-free eval-mode output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: DMatrix<f64>,
    pub reeig_activations: usize,
    pub fallback_domains: Vec<DomainId>,
}

impl Prediction {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

impl<T> From<ForwardPass<T>> for Prediction {
    fn from(p: ForwardPass<T>) -> Self {
        Self { probs: p.probs, reeig_activations: p.reeig_activations, fallback_domains: p.fallback_domains }
    }
}

fn unlabeled(trials: &[DMatrix<f64>], domains: &[DomainId]) -> EpochBatch {
    EpochBatch { data: trials.to_vec(), labels: Vec::new(), domains: domains.to_vec() }
}

pub enum NetTape {
    Spd(tsm::TsmTape),
    Euclidean(euclid::EuclidTape),
}

/// Either architecture behind one interface.
#[derive(Debug, Clone)]
pub enum Network {
    Spd(TsmNet),
    Euclidean(EuclideanNet),
}

impl Network {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        Ok(match config.architecture {
            Architecture::Spd => Network::Spd(TsmNet::new(config, rng)?),
            Architecture::Euclidean => Network::Euclidean(EuclideanNet::new(config, rng)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Network::Spd(n) => &n.config,
            Network::Euclidean(n) => &n.config,
        }
    }

    pub fn forward(&mut self, batch: &EpochBatch, mode: Mode) -> Result<ForwardPass<NetTape>> {
        Ok(match self {
            Network::Spd(n) => n.forward(batch, mode)?.map_tape(NetTape::Spd),
            Network::Euclidean(n) => n.forward(batch, mode)?.map_tape(NetTape::Euclidean),
        })
    }

    pub fn forward_eval(&self, batch: &EpochBatch) -> Result<ForwardPass<NetTape>> {
        Ok(match self {
            Network::Spd(n) => n.forward_eval(batch)?.map_tape(NetTape::Spd),
            Network::Euclidean(n) => n.forward_eval(batch)?.map_tape(NetTape::Euclidean),
        })
    }

    /// Eval-mode class probabilities without labels.
    pub fn predict(&self, trials: &[DMatrix<f64>], domains: &[DomainId]) -> Result<Prediction> {
        let batch = unlabeled(trials, domains);
        Ok(match self {
            Network::Spd(n) => n.forward_eval_with(&batch, None)?.into(),
            Network::Euclidean(n) => n.forward_eval_with(&batch, None)?.into(),
        })
    }

    pub fn backward(&self, pass: &ForwardPass<NetTape>, labels: &[usize]) -> Result<Gradients> {
        match (self, &pass.tape) {
            (Network::Spd(n), NetTape::Spd(t)) => n.backward(t, &pass.probs, labels),
            (Network::Euclidean(n), NetTape::Euclidean(t)) => n.backward(t, &pass.probs, labels),
            _ => Err(Error::ModelState("tape recorded by a different architecture".into())),
        }
    }

    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        match self {
            Network::Spd(n) => n.params_mut(),
            Network::Euclidean(n) => n.params_mut(),
        }
    }

    /// Unsupervised test-time adaptation of one domain's statistics.
    pub fn adapt(&mut self, domain: DomainId, trials: &[DMatrix<f64>]) -> Result<()> {
        match self {
            Network::Spd(n) => n.adapt(domain, trials),
            Network::Euclidean(n) => n.adapt(domain, trials),
        }
    }

    pub fn domain_specific(&self) -> bool {
        self.config().domain_specific
    }
}

/// Pairs parameters with their gradients for one optimizer step.
pub fn param_slots<'a>(params: Vec<ParamRef<'a>>, grads: &'a Gradients) -> Result<Vec<ParamSlot<'a>>> {
    params
        .into_iter()
        .map(|p| {
            let grad = grads.get(p.name).ok_or_else(|| Error::ModelState(format!("missing gradient for `{}`", p.name)))?;
            Ok(ParamSlot { name: p.name, kind: p.kind, weight_decay: p.kind == ParamKind::Euclidean, value: p.value, grad })
        })
        .collect()
}
