use std::cell::Cell;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::metrics::{balanced_accuracy, confusion_matrix, mean_std, present_classes};
use crate::artifact::ArtifactMeta;
use crate::error::{Error, Result};
use crate::net::{Network, Prediction};
use crate::spdbn::DomainId;
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessEvent {
    Adapted(DomainId),
    Predicted(DomainId),
    LabelsRead(DomainId),
}

/// Labels that can only be read by presenting the predictions made for
/// them; every read is counted.
#[derive(Debug)]
pub struct SealedLabels {
    labels: Vec<usize>,
    reads: Cell<usize>,
}

impl SealedLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels, reads: Cell::new(0) }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    pub fn open(&self, predictions: &Prediction) -> Result<&[usize]> {
        if predictions.probs.nrows() != self.labels.len() {
            return Err(Error::invalid(format!("{} predictions for {} sealed labels", predictions.probs.nrows(), self.labels.len())));
        }
        self.reads.set(self.reads.get() + 1);
        Ok(&self.labels)
    }
}

#[derive(Debug)]
pub struct TargetDomain {
    pub id: DomainId,
    pub trials: Vec<DMatrix<f64>>,
    pub labels: SealedLabels,
}

pub fn target_domains(dataset: &Dataset, ids: &[DomainId]) -> Result<Vec<TargetDomain>> {
    ids.iter()
        .map(|&id| {
            let d = dataset.domain(id).ok_or_else(|| Error::invalid(format!("dataset has no domain {id}")))?;
            Ok(TargetDomain { id, trials: d.trials.clone(), labels: SealedLabels::new(d.labels.clone()) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: DomainId,
    pub trials: usize,
    pub balanced_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub present_classes: usize,
    /// Labels of this domain cover a single class.
    pub single_class: bool,
    pub adapted: bool,
    pub reeig_activations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDomain {
    pub domain: DomainId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ArtifactMeta,
    pub adaptation: bool,
    pub domains: Vec<DomainReport>,
    pub skipped: Vec<SkippedDomain>,
    pub mean_balanced_accuracy: f64,
    pub std_balanced_accuracy: f64,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# config_hash {}  seed {}  {}", self.meta.config_hash, self.meta.seed, self.meta.version).unwrap();
        writeln!(s, "{:>8} {:>7} {:>9} {:>8} {:>6}", "domain", "trials", "bal_acc", "adapted", "reeig").unwrap();
        for d in &self.domains {
            let flag = if d.single_class { " single-class" } else { "" };
            writeln!(s, "{:>8} {:>7} {:>9.4} {:>8} {:>6}{flag}", d.domain, d.trials, d.balanced_accuracy, d.adapted, d.reeig_activations).unwrap();
        }
        for k in &self.skipped {
            writeln!(s, "{:>8} skipped: {}", k.domain, k.reason).unwrap();
        }
        writeln!(s, "mean {:.4}  std {:.4}", self.mean_balanced_accuracy, self.std_balanced_accuracy).unwrap();
        s
    }
}

/// Unsupervised per-domain adaptation followed by scoring. With `adapt`
/// and a domain-specific model each target gets statistics fitted on its
/// unlabeled features; otherwise the model is applied as is (an unseen
/// domain then uses identity statistics). Labels are opened only after the
/// domain's predictions exist, and `events` records the order.
pub fn adapt_and_eval(
    model: &Network,
    targets: &[TargetDomain],
    adapt: bool,
    meta: &ArtifactMeta,
    events: &mut Vec<AccessEvent>,
) -> Result<EvalReport> {
    let mut domains = Vec::new();
    let mut skipped = Vec::new();
    for t in targets {
        if t.trials.len() < 2 {
            log::warn!("target domain {} has {} trials; skipped", t.id, t.trials.len());
            skipped.push(SkippedDomain { domain: t.id, reason: format!("{} trials, need at least 2", t.trials.len()) });
            continue;
        }
        let adapted = adapt && model.domain_specific();
        let prediction = if adapted {
            let mut m = model.clone();
            m.adapt(t.id, &t.trials)?;
            events.push(AccessEvent::Adapted(t.id));
            m.predict(&t.trials, &vec![t.id; t.trials.len()])?
        } else {
            model.predict(&t.trials, &vec![t.id; t.trials.len()])?
        };
        events.push(AccessEvent::Predicted(t.id));
        let preds = prediction.predictions();
        let labels = t.labels.open(&prediction)?;
        events.push(AccessEvent::LabelsRead(t.id));
        let classes = model.config().net.classes;
        let present = present_classes(labels);
        if present < 2 {
            log::warn!("target domain {} has single-class labels", t.id);
        }
        domains.push(DomainReport {
            domain: t.id,
            trials: t.trials.len(),
            balanced_accuracy: balanced_accuracy(&preds, labels)?,
            confusion: confusion_matrix(&preds, labels, classes),
            present_classes: present,
            single_class: present < 2,
            adapted,
            reeig_activations: prediction.reeig_activations,
        });
    }
    let scores: Vec<f64> = domains.iter().map(|d| d.balanced_accuracy).collect();
    let (mean, std) = mean_std(&scores);
    Ok(EvalReport {
        meta: meta.clone(),
        adaptation: adapt,
        domains,
        skipped,
        mean_balanced_accuracy: mean,
        std_balanced_accuracy: std,
    })
}
