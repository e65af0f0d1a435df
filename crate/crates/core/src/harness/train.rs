use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::balanced_accuracy;
use super::split::SplitPlan;
use crate::error::{Error, Result};
use crate::net::{param_slots, Network};
use crate::optim::{Adam, AdamConfig};
use crate::sampling::rng;
use crate::spdbn::Mode;
use crate::synthdata::{BatchPlan, Dataset, DomainBatchSampler};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainProtocol {
    pub epochs: usize,
    pub batch: BatchPlan,
    pub validation_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for TrainProtocol {
    fn default() -> Self {
        Self { epochs: 50, batch: BatchPlan::default(), validation_fraction: 0.2, adam: AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_balanced_accuracy: f64,
    /// ReEig clips summed over the epoch's training batches.
    pub reeig_activations: usize,
}

/// Everything here is a deterministic function of the inputs; wall-clock
/// time is kept in [`TrainOutcome::fit_seconds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_val_loss: f64,
    pub initial_val_balanced_accuracy: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch of the returned snapshot; 0 is the initialized model.
    pub selected_epoch: usize,
    pub selected_val_loss: f64,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Network,
    pub optimizer: Adam,
    pub log: TrainLog,
    pub fit_seconds: f64,
}

/// Eval-mode loss and balanced accuracy on labelled validation trials.
pub fn validation_scores(model: &Network, dataset: &Dataset, split: &SplitPlan) -> Result<(f64, f64)> {
    let refs = split.validation_refs();
    if refs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let batch = dataset.batch(&refs)?;
    let pass = model.forward_eval(&batch)?;
    Ok((pass.loss, balanced_accuracy(&pass.predictions(), &batch.labels)?))
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::Numeric(_) | Error::Domain { .. })
}

/// Minibatch Adam over the split's training trials. The momentum
/// schedule index is the zero-based epoch. Returns the snapshot with the
/// lowest validation loss; on a non-finite loss training stops and that
/// snapshot is returned with `log.aborted` set.
pub fn train(model: Network, dataset: &Dataset, split: &SplitPlan, protocol: &TrainProtocol, seed: u64) -> Result<TrainOutcome> {
    let start = Instant::now();
    let sampler = DomainBatchSampler::new(protocol.batch, split.train_pools())?;
    let mut r = rng(seed);
    let mut model = model;
    let mut adam = Adam::new(protocol.adam);
    let (initial_val_loss, initial_val_acc) = validation_scores(&model, dataset, split)?;
    let mut best = (model.clone(), adam.clone(), 0usize, initial_val_loss);
    let mut epochs = Vec::with_capacity(protocol.epochs);
    let mut aborted = None;

    'outer: for epoch in 1..=protocol.epochs {
        let k = epoch - 1;
        let batches = sampler.epoch(&mut r);
        let (mut loss_sum, mut clipped) = (0.0, 0);
        for refs in &batches {
            let batch = dataset.batch(refs)?;
            let step = model.forward(&batch, Mode::Train { k }).and_then(|pass| {
                let grads = model.backward(&pass, &batch.labels)?;
                let mut slots = param_slots(model.params_mut(), &grads)?;
                adam.step(&mut slots)?;
                Ok(pass)
            });
            match step {
                Ok(pass) => {
                    loss_sum += pass.loss;
                    clipped += pass.reeig_activations;
                }
                Err(e) if is_numeric(&e) => {
                    log::warn!("epoch {epoch}: {e}; keeping epoch {} snapshot", best.2);
                    aborted = Some(format!("epoch {epoch}: {e}"));
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let (val_loss, val_acc) = match validation_scores(&model, dataset, split) {
            Ok(v) if v.0.is_finite() || split.validation.values().all(Vec::is_empty) => v,
            Ok(v) => {
                aborted = Some(format!("epoch {epoch}: non-finite validation loss {}", v.0));
                break 'outer;
            }
            Err(e) if is_numeric(&e) => {
                aborted = Some(format!("epoch {epoch}: {e}"));
                break 'outer;
            }
            Err(e) => return Err(e),
        };
        let train_loss = loss_sum / batches.len().max(1) as f64;
        log::info!("epoch {epoch:3}  train {train_loss:.4}  val {val_loss:.4}  val bacc {val_acc:.3}  reeig {clipped}");
        epochs.push(EpochLog {
            epoch,
            batches: batches.len(),
            train_loss,
            val_loss,
            val_balanced_accuracy: val_acc,
            reeig_activations: clipped,
        });
        // NaN initial losses (no validation data) select the last epoch.
        if !(val_loss >= best.3) {
            best = (model.clone(), adam.clone(), epoch, val_loss);
        }
    }

    let (model, optimizer, selected_epoch, selected_val_loss) = best;
    Ok(TrainOutcome {
        model,
        optimizer,
        log: TrainLog {
            initial_val_loss,
            initial_val_balanced_accuracy: initial_val_acc,
            epochs,
            selected_epoch,
            selected_val_loss,
            aborted,
        },
        fit_seconds: start.elapsed().as_secs_f64(),
    })
}
