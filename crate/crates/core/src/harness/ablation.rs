use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::eval::{adapt_and_eval, target_domains};
use super::metrics::mean_std;
use super::split::SplitPlan;
use super::train::{train, TrainProtocol};
use crate::artifact::ArtifactMeta;
use crate::error::{Error, Result};
use crate::net::{Architecture, ModelConfig, Network};
use crate::sampling::rng;
use crate::spdbn::BnMode;
use crate::synthdata::Dataset;

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// SPD domain-specific momentum batch normalization.
    Spddsmbn,
    /// SPD batch normalization without momentum decay, domain-specific.
    SpdbnDs,
    /// SPD momentum batch normalization shared across domains.
    SpdmbnNoDs,
    /// Euclidean log-variance pipeline, domain-specific momentum BN.
    EuclideanDsmbn,
    /// Euclidean log-variance pipeline, shared momentum BN.
    EuclideanMbnNoDs,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Spddsmbn, Arm::SpdbnDs, Arm::SpdmbnNoDs, Arm::EuclideanDsmbn, Arm::EuclideanMbnNoDs];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Spddsmbn => "spddsmbn",
            Arm::SpdbnDs => "spdbn_ds",
            Arm::SpdmbnNoDs => "spdmbn_no_ds",
            Arm::EuclideanDsmbn => "euclidean_dsmbn",
            Arm::EuclideanMbnNoDs => "euclidean_mbn_no_ds",
        }
    }

    /// Model configuration of this arm, derived from the proposed one.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut c = *base;
        let (arch, mode, ds) = match self {
            Arm::Spddsmbn => (Architecture::Spd, BnMode::SpdMbn, true),
            Arm::SpdbnDs => (Architecture::Spd, BnMode::SpdBn, true),
            Arm::SpdmbnNoDs => (Architecture::Spd, BnMode::SpdMbn, false),
            Arm::EuclideanDsmbn => (Architecture::Euclidean, BnMode::SpdMbn, true),
            Arm::EuclideanMbnNoDs => (Architecture::Euclidean, BnMode::SpdMbn, false),
        };
        c.architecture = arch;
        c.bn.mode = mode;
        c.domain_specific = ds;
        c
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation arm `{s}`; expected one of {:?}", Arm::ALL.map(Arm::name))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: Arm,
    /// Mean target balanced accuracy per seed.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Paired seed-wise differences to the proposed arm, in percentage points.
    pub delta_mean: f64,
    pub delta_std: f64,
    pub fit_seconds_mean: f64,
    /// Two-sided sign-flip permutation p-value of the paired deltas.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub meta: ArtifactMeta,
    pub seeds: Vec<u64>,
    pub rows: Vec<ArmRow>,
}

impl AblationTable {
    pub fn row(&self, arm: Arm) -> Option<&ArmRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# config_hash {}  seed {}  {}", self.meta.config_hash, self.meta.seed, self.meta.version).unwrap();
        writeln!(s, "{:<20} {:>8} {:>8} {:>10} {:>9} {:>10} {:>8}", "arm", "bal_acc", "std", "delta_pp", "delta_sd", "fit_time_s", "p").unwrap();
        for r in &self.rows {
            let p = r.p_value.map_or("-".to_string(), |p| format!("{p:.4}"));
            writeln!(
                s,
                "{:<20} {:>8.4} {:>8.4} {:>10.2} {:>9.2} {:>10.1} {:>8}",
                r.arm.name(),
                r.mean,
                r.std,
                r.delta_mean,
                r.delta_std,
                r.fit_seconds_mean,
                p
            )
            .unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    /// Sign-flip permutations for the optional p-value column; 0 disables it.
    pub permutations: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { arms: Arm::ALL.to_vec(), seeds: (0..5).collect(), permutations: 0 }
    }
}

/// Per-seed score of one arm: train on the source split, adapt and score
/// on the targets.
pub fn run_arm(arm: Arm, dataset: &Dataset, base: &ModelConfig, protocol: &TrainProtocol, seed: u64) -> Result<(f64, f64)> {
    let split = SplitPlan::from_roles(dataset, protocol.validation_fraction, seed)?;
    let model = Network::new(arm.model_config(base), &mut rng(seed))?;
    let outcome = train(model, dataset, &split, protocol, seed)?;
    if let Some(reason) = &outcome.log.aborted {
        log::warn!("{arm} seed {seed}: training aborted ({reason})");
    }
    let targets = target_domains(dataset, &split.target)?;
    let report = adapt_and_eval(&outcome.model, &targets, true, &ArtifactMeta::unconfigured(seed), &mut Vec::new())?;
    log::info!("{arm} seed {seed}: target balanced accuracy {:.4}", report.mean_balanced_accuracy);
    Ok((report.mean_balanced_accuracy, outcome.fit_seconds))
}

/// Two-sided sign-flip permutation test of a zero mean paired difference.
pub fn sign_flip_p_value(deltas: &[f64], permutations: usize, seed: u64) -> f64 {
    let stat = |d: &[f64]| d.iter().sum::<f64>().abs();
    let observed = stat(deltas);
    let mut r = rng(seed);
    let mut flipped = vec![0.0; deltas.len()];
    let mut hits = 0usize;
    for _ in 0..permutations {
        for (f, &d) in flipped.iter_mut().zip(deltas) {
            *f = if r.random::<bool>() { d } else { -d };
        }
        if stat(&flipped) >= observed - 1e-12 {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (permutations + 1) as f64
}

pub fn ablation_run(dataset: &Dataset, base: &ModelConfig, protocol: &TrainProtocol, cfg: &AblationConfig, meta: &ArtifactMeta) -> Result<AblationTable> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut arms = vec![Arm::Spddsmbn];
    arms.extend(cfg.arms.iter().copied().filter(|a| *a != Arm::Spddsmbn));
    let mut results = Vec::with_capacity(arms.len());
    for &arm in &arms {
        let runs = cfg.seeds.iter().map(|&s| run_arm(arm, dataset, base, protocol, s)).collect::<Result<Vec<_>>>()?;
        results.push((arm, runs));
    }
    let proposed: Vec<f64> = results[0].1.iter().map(|r| r.0).collect();
    let rows = results
        .into_iter()
        .filter(|(arm, _)| *arm != Arm::Spddsmbn || cfg.arms.contains(arm))
        .map(|(arm, runs)| {
            let scores: Vec<f64> = runs.iter().map(|r| r.0).collect();
            let deltas: Vec<f64> = scores.iter().zip(&proposed).map(|(s, p)| 100.0 * (s - p)).collect();
            let (mean, std) = mean_std(&scores);
            let (delta_mean, delta_std) = mean_std(&deltas);
            let fit: Vec<f64> = runs.iter().map(|r| r.1).collect();
            let p_value = (cfg.permutations > 0 && arm != Arm::Spddsmbn).then(|| sign_flip_p_value(&deltas, cfg.permutations, meta.seed));
            ArmRow { arm, scores, mean, std, delta_mean, delta_std, fit_seconds_mean: mean_std(&fit).0, p_value }
        })
        .collect();
    Ok(AblationTable { meta: meta.clone(), seeds: cfg.seeds.clone(), rows })
}
