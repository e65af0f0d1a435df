//! Seeded generator for the linear instantaneous mixture model
//! `X = A_i·S + σ·N` with domain-specific mixing `A_i = A₀(I + ρE_i)` and
//! class-dependent source log-variances, plus the on-disk dataset format.

mod sampler;
pub mod tensor;

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use sampler::{BatchPlan, DomainBatchSampler, TrialRef};
pub use tensor::Tensor;

use crate::artifact::{read_text, sha256_hex, write_file, ArtifactMeta};
use crate::error::{Error, Result};
use crate::net::EpochBatch;
use crate::sampling::{gaussian_matrix, rng, SeededRng};
use crate::spdbn::DomainId;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const NOISE_MODEL: &str = "white_gaussian";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub channels: usize,
    pub time: usize,
    pub sources: usize,
    pub discriminative_sources: usize,
    pub classes: usize,
    pub source_domains: usize,
    pub target_domains: usize,
    pub trials_per_domain: usize,
    /// `ρ`, strength of the per-domain mixing perturbation.
    pub mixing_perturbation: f64,
    /// `σ`, sensor noise standard deviation.
    pub noise_scale: f64,
    /// `[classes][discriminative_sources]` log-variance offsets.
    pub gain: Vec<Vec<f64>>,
    pub base_log_variance: f64,
    /// Standard deviation of per-trial, per-source log-variance jitter.
    pub trial_log_std: f64,
    /// Length of the Hann smoothing window applied to white source noise.
    pub smoothing_taps: usize,
    /// Use `A₀ = [I; 0]` instead of a random mixing matrix.
    pub identity_mixing: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            channels: 12,
            time: 250,
            sources: 8,
            discriminative_sources: 2,
            classes: 2,
            source_domains: 8,
            target_domains: 4,
            trials_per_domain: 100,
            mixing_perturbation: 0.3,
            noise_scale: 0.5,
            gain: vec![vec![0.5, -0.5], vec![-0.5, 0.5]],
            base_log_variance: 0.0,
            trial_log_std: 0.3,
            smoothing_taps: 5,
            identity_mixing: false,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.sources > c.channels {
            return Err(Error::config(format!("sources exceed channels ({} > {})", c.sources, c.channels)));
        }
        if c.discriminative_sources > c.sources {
            return Err(Error::config(format!(
                "discriminative_sources exceed sources ({} > {})",
                c.discriminative_sources, c.sources
            )));
        }
        for (name, v) in [
            ("channels", c.channels),
            ("sources", c.sources),
            ("classes", c.classes),
            ("trials_per_domain", c.trials_per_domain),
            ("smoothing_taps", c.smoothing_taps),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if c.time < 2 {
            return Err(Error::config("time must be at least 2"));
        }
        if c.source_domains + c.target_domains == 0 {
            return Err(Error::config("at least one domain is required"));
        }
        if c.trials_per_domain < c.classes {
            return Err(Error::config("trials_per_domain must cover every class"));
        }
        for (name, v) in [
            ("mixing_perturbation", c.mixing_perturbation),
            ("noise_scale", c.noise_scale),
            ("trial_log_std", c.trial_log_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        if c.gain.len() != c.classes || c.gain.iter().any(|r| r.len() != c.discriminative_sources) {
            return Err(Error::config(format!(
                "gain must be a {} x {} matrix (classes x discriminative_sources)",
                c.classes, c.discriminative_sources
            )));
        }
        if c.gain.iter().flatten().chain([&c.base_log_variance]).any(|g| !g.is_finite()) {
            return Err(Error::config("gain and base_log_variance must be finite"));
        }
        Ok(())
    }

    pub fn domain_count(&self) -> usize {
        self.source_domains + self.target_domains
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub id: DomainId,
    pub role: DomainRole,
    pub trials: Vec<DMatrix<f64>>,
    pub labels: Vec<usize>,
}

/// Unit-energy Hann window.
fn smoothing_window(taps: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..taps).map(|i| (std::f64::consts::PI * (i + 1) as f64 / (taps + 1) as f64).sin().powi(2)).collect();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.into_iter().map(|x| x / norm).collect()
}

fn domain_stream(seed: u64, domain: usize) -> SeededRng {
    let mut r = rng(seed);
    r.set_stream(domain as u64 + 1);
    r
}

/// Mixing matrices and trial sampler for one configuration.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GenConfig,
    base: DMatrix<f64>,
    mixing: Vec<DMatrix<f64>>,
    window: Vec<f64>,
}

impl Generator {
    pub fn new(config: GenConfig) -> Result<Self> {
        config.validate()?;
        let (p, q) = (config.channels, config.sources);
        let base = if config.identity_mixing {
            DMatrix::identity(p, q)
        } else {
            gaussian_matrix(&mut rng(config.seed), p, q, 1.0 / (q as f64).sqrt())
        };
        let mixing = (0..config.domain_count())
            .map(|i| {
                let e = gaussian_matrix(&mut domain_stream(config.seed, i), q, q, 1.0 / (q as f64).sqrt());
                &base * (DMatrix::identity(q, q) + e * config.mixing_perturbation)
            })
            .collect();
        let window = smoothing_window(config.smoothing_taps);
        Ok(Self { config, base, mixing, window })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    /// `A₀`.
    pub fn base_mixing(&self) -> &DMatrix<f64> {
        &self.base
    }

    /// `A_i` of domain index `i`.
    pub fn mixing(&self, i: usize) -> &DMatrix<f64> {
        &self.mixing[i]
    }

    /// Mean source log-variances of `class`.
    pub fn source_log_variances(&self, class: usize) -> Vec<f64> {
        let c = &self.config;
        (0..c.sources).map(|k| c.base_log_variance + c.gain[class].get(k).copied().unwrap_or(0.0)).collect()
    }

    /// One `P × T` trial of domain index `i`.
    pub fn trial(&self, i: usize, class: usize, time: usize, r: &mut SeededRng) -> DMatrix<f64> {
        let c = &self.config;
        let taps = self.window.len();
        let mut s = DMatrix::zeros(c.sources, time);
        for (k, mean) in self.source_log_variances(class).into_iter().enumerate() {
            let log_var = mean + c.trial_log_std * r.sample::<f64, _>(StandardNormal);
            let std = (0.5 * log_var).exp();
            let white: Vec<f64> = (0..time + taps - 1).map(|_| r.sample(StandardNormal)).collect();
            for t in 0..time {
                let v: f64 = self.window.iter().zip(&white[t..t + taps]).map(|(w, x)| w * x).sum();
                s[(k, t)] = std * v;
            }
        }
        let noise = gaussian_matrix(r, c.channels, time, c.noise_scale);
        &self.mixing[i] * s + noise
    }

    fn domain(&self, i: usize) -> DomainData {
        let c = &self.config;
        // Stream 0 is reserved for A₀, streams 1.. for E_i; trials use a
        // separate block of streams.
        let mut r = domain_stream(c.seed, c.domain_count() + i);
        let mut labels: Vec<usize> = (0..c.trials_per_domain).map(|j| j % c.classes).collect();
        labels.shuffle(&mut r);
        let trials = labels.iter().map(|&y| self.trial(i, y, c.time, &mut r)).collect();
        let role = if i < c.source_domains { DomainRole::Source } else { DomainRole::Target };
        DomainData { id: DomainId(i as u32), role, trials, labels }
    }

    pub fn generate(&self) -> Dataset {
        Dataset { config: self.config.clone(), domains: (0..self.config.domain_count()).map(|i| self.domain(i)).collect() }
    }
}

pub fn generate(config: &GenConfig) -> Result<Dataset> {
    Ok(Generator::new(config.clone())?.generate())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub domains: Vec<DomainData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub id: DomainId,
    pub role: DomainRole,
    pub trials: usize,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub meta: ArtifactMeta,
    pub noise_model: String,
    pub class_names: Vec<String>,
    pub generator: GenConfig,
    pub domains: Vec<DomainEntry>,
}

impl Dataset {
    pub fn domain(&self, id: DomainId) -> Option<&DomainData> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn ids(&self, role: DomainRole) -> Vec<DomainId> {
        self.domains.iter().filter(|d| d.role == role).map(|d| d.id).collect()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Materializes referenced trials as a batch.
    pub fn batch(&self, refs: &[TrialRef]) -> Result<EpochBatch> {
        let mut b = EpochBatch { data: Vec::with_capacity(refs.len()), labels: Vec::new(), domains: Vec::new() };
        for &(id, j) in refs {
            let d = self.domain(id).ok_or_else(|| Error::invalid(format!("unknown domain {id}")))?;
            let x = d.trials.get(j).ok_or_else(|| Error::invalid(format!("domain {id} has no trial {j}")))?;
            b.data.push(x.clone());
            b.labels.push(d.labels[j]);
            b.domains.push(id);
        }
        Ok(b)
    }

    /// Writes `manifest.toml` plus one tensor file per domain into `dir`
    /// and returns the manifest path.
    pub fn write(&self, dir: &Path, meta: &ArtifactMeta) -> Result<PathBuf> {
        let mut entries = Vec::with_capacity(self.domains.len());
        for d in &self.domains {
            let tensor = Tensor::from_matrices(&d.trials);
            let bytes = tensor.to_bytes();
            let file = format!("domain_{:03}.tsr", d.id.0);
            write_file(&dir.join(&file), &bytes)?;
            entries.push(DomainEntry {
                id: d.id,
                role: d.role,
                trials: d.trials.len(),
                file,
                shape: tensor.dims.clone(),
                sha256: sha256_hex(&bytes),
                labels: d.labels.clone(),
            });
        }
        let manifest = DatasetManifest {
            format_version: MANIFEST_VERSION,
            meta: meta.clone(),
            noise_model: NOISE_MODEL.to_string(),
            class_names: (0..self.config.classes).map(|c| format!("class_{c}")).collect(),
            generator: self.config.clone(),
            domains: entries,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
        let path = dir.join(MANIFEST_FILE);
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }

    /// Loads and validates a dataset from its manifest path (or the
    /// directory containing it).
    pub fn load(path: &Path) -> Result<(Self, DatasetManifest)> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = read_text(&path)?;
        let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| {
            let field = e.span().map(|s| text[s].chars().take(40).collect::<String>()).unwrap_or_default();
            Error::format(&path, field, e.message().to_string())
        })?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                "format_version",
                format!("unsupported version {}, expected {MANIFEST_VERSION}", manifest.format_version),
            ));
        }
        let g = &manifest.generator;
        g.validate().map_err(|e| Error::format(&path, "generator", e.to_string()))?;
        if manifest.class_names.len() != g.classes {
            return Err(Error::format(&path, "class_names", format!("expected {} names", g.classes)));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut domains = Vec::with_capacity(manifest.domains.len());
        for entry in &manifest.domains {
            let file = dir.join(&entry.file);
            let bytes = crate::artifact::read_file(&file)?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(Error::format(&file, "sha256", "content hash does not match the manifest"));
            }
            let tensor = Tensor::read(&file)?;
            let want = vec![entry.trials, g.channels, g.time];
            if tensor.dims != entry.shape || tensor.dims != want {
                return Err(Error::format(
                    &file,
                    "shape",
                    format!("file has {:?}, manifest declares {:?}, generator implies {want:?}", tensor.dims, entry.shape),
                ));
            }
            if entry.labels.len() != entry.trials {
                return Err(Error::format(&path, "labels", format!("domain {} lists {} labels for {} trials", entry.id, entry.labels.len(), entry.trials)));
            }
            if let Some(y) = entry.labels.iter().find(|&&y| y >= g.classes) {
                return Err(Error::format(&path, "labels", format!("domain {}: label {y} out of range", entry.id)));
            }
            domains.push(DomainData {
                id: entry.id,
                role: entry.role,
                trials: tensor.to_matrices().map_err(|e| Error::format(&file, "shape", e.to_string()))?,
                labels: entry.labels.clone(),
            });
        }
        Ok((Self { config: g.clone(), domains }, manifest))
    }
}
