//! Strict TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsmnet::artifact::{sha256_hex, ArtifactMeta};
use tsmnet::gradcheck::GradCheckConfig;
use tsmnet::harness::{AblationConfig, ConvergenceConfig, TrainProtocol};
use tsmnet::net::ModelConfig;
use tsmnet::synthdata::{Dataset, GenConfig};
use tsmnet::{Error, Result};

/// Files a command reads. Relative paths are resolved against the directory
/// of the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    /// Dataset directory written by `gen`. Without it the dataset is
    /// generated in memory from `[generator]`.
    pub dataset: Option<PathBuf>,
    /// Checkpoint read by `eval`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Fit fresh normalization statistics on each target domain.
    pub adapt: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { adapt: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub ablation: AblationConfig,
    pub convergence: ConvergenceConfig,
    pub gradcheck: GradCheckConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub inputs: Inputs,
    #[serde(default)]
    pub generator: GenConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub protocol: TrainProtocol,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub experiment: Experiment,
}

/// Sections whose structs carry their own seed; it is always taken from the
/// top-level `seed`.
const SEEDED_SECTIONS: [&[&str]; 3] = [&["generator"], &["experiment", "convergence"], &["experiment", "gradcheck"]];

/// A parsed, validated configuration together with its canonical text.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub text: String,
    pub hash: String,
}

impl ResolvedConfig {
    pub fn meta(&self) -> ArtifactMeta {
        ArtifactMeta::new(self.hash.clone(), self.config.seed)
    }

    /// The canonical config preceded by its provenance.
    pub fn artifact_text(&self) -> String {
        format!("# config_hash = \"{}\"\n# seed = {}\n{}", self.hash, self.config.seed, self.text)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))?;
        for path in SEEDED_SECTIONS {
            let mut node = Some(&table);
            for key in path {
                node = node.and_then(|t| t.get(*key)).and_then(|v| v.as_table());
            }
            if node.is_some_and(|t| t.contains_key("seed")) {
                return Err(Error::Config(format!("config: `{}.seed` is not allowed; set the top-level `seed`", path.join("."))));
            }
        }
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message().trim_end())))
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<ResolvedConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text)?.resolve(base, seed_override)
    }

    /// Applies the seed override, distributes the seed into seeded
    /// sections, anchors relative paths and validates.
    pub fn resolve(mut self, base: &Path, seed_override: Option<u64>) -> Result<ResolvedConfig> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.generator.seed = self.seed;
        self.experiment.convergence.seed = self.seed;
        self.experiment.gradcheck.seed = self.seed;
        for p in [&mut self.inputs.dataset, &mut self.inputs.checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self.validate()?;
        let mut table = toml::Table::try_from(&self).map_err(|e| Error::Config(format!("config: cannot serialize: {e}")))?;
        for path in SEEDED_SECTIONS {
            let mut node = Some(&mut table);
            for key in path {
                node = node.and_then(|t| t.get_mut(*key)).and_then(|v| v.as_table_mut());
            }
            if let Some(t) = node {
                t.remove("seed");
            }
        }
        let text = table.to_string();
        let hash = sha256_hex(text.as_bytes());
        Ok(ResolvedConfig { config: self, text, hash })
    }

    fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.net.validate()?;
        self.model.bn.validate()?;
        self.protocol.batch.validate()?;
        if !(self.protocol.validation_fraction > 0.0 && self.protocol.validation_fraction < 1.0) {
            return Err(Error::Config("protocol.validation_fraction must lie in (0, 1)".into()));
        }
        self.experiment.convergence.validate()?;
        Ok(())
    }

    /// The model must consume the dataset's trial shape and classes.
    pub fn check_model_matches(&self, dataset: &Dataset) -> Result<()> {
        let g = &dataset.config;
        let n = &self.model.net;
        for (field, model, data) in [("channels", n.channels, g.channels), ("time", n.time, g.time), ("classes", n.classes, g.classes)] {
            if model != data {
                return Err(Error::Config(format!("model.net.{field} = {model} does not match the dataset ({data})")));
            }
        }
        Ok(())
    }
}
