//! Subcommand implementations. Each writes its artifacts into an output
//! directory guarded by a lock file and returns a one-line summary.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tsmnet::artifact::ArtifactMeta;
use tsmnet::checkpoint::Checkpoint;
use tsmnet::gradcheck::{run_suite, GradCheckRow};
use tsmnet::harness::{
    ablation_run, adapt_and_eval, mean_convergence, target_domains, train, variance_decay, SplitPlan, TrainLog,
};
use tsmnet::net::Network;
use tsmnet::sampling::rng;
use tsmnet::synthdata::{generate, Dataset};
use tsmnet::Error;

use crate::config::ResolvedConfig;
use crate::exit::CliError;

pub const LOCK_FILE: &str = ".tsmnet.lock";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::locked(&path)),
            Err(e) => Err(Error::Io { path, source: e }.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e }.into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::other(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write(path, text)
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    meta: &'a ArtifactMeta,
    #[serde(flatten)]
    body: T,
}

fn dataset(cfg: &ResolvedConfig) -> Result<Dataset, CliError> {
    let ds = match &cfg.config.inputs.dataset {
        Some(path) => Dataset::load(path)?.0,
        None => generate(&cfg.config.generator)?,
    };
    cfg.config.check_model_matches(&ds)?;
    Ok(ds)
}

fn prepare(cfg: &ResolvedConfig, out: &Path) -> Result<OutputLock, CliError> {
    let lock = OutputLock::acquire(out)?;
    write(&out.join(RESOLVED_CONFIG_FILE), cfg.artifact_text())?;
    Ok(lock)
}

pub fn gen(cfg: &ResolvedConfig, out: &Path) -> Result<String, CliError> {
    let _lock = prepare(cfg, out)?;
    let ds = generate(&cfg.config.generator)?;
    let manifest = ds.write(out, &cfg.meta())?;
    let g = &ds.config;
    Ok(format!(
        "wrote {} ({} source + {} target domains, {} trials each, {}x{} samples, {} classes)",
        manifest.display(),
        g.source_domains,
        g.target_domains,
        g.trials_per_domain,
        g.channels,
        g.time,
        g.classes
    ))
}

fn train_log_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,batches,train_loss,val_loss,val_balanced_accuracy,reeig_activations\n");
    writeln!(s, "0,0,,{:e},{:e},", log.initial_val_loss, log.initial_val_balanced_accuracy).unwrap();
    for e in &log.epochs {
        writeln!(s, "{},{},{:e},{:e},{:e},{}", e.epoch, e.batches, e.train_loss, e.val_loss, e.val_balanced_accuracy, e.reeig_activations).unwrap();
    }
    s
}

pub fn train_cmd(cfg: &ResolvedConfig, out: &Path) -> Result<String, CliError> {
    let _lock = prepare(cfg, out)?;
    let c = &cfg.config;
    let ds = dataset(cfg)?;
    let split = SplitPlan::from_roles(&ds, c.protocol.validation_fraction, c.seed)?;
    let model = Network::new(c.model, &mut rng(c.seed))?;
    let outcome = train(model, &ds, &split, &c.protocol, c.seed)?;
    let meta = cfg.meta();
    let ck = Checkpoint { meta: meta.clone(), model: outcome.model, optimizer: Some(outcome.optimizer), log: Some(outcome.log.clone()) };
    ck.save(&out.join(CHECKPOINT_FILE))?;
    write_json(&out.join("train_log.json"), &Stamped { meta: &meta, body: &outcome.log })?;
    write(&out.join("train_log.csv"), train_log_csv(&outcome.log))?;
    log::info!("fit time {:.1} s", outcome.fit_seconds);
    let log = &outcome.log;
    if let Some(reason) = &log.aborted {
        return Err(CliError::numeric(format!(
            "training aborted ({reason}); the best checkpoint so far (epoch {}) was written",
            log.selected_epoch
        )));
    }
    Ok(format!(
        "trained {} epochs; selected epoch {} with validation loss {:.4} (initial {:.4}); checkpoint {}",
        log.epochs.len(),
        log.selected_epoch,
        log.selected_val_loss,
        log.initial_val_loss,
        out.join(CHECKPOINT_FILE).display()
    ))
}

pub fn eval(cfg: &ResolvedConfig, out: &Path) -> Result<String, CliError> {
    let _lock = prepare(cfg, out)?;
    let c = &cfg.config;
    let path = c.inputs.checkpoint.as_ref().ok_or_else(|| CliError::config("eval needs `inputs.checkpoint`"))?;
    let (ck, _) = Checkpoint::load(path)?;
    let ds = dataset(cfg)?;
    let mc = ck.model.config();
    if (mc.net.channels, mc.net.time, mc.net.classes) != (ds.config.channels, ds.config.time, ds.config.classes) {
        return Err(CliError::config(format!("checkpoint {} was built for a different trial shape or class count", path.display())));
    }
    let targets = target_domains(&ds, &ds.ids(tsmnet::synthdata::DomainRole::Target))?;
    let report = adapt_and_eval(&ck.model, &targets, c.eval.adapt, &cfg.meta(), &mut Vec::new())?;
    write_json(&out.join("eval_report.json"), &report)?;
    write(&out.join("eval_report.txt"), report.table())?;
    Ok(format!(
        "{} target domains: balanced accuracy {:.4} ± {:.4}",
        report.domains.len(),
        report.mean_balanced_accuracy,
        report.std_balanced_accuracy
    ))
}

pub fn ablate(cfg: &ResolvedConfig, out: &Path) -> Result<String, CliError> {
    let _lock = prepare(cfg, out)?;
    let c = &cfg.config;
    let ds = dataset(cfg)?;
    let table = ablation_run(&ds, &c.model, &c.protocol, &c.experiment.ablation, &cfg.meta())?;
    write_json(&out.join("ablation.json"), &table)?;
    let text = table.table();
    write(&out.join("ablation.txt"), &text)?;
    Ok(text.trim_end().to_string())
}

#[derive(Serialize)]
struct ConvergenceSummary {
    median_final_distance: f64,
    final_distances: Vec<f64>,
    variance_slope: f64,
    variance_slope_t: f64,
    variance_p_positive: f64,
    variance_max_bound_ratio: f64,
    variance_non_increasing_at_5pct: bool,
}

pub fn converge(cfg: &ResolvedConfig, out: &Path) -> Result<String, CliError> {
    let _lock = prepare(cfg, out)?;
    let cc = &cfg.config.experiment.convergence;
    let mean = mean_convergence(cc)?;
    write(&out.join("mean_traces.csv"), mean.csv())?;
    let var = variance_decay(cc)?;
    write(&out.join("variance_trace.csv"), var.csv())?;
    let summary = ConvergenceSummary {
        median_final_distance: mean.median_final_distance,
        final_distances: mean.final_distances.clone(),
        variance_slope: var.slope,
        variance_slope_t: var.slope_t,
        variance_p_positive: var.p_positive,
        variance_max_bound_ratio: var.max_bound_ratio,
        variance_non_increasing_at_5pct: var.passes(0.05),
    };
    write_json(&out.join("convergence.json"), &Stamped { meta: &cfg.meta(), body: &summary })?;
    Ok(format!(
        "median final distance {:.4} over {} seeds; variance slope {:e} (t = {:.2}, p(slope > 0) = {:.4})",
        summary.median_final_distance, cc.seeds, var.slope, var.slope_t, var.p_positive
    ))
}

pub fn gradcheck_table(rows: &[GradCheckRow]) -> String {
    let mut s = format!("{:<40} {:>12} {:>10} {:>6}\n", "check", "max_rel_err", "tolerance", "ok");
    for r in rows {
        writeln!(s, "{:<40} {:>12.3e} {:>10.0e} {:>6}", r.check, r.max_rel_error, r.tolerance, if r.passed { "yes" } else { "NO" }).unwrap();
    }
    s
}

pub fn gradcheck(cfg: &ResolvedConfig, out: &Path) -> Result<String, CliError> {
    let _lock = prepare(cfg, out)?;
    let rows = run_suite(&cfg.config.experiment.gradcheck)?;
    #[derive(Serialize)]
    struct Rows<'a> {
        rows: &'a [GradCheckRow],
    }
    write_json(&out.join("gradcheck.json"), &Stamped { meta: &cfg.meta(), body: Rows { rows: &rows } })?;
    let table = gradcheck_table(&rows);
    write(&out.join("gradcheck.txt"), &table)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.check.as_str()).collect();
    if failed.is_empty() {
        Ok(table.trim_end().to_string())
    } else {
        Err(CliError::gradcheck(format!("{table}{} of {} checks failed: {}", failed.len(), rows.len(), failed.join(", "))))
    }
}
