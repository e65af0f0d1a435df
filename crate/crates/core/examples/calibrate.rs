//! Calibration run: oracle accuracy on the default synthetic config, the
//! running-mean convergence experiments, and one TSMNet training run.

use std::time::Instant;

use tsmnet::artifact::ArtifactMeta;
use tsmnet::harness::{adapt_and_eval, mean_convergence, oracle_tsm_accuracy, target_domains, train, variance_decay, ConvergenceConfig, SplitPlan, TrainProtocol};
use tsmnet::net::{ModelConfig, Network};
use tsmnet::sampling::rng;
use tsmnet::synthdata::{generate, DomainRole, GenConfig};

fn main() -> tsmnet::Result<()> {
    env_logger::init();
    let what = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    if what == "all" || what == "oracle" {
        for seed in 0..3 {
            let data = generate(&GenConfig { seed, ..GenConfig::default() })?;
            let (mean, per) = oracle_tsm_accuracy(&data, &data.ids(DomainRole::Source), &data.ids(DomainRole::Target), 0.1)?;
            println!("oracle seed {seed}: {mean:.4} {per:?}");
        }
    }
    if what == "all" || what == "converge" {
        let t = Instant::now();
        let rep = mean_convergence(&ConvergenceConfig::default())?;
        println!("running-mean convergence: median {:.4} finals {:?} ({:?})", rep.median_final_distance, rep.final_distances, t.elapsed());
        let t = Instant::now();
        let rep = variance_decay(&ConvergenceConfig { steps: 500, ..ConvergenceConfig::default() })?;
        println!("variance decay: slope {:e} t {:.2} p {:.4} ({:?})", rep.slope, rep.slope_t, rep.p_positive, t.elapsed());
    }
    if what == "all" || what == "train" {
        let epochs: usize = std::env::args().nth(2).map_or(50, |s| s.parse().unwrap());
        for seed in 0..1 {
            let data = generate(&GenConfig { seed, ..GenConfig::default() })?;
            let split = SplitPlan::from_roles(&data, 0.2, seed)?;
            let model = Network::new(ModelConfig::default(), &mut rng(seed))?;
            let proto = TrainProtocol { epochs, ..TrainProtocol::default() };
            let out = train(model, &data, &split, &proto, seed)?;
            println!("seed {seed}: selected {} val {:.4} init {:.4} fit {:.1}s", out.log.selected_epoch, out.log.selected_val_loss, out.log.initial_val_loss, out.fit_seconds);
            let targets = target_domains(&data, &split.target)?;
            for adapt in [true, false] {
                let rep = adapt_and_eval(&out.model, &targets, adapt, &ArtifactMeta::unconfigured(seed), &mut Vec::new())?;
                println!("  adapt {adapt}: {:.4}", rep.mean_balanced_accuracy);
            }
        }
    }
    Ok(())
}
