//! Training loop, the multi-source multi-target evaluation protocol,
//! metrics, ablation arms and the running-mean convergence experiments.

pub mod ablation;
pub mod converge;
pub mod eval;
pub mod metrics;
pub mod oracle;
pub mod split;
pub mod train;

pub use ablation::{ablation_run, AblationConfig, AblationTable, Arm, ArmRow};
pub use converge::{mean_convergence, variance_decay, ConvergenceConfig, MeanConvergenceReport, Population, VarianceReport};
pub use eval::{adapt_and_eval, target_domains, AccessEvent, DomainReport, EvalReport, SealedLabels, TargetDomain};
pub use metrics::{balanced_accuracy, confusion_matrix};
pub use oracle::oracle_tsm_accuracy;
pub use split::{leave_out_folds, SplitPlan};
pub use train::{train, validation_scores, EpochLog, TrainLog, TrainOutcome, TrainProtocol};
