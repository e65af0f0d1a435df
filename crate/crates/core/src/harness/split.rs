use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::rng;
use crate::spdbn::DomainId;
use crate::synthdata::{Dataset, DomainRole, TrialRef};

/// Source/target domains and the within-source train/validation split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub source: Vec<DomainId>,
    pub target: Vec<DomainId>,
    pub train: BTreeMap<DomainId, Vec<usize>>,
    pub validation: BTreeMap<DomainId, Vec<usize>>,
}

impl SplitPlan {
    /// Splits every source domain per class so that each (domain, class)
    /// cell contributes `round(fraction · n)` validation trials.
    pub fn new(dataset: &Dataset, source: &[DomainId], target: &[DomainId], fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!("validation fraction must lie in [0, 1), got {fraction}")));
        }
        let s: BTreeSet<_> = source.iter().collect();
        if let Some(d) = target.iter().find(|d| s.contains(d)) {
            return Err(Error::config(format!("domain {d} is both source and target")));
        }
        if source.is_empty() {
            return Err(Error::config("split needs at least one source domain"));
        }
        for d in source.iter().chain(target) {
            dataset.domain(*d).ok_or_else(|| Error::config(format!("dataset has no domain {d}")))?;
        }
        let mut r = rng(seed);
        let mut train = BTreeMap::new();
        let mut validation = BTreeMap::new();
        for &d in source {
            let dom = dataset.domain(d).expect("checked");
            let (mut tr, mut va) = (Vec::new(), Vec::new());
            for c in 0..dataset.classes() {
                let mut idx: Vec<usize> = (0..dom.labels.len()).filter(|&j| dom.labels[j] == c).collect();
                idx.shuffle(&mut r);
                let n_val = (fraction * idx.len() as f64).round() as usize;
                va.extend_from_slice(&idx[..n_val]);
                tr.extend_from_slice(&idx[n_val..]);
            }
            tr.sort_unstable();
            va.sort_unstable();
            train.insert(d, tr);
            validation.insert(d, va);
        }
        Ok(Self { source: source.to_vec(), target: target.to_vec(), train, validation })
    }

    /// Uses the dataset's own source/target roles.
    pub fn from_roles(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Self> {
        Self::new(dataset, &dataset.ids(DomainRole::Source), &dataset.ids(DomainRole::Target), fraction, seed)
    }

    pub fn train_pools(&self) -> Vec<(DomainId, Vec<usize>)> {
        self.train.iter().map(|(d, v)| (*d, v.clone())).collect()
    }

    pub fn validation_refs(&self) -> Vec<TrialRef> {
        self.validation.iter().flat_map(|(d, v)| v.iter().map(move |&j| (*d, j))).collect()
    }
}

/// Leave-domains-out folds: domains are shuffled and cut into groups of
/// `max(1, ⌈fraction · N⌉)`, each group serving once as the target set.
pub fn leave_out_folds(domains: &[DomainId], fraction: f64, seed: u64) -> Result<Vec<Vec<DomainId>>> {
    if domains.len() < 2 {
        return Err(Error::config("leave-out folds need at least two domains"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("held-out fraction must lie in (0, 1), got {fraction}")));
    }
    let k = ((fraction * domains.len() as f64).ceil() as usize).clamp(1, domains.len() - 1);
    let mut d = domains.to_vec();
    d.shuffle(&mut rng(seed));
    Ok(d.chunks(k).filter(|c| c.len() < domains.len()).map(<[DomainId]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::synthdata::{generate, GenConfig};

    fn data(trials: usize, classes: usize) -> Dataset {
        generate(&GenConfig {
            time: 8,
            smoothing_taps: 1,
            trials_per_domain: trials,
            classes,
            gain: vec![vec![0.0; 2]; classes],
            source_domains: 3,
            target_domains: 1,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn roles_are_disjoint_and_split_covers_sources() {
        let d = data(30, 2);
        let plan = SplitPlan::from_roles(&d, 0.2, 0).unwrap();
        assert_eq!(plan.target, vec![DomainId(3)]);
        for s in &plan.source {
            let mut all: Vec<_> = plan.train[s].iter().chain(&plan.validation[s]).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..30).collect::<Vec<_>>());
        }
        assert!(SplitPlan::new(&d, &[DomainId(0)], &[DomainId(0)], 0.2, 0).is_err());
    }

    proptest! {
        #[test]
        fn validation_is_stratified(trials in 6usize..40, classes in 2usize..4, seed in 0u64..50) {
            prop_assume!(trials >= classes);
            let d = data(trials, classes);
            let plan = SplitPlan::from_roles(&d, 0.2, seed).unwrap();
            for s in &plan.source {
                let dom = d.domain(*s).unwrap();
                for c in 0..classes {
                    let n = dom.labels.iter().filter(|&&y| y == c).count() as f64;
                    let v = plan.validation[s].iter().filter(|&&j| dom.labels[j] == c).count() as f64;
                    prop_assert!((v - 0.2 * n).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn folds_hold_out_five_percent_at_least_one() {
        let ids: Vec<_> = (0..12).map(DomainId).collect();
        let folds = leave_out_folds(&ids, 0.05, 3).unwrap();
        assert_eq!(folds.len(), 12);
        assert!(folds.iter().all(|f| f.len() == 1));
        let ids: Vec<_> = (0..40).map(DomainId).collect();
        let folds = leave_out_folds(&ids, 0.05, 3).unwrap();
        assert_eq!(folds.len(), 20);
        let covered: BTreeSet<_> = folds.iter().flatten().collect();
        assert_eq!(covered.len(), 40);
    }
}
