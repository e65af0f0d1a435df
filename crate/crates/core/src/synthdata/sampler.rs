//! Domain-grouped minibatches: every batch holds the same number of trials
//! from each of a fixed number of distinct domains.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::SeededRng;
use crate::spdbn::DomainId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchPlan {
    pub domains_per_batch: usize,
    pub trials_per_domain: usize,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self { domains_per_batch: 5, trials_per_domain: 10 }
    }
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.domains_per_batch * self.trials_per_domain
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains_per_batch == 0 {
            return Err(Error::config("domains_per_batch must be positive"));
        }
        if self.trials_per_domain < 2 {
            return Err(Error::config("trials_per_domain must be at least 2 for per-domain batch statistics"));
        }
        Ok(())
    }
}

/// Reference to trial `index` of `domain`.
pub type TrialRef = (DomainId, usize);

#[derive(Debug, Clone)]
pub struct DomainBatchSampler {
    plan: BatchPlan,
    pools: Vec<(DomainId, Vec<usize>)>,
}

impl DomainBatchSampler {
    pub fn new(plan: BatchPlan, pools: Vec<(DomainId, Vec<usize>)>) -> Result<Self> {
        plan.validate()?;
        let usable = pools.iter().filter(|(_, p)| p.len() >= plan.trials_per_domain).count();
        if usable < plan.domains_per_batch {
            return Err(Error::config(format!(
                "batch plan needs {} domains with at least {} trials, only {usable} available",
                plan.domains_per_batch, plan.trials_per_domain
            )));
        }
        Ok(Self { plan, pools })
    }

    pub fn plan(&self) -> BatchPlan {
        self.plan
    }

    /// One pass over the pools. Each domain's trials are shuffled and cut
    /// into chunks; batches take one chunk from each of the domains with the
    /// most chunks left (ties broken at random). Chunk remainders and chunks
    /// left once fewer than `domains_per_batch` domains remain are dropped.
    pub fn epoch(&self, rng: &mut SeededRng) -> Vec<Vec<TrialRef>> {
        let n = self.plan.trials_per_domain;
        let mut chunks: Vec<(DomainId, Vec<Vec<usize>>)> = self
            .pools
            .iter()
            .map(|(d, pool)| {
                let mut p = pool.clone();
                p.shuffle(rng);
                (*d, p.chunks_exact(n).map(<[usize]>::to_vec).collect())
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            chunks.shuffle(rng);
            // Stable sort keeps the random order among equal counts.
            chunks.sort_by_key(|(_, c)| std::cmp::Reverse(c.len()));
            if chunks.len() < self.plan.domains_per_batch || chunks[self.plan.domains_per_batch - 1].1.is_empty() {
                break;
            }
            let mut batch = Vec::with_capacity(self.plan.batch_size());
            for (d, c) in chunks.iter_mut().take(self.plan.domains_per_batch) {
                batch.extend(c.pop().expect("non-empty").into_iter().map(|i| (*d, i)));
            }
            batches.push(batch);
        }
        batches
    }
}
