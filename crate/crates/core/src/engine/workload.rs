// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};

use super::{Key, Tick, TxnOp};
use crate::rng;

/// Transaction mix for one simulated window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub key_space: u32,
    /// Zipf exponent for key popularity; 0 is uniform.
    pub zipf_theta: f64,
    pub write_fraction: f64,
    pub txn_len: usize,
    /// Mean transaction arrivals per tick.
    pub arrival_rate: f64,
    /// Concurrent workers (multiprogramming level).
    pub workers: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            key_space: 1000,
            zipf_theta: 0.0,
            write_fraction: 0.2,
            txn_len: 4,
            arrival_rate: 4.0,
            workers: 16,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn with_seed(&self, seed: u64) -> WorkloadSpec {
        WorkloadSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.key_space == 0 {
            return Err("key_space must be positive".into());
        }
        if !(self.zipf_theta >= 0.0 && self.zipf_theta.is_finite()) {
            return Err("zipf_theta must be a finite non-negative number".into());
        }
        if !(0.0..=1.0).contains(&self.write_fraction) {
            return Err("write_fraction must lie in [0, 1]".into());
        }
        if self.txn_len == 0 {
            return Err("txn_len must be positive".into());
        }
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return Err("arrival_rate must be a finite non-negative number".into());
        }
        if self.workers == 0 {
            return Err("workers must be positive".into());
        }
        Ok(())
    }
}

/// Poisson arrivals of transactions with Zipf-distributed keys.
pub struct WorkloadGenerator {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    keys: Zipf<f64>,
    gaps: Option<Exp<f64>>,
    next_arrival: f64,
}

impl WorkloadGenerator {
    pub fn new(spec: &WorkloadSpec) -> WorkloadGenerator {
        let mut rng = rng::stream(spec.seed, "workload");
        let keys = Zipf::new(spec.key_space as f64, spec.zipf_theta).expect("validated zipf");
        let gaps = (spec.arrival_rate > 0.0).then(|| Exp::new(spec.arrival_rate).expect("positive rate"));
        let next_arrival = gaps.as_ref().map_or(f64::INFINITY, |g| g.sample(&mut rng));
        WorkloadGenerator { spec: spec.clone(), rng, keys, gaps, next_arrival }
    }

    pub fn next_txn(&mut self) -> Vec<TxnOp> {
        (0..self.spec.txn_len)
            .map(|_| {
                let key = Key(self.keys.sample(&mut self.rng) as u32 - 1);
                if self.rng.random_bool(self.spec.write_fraction) {
                    TxnOp::Write { key, value: self.rng.random_range(0..1_000_000) }
                } else {
                    TxnOp::Read { key }
                }
            })
            .collect()
    }

    /// Transactions arriving in `[tick, tick + 1)`.
    pub fn arrivals(&mut self, tick: Tick) -> Vec<Vec<TxnOp>> {
        let mut out = Vec::new();
        let end = (tick + 1) as f64;
        while self.next_arrival < end {
            out.push(self.next_txn());
            let gap = self.gaps.as_ref().map_or(f64::INFINITY, |g| g.sample(&mut self.rng));
            self.next_arrival += gap;
        }
        out
    }
}
