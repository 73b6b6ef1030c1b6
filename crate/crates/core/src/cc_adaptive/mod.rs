// SPDX-License-Identifier: Apache-2.0

//! Learned concurrency control.
//!
//! A [`CCStrategy`] is a lookup table from a bucketed [`SystemState`] and an
//! operation class to a [`CCAction`]. When the monitored state shifts, a small
//! evolutionary tournament picks a promising table ([`filter_phase`]), and
//! single-cell hill climbing on the reward polishes it ([`refine_phase`]).

mod controller;
mod scenario;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ActionPolicy, CCAction, ExecStats, KeyHeat, OpKind, TxnOp};

pub use controller::{AdaptiveConfig, AdaptiveController, WindowRecord};
pub use scenario::{InitialStrategy, ShiftRun, ShiftScenario};

#[derive(Debug, Error, PartialEq)]
pub enum CcError {
    #[error("observation window must have positive length, got {0}")]
    EmptyWindow(f64),
    #[error("population size must be at least 2, got {0}")]
    PopulationTooSmall(usize),
    #[error("invalid bucketing: {0}")]
    Bucketing(String),
}

/// Monitored system conditions for one window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    /// Committed transactions per tick.
    pub throughput: f64,
    /// Mean blocked ticks per locked operation.
    pub avg_lock_wait: f64,
    /// Aborts over finished attempts.
    pub abort_rate: f64,
    /// Fraction of operations that overlapped a conflicting access.
    pub contention_index: f64,
}

pub fn observe(stats: &ExecStats, window: f64) -> Result<SystemState, CcError> {
    if window.is_nan() || window <= 0.0 {
        return Err(CcError::EmptyWindow(window));
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(SystemState {
        throughput: stats.committed_count as f64 / window,
        avg_lock_wait: ratio(stats.total_lock_wait, stats.locked_op_count),
        abort_rate: ratio(stats.aborted_count, stats.committed_count + stats.aborted_count),
        contention_index: ratio(stats.conflict_op_count, stats.op_count),
    })
}

/// Relative-change limits per state field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftThresholds {
    pub throughput: f64,
    pub avg_lock_wait: f64,
    pub abort_rate: f64,
    pub contention_index: f64,
    /// Smallest baseline magnitude used as a denominator.
    pub floor: f64,
}

impl Default for ShiftThresholds {
    fn default() -> Self {
        ShiftThresholds { throughput: 0.5, avg_lock_wait: 0.5, abort_rate: 0.5, contention_index: 0.5, floor: 0.05 }
    }
}

pub fn detect_shift(prev: &SystemState, cur: &SystemState, thresholds: &ShiftThresholds) -> bool {
    let rel = |a: f64, b: f64| (b - a).abs() / a.abs().max(thresholds.floor);
    rel(prev.throughput, cur.throughput) > thresholds.throughput
        || rel(prev.avg_lock_wait, cur.avg_lock_wait) > thresholds.avg_lock_wait
        || rel(prev.abort_rate, cur.abort_rate) > thresholds.abort_rate
        || rel(prev.contention_index, cur.contention_index) > thresholds.contention_index
}

/// Equi-width discretization of contention and lock wait into `buckets`
/// cells each.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucketing {
    pub buckets: usize,
    pub contention_max: f64,
    pub wait_max: f64,
}

impl Default for Bucketing {
    fn default() -> Self {
        Bucketing { buckets: 4, contention_max: 1.0, wait_max: 8.0 }
    }
}

impl Bucketing {
    pub fn new(buckets: usize, contention_max: f64, wait_max: f64) -> Result<Bucketing, CcError> {
        if buckets == 0 {
            return Err(CcError::Bucketing("need at least one bucket".into()));
        }
        if !(contention_max > 0.0 && wait_max > 0.0) {
            return Err(CcError::Bucketing("ranges must be positive".into()));
        }
        Ok(Bucketing { buckets, contention_max, wait_max })
    }

    /// Ranges spanning every observed state.
    pub fn calibrate(buckets: usize, observed: &[SystemState]) -> Result<Bucketing, CcError> {
        let cmax = observed.iter().map(|s| s.contention_index).fold(0.0, f64::max);
        let wmax = observed.iter().map(|s| s.avg_lock_wait).fold(0.0, f64::max);
        Bucketing::new(buckets, cmax.max(1e-6), wmax.max(1e-6))
    }

    fn index(&self, x: f64, max: f64) -> usize {
        let b = (x / max * self.buckets as f64).floor();
        if b.is_nan() || b < 0.0 {
            0
        } else {
            (b as usize).min(self.buckets - 1)
        }
    }

    /// `(contention bucket, wait bucket)`.
    pub fn cell(&self, state: &SystemState) -> (usize, usize) {
        (self.index(state.contention_index, self.contention_max), self.index(state.avg_lock_wait, self.wait_max))
    }
}

/// Operation kind crossed with key heat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpClass {
    pub kind: OpKind,
    pub heat: KeyHeat,
}

impl OpClass {
    pub const COUNT: usize = 4;

    pub const ALL: [OpClass; 4] = [
        OpClass { kind: OpKind::Read, heat: KeyHeat::Cold },
        OpClass { kind: OpKind::Read, heat: KeyHeat::Hot },
        OpClass { kind: OpKind::Write, heat: KeyHeat::Cold },
        OpClass { kind: OpKind::Write, heat: KeyHeat::Hot },
    ];

    pub fn index(&self) -> usize {
        let k = match self.kind {
            OpKind::Read => 0,
            OpKind::Write => 2,
        };
        let h = match self.heat {
            KeyHeat::Cold => 0,
            KeyHeat::Hot => 1,
        };
        k + h
    }
}

/// Total map `(contention bucket, wait bucket, op class) -> action`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CCStrategy {
    bucketing: Bucketing,
    table: Vec<CCAction>,
}

impl CCStrategy {
    pub fn uniform(bucketing: Bucketing, action: CCAction) -> CCStrategy {
        let b = bucketing.buckets;
        CCStrategy { bucketing, table: vec![action; b * b * OpClass::COUNT] }
    }

    /// Lock writes to hot keys or under high contention; everything else
    /// runs unlocked.
    pub fn prescribed(bucketing: Bucketing) -> CCStrategy {
        let mut s = CCStrategy::uniform(bucketing, CCAction::OptimisticNoLock);
        let b = bucketing.buckets;
        for c in 0..b {
            for w in 0..b {
                for class in OpClass::ALL {
                    let high = 2 * c >= b;
                    if class.kind == OpKind::Write && (class.heat == KeyHeat::Hot || high) {
                        let i = s.cell_index(c, w, class);
                        s.table[i] = CCAction::LockImmediate;
                    }
                }
            }
        }
        s
    }

    pub fn bucketing(&self) -> &Bucketing {
        &self.bucketing
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn cells(&self) -> &[CCAction] {
        &self.table
    }

    pub fn cell_index(&self, contention: usize, wait: usize, class: OpClass) -> usize {
        (contention * self.bucketing.buckets + wait) * OpClass::COUNT + class.index()
    }

    /// Cells consulted when the monitor reports `state`.
    pub fn cells_for(&self, state: &SystemState) -> Vec<usize> {
        let (c, w) = self.bucketing.cell(state);
        OpClass::ALL.iter().map(|&class| self.cell_index(c, w, class)).collect()
    }

    pub fn with_flipped(&self, cell: usize) -> CCStrategy {
        let mut s = self.clone();
        s.table[cell] = s.table[cell].flipped();
        s
    }

    /// Copy with every listed cell set to `action`.
    pub fn with_cells(&self, cells: &[usize], action: CCAction) -> CCStrategy {
        let mut s = self.clone();
        for &c in cells {
            s.table[c] = action;
        }
        s
    }

    pub fn with_bucketing(&self, bucketing: Bucketing) -> Result<CCStrategy, CcError> {
        if bucketing.buckets != self.bucketing.buckets {
            return Err(CcError::Bucketing("bucket count differs".into()));
        }
        Ok(CCStrategy { bucketing, table: self.table.clone() })
    }

    pub fn lock_fraction(&self) -> f64 {
        self.table.iter().filter(|a| **a == CCAction::LockImmediate).count() as f64 / self.len() as f64
    }
}

pub fn decide(strategy: &CCStrategy, state: &SystemState, op: &TxnOp, heat: KeyHeat) -> CCAction {
    let (c, w) = strategy.bucketing.cell(state);
    strategy.table[strategy.cell_index(c, w, OpClass { kind: op.kind(), heat })]
}

impl ActionPolicy for CCStrategy {
    fn action(&self, state: &SystemState, op: &TxnOp, heat: KeyHeat) -> CCAction {
        decide(self, state, op, heat)
    }
}

/// Commits minus `lambda` times aborts over a completed window.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Reward(pub f64);

impl Reward {
    pub fn from_stats(stats: &ExecStats, lambda: f64) -> Reward {
        Reward(stats.committed_count as f64 - lambda * stats.aborted_count as f64)
    }
}

/// Fitness of one strategy under an evaluator.
pub type Evaluator<'a> = dyn Fn(&CCStrategy) -> f64 + Sync + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredStrategy {
    pub strategy: CCStrategy,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyPopulation {
    pub members: Vec<CCStrategy>,
    pub fitness: Vec<f64>,
    pub generation: u64,
}

/// Evolutionary filter step. `mutable_cells` restricts which cells mutants
/// may flip; each mutant flips `mutated_cells` distinct cells of the seed.
/// Returns the best of the seed and its mutants, preferring the seed on ties.
pub fn filter_phase<R: Rng>(
    seed: &CCStrategy,
    pop_size: usize,
    mutated_cells: usize,
    mutable_cells: &[usize],
    rng: &mut R,
    eval: &Evaluator<'_>,
) -> Result<(ScoredStrategy, StrategyPopulation), CcError> {
    if pop_size < 2 {
        return Err(CcError::PopulationTooSmall(pop_size));
    }
    let m = mutated_cells.min(mutable_cells.len());
    let members: Vec<CCStrategy> = (0..pop_size)
        .map(|_| {
            let mut s = seed.clone();
            for i in index::sample(rng, mutable_cells.len(), m) {
                let cell = mutable_cells[i];
                s.table[cell] = s.table[cell].flipped();
            }
            s
        })
        .collect();
    let seed_reward = eval(seed);
    let fitness: Vec<f64> = members.par_iter().map(&eval).collect();

    let mut best = ScoredStrategy { strategy: seed.clone(), reward: seed_reward };
    for (s, &f) in members.iter().zip(&fitness) {
        if f > best.reward {
            best = ScoredStrategy { strategy: s.clone(), reward: f };
        }
    }
    Ok((best, StrategyPopulation { members, fitness, generation: 1 }))
}

/// Single-cell hill climbing: round `r` proposes flipping
/// `cell_order[r % len]` and keeps the flip only if the reward rises.
/// Ties are rejected so cells the evaluation never visits stay put.
pub fn refine_phase(
    strategy: &CCStrategy,
    eval: &Evaluator<'_>,
    rounds: usize,
    cell_order: &[usize],
) -> ScoredStrategy {
    let mut current = ScoredStrategy { strategy: strategy.clone(), reward: eval(strategy) };
    if cell_order.is_empty() {
        return current;
    }
    for r in 0..rounds {
        let candidate = current.strategy.with_flipped(cell_order[r % cell_order.len()]);
        let reward = eval(&candidate);
        if reward > current.reward {
            current = ScoredStrategy { strategy: candidate, reward };
        }
    }
    current
}
