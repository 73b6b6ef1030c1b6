// SPDX-License-Identifier: Apache-2.0

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    detect_shift, filter_phase, observe, refine_phase, Bucketing, CCStrategy, OpClass, Reward, ScoredStrategy,
    ShiftThresholds, SystemState,
};
use crate::engine::{CCAction, Engine, EngineConfig, EngineError, Tick, WindowContext, WorkloadSpec};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveConfig {
    /// Abort penalty in the reward.
    pub lambda: f64,
    pub pop_size: usize,
    pub mutated_cells: usize,
    /// Hill-climbing rounds after the tournament.
    pub refine_rounds: usize,
    pub buckets: usize,
    /// Contention bands on each side of the current one open to search.
    pub focus_radius: usize,
    /// Also enter the seed with all focus cells locked, and with all
    /// focus cells optimistic, into the tournament.
    pub fill_entrants: bool,
    pub contention_max: f64,
    pub wait_max: f64,
    pub hot_keys: usize,
    pub monitor_interval: Tick,
    pub window_ticks: Tick,
    /// Private windows averaged per candidate evaluation.
    pub eval_windows: usize,
    pub thresholds: ShiftThresholds,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            lambda: 0.5,
            pop_size: 8,
            mutated_cells: 2,
            refine_rounds: 16,
            buckets: 4,
            focus_radius: 0,
            fill_entrants: false,
            contention_max: 1.0,
            wait_max: 8.0,
            hot_keys: 8,
            monitor_interval: 50,
            window_ticks: 1000,
            eval_windows: 2,
            thresholds: ShiftThresholds::default(),
        }
    }
}

impl AdaptiveConfig {
    pub fn bucketing(&self) -> Result<Bucketing, super::CcError> {
        Bucketing::new(self.buckets, self.contention_max, self.wait_max)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.bucketing().map_err(|e| e.to_string())?;
        if self.pop_size < 2 {
            return Err("pop_size must be at least 2".into());
        }
        if self.window_ticks == 0 || self.monitor_interval == 0 {
            return Err("window_ticks and monitor_interval must be positive".into());
        }
        if self.eval_windows == 0 {
            return Err("eval_windows must be positive".into());
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err("lambda must be non-negative".into());
        }
        Ok(())
    }
}

/// One live window as seen by the controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window: usize,
    pub state: SystemState,
    pub reward: f64,
    pub shift: bool,
    /// A new strategy was adopted for the next window.
    pub adapted: bool,
    pub lock_fraction: f64,
}

/// Runs live windows, watches for shifts, and re-tunes the strategy.
pub struct AdaptiveController {
    config: AdaptiveConfig,
    engine_config: EngineConfig,
    strategy: CCStrategy,
    prev: Option<SystemState>,
    settling: bool,
    seed: u64,
    windows: usize,
}

impl AdaptiveController {
    pub fn new(config: AdaptiveConfig, engine_config: EngineConfig, initial: CCStrategy, seed: u64) -> Self {
        AdaptiveController {
            config,
            engine_config: EngineConfig { logging: false, ..engine_config },
            strategy: initial,
            prev: None,
            settling: false,
            seed,
            windows: 0,
        }
    }

    pub fn strategy(&self) -> &CCStrategy {
        &self.strategy
    }

    pub fn config(&self) -> &AdaptiveConfig {
        &self.config
    }

    /// Run one live window; on a detected shift, adapt before the next.
    pub fn step(
        &mut self,
        engine: &mut Engine,
        workload: &WorkloadSpec,
        ctx: &mut WindowContext,
    ) -> Result<WindowRecord, EngineError> {
        let index = self.windows;
        self.windows += 1;
        let stats = engine.run_window(workload, &self.strategy, self.config.window_ticks, ctx)?;
        let state = observe(&stats, self.config.window_ticks as f64).expect("positive window");
        let reward = Reward::from_stats(&stats, self.config.lambda).0;
        let shift = !self.settling && self.prev.is_some_and(|p| detect_shift(&p, &state, &self.config.thresholds));
        let lock_fraction = self.strategy.lock_fraction();
        if shift {
            self.strategy = self.adapt(workload, ctx, index);
        }
        // The window after an adaptation reflects the new strategy, not the
        // workload; it becomes the new baseline without being tested.
        self.settling = shift;
        self.prev = Some(state);
        Ok(WindowRecord { window: index, state, reward, shift, adapted: shift, lock_fraction })
    }

    /// Evaluator over private engines seeded per adaptation.
    pub fn evaluator<'a>(
        &'a self,
        workload: &'a WorkloadSpec,
        ctx: &'a WindowContext,
        seed: u64,
    ) -> impl Fn(&CCStrategy) -> f64 + Sync + 'a {
        move |s: &CCStrategy| {
            let total: f64 = (0..self.config.eval_windows)
                .map(|k| {
                    let spec = workload.with_seed(rng::mix_all(&[seed, k as u64]));
                    let mut engine = Engine::new(self.engine_config.clone());
                    let mut local = ctx.clone();
                    let stats = engine
                        .run_window(&spec, s, self.config.window_ticks, &mut local)
                        .expect("fresh engine is quiescent");
                    Reward::from_stats(&stats, self.config.lambda).0
                })
                .sum();
            total / self.config.eval_windows as f64
        }
    }

    /// Cells within `focus_radius` contention bands of `state`, all wait buckets.
    pub fn focus_cells(&self, state: &SystemState) -> Vec<usize> {
        let b = self.strategy.bucketing();
        let (c, _) = b.cell(state);
        let lo = c.saturating_sub(self.config.focus_radius);
        let hi = (c + self.config.focus_radius).min(b.buckets - 1);
        (lo..=hi)
            .flat_map(|band| (0..b.buckets).map(move |w| (band, w)))
            .flat_map(|(band, w)| OpClass::ALL.map(|class| self.strategy.cell_index(band, w, class)))
            .collect()
    }

    fn adapt(&self, workload: &WorkloadSpec, ctx: &WindowContext, index: usize) -> CCStrategy {
        let seed = rng::mix_all(&[self.seed, index as u64]);
        let eval = self.evaluator(workload, ctx, seed);
        let cells = self.focus_cells(&ctx.state);
        let mut r: ChaCha8Rng = rng::stream(seed, "cc-filter");
        let (best, _) =
            filter_phase(&self.strategy, self.config.pop_size, self.config.mutated_cells, &cells, &mut r, &eval)
                .expect("validated pop_size");
        let fills: Vec<CCStrategy> = if self.config.fill_entrants {
            [CCAction::LockImmediate, CCAction::OptimisticNoLock].map(|a| self.strategy.with_cells(&cells, a)).into()
        } else {
            Vec::new()
        };
        let scored: Vec<f64> = fills.par_iter().map(&eval).collect();
        let mut best = best;
        for (s, r) in fills.into_iter().zip(scored) {
            if r > best.reward {
                best = ScoredStrategy { strategy: s, reward: r };
            }
        }
        refine_phase(&best.strategy, &eval, self.config.refine_rounds, &cells).strategy
    }
}
