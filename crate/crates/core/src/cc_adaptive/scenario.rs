// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::{observe, AdaptiveConfig, AdaptiveController, CCStrategy, SystemState, WindowRecord};
use crate::engine::{CCAction, Engine, EngineConfig, EngineError, WindowContext, WorkloadSpec};
use crate::rng::mix_all;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialStrategy {
    #[default]
    Prescribed,
    Lock,
    Optimistic,
}

/// A scripted workload shift: `before` for the first `shift_at` windows,
/// `after` for the rest. The adaptive controller and, optionally, the two
/// fixed baselines see identical per-window workload seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftScenario {
    pub windows: usize,
    pub shift_at: usize,
    pub before: WorkloadSpec,
    pub after: WorkloadSpec,
    pub engine: EngineConfig,
    pub adaptive: AdaptiveConfig,
    pub initial: InitialStrategy,
    pub baselines: bool,
}

impl Default for ShiftScenario {
    fn default() -> Self {
        ShiftScenario {
            windows: 20,
            shift_at: 8,
            before: WorkloadSpec { key_space: 1000, zipf_theta: 0.0, write_fraction: 0.05, ..WorkloadSpec::default() },
            after: WorkloadSpec { key_space: 1000, zipf_theta: 0.99, write_fraction: 0.8, ..WorkloadSpec::default() },
            engine: EngineConfig::default(),
            adaptive: AdaptiveConfig {
                // Aborts here cost only a short backoff, so a heavy abort
                // penalty would rank lock-heavy tables above faster ones.
                lambda: 0.1,
                focus_radius: 1,
                fill_entrants: true,
                mutated_cells: 4,
                refine_rounds: 48,
                ..AdaptiveConfig::default()
            },
            initial: InitialStrategy::Prescribed,
            baselines: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRun {
    pub adaptive: Vec<WindowRecord>,
    /// Per-window states of the fixed baselines; empty when disabled.
    pub all_lock: Vec<SystemState>,
    pub all_optimistic: Vec<SystemState>,
}

impl ShiftRun {
    /// First window at or after `from` where a shift fired.
    pub fn first_shift(&self, from: usize) -> Option<usize> {
        self.adaptive.iter().find(|r| r.window >= from && r.shift).map(|r| r.window)
    }

    pub fn mean_throughput(states: impl Iterator<Item = SystemState>) -> f64 {
        let (sum, n) = states.fold((0.0, 0usize), |(s, n), st| (s + st.throughput, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

impl ShiftScenario {
    pub fn validate(&self) -> Result<(), String> {
        self.before.validate().map_err(|e| format!("before: {e}"))?;
        self.after.validate().map_err(|e| format!("after: {e}"))?;
        self.adaptive.validate()?;
        if self.shift_at > self.windows {
            return Err("shift_at must not exceed windows".into());
        }
        if self.engine.op_ticks == 0 {
            return Err("op_ticks must be positive".into());
        }
        if self.engine.anchor_interval == 0 {
            return Err("anchor_interval must be positive".into());
        }
        Ok(())
    }

    pub fn workload(&self, window: usize, seed: u64) -> WorkloadSpec {
        let base = if window < self.shift_at { &self.before } else { &self.after };
        base.with_seed(mix_all(&[seed, base.seed, window as u64]))
    }

    fn context(&self) -> WindowContext {
        WindowContext::new(self.adaptive.hot_keys, self.adaptive.monitor_interval)
    }

    pub fn run(&self, seed: u64) -> Result<ShiftRun, EngineError> {
        let bucketing = self.adaptive.bucketing().expect("validated bucketing");
        let initial = match self.initial {
            InitialStrategy::Prescribed => CCStrategy::prescribed(bucketing),
            InitialStrategy::Lock => CCStrategy::uniform(bucketing, CCAction::LockImmediate),
            InitialStrategy::Optimistic => CCStrategy::uniform(bucketing, CCAction::OptimisticNoLock),
        };
        let engine_config = EngineConfig { logging: false, ..self.engine.clone() };
        let mut controller = AdaptiveController::new(self.adaptive.clone(), engine_config.clone(), initial, seed);
        let mut engine = Engine::new(engine_config.clone());
        let mut ctx = self.context();
        let mut adaptive = Vec::with_capacity(self.windows);
        for w in 0..self.windows {
            adaptive.push(controller.step(&mut engine, &self.workload(w, seed), &mut ctx)?);
        }
        let mut run = ShiftRun { adaptive, all_lock: Vec::new(), all_optimistic: Vec::new() };
        if self.baselines {
            for (action, out) in
                [(CCAction::LockImmediate, &mut run.all_lock), (CCAction::OptimisticNoLock, &mut run.all_optimistic)]
            {
                let mut engine = Engine::new(engine_config.clone());
                let mut ctx = self.context();
                for w in 0..self.windows {
                    let stats =
                        engine.run_window(&self.workload(w, seed), &action, self.adaptive.window_ticks, &mut ctx)?;
                    out.push(observe(&stats, self.adaptive.window_ticks as f64).expect("positive window"));
                }
            }
        }
        Ok(run)
    }
}
