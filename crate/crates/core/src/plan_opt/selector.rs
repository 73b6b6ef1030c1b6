// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PlanTree;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub pulls: u64,
    pub mean: f64,
}

impl ArmStats {
    pub fn observe(&mut self, value: f64) {
        self.pulls += 1;
        self.mean += (value - self.mean) / self.pulls as f64;
    }
}

/// Per-(template, plan signature) latency statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectorState {
    arms: BTreeMap<(String, String), ArmStats>,
    pulls: BTreeMap<String, u64>,
}

impl SelectorState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arm(&self, template: &str, plan: &PlanTree) -> ArmStats {
        self.arms.get(&(template.to_string(), plan.signature())).copied().unwrap_or_default()
    }

    /// Total pulls recorded for a template.
    pub fn template_pulls(&self, template: &str) -> u64 {
        self.pulls.get(template).copied().unwrap_or(0)
    }

    pub fn feedback(&mut self, template: &str, plan: &PlanTree, latency: f64) {
        self.arms.entry((template.to_string(), plan.signature())).or_default().observe(latency);
        *self.pulls.entry(template.to_string()).or_default() += 1;
    }
}

/// Online choice among candidate plans for a template.
pub trait PlanSelector {
    /// Index into `candidates`, which must be nonempty.
    fn select_plan(&self, template: &str, candidates: &[PlanTree], state: &SelectorState) -> usize;
}

/// Lower-confidence-bound choice on latency. Untried plans go first in
/// candidate order; afterwards the plan minimizing
/// `mean - c * scale * sqrt(ln t / pulls)` wins, where `scale` is the
/// smallest observed mean so the bonus is in latency units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UcbSelector {
    pub c: f64,
}

impl Default for UcbSelector {
    fn default() -> Self {
        UcbSelector { c: 0.5 }
    }
}

impl PlanSelector for UcbSelector {
    fn select_plan(&self, template: &str, candidates: &[PlanTree], state: &SelectorState) -> usize {
        assert!(!candidates.is_empty(), "no candidate plans");
        let arms: Vec<ArmStats> = candidates.iter().map(|p| state.arm(template, p)).collect();
        if let Some(i) = arms.iter().position(|a| a.pulls == 0) {
            return i;
        }
        let t: u64 = arms.iter().map(|a| a.pulls).sum();
        let scale = arms.iter().map(|a| a.mean).fold(f64::INFINITY, f64::min).abs();
        let ln_t = (t as f64).ln();
        let mut best = (0, f64::INFINITY);
        for (i, a) in arms.iter().enumerate() {
            let index = a.mean - self.c * scale * (ln_t / a.pulls as f64).sqrt();
            if index < best.1 {
                best = (i, index);
            }
        }
        best.0
    }
}
