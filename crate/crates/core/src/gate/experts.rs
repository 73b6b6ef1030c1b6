// SPDX-License-Identifier: Apache-2.0

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GateError, GateWeights};

pub trait Expert: Send + Sync {
    fn evaluate(&self, x: &[f64]) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearExpert {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Expert for LinearExpert {
    fn evaluate(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

/// Expert replicas with per-expert evaluation counters.
pub struct ExpertSet {
    experts: Vec<Box<dyn Expert>>,
    counters: Vec<AtomicU64>,
}

impl ExpertSet {
    pub fn new(experts: Vec<Box<dyn Expert>>) -> Self {
        let counters = experts.iter().map(|_| AtomicU64::new(0)).collect();
        ExpertSet { experts, counters }
    }

    pub fn linear(experts: Vec<LinearExpert>) -> Self {
        Self::new(experts.into_iter().map(|e| Box::new(e) as Box<dyn Expert>).collect())
    }

    pub fn random_linear<R: Rng + ?Sized>(k: usize, dim: usize, rng: &mut R) -> Self {
        let experts = (0..k)
            .map(|_| LinearExpert {
                weights: (0..dim).map(|_| StandardNormal.sample(rng)).collect(),
                bias: StandardNormal.sample(rng),
            })
            .collect();
        Self::linear(experts)
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Evaluate one expert, counting the call.
    pub fn evaluate(&self, i: usize, x: &[f64]) -> f64 {
        self.counters[i].fetch_add(1, Ordering::Relaxed);
        self.experts[i].evaluate(x)
    }

    pub fn counts(&self) -> Vec<u64> {
        self.counters.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    /// Evaluate every expert and mix by `weights`.
    pub fn dense_predict(&self, weights: &GateWeights, x: &[f64]) -> Result<f64, GateError> {
        self.check(weights)?;
        Ok((0..self.len()).map(|i| weights.w[i] * self.evaluate(i, x)).sum())
    }

    fn check(&self, weights: &GateWeights) -> Result<(), GateError> {
        if weights.w.len() != self.len() {
            return Err(GateError::Shape(format!("{} weights for {} experts", weights.w.len(), self.len())));
        }
        Ok(())
    }
}

/// Mix only the experts with positive weight; the rest are never evaluated.
pub fn sliced_predict(weights: &GateWeights, experts: &ExpertSet, x: &[f64]) -> Result<f64, GateError> {
    experts.check(weights)?;
    Ok(weights.active().into_iter().map(|i| weights.w[i] * experts.evaluate(i, x)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> ExpertSet {
        ExpertSet::linear(vec![
            LinearExpert { weights: vec![1.0, 0.0], bias: 0.0 },
            LinearExpert { weights: vec![0.0, 1.0], bias: 1.0 },
            LinearExpert { weights: vec![2.0, 2.0], bias: -1.0 },
        ])
    }

    #[test]
    fn one_hot_touches_one_expert() {
        let e = set();
        let y = sliced_predict(&GateWeights { w: vec![0.0, 1.0, 0.0] }, &e, &[3.0, 4.0]).unwrap();
        assert_eq!(y, 5.0);
        assert_eq!(e.counts(), vec![0, 1, 0]);
    }

    #[test]
    fn identical_experts_give_common_output() {
        let same = LinearExpert { weights: vec![0.5, -1.0], bias: 2.0 };
        let e = ExpertSet::linear(vec![same.clone(), same.clone(), same.clone(), same]);
        let y = sliced_predict(&GateWeights { w: vec![0.25; 4] }, &e, &[2.0, 1.0]).unwrap();
        assert!((y - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sliced_matches_dense() {
        let e = set();
        let w = GateWeights { w: vec![0.3, 0.0, 0.7] };
        let x = [1.5, -2.0];
        let sliced = sliced_predict(&w, &e, &x).unwrap();
        assert_eq!(e.counts(), vec![1, 0, 1]);
        assert!((sliced - e.dense_predict(&w, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        assert!(sliced_predict(&GateWeights { w: vec![1.0] }, &set(), &[0.0, 0.0]).is_err());
    }
}
