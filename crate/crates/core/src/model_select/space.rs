// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SelectError;
use crate::rng::{gaussian, mix_all, unit_f64};

/// A point in the synthetic architecture space.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelGenome {
    pub id: u64,
    pub params: Vec<u32>,
}

/// Synthetic search space. Each genome has a hidden final accuracy and a
/// learning-curve time constant, both fixed by the seed.
#[derive(Clone, Debug)]
pub struct ModelSpace {
    dims: Vec<u32>,
    seed: u64,
    effects: Vec<Vec<f64>>,
}

impl ModelSpace {
    pub fn new(dims: Vec<u32>, seed: u64) -> Result<ModelSpace, SelectError> {
        if dims.is_empty() || dims.iter().any(|&d| d < 2) {
            return Err(SelectError::InvalidSpace("every dimension needs at least 2 values".into()));
        }
        let size = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if size.is_none_or(|s| s > 1 << 40) {
            return Err(SelectError::InvalidSpace("space too large".into()));
        }
        let effects = dims
            .iter()
            .enumerate()
            .map(|(d, &n)| (0..n).map(|v| gaussian(mix_all(&[seed, 1, d as u64, v as u64]))).collect())
            .collect();
        Ok(ModelSpace { dims, seed, effects })
    }

    /// `dims` equal dimensions of `values` choices each.
    pub fn uniform(dims: usize, values: u32, seed: u64) -> Result<ModelSpace, SelectError> {
        ModelSpace::new(vec![values; dims], seed)
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn size(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    pub fn genome(&self, id: u64) -> ModelGenome {
        let mut rest = id % self.size();
        let params = self
            .dims
            .iter()
            .map(|&d| {
                let v = (rest % d as u64) as u32;
                rest /= d as u64;
                v
            })
            .collect();
        ModelGenome { id: id % self.size(), params }
    }

    pub fn id_of(&self, params: &[u32]) -> u64 {
        params.iter().zip(&self.dims).rev().fold(0u64, |acc, (&v, &d)| acc * d as u64 + v as u64)
    }

    pub fn random_genome<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelGenome {
        self.genome(rng.random_range(0..self.size()))
    }

    /// Change one coordinate to a different value.
    pub fn mutate<R: Rng + ?Sized>(&self, g: &ModelGenome, rng: &mut R) -> ModelGenome {
        let d = rng.random_range(0..self.dims.len());
        let mut params = g.params.clone();
        let shift = rng.random_range(1..self.dims[d]);
        params[d] = (params[d] + shift) % self.dims[d];
        ModelGenome { id: self.id_of(&params), params }
    }

    /// Hidden final accuracy in (0.05, 0.95). Selectors must only see it
    /// through a [`Scorer`] or [`Trainer`]; this accessor exists for
    /// oracles and regret reporting.
    pub fn ground_truth(&self, g: &ModelGenome) -> f64 {
        let d = self.dims.len();
        let mut z: f64 = g.params.iter().enumerate().map(|(i, &v)| self.effects[i][v as usize]).sum();
        for i in 0..d.saturating_sub(1) {
            let key = mix_all(&[self.seed, 2, i as u64, g.params[i] as u64, g.params[i + 1] as u64]);
            z += 0.5 * gaussian(key);
        }
        0.5 + 0.45 * (z / (d as f64).sqrt()).tanh()
    }

    /// Learning-curve time constant in epochs, in [1, 10).
    pub fn tau(&self, g: &ModelGenome) -> f64 {
        1.0 + 9.0 * unit_f64(mix_all(&[self.seed, 3, g.id]))
    }

    /// Brute-force argmax of the hidden accuracy, lowest id on ties.
    pub fn oracle_best(&self) -> (ModelGenome, f64) {
        let mut best = (self.genome(0), f64::NEG_INFINITY);
        for id in 0..self.size() {
            let g = self.genome(id);
            let a = self.ground_truth(&g);
            if a > best.1 {
                best = (g, a);
            }
        }
        best
    }
}

/// One synthetic training-free proxy: `rho * a_final + (1 - rho) * N(0, sigma)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proxy {
    pub weight: f64,
    pub rho: f64,
    pub sigma: f64,
    pub label: u64,
}

/// Weighted combination of proxies with a fixed per-call cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scorer {
    pub proxies: Vec<Proxy>,
    pub cost: f64,
    pub seed: u64,
}

impl Scorer {
    pub fn single(rho: f64, sigma: f64, cost: f64, seed: u64) -> Scorer {
        Scorer { proxies: vec![Proxy { weight: 1.0, rho, sigma, label: 0 }], cost, seed }
    }

    /// Equal blend of an expressivity-like and a trainability-like proxy.
    pub fn blended(rho: f64, sigma: f64, cost: f64, seed: u64) -> Scorer {
        Scorer {
            proxies: vec![Proxy { weight: 0.5, rho, sigma, label: 1 }, Proxy { weight: 0.5, rho, sigma, label: 2 }],
            cost,
            seed,
        }
    }

    pub fn score(&self, space: &ModelSpace, g: &ModelGenome) -> f64 {
        let a = space.ground_truth(g);
        self.proxies
            .iter()
            .map(|p| {
                let noise = p.sigma * gaussian(mix_all(&[self.seed, 10 + p.label, g.id]));
                p.weight * (p.rho * a + (1.0 - p.rho) * noise)
            })
            .sum()
    }
}

/// Exponential learning curves with per-evaluation noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub cost_per_epoch: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Trainer {
    /// Accuracy after `epochs` cumulative epochs.
    pub fn accuracy(&self, space: &ModelSpace, g: &ModelGenome, epochs: u64) -> f64 {
        let a = space.ground_truth(g);
        let curve = a * (1.0 - (-(epochs as f64) / space.tau(g)).exp());
        curve + self.sigma * gaussian(mix_all(&[self.seed, 20, g.id, epochs]))
    }
}
