// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GateError, QueryEncoding, Schema};

/// Row-major matrix with its shape stored alongside the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        Matrix { rows, cols, data: (0..rows * cols).map(|_| normal.sample(rng)).collect() }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    fn check(&self, what: &str, rows: usize, cols: usize) -> Result<(), GateError> {
        if self.rows != rows || self.cols != cols || self.data.len() != rows * cols {
            return Err(GateError::Shape(format!(
                "{what} is {}x{} with {} values, expected {rows}x{cols}",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(())
    }

    fn matvec(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[r]).collect()
    }
}

/// Sparse nonnegative expert weights summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateWeights {
    pub w: Vec<f64>,
}

impl GateWeights {
    pub fn active(&self) -> Vec<usize> {
        (0..self.w.len()).filter(|&i| self.w[i] > 0.0).collect()
    }
}

/// Softmax, then zero entries below `tau` or outside the `k_max` largest,
/// then renormalize. If nothing survives, the largest logit takes weight 1.
/// Ties go to the lower index.
pub fn sparse_softmax(logits: &[f64], k_max: usize, tau: f64) -> GateWeights {
    assert!(!logits.is_empty(), "at least one expert");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut w = vec![0.0; probs.len()];
    for &i in order.iter().take(k_max) {
        if probs[i] >= tau {
            w[i] = probs[i];
        }
    }
    let kept: f64 = w.iter().sum();
    if kept > 0.0 {
        w.iter_mut().for_each(|x| *x /= kept);
    } else {
        w[order[0]] = 1.0;
    }
    GateWeights { w }
}

/// Embeddings per attribute, a ReLU hidden layer and a linear layer to one
/// logit per expert, followed by [`sparse_softmax`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingNet {
    pub embed_dim: usize,
    pub hidden: usize,
    pub experts: usize,
    pub k_max: usize,
    pub tau: f64,
    /// One table per attribute, `vocab_size x embed_dim`.
    pub embeddings: Vec<Matrix>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl GatingNet {
    pub fn zeros(
        vocab_sizes: &[usize],
        embed_dim: usize,
        hidden: usize,
        experts: usize,
        k_max: usize,
        tau: f64,
    ) -> Self {
        GatingNet {
            embed_dim,
            hidden,
            experts,
            k_max,
            tau,
            embeddings: vocab_sizes.iter().map(|&v| Matrix::zeros(v, embed_dim)).collect(),
            w1: Matrix::zeros(hidden, embed_dim * vocab_sizes.len()),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(experts, hidden),
            b2: vec![0.0; experts],
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        schema: &Schema,
        embed_dim: usize,
        hidden: usize,
        experts: usize,
        k_max: usize,
        tau: f64,
        rng: &mut R,
    ) -> Self {
        let mut net = GatingNet::zeros(&schema.vocab_sizes(), embed_dim, hidden, experts, k_max, tau);
        for m in &mut net.embeddings {
            *m = Matrix::random(m.rows, m.cols, 1.0, rng);
        }
        net.w1 = Matrix::random(hidden, net.w1.cols, 1.0 / (net.w1.cols as f64).sqrt(), rng);
        net.w2 = Matrix::random(experts, hidden, 2.0 / (hidden as f64).sqrt(), rng);
        net
    }

    pub fn validate(&self) -> Result<(), GateError> {
        if self.experts == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(GateError::InvalidParam("experts, embed_dim and hidden must be positive".into()));
        }
        if self.k_max == 0 {
            return Err(GateError::InvalidParam("k_max must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(GateError::InvalidParam("tau must lie in [0, 1]".into()));
        }
        for (i, m) in self.embeddings.iter().enumerate() {
            m.check(&format!("embedding {i}"), m.rows.max(1), self.embed_dim)?;
        }
        self.w1.check("w1", self.hidden, self.embed_dim * self.embeddings.len())?;
        self.w2.check("w2", self.experts, self.hidden)?;
        if self.b1.len() != self.hidden || self.b2.len() != self.experts {
            return Err(GateError::Shape("bias lengths".into()));
        }
        Ok(())
    }

    /// Check the net can encode every token of `schema`.
    pub fn check_schema(&self, schema: &Schema) -> Result<(), GateError> {
        let sizes = schema.vocab_sizes();
        if sizes.len() != self.embeddings.len() || sizes.iter().zip(&self.embeddings).any(|(s, m)| m.rows < *s) {
            return Err(GateError::Shape("embedding tables do not cover the schema".into()));
        }
        Ok(())
    }

    pub fn logits(&self, enc: &QueryEncoding) -> Result<Vec<f64>, GateError> {
        if enc.tokens.len() != self.embeddings.len() {
            return Err(GateError::Shape(format!(
                "encoding has {} tokens, net expects {}",
                enc.tokens.len(),
                self.embeddings.len()
            )));
        }
        let mut x = Vec::with_capacity(self.w1.cols);
        for (t, table) in enc.tokens.iter().zip(&self.embeddings) {
            if *t as usize >= table.rows {
                return Err(GateError::Shape(format!("token {t} outside a table of {} rows", table.rows)));
            }
            x.extend_from_slice(table.row(*t as usize));
        }
        let h: Vec<f64> = self.w1.matvec(&x, &self.b1).into_iter().map(|v| v.max(0.0)).collect();
        Ok(self.w2.matvec(&h, &self.b2))
    }
}

pub fn gate(enc: &QueryEncoding, net: &GatingNet) -> Result<GateWeights, GateError> {
    Ok(sparse_softmax(&net.logits(enc)?, net.k_max, net.tau))
}
