use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Matrix, Scalar, ScalarLoss};

/// Multi-similarity loss constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for MsParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            lambda: 0.5,
            epsilon: 0.1,
        }
    }
}

/// Multi-similarity loss over an `n×n` similarity matrix with one label per
/// row. Anchor `i` keeps positives with `S < max negative + ε` and negatives
/// with `S > min positive − ε`; when an anchor has no negatives every positive
/// is kept, and likewise for negatives without positives. The loss averages
/// over all `n` anchors. Mining is treated as constant when differentiating.
#[derive(Debug, Clone)]
pub struct MultiSimilarityLoss {
    pub params: MsParams,
    pub labels: Vec<usize>,
}

/// Pairs kept for one anchor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mined {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl MultiSimilarityLoss {
    pub fn new(labels: Vec<usize>, params: MsParams) -> Self {
        Self { params, labels }
    }

    pub fn mine(&self, s: &[f64], n: usize, i: usize) -> Mined {
        let eps = self.params.epsilon;
        let row = &s[i * n..(i + 1) * n];
        let pos: Vec<usize> = (0..n).filter(|&k| k != i && self.labels[k] == self.labels[i]).collect();
        let neg: Vec<usize> = (0..n).filter(|&k| self.labels[k] != self.labels[i]).collect();
        let max_neg = neg.iter().map(|&k| row[k]).fold(f64::NEG_INFINITY, f64::max);
        let min_pos = pos.iter().map(|&k| row[k]).fold(f64::INFINITY, f64::min);
        Mined {
            positives: pos
                .iter()
                .copied()
                .filter(|&k| neg.is_empty() || row[k] < max_neg + eps)
                .collect(),
            negatives: neg
                .iter()
                .copied()
                .filter(|&k| pos.is_empty() || row[k] > min_pos - eps)
                .collect(),
        }
    }

    /// Loss and `∂L/∂S` in double precision.
    pub fn evaluate(&self, s: &[f64], n: usize) -> Result<(f64, Vec<f64>)> {
        if s.len() != n * n || self.labels.len() != n {
            return Err(Error::Shape(format!(
                "similarity has {} entries and {} labels for n = {n}",
                s.len(),
                self.labels.len()
            )));
        }
        let MsParams { alpha, beta, lambda, .. } = self.params;
        let mut loss = 0.0;
        let mut grad = vec![0.0; n * n];
        for i in 0..n {
            let m = self.mine(s, n, i);
            // (1/a)·log(1 + Σ exp(z_k)), z_k = -a(S-λ) or b(S-λ)
            let mut term = |idx: &[usize], coef: f64| {
                if idx.is_empty() {
                    return;
                }
                let z: Vec<f64> = idx.iter().map(|&k| coef * (s[i * n + k] - lambda)).collect();
                let top = z.iter().copied().fold(0.0f64, f64::max);
                let denom = (-top).exp() + z.iter().map(|v| (v - top).exp()).sum::<f64>();
                loss += (top + denom.ln()) / coef.abs();
                for (&k, v) in idx.iter().zip(&z) {
                    // d/dS of (1/|c|)·log(1 + Σ e^{c(S-λ)}) = sign(c)·e^z / (1 + Σ e^z)
                    grad[i * n + k] += coef.signum() * (v - top).exp() / denom;
                }
            };
            term(&m.positives, -alpha);
            term(&m.negatives, beta);
        }
        let inv = 1.0 / n as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((loss * inv, grad))
    }
}

impl<T: Scalar> ScalarLoss<T> for MultiSimilarityLoss {
    fn value_and_grad(&self, s: &Matrix<T>) -> Result<(T, Matrix<T>)> {
        if s.rows() != s.cols() {
            return Err(Error::Shape(format!("similarity matrix is {}x{}", s.rows(), s.cols())));
        }
        let n = s.rows();
        let flat: Vec<f64> = s.data().iter().map(|v| v.as_f64()).collect();
        let (loss, grad) = self.evaluate(&flat, n)?;
        let grad = Matrix::from_vec(n, n, grad.into_iter().map(T::of).collect())?;
        Ok((T::of(loss), grad))
    }
}
