//! Batch normalization over logical replicas ("ghost" batch normalization).
//!
//! During training the mini-batch is cut into `n_replicas` contiguous chunks
//! and every chunk is whitened with its own statistics. The population
//! statistics used at evaluation time are updated from the first chunk only,
//! which is what a data-parallel framework does when each device computes its
//! local statistics and the first device owns the running buffers.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfalError};
use crate::layout::BatchPlan;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhostBatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Weight given to the newest statistics in the moving average.
    pub momentum: f64,
    pub epsilon: f64,
}

/// Values kept from a training forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Array2<f64>,
    inv_std: Vec<Array1<f64>>,
    chunk: usize,
}

impl GhostBatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_channels(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.channels() {
            return Err(UfalError::Shape {
                expected: self.channels(),
                got: batch.ncols(),
            });
        }
        Ok(())
    }

    /// Training-mode forward pass over `n_replicas` contiguous chunks.
    pub fn forward_train(
        &mut self,
        batch: ArrayView2<f64>,
        n_replicas: usize,
    ) -> Result<(Array2<f64>, BatchNormCache)> {
        self.check_channels(&batch)?;
        let rows = batch.nrows();
        if n_replicas == 0 || rows == 0 || rows % n_replicas != 0 {
            return Err(UfalError::ReplicaSplit {
                batch: rows,
                replicas: n_replicas,
            });
        }
        let chunk = rows / n_replicas;
        let mut normalized = Array2::zeros(batch.raw_dim());
        let mut inv_stds = Vec::with_capacity(n_replicas);
        for r in 0..n_replicas {
            let part = batch.slice(s![r * chunk..(r + 1) * chunk, ..]);
            let (mean, var) = chunk_statistics(&part);
            let inv_std = var.mapv(|v| 1.0 / (v + self.epsilon).sqrt());
            let mut out = normalized.slice_mut(s![r * chunk..(r + 1) * chunk, ..]);
            for (mut row, src) in out.outer_iter_mut().zip(part.outer_iter()) {
                for c in 0..row.len() {
                    row[c] = (src[c] - mean[c]) * inv_std[c];
                }
            }
            if r == 0 {
                let m = self.momentum;
                self.running_mean = &self.running_mean * (1.0 - m) + &mean * m;
                self.running_var = &self.running_var * (1.0 - m) + &var * m;
            }
            inv_stds.push(inv_std);
        }
        let output = &normalized * &self.gamma + &self.beta;
        Ok((
            output,
            BatchNormCache {
                normalized,
                inv_std: inv_stds,
                chunk,
            },
        ))
    }

    /// Training-mode forward pass where the replica split comes from a batch plan.
    pub fn forward_train_plan(
        &mut self,
        batch: ArrayView2<f64>,
        plan: &BatchPlan,
    ) -> Result<(Array2<f64>, BatchNormCache)> {
        if batch.nrows() != plan.len() {
            return Err(UfalError::Shape {
                expected: plan.len(),
                got: batch.nrows(),
            });
        }
        self.forward_train(batch, plan.n_replicas)
    }

    /// Evaluation-mode forward pass with the population statistics.
    pub fn forward_eval(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_channels(&batch)?;
        let scale = &self.gamma / &self.running_var.mapv(|v| (v + self.epsilon).sqrt());
        Ok((&batch - &self.running_mean) * &scale + &self.beta)
    }

    /// Backward pass through a training-mode forward.
    ///
    /// Returns `(d_input, d_gamma, d_beta)`.
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        d_output: ArrayView2<f64>,
    ) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let d_gamma = (&d_output * &cache.normalized).sum_axis(Axis(0));
        let d_beta = d_output.sum_axis(Axis(0));
        let d_norm = &d_output * &self.gamma;
        let mut d_input = Array2::zeros(d_output.raw_dim());
        let n = cache.chunk as f64;
        for (r, inv_std) in cache.inv_std.iter().enumerate() {
            let rows = r * cache.chunk..(r + 1) * cache.chunk;
            let dn = d_norm.slice(s![rows.clone(), ..]);
            let xn = cache.normalized.slice(s![rows.clone(), ..]);
            let sum_dn = dn.sum_axis(Axis(0));
            let sum_dn_xn = (&dn * &xn).sum_axis(Axis(0));
            let mut out = d_input.slice_mut(s![rows, ..]);
            for ((mut o, d), x) in out.outer_iter_mut().zip(dn.outer_iter()).zip(xn.outer_iter()) {
                for c in 0..o.len() {
                    o[c] = inv_std[c] / n * (n * d[c] - sum_dn[c] - x[c] * sum_dn_xn[c]);
                }
            }
        }
        (d_input, d_gamma, d_beta)
    }
}

/// Per-channel mean and biased variance of one chunk.
fn chunk_statistics(part: &ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = part.nrows() as f64;
    let mean = part.sum_axis(Axis(0)) / n;
    let centered = part - &mean;
    let var = (&centered * &centered).sum_axis(Axis(0)) / n;
    (mean, var)
}
