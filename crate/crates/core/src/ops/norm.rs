//! Per-channel batch normalization over the N·H·W positions of each channel.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const BN_EPSILON: Float = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: Float = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Float>,
    pub var: Vec<Float>,
    pub momentum: Float,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
        }
    }

    pub fn update(&mut self, batch_mean: &[Float], batch_var: &[Float]) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<Float>,
    pub mean: Vec<Float>,
    pub var: Vec<Float>,
}

fn check(x: &Tensor, gamma: &[Float], beta: &[Float]) -> Result<()> {
    let c = x.shape().c;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batch_norm: gamma/beta lengths {}/{} for {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Biased per-channel mean and variance.
pub fn channel_stats(x: &Tensor) -> (Vec<Float>, Vec<Float>) {
    let c = x.shape().c;
    let m = (x.len() / c) as Float;
    let mut mean = vec![0.0; c];
    for px in x.data().chunks_exact(c) {
        for (a, v) in mean.iter_mut().zip(px) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for px in x.data().chunks_exact(c) {
        for ((a, v), mu) in var.iter_mut().zip(px).zip(&mean) {
            let d = v - mu;
            *a += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

pub fn batch_norm_train(x: &Tensor, gamma: &[Float], beta: &[Float], eps: Float) -> Result<(Tensor, BatchNormCache)> {
    check(x, gamma, beta)?;
    let c = x.shape().c;
    let (mean, var) = channel_stats(x);
    let inv_std: Vec<Float> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for (xh, yy) in x_hat
        .data_mut()
        .chunks_exact_mut(c)
        .zip(y.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let v = (xh[ch] - mean[ch]) * inv_std[ch];
            xh[ch] = v;
            yy[ch] = gamma[ch] * v + beta[ch];
        }
    }
    Ok((
        y,
        BatchNormCache {
            x_hat,
            inv_std,
            mean,
            var,
        },
    ))
}

pub fn batch_norm_infer(x: &Tensor, gamma: &[Float], beta: &[Float], stats: &RunningStats, eps: Float) -> Result<Tensor> {
    check(x, gamma, beta)?;
    let c = x.shape().c;
    let mut y = x.clone();
    for px in y.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            let inv = 1.0 / (stats.var[ch] + eps).sqrt();
            px[ch] = gamma[ch] * (px[ch] - stats.mean[ch]) * inv + beta[ch];
        }
    }
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(cache: &BatchNormCache, gamma: &[Float], dy: &Tensor) -> Result<(Tensor, Vec<Float>, Vec<Float>)> {
    dy.expect_shape(cache.x_hat.shape(), "batch_norm_backward dy")?;
    let c = dy.shape().c;
    let m = (dy.len() / c) as Float;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (g, xh) in dy.data().chunks_exact(c).zip(cache.x_hat.data().chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += g[ch];
            dgamma[ch] += g[ch] * xh[ch];
        }
    }
    let mut dx = dy.clone();
    for (d, xh) in dx.data_mut().chunks_exact_mut(c).zip(cache.x_hat.data().chunks_exact(c)) {
        for ch in 0..c {
            // sum(dxhat) = gamma·dbeta, sum(dxhat·xhat) = gamma·dgamma
            let dxhat = d[ch] * gamma[ch];
            d[ch] = cache.inv_std[ch] / m
                * (m * dxhat - gamma[ch] * dbeta[ch] - xh[ch] * gamma[ch] * dgamma[ch]);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Normalizes with batch statistics (and updates `running`) in train mode,
/// or with `running` in infer mode.
pub fn batch_norm(
    x: &Tensor,
    gamma: &[Float],
    beta: &[Float],
    running: &mut RunningStats,
    mode: BatchNormMode,
) -> Result<Tensor> {
    match mode {
        BatchNormMode::Train => {
            let (y, cache) = batch_norm_train(x, gamma, beta, BN_EPSILON)?;
            running.update(&cache.mean, &cache.var);
            Ok(y)
        }
        BatchNormMode::Infer => batch_norm_infer(x, gamma, beta, running, BN_EPSILON),
    }
}
