//! The `Layer` contract shared by every differentiable component, plus
//! thin layer wrappers around the primitive ops.

use crate::error::Result;
use crate::ops::conv::{
    conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, ConvWeights, Padding,
};
use crate::ops::norm::{
    batch_norm_backward, batch_norm_infer, batch_norm_train, BatchNormCache, RunningStats,
    BN_EPSILON,
};
use crate::ops::Activation;
use crate::tensor::{Shape, Tensor};

/// A differentiable map with an explicit backward pass.
///
/// `forward` runs in training mode (batch statistics) and returns whatever
/// `backward` needs; `infer` is the cache-free evaluation path. Parameter
/// gradients come back in the same order as [`Layer::params`].
pub trait Layer {
    type Cache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Self::Cache)>;

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x).map(|(y, _)| y)
    }

    fn backward(&self, cache: &Self::Cache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)>;

    fn params(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, params: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    params
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn conv_params<'a>(prefix: &str, w: &'a ConvWeights) -> Vec<(String, &'a Tensor)> {
    let mut v = vec![(format!("{prefix}.kernel"), &w.kernel)];
    if let Some(b) = &w.bias {
        v.push((format!("{prefix}.bias"), b));
    }
    v
}

pub(crate) fn conv_params_mut(w: &mut ConvWeights) -> Vec<&mut Tensor> {
    let mut v = vec![&mut w.kernel];
    if let Some(b) = w.bias.as_mut() {
        v.push(b);
    }
    v
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weights: ConvWeights,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new(weights: ConvWeights, stride: usize, padding: Padding) -> Self {
        Conv2d {
            weights,
            stride,
            padding,
        }
    }
}

impl Layer for Conv2d {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.infer(x)?, x.clone()))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weights, self.stride, self.padding)
    }

    fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        Ok(conv2d_backward(x, &self.weights, self.stride, self.padding, dy)?.param_grads())
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        conv_params("conv", &self.weights)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        conv_params_mut(&mut self.weights)
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub weights: ConvWeights,
    pub stride: usize,
    pub padding: Padding,
}

impl Layer for DepthwiseConv2d {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.infer(x)?, x.clone()))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        depthwise_conv2d(x, &self.weights, self.stride, self.padding)
    }

    fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        Ok(depthwise_conv2d_backward(x, &self.weights, self.stride, self.padding, dy)?.param_grads())
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        conv_params("depthwise", &self.weights)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        conv_params_mut(&mut self.weights)
    }
}

impl Layer for Activation {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((Activation::forward(*self, x), x.clone()))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Activation::forward(*self, x))
    }

    fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        Ok((Activation::backward(*self, x, dy)?, Vec::new()))
    }
}

/// Batch normalization with learnable scale/shift.
///
/// `forward` normalizes by batch statistics but leaves `running` alone;
/// callers fold the batch statistics in with [`BatchNorm::commit`] once the
/// step is accepted.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Result<Self> {
        let s = Shape::new(1, 1, 1, channels)?;
        Ok(BatchNorm {
            gamma: Tensor::full(s, 1.0),
            beta: Tensor::zeros(s),
            running: RunningStats::new(channels),
        })
    }

    pub fn commit(&mut self, cache: &BatchNormCache) {
        self.running.update(&cache.mean, &cache.var);
    }
}

impl Layer for BatchNorm {
    type Cache = BatchNormCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, BatchNormCache)> {
        batch_norm_train(x, self.gamma.data(), self.beta.data(), BN_EPSILON)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        batch_norm_infer(x, self.gamma.data(), self.beta.data(), &self.running, BN_EPSILON)
    }

    fn backward(&self, cache: &BatchNormCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (dx, dg, db) = batch_norm_backward(cache, self.gamma.data(), dy)?;
        Ok((dx, vec![Tensor::vector(dg)?, Tensor::vector(db)?]))
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
