//! Composite layers: inverted bottleneck, its attention-augmented variant,
//! dense blocks, transitions and the regression head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionSpec, AugmentedConv, AugmentedConvCache};
use crate::blurpool::{Downsample, DownsampleCache, Pooling};
use crate::error::{Error, Result};
use crate::layer::{conv_params, conv_params_mut, prefixed, BatchNorm, Layer};
use crate::ops::conv::{
    conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, ConvWeights, Padding,
};
use crate::ops::norm::BatchNormCache;
use crate::ops::Activation;
use crate::tensor::{concat_channels, split_channels, Float, Shape, Tensor};

/// Which depth the expansion factor multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionBasis {
    /// `e · C_in`: the expanded depth grows with the dense-block input.
    Input,
    /// `e · k`: every layer expands to the same width.
    Growth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub expansion: usize,
    pub growth: usize,
    pub activation: Activation,
    pub attention: Option<AttentionSpec>,
    pub basis: ExpansionBasis,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            expansion: 4,
            growth: 10,
            activation: Activation::Mish,
            attention: None,
            basis: ExpansionBasis::Growth,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expansion == 0 || self.growth == 0 {
            return Err(Error::config(format!(
                "expansion ({}) and growth ({}) must be at least 1",
                self.expansion, self.growth
            )));
        }
        if let Some(a) = &self.attention {
            a.validate()?;
        }
        Ok(())
    }

    pub fn expanded(&self, c_in: usize) -> usize {
        match self.basis {
            ExpansionBasis::Input => self.expansion * c_in,
            ExpansionBasis::Growth => self.expansion * self.growth,
        }
    }

    pub fn with_attention(self, attention: Option<AttentionSpec>) -> Self {
        BlockConfig { attention, ..self }
    }
}

const DEPTHWISE_KERNEL: usize = 3;

/// 1x1 expand → act → 3x3 depthwise → act → 1x1 squeeze, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedBottleneck {
    pub expand: ConvWeights,
    pub depthwise: ConvWeights,
    pub squeeze: ConvWeights,
    pub activation: Activation,
}

impl InvertedBottleneck {
    pub fn zeros(c_in: usize, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.expanded(c_in);
        Ok(InvertedBottleneck {
            expand: ConvWeights::zeros(1, c_in, e, false)?,
            depthwise: ConvWeights::zeros(DEPTHWISE_KERNEL, e, 1, false)?,
            squeeze: ConvWeights::zeros(1, e, cfg.growth, false)?,
            activation: cfg.activation,
        })
    }

    pub fn random<R: Rng + ?Sized>(c_in: usize, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.expanded(c_in);
        Ok(InvertedBottleneck {
            expand: ConvWeights::he_uniform(1, c_in, e, false, rng)?,
            depthwise: ConvWeights::depthwise_uniform(DEPTHWISE_KERNEL, e, rng)?,
            squeeze: ConvWeights::he_uniform(1, e, cfg.growth, false, rng)?,
            activation: cfg.activation,
        })
    }

    pub fn c_in(&self) -> usize {
        self.expand.c_in()
    }

    pub fn expanded(&self) -> usize {
        self.expand.c_out()
    }

    pub fn c_out(&self) -> usize {
        self.squeeze.c_out()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().c != self.c_in() {
            return Err(Error::shape(format!(
                "bottleneck expects {} input channels, got {}",
                self.c_in(),
                x.shape().c
            )));
        }
        if self.depthwise.c_in() != self.expanded() || self.squeeze.c_in() != self.expanded() {
            return Err(Error::shape("bottleneck weights disagree on the expanded depth"));
        }
        Ok(())
    }
}

pub struct BottleneckCache {
    x: Tensor,
    expanded_pre: Tensor,
    expanded: Tensor,
    summed_pre: Tensor,
    summed: Tensor,
    aac: Option<AugmentedConvCache>,
}

fn same(x: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    conv2d(x, w, 1, Padding::Same)
}

fn dw(x: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    depthwise_conv2d(x, w, 1, Padding::Same)
}

impl Layer for InvertedBottleneck {
    type Cache = BottleneckCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, BottleneckCache)> {
        self.check(x)?;
        let expanded_pre = same(x, &self.expand)?;
        let expanded = self.activation.forward(&expanded_pre);
        let summed_pre = dw(&expanded, &self.depthwise)?;
        let summed = self.activation.forward(&summed_pre);
        let y = same(&summed, &self.squeeze)?;
        Ok((
            y,
            BottleneckCache {
                x: x.clone(),
                expanded_pre,
                expanded,
                summed_pre,
                summed,
                aac: None,
            },
        ))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let h = self.activation.forward(&same(x, &self.expand)?);
        let s = self.activation.forward(&dw(&h, &self.depthwise)?);
        same(&s, &self.squeeze)
    }

    fn backward(&self, c: &BottleneckCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let gs = conv2d_backward(&c.summed, &self.squeeze, 1, Padding::Same, dy)?;
        let dsum = self.activation.backward(&c.summed_pre, &gs.dx)?;
        let gd = depthwise_conv2d_backward(&c.expanded, &self.depthwise, 1, Padding::Same, &dsum)?;
        let dexp = self.activation.backward(&c.expanded_pre, &gd.dx)?;
        let ge = conv2d_backward(&c.x, &self.expand, 1, Padding::Same, &dexp)?;
        Ok((ge.dx, vec![ge.dkernel, gd.dkernel, gs.dkernel]))
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = conv_params("expand", &self.expand);
        v.extend(conv_params("depthwise", &self.depthwise));
        v.extend(conv_params("squeeze", &self.squeeze));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = conv_params_mut(&mut self.expand);
        v.extend(conv_params_mut(&mut self.depthwise));
        v.extend(conv_params_mut(&mut self.squeeze));
        v
    }
}

/// Inverted bottleneck whose depthwise product is summed with an
/// attention-augmented convolution over the same expanded tensor:
///
/// ```text
/// h = act(expand(x))
/// y = squeeze(act(depthwise(h) + AAC(h)))
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct AaInvertedBottleneck {
    pub base: InvertedBottleneck,
    pub aac: AugmentedConv,
}

impl AaInvertedBottleneck {
    pub fn new(base: InvertedBottleneck, aac: AugmentedConv) -> Result<Self> {
        let e = base.expanded();
        if aac.attn.f_in != e || aac.attn.f_out != e {
            return Err(Error::shape(format!(
                "augmented convolution maps {}→{} channels, the depthwise path carries {e}",
                aac.attn.f_in, aac.attn.f_out
            )));
        }
        Ok(AaInvertedBottleneck { base, aac })
    }

    /// `height x width` is the largest grid the relative embeddings cover.
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        cfg: &BlockConfig,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = attention_of(cfg)?;
        let base = InvertedBottleneck::random(c_in, cfg, rng)?;
        let e = base.expanded();
        let aac = AugmentedConv::random(e, e, &spec, height, width, rng)?;
        AaInvertedBottleneck::new(base, aac)
    }

    pub fn zeros(c_in: usize, cfg: &BlockConfig, height: usize, width: usize) -> Result<Self> {
        let spec = attention_of(cfg)?;
        let base = InvertedBottleneck::zeros(c_in, cfg)?;
        let e = base.expanded();
        AaInvertedBottleneck::new(base, AugmentedConv::zeros(e, e, &spec, height, width)?)
    }

    /// Zeroes every parameter of the augmented-convolution branch.
    pub fn zero_attention(&mut self) {
        for t in self.aac.params_mut() {
            t.data_mut().fill(0.0);
        }
    }
}

fn attention_of(cfg: &BlockConfig) -> Result<AttentionSpec> {
    cfg.attention
        .ok_or_else(|| Error::config("attention-augmented layer needs attention settings"))
}

impl Layer for AaInvertedBottleneck {
    type Cache = BottleneckCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, BottleneckCache)> {
        let b = &self.base;
        b.check(x)?;
        let expanded_pre = same(x, &b.expand)?;
        let expanded = b.activation.forward(&expanded_pre);
        let (a, aac) = self.aac.forward(&expanded)?;
        let summed_pre = dw(&expanded, &b.depthwise)?.add(&a)?;
        let summed = b.activation.forward(&summed_pre);
        let y = same(&summed, &b.squeeze)?;
        Ok((
            y,
            BottleneckCache {
                x: x.clone(),
                expanded_pre,
                expanded,
                summed_pre,
                summed,
                aac: Some(aac),
            },
        ))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let b = &self.base;
        b.check(x)?;
        let h = b.activation.forward(&same(x, &b.expand)?);
        let s = dw(&h, &b.depthwise)?.add(&self.aac.infer(&h)?)?;
        same(&b.activation.forward(&s), &b.squeeze)
    }

    fn backward(&self, c: &BottleneckCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let b = &self.base;
        let aac_cache = c
            .aac
            .as_ref()
            .ok_or_else(|| Error::arg("plain bottleneck cache passed to augmented layer"))?;
        let gs = conv2d_backward(&c.summed, &b.squeeze, 1, Padding::Same, dy)?;
        let dsum = b.activation.backward(&c.summed_pre, &gs.dx)?;
        let gd = depthwise_conv2d_backward(&c.expanded, &b.depthwise, 1, Padding::Same, &dsum)?;
        let (dh_aac, g_aac) = self.aac.backward(aac_cache, &dsum)?;
        let dh = gd.dx.add(&dh_aac)?;
        let dexp = b.activation.backward(&c.expanded_pre, &dh)?;
        let ge = conv2d_backward(&c.x, &b.expand, 1, Padding::Same, &dexp)?;
        let mut grads = vec![ge.dkernel, gd.dkernel];
        grads.extend(g_aac);
        grads.push(gs.dkernel);
        Ok((ge.dx, grads))
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = conv_params("expand", &self.base.expand);
        v.extend(conv_params("depthwise", &self.base.depthwise));
        v.extend(prefixed("aac", self.aac.params()));
        v.extend(conv_params("squeeze", &self.base.squeeze));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = conv_params_mut(&mut self.base.expand);
        v.extend(conv_params_mut(&mut self.base.depthwise));
        v.extend(self.aac.params_mut());
        v.extend(conv_params_mut(&mut self.base.squeeze));
        v
    }
}

pub fn inverted_bottleneck(x: &Tensor, weights: &InvertedBottleneck) -> Result<Tensor> {
    weights.infer(x)
}

pub fn aa_inverted_bottleneck(x: &Tensor, weights: &AaInvertedBottleneck) -> Result<Tensor> {
    weights.infer(x)
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum DenseLayer {
    Plain(InvertedBottleneck),
    Augmented(AaInvertedBottleneck),
}

impl DenseLayer {
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        cfg: &BlockConfig,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match cfg.attention {
            Some(_) => DenseLayer::Augmented(AaInvertedBottleneck::random(c_in, cfg, height, width, rng)?),
            None => DenseLayer::Plain(InvertedBottleneck::random(c_in, cfg, rng)?),
        })
    }

    pub fn bottleneck(&self) -> &InvertedBottleneck {
        match self {
            DenseLayer::Plain(b) => b,
            DenseLayer::Augmented(a) => &a.base,
        }
    }

    pub fn augmented(&self) -> Option<&AugmentedConv> {
        match self {
            DenseLayer::Plain(_) => None,
            DenseLayer::Augmented(a) => Some(&a.aac),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DenseLayer::Plain(_) => "inverted bottleneck",
            DenseLayer::Augmented(_) => "AA inverted bottleneck",
        }
    }
}

impl Layer for DenseLayer {
    type Cache = BottleneckCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, BottleneckCache)> {
        match self {
            DenseLayer::Plain(l) => l.forward(x),
            DenseLayer::Augmented(l) => l.forward(x),
        }
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            DenseLayer::Plain(l) => l.infer(x),
            DenseLayer::Augmented(l) => l.infer(x),
        }
    }

    fn backward(&self, c: &BottleneckCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        match self {
            DenseLayer::Plain(l) => l.backward(c, dy),
            DenseLayer::Augmented(l) => l.backward(c, dy),
        }
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            DenseLayer::Plain(l) => l.params(),
            DenseLayer::Augmented(l) => l.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            DenseLayer::Plain(l) => l.params_mut(),
            DenseLayer::Augmented(l) => l.params_mut(),
        }
    }
}

/// Layer `i` reads the concatenation of the block input and the outputs
/// of layers `0..i`; the block returns that running concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
    pub c_in: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        num_layers: usize,
        cfg: &BlockConfig,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::config("a dense block needs at least one layer"));
        }
        let layers = (0..num_layers)
            .map(|i| DenseLayer::random(c_in + i * cfg.growth, cfg, height, width, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DenseBlock {
            layers,
            c_in,
            growth: cfg.growth,
        })
    }

    pub fn from_layers(c_in: usize, layers: Vec<DenseLayer>) -> Result<Self> {
        let growth = layers
            .first()
            .ok_or_else(|| Error::config("a dense block needs at least one layer"))?
            .bottleneck()
            .c_out();
        for (i, l) in layers.iter().enumerate() {
            let b = l.bottleneck();
            if b.c_in() != c_in + i * growth || b.c_out() != growth {
                return Err(Error::shape(format!(
                    "dense layer {i} maps {}→{}, expected {}→{growth}",
                    b.c_in(),
                    b.c_out(),
                    c_in + i * growth
                )));
            }
        }
        Ok(DenseBlock { layers, c_in, growth })
    }

    pub fn c_out(&self) -> usize {
        self.c_in + self.layers.len() * self.growth
    }
}

pub struct DenseBlockCache {
    layers: Vec<BottleneckCache>,
}

impl Layer for DenseBlock {
    type Cache = DenseBlockCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, DenseBlockCache)> {
        let mut features = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, c) = l.forward(&features)?;
            features = concat_channels(&[&features, &y])?;
            caches.push(c);
        }
        Ok((features, DenseBlockCache { layers: caches }))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut features = x.clone();
        for l in &self.layers {
            let y = l.infer(&features)?;
            features = concat_channels(&[&features, &y])?;
        }
        Ok(features)
    }

    fn backward(&self, c: &DenseBlockCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut d = dy.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (i, (l, cache)) in self.layers.iter().zip(&c.layers).enumerate().rev() {
            let width = self.c_in + i * self.growth;
            let mut parts = split_channels(&d, &[width, self.growth])?.into_iter();
            let mut d_prev = parts.next().expect("two parts");
            let d_out = parts.next().expect("two parts");
            let (d_in, grads) = l.backward(cache, &d_out)?;
            d_prev.add_assign(&d_in)?;
            d = d_prev;
            per_layer.push(grads);
        }
        per_layer.reverse();
        Ok((d, per_layer.into_iter().flatten().collect()))
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

pub fn dense_block(x: &Tensor, block: &DenseBlock) -> Result<Tensor> {
    block.infer(x)
}

/// 1x1 channel reduction → stride-2 pooling → batch norm.
#[derive(Debug, Clone)]
pub struct Transition {
    pub conv: ConvWeights,
    pub pool: Downsample,
    pub bn: BatchNorm,
}

impl Transition {
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        pooling: Pooling,
        blur_n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Transition {
            conv: ConvWeights::he_uniform(1, c_in, c_out, false, rng)?,
            pool: Downsample::new(pooling, blur_n)?,
            bn: BatchNorm::new(c_out)?,
        })
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out()
    }

    /// Folds the batch statistics of a training forward into the running stats.
    pub fn commit(&mut self, cache: &TransitionCache) {
        self.bn.commit(&cache.bn);
    }
}

pub struct TransitionCache {
    x: Tensor,
    pool: DownsampleCache,
    bn: BatchNormCache,
}

impl Layer for Transition {
    type Cache = TransitionCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, TransitionCache)> {
        let c = same(x, &self.conv)?;
        let (p, pool) = self.pool.forward(&c)?;
        let (y, bn) = self.bn.forward(&p)?;
        Ok((
            y,
            TransitionCache {
                x: x.clone(),
                pool,
                bn,
            },
        ))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.bn.infer(&self.pool.infer(&same(x, &self.conv)?)?)
    }

    fn backward(&self, c: &TransitionCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (dp, mut bn_grads) = self.bn.backward(&c.bn, dy)?;
        let (dc, _) = self.pool.backward(&c.pool, &dp)?;
        let (dx, mut grads) = conv2d_backward(&c.x, &self.conv, 1, Padding::Same, &dc)?.param_grads();
        grads.append(&mut bn_grads);
        Ok((dx, grads))
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = conv_params("conv", &self.conv);
        v.extend(prefixed("bn", self.bn.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = conv_params_mut(&mut self.conv);
        v.extend(self.bn.params_mut());
        v
    }
}

pub fn transition_layer(x: &Tensor, t: &Transition) -> Result<Tensor> {
    t.infer(x)
}

/// Mean over all spatial positions: `NxHxWxC → Nx1x1xC`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let mut y = Tensor::zeros(Shape::new(s.n, 1, 1, s.c)?);
    let inv = 1.0 / (s.h * s.w) as Float;
    for n in 0..s.n {
        let out = y.pixel_mut(n, 0, 0);
        for h in 0..s.h {
            for w in 0..s.w {
                for (o, v) in out.iter_mut().zip(x.pixel(n, h, w)) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(y)
}

pub fn global_avg_pool_backward(input: Shape, dy: &Tensor) -> Result<Tensor> {
    dy.expect_shape(Shape::new(input.n, 1, 1, input.c)?, "pooled gradient")?;
    let mut dx = Tensor::zeros(input);
    let inv = 1.0 / (input.h * input.w) as Float;
    for n in 0..input.n {
        let g: Vec<Float> = dy.pixel(n, 0, 0).iter().map(|v| v * inv).collect();
        for h in 0..input.h {
            for w in 0..input.w {
                dx.pixel_mut(n, h, w).copy_from_slice(&g);
            }
        }
    }
    Ok(dx)
}

pub const KEYPOINTS: usize = 21;
pub const HEAD_OUTPUTS: usize = 2 * KEYPOINTS;

/// Average pool over the remaining map, then a 1x1 convolution with bias
/// to 42 values: normalized `(x, y)` for each keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub conv: ConvWeights,
}

impl Head {
    /// Weights `U(±1/sqrt(C))`; biases start at the image centre.
    pub fn random<R: Rng + ?Sized>(c_in: usize, rng: &mut R) -> Result<Self> {
        let mut conv = ConvWeights::zeros(1, c_in, HEAD_OUTPUTS, true)?;
        conv.kernel = Tensor::uniform(conv.kernel.shape(), 1.0 / (c_in as Float).sqrt(), rng);
        if let Some(b) = conv.bias.as_mut() {
            b.data_mut().fill(0.5);
        }
        Ok(Head { conv })
    }
}

pub struct HeadCache {
    input: Shape,
    pooled: Tensor,
}

impl Layer for Head {
    type Cache = HeadCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, HeadCache)> {
        let pooled = global_avg_pool(x)?;
        let y = same(&pooled, &self.conv)?;
        Ok((
            y,
            HeadCache {
                input: x.shape(),
                pooled,
            },
        ))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        same(&global_avg_pool(x)?, &self.conv)
    }

    fn backward(&self, c: &HeadCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (dp, grads) = conv2d_backward(&c.pooled, &self.conv, 1, Padding::Same, dy)?.param_grads();
        Ok((global_avg_pool_backward(c.input, &dp)?, grads))
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        conv_params("conv", &self.conv)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        conv_params_mut(&mut self.conv)
    }
}
