//! The assembled keypoint regressor: dense blocks separated by
//! transitions, an optional single-layer bottleneck block, and the head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{DenseBlock, DenseBlockCache, Head, HeadCache, Transition, TransitionCache, KEYPOINTS};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::layer::{prefixed, Layer};
use crate::metrics::{KeypointPredictor, KeypointSet};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone)]
pub struct Stage {
    pub block: DenseBlock,
    pub transition: Option<Transition>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub stages: Vec<Stage>,
    /// Single-layer block run at the last stage's resolution.
    pub final_block: Option<DenseBlock>,
    pub head: Head,
}

/// Builds the network for `cfg` with weights drawn from `seed`.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = cfg.stage_sizes();
    let mut stages = Vec::with_capacity(cfg.blocks.len());
    let mut c = cfg.input_channels;
    for (i, (&layers, &(h, w))) in cfg.blocks.iter().zip(&sizes).enumerate() {
        let attention = cfg.block_uses_attention(i);
        warn_budget(cfg, attention, h, w, &format!("dense block {}", i + 1));
        let block = DenseBlock::random(c, layers, &cfg.block_config(attention), h, w, &mut rng)?;
        c = block.c_out();
        let transition = match cfg.transitions.get(i) {
            Some(&t) => {
                let tr = Transition::random(c, t, cfg.pooling, cfg.blur_n, &mut rng)?;
                c = t;
                Some(tr)
            }
            None => None,
        };
        stages.push(Stage {
            block,
            transition,
            height: h,
            width: w,
        });
    }
    let (h, w) = *sizes.last().expect("validated non-empty");
    let final_block = if cfg.final_bottleneck {
        warn_budget(cfg, cfg.attention, h, w, "final bottleneck");
        let b = DenseBlock::random(c, 1, &cfg.block_config(cfg.attention), h, w, &mut rng)?;
        c = b.c_out();
        Some(b)
    } else {
        None
    };
    let head = Head::random(c, &mut rng)?;
    Ok(Network {
        config: cfg.clone(),
        stages,
        final_block,
        head,
    })
}

fn warn_budget(cfg: &NetworkConfig, attention: bool, h: usize, w: usize, what: &str) {
    if attention && h * w > cfg.attention_hw_budget {
        log::warn!(
            "{what}: attention over {h}x{w} = {} positions exceeds the budget of {}; cost and memory grow with (HW)^2",
            h * w,
            cfg.attention_hw_budget
        );
    }
}

pub struct NetworkCache {
    stages: Vec<(DenseBlockCache, Option<TransitionCache>)>,
    final_block: Option<DenseBlockCache>,
    head: HeadCache,
}

impl Network {
    pub fn input_shape(&self, batch: usize) -> Result<Shape> {
        let c = &self.config;
        Shape::new(batch, c.input_height, c.input_width, c.input_channels)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let want = self.input_shape(s.n)?;
        if s != want {
            return Err(Error::shape(format!("network expects {want}, got {s}")));
        }
        Ok(())
    }

    /// Side lengths after every stage, ending with the pooled head input.
    pub fn spatial_trace(&self) -> Vec<usize> {
        self.config.spatial_trace()
    }

    /// Folds the batch statistics of a training pass into the running stats.
    pub fn commit(&mut self, cache: &NetworkCache) {
        for (stage, (_, tc)) in self.stages.iter_mut().zip(&cache.stages) {
            if let (Some(t), Some(tc)) = (stage.transition.as_mut(), tc) {
                t.commit(tc);
            }
        }
    }

    /// Normalized outputs in `[0, 1]` image fractions, `Nx1x1x42`.
    pub fn normalized(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x)
    }

    /// Converts `Nx1x1x42` normalized outputs to pixel keypoints.
    pub fn to_keypoints(&self, out: &Tensor) -> Result<Vec<KeypointSet>> {
        let s = out.shape();
        if (s.h, s.w, s.c) != (1, 1, 2 * KEYPOINTS) {
            return Err(Error::shape(format!("head output {s} is not Nx1x1x42")));
        }
        let (sx, sy) = (self.config.input_width as f64, self.config.input_height as f64);
        (0..s.n)
            .map(|n| {
                let v: Vec<f64> = out.pixel(n, 0, 0).iter().map(|&v| v as f64).collect();
                Ok(KeypointSet::from_flat(&v)?.scaled(sx, sy))
            })
            .collect()
    }

    /// Pixel keypoints for every batch item.
    pub fn forward_keypoints(&self, x: &Tensor) -> Result<Vec<KeypointSet>> {
        let out = self.infer(x)?;
        self.to_keypoints(&out)
    }

    /// BN running statistics as named `1x1x1xC` tensors.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            if let Some(t) = &s.transition {
                let r = &t.bn.running;
                let base = format!("stage{i}.transition.bn");
                v.push((format!("{base}.running_mean"), Tensor::vector(r.mean.clone()).expect("non-empty")));
                v.push((format!("{base}.running_var"), Tensor::vector(r.var.clone()).expect("non-empty")));
            }
        }
        v
    }

    pub fn set_buffer(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let rest = name
            .strip_prefix("stage")
            .ok_or_else(|| Error::Format(format!("unknown buffer `{name}`")))?;
        let (idx, field) = rest
            .split_once(".transition.bn.")
            .ok_or_else(|| Error::Format(format!("unknown buffer `{name}`")))?;
        let i: usize = idx.parse().map_err(|_| Error::Format(format!("unknown buffer `{name}`")))?;
        let t = self
            .stages
            .get_mut(i)
            .and_then(|s| s.transition.as_mut())
            .ok_or_else(|| Error::Format(format!("no transition for buffer `{name}`")))?;
        let target = match field {
            "running_mean" => &mut t.bn.running.mean,
            "running_var" => &mut t.bn.running.var,
            _ => return Err(Error::Format(format!("unknown buffer `{name}`"))),
        };
        if target.len() != value.len() {
            return Err(Error::Format(format!(
                "buffer `{name}` has {} values, expected {}",
                value.len(),
                target.len()
            )));
        }
        target.copy_from_slice(value.data());
        Ok(())
    }

    pub fn attention_layers(&self) -> usize {
        self.stages
            .iter()
            .map(|s| &s.block)
            .chain(self.final_block.as_ref())
            .flat_map(|b| &b.layers)
            .filter(|l| l.augmented().is_some())
            .count()
    }
}

impl Layer for Network {
    type Cache = NetworkCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, NetworkCache)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let (y, bc) = s.block.forward(&h)?;
            h = y;
            let tc = match &s.transition {
                Some(t) => {
                    let (y, tc) = t.forward(&h)?;
                    h = y;
                    Some(tc)
                }
                None => None,
            };
            stages.push((bc, tc));
        }
        let final_block = match &self.final_block {
            Some(b) => {
                let (y, c) = b.forward(&h)?;
                h = y;
                Some(c)
            }
            None => None,
        };
        let (y, head) = self.head.forward(&h)?;
        Ok((
            y,
            NetworkCache {
                stages,
                final_block,
                head,
            },
        ))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for s in &self.stages {
            h = s.block.infer(&h)?;
            if let Some(t) = &s.transition {
                h = t.infer(&h)?;
            }
        }
        if let Some(b) = &self.final_block {
            h = b.infer(&h)?;
        }
        self.head.infer(&h)
    }

    fn backward(&self, c: &NetworkCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (mut d, head_grads) = self.head.backward(&c.head, dy)?;
        let mut chunks: Vec<Vec<Tensor>> = vec![head_grads];
        if let (Some(b), Some(bc)) = (&self.final_block, &c.final_block) {
            let (dx, g) = b.backward(bc, &d)?;
            d = dx;
            chunks.push(g);
        }
        for (s, (bc, tc)) in self.stages.iter().zip(&c.stages).rev() {
            if let (Some(t), Some(tc)) = (&s.transition, tc) {
                let (dx, g) = t.backward(tc, &d)?;
                d = dx;
                chunks.push(g);
            }
            let (dx, g) = s.block.backward(bc, &d)?;
            d = dx;
            chunks.push(g);
        }
        chunks.reverse();
        Ok((d, chunks.into_iter().flatten().collect()))
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            v.extend(prefixed(&format!("stage{i}.block"), s.block.params()));
            if let Some(t) = &s.transition {
                v.extend(prefixed(&format!("stage{i}.transition"), t.params()));
            }
        }
        if let Some(b) = &self.final_block {
            v.extend(prefixed("final", b.params()));
        }
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for s in &mut self.stages {
            v.extend(s.block.params_mut());
            if let Some(t) = s.transition.as_mut() {
                v.extend(t.params_mut());
            }
        }
        if let Some(b) = self.final_block.as_mut() {
            v.extend(b.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

impl KeypointPredictor for Network {
    fn predict(&self, images: &Tensor) -> Result<Vec<KeypointSet>> {
        self.forward_keypoints(images)
    }
}

/// Free-function form of [`Network::forward_keypoints`].
pub fn forward(net: &Network, x: &Tensor) -> Result<Vec<KeypointSet>> {
    net.forward_keypoints(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::DenseLayer;

    fn micro() -> NetworkConfig {
        NetworkConfig {
            input_height: 16,
            input_width: 16,
            blocks: vec![1, 1],
            transitions: vec![8],
            growth: 4,
            expansion: 2,
            heads: 2,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn tiny_builds_and_predicts() {
        let net = build_network(&NetworkConfig::tiny(), 1).unwrap();
        let x = Tensor::full(net.input_shape(2).unwrap(), 0.3);
        let kps = net.forward_keypoints(&x).unwrap();
        assert_eq!(kps.len(), 2);
        assert_eq!(kps[0].points().len(), 21);
        assert_eq!(kps[0], kps[1]);
        assert_eq!(net.spatial_trace(), vec![32, 16, 8, 1]);
        assert!(matches!(net.stages[2].block.layers[0], DenseLayer::Augmented(_)));
        assert!(matches!(net.stages[1].block.layers[0], DenseLayer::Plain(_)));
    }

    #[test]
    fn seeds_control_weights_not_shapes() {
        let a = build_network(&NetworkConfig::tiny(), 5).unwrap();
        let b = build_network(&NetworkConfig::tiny(), 5).unwrap();
        let c = build_network(&NetworkConfig::tiny(), 6).unwrap();
        let pa: Vec<_> = a.params().into_iter().map(|(_, t)| t.clone()).collect();
        let pb: Vec<_> = b.params().into_iter().map(|(_, t)| t.clone()).collect();
        let pc: Vec<_> = c.params().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(pa, pb);
        assert_ne!(pa, pc);
        assert_eq!(a.num_params(), c.num_params());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = build_network(&micro(), 0).unwrap();
        assert!(net.infer(&Tensor::zeros(Shape::new(1, 8, 16, 3).unwrap())).is_err());
    }

    #[test]
    fn buffers_round_trip() {
        let mut net = build_network(&micro(), 0).unwrap();
        let bufs = net.buffers();
        assert_eq!(bufs.len(), 2);
        let doubled = bufs[1].1.scale(2.0);
        net.set_buffer(&bufs[1].0, &doubled).unwrap();
        assert_eq!(net.buffers()[1].1, doubled);
        assert!(net.set_buffer("stage9.transition.bn.running_var", &doubled).is_err());
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn end_to_end_gradients() {
        use crate::gradcheck::grad_check;
        use rand::SeedableRng;
        let mut net = build_network(&micro(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::normal(net.input_shape(2).unwrap(), 1.0, &mut rng);
        let r = grad_check(&mut net, &x, 1e-4, 7).unwrap();
        assert!(r.passed, "{r}");
    }
}
