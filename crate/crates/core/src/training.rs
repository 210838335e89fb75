//! SGD with a triangular cyclical learning rate, coordinate losses, and
//! the desk-scale training loop on synthetic hands.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::blocks::HEAD_OUTPUTS;
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::metrics::{epe, EvalRecord, KeypointSet, Sample};
use crate::network::{build_network, Network};
use crate::persist::save_weights;
use crate::synth::synth_dataset;
use crate::tensor::{Float, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Half-period, in epochs.
    pub stepsize: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            lr_min: 1e-4,
            lr_max: 1e-1,
            stepsize: 6.0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::config(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.stepsize > 0.0 && self.stepsize.is_finite()) {
            return Err(Error::config(format!("stepsize must be positive, got {}", self.stepsize)));
        }
        Ok(())
    }
}

/// Triangular cyclical learning rate at time `t` (epochs, fractional).
///
/// Equal to `lr_min + (lr_max - lr_min) max(0, 1 - |t/s - 2c + 1|)` with
/// `c = floor(1 + t/2s)`, evaluated on `t mod 2s` so that whole periods
/// shift the result by nothing.
pub fn cyclical_lr(t: f64, s: &LrSchedule) -> f64 {
    let phase = t.rem_euclid(2.0 * s.stepsize);
    let x = (phase / s.stepsize - 1.0).abs();
    let a = (1.0 - x).max(0.0);
    // Convex form so the endpoints come out exactly.
    (s.lr_min * (1.0 - a) + s.lr_max * a).clamp(s.lr_min, s.lr_max)
}

/// Plain or momentum SGD over a layer's parameters.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `w -= lr * g`, or with momentum `v = mu v + g; w -= lr * v`.
    pub fn step<L: Layer + ?Sized>(&mut self, layer: &mut L, grads: &[Tensor], lr: f64) -> Result<()> {
        let names: Vec<String> = layer.params().into_iter().map(|(n, _)| n).collect();
        if names.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                names.len()
            )));
        }
        for (g, name) in grads.iter().zip(&names) {
            if let Some(index) = g.first_non_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of {name}"),
                    index,
                });
            }
        }
        let lr = lr as Float;
        let params = layer.params_mut();
        if self.momentum == 0.0 {
            for (p, g) in params.into_iter().zip(grads) {
                if p.shape() != g.shape() {
                    return Err(Error::shape(format!("gradient {} for parameter {}", g.shape(), p.shape())));
                }
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
            return Ok(());
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        let mu = self.momentum as Float;
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::shape(format!("gradient {} for parameter {}", g.shape(), p.shape())));
            }
            for ((w, d), m) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *m = mu * *m + d;
                *w -= lr * *m;
            }
        }
        Ok(())
    }
}

/// One momentum-free SGD step.
pub fn sgd_step<L: Layer + ?Sized>(layer: &mut L, grads: &[Tensor], lr: f64) -> Result<()> {
    Sgd::new(0.0).step(layer, grads, lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    #[default]
    Mse,
    Mae,
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: what.into(),
            index,
        }),
        None => Ok(()),
    }
}

/// Mean squared (or absolute) error over all 42 normalized coordinates.
pub fn coordinate_loss(pred: &KeypointSet, gt: &KeypointSet, kind: Loss) -> Result<f64> {
    let (p, g) = (pred.flat(), gt.flat());
    check_finite(&p, "prediction")?;
    check_finite(&g, "ground truth")?;
    let n = p.len() as f64;
    Ok(match kind {
        Loss::Mse => p.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
        Loss::Mae => p.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
    })
}

/// Batch loss over `Nx1x1x42` tensors and its gradient w.r.t. `pred`.
pub fn loss_and_grad(pred: &Tensor, target: &Tensor, kind: Loss) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("prediction {} vs target {}", pred.shape(), target.shape())));
    }
    if let Some(index) = pred.first_non_finite() {
        return Err(Error::NonFinite {
            context: "prediction".into(),
            index,
        });
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = (p - t) as f64;
        match kind {
            Loss::Mse => {
                loss += d * d;
                *g = (2.0 * d / n) as Float;
            }
            Loss::Mae => {
                loss += d.abs();
                *g = (d.signum() * (d != 0.0) as u8 as f64 / n) as Float;
            }
        }
    }
    Ok((loss / n, grad))
}

/// Normalized `1x1x1x42` regression target for `k` in a `width x height` frame.
pub fn normalized_target(k: &KeypointSet, width: usize, height: usize) -> Result<Tensor> {
    let v: Vec<Float> = k
        .scaled(1.0 / width as f64, 1.0 / height as f64)
        .flat()
        .into_iter()
        .map(|x| x as Float)
        .collect();
    Tensor::from_vec(Shape::new(1, 1, 1, HEAD_OUTPUTS)?, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub images: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Overrides the schedule with a constant rate.
    pub fixed_lr: Option<f64>,
    pub momentum: f64,
    pub loss: Loss,
    pub seed: u64,
    /// Evaluate train EPE every this many epochs (and after the last).
    pub eval_every: usize,
    pub checkpoint_every: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            images: 1,
            epochs: 200,
            batch_size: 8,
            schedule: LrSchedule::default(),
            fixed_lr: None,
            momentum: 0.0,
            loss: Loss::Mse,
            seed: 42,
            eval_every: 1,
            checkpoint_every: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate used by the epoch's first batch.
    pub lr: f64,
    pub loss: f64,
    pub train_epe: Option<f64>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,loss,train_epe\n");
    for e in log {
        let epe = e.train_epe.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.lr, e.loss, epe);
    }
    s
}

pub struct TrainOutcome {
    pub network: Network,
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    pub data: Vec<Sample>,
}

impl TrainOutcome {
    pub fn final_epe(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|e| e.train_epe)
    }
}

fn batch_tensors(samples: &[Sample], width: usize, height: usize) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let targets = samples
        .iter()
        .map(|s| normalized_target(&s.keypoints, width, height))
        .collect::<Result<Vec<_>>>()?;
    let target_refs: Vec<&Tensor> = targets.iter().collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&target_refs)?))
}

/// Mean EPE in pixels, inference mode.
pub fn evaluate_epe(net: &Network, data: &[Sample], batch_size: usize) -> Result<f64> {
    let mut records = Vec::with_capacity(data.len());
    for (b, chunk) in data.chunks(batch_size.max(1)).enumerate() {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let preds = net.forward_keypoints(&Tensor::stack(&images)?)?;
        for (i, (p, s)) in preds.into_iter().zip(chunk).enumerate() {
            records.push(EvalRecord::new(format!("{}", b * batch_size + i), p, s.keypoints.clone()));
        }
    }
    Ok(epe(&records)?.0)
}

/// Trains a freshly built network on `data` in fixed order.
pub fn train(cfg: &NetworkConfig, data: Vec<Sample>, opts: &TrainOptions) -> Result<TrainOutcome> {
    opts.schedule.validate()?;
    if opts.batch_size == 0 || data.is_empty() {
        return Err(Error::config("need a positive batch size and at least one image"));
    }
    let mut net = build_network(cfg, opts.seed)?;
    let (w, h) = (cfg.input_width, cfg.input_height);
    let batches = data
        .chunks(opts.batch_size)
        .map(|c| batch_tensors(c, w, h))
        .collect::<Result<Vec<_>>>()?;
    let mut sgd = Sgd::new(opts.momentum);
    let mut state = TrainState {
        step: 0,
        epoch: 0,
        loss: f64::NAN,
        seed: opts.seed,
    };
    let mut log = Vec::with_capacity(opts.epochs);
    let nb = batches.len() as f64;
    for epoch in 0..opts.epochs {
        let mut total = 0.0;
        let mut first_lr = None;
        for (b, (x, y)) in batches.iter().enumerate() {
            let lr = opts
                .fixed_lr
                .unwrap_or_else(|| cyclical_lr(epoch as f64 + b as f64 / nb, &opts.schedule));
            first_lr.get_or_insert(lr);
            let (pred, cache) = net.forward(x)?;
            let (loss, dpred) = loss_and_grad(&pred, y, opts.loss).map_err(|e| Error::Diverged {
                epoch,
                detail: format!("batch {b}: {e}"),
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch {b}: loss is {loss}"),
                });
            }
            let (_, grads) = net.backward(&cache, &dpred)?;
            sgd.step(&mut net, &grads, lr).map_err(|e| Error::Diverged {
                epoch,
                detail: format!("batch {b}: {e}"),
            })?;
            net.commit(&cache);
            total += loss * x.shape().n as f64;
            state.step += 1;
        }
        state.epoch = epoch + 1;
        state.loss = total / data.len() as f64;
        let last = epoch + 1 == opts.epochs;
        let train_epe = if last || (opts.eval_every > 0 && (epoch + 1) % opts.eval_every == 0) {
            Some(evaluate_epe(&net, &data, opts.batch_size)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            lr: first_lr.unwrap_or(0.0),
            loss: state.loss,
            train_epe,
        };
        log::info!(
            "epoch {} lr {:.5} loss {:.6e}{}",
            entry.epoch,
            entry.lr,
            entry.loss,
            entry.train_epe.map(|e| format!(" train EPE {e:.3} px")).unwrap_or_default()
        );
        log.push(entry);
        if let (Some(every), Some(dir)) = (opts.checkpoint_every, &opts.out_dir) {
            if every > 0 && (epoch + 1) % every == 0 {
                save_weights(&net, &dir.join(format!("checkpoint_epoch{:04}.bin", epoch + 1)))?;
            }
        }
    }
    Ok(TrainOutcome {
        network: net,
        state,
        log,
        data,
    })
}

/// Synthesizes `opts.images` hands at the config's input size and trains.
pub fn train_toy(cfg: &NetworkConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    if cfg.input_height != cfg.input_width {
        return Err(Error::config("synthetic hands are square; use equal input height and width"));
    }
    if cfg.input_channels != 3 {
        return Err(Error::config("synthetic hands have 3 channels"));
    }
    let data = synth_dataset(opts.seed, opts.images, cfg.input_width)?;
    train(cfg, data, opts)
}
