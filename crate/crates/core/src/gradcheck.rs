//! Central finite-difference verification of backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::tensor::{Float, Tensor, PRECISION_BITS};

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Index into the concatenation `[input elements, param 0, param 1, ...]`.
    pub worst_parameter_index: usize,
    /// Human-readable location of the worst element.
    pub worst_label: String,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} (tol {:.0e}) at {} over {} elements",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_relative_error,
            self.tolerance,
            self.worst_label,
            self.checked
        )
    }
}

fn step(x: Float) -> Float {
    Float::EPSILON.cbrt() * x.abs().max(1.0)
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR)
}

struct Worst {
    err: f64,
    index: usize,
    label: String,
}

impl Worst {
    fn offer(&mut self, err: f64, index: usize, label: impl FnOnce() -> String) {
        if err > self.err || self.index == usize::MAX {
            self.err = err;
            self.index = index;
            self.label = label();
        }
    }
}

/// Checks every input element and every parameter of `layer`.
///
/// The scalar objective is `sum(R ⊙ layer(x))` for a seeded Gaussian `R`,
/// so every output element contributes. The layer is perturbed in place and
/// restored before returning.
pub fn grad_check<L: Layer>(layer: &mut L, x: &Tensor, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    if PRECISION_BITS != 64 {
        return Err(Error::arg("gradient checks require a 64-bit build"));
    }
    let (y, cache) = layer.forward(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = Tensor::normal(y.shape(), 1.0, &mut rng);
    let (dx, dparams) = layer.backward(&cache, &probe)?;
    drop(cache);

    if let Some(i) = dx.first_non_finite() {
        return Err(Error::NonFinite {
            context: "input gradient".into(),
            index: i,
        });
    }
    let mut offset = x.len();
    for (g, (name, _)) in dparams.iter().zip(layer.params()) {
        if let Some(i) = g.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
                index: offset + i,
            });
        }
        offset += g.len();
    }

    let objective = |layer: &L, x: &Tensor| -> Result<f64> {
        let (y, _) = layer.forward(x)?;
        Ok(y.dot(&probe)? as f64)
    };

    let mut worst = Worst {
        err: 0.0,
        index: usize::MAX,
        label: String::new(),
    };
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        let h = step(orig);
        xp.data_mut()[i] = orig + h;
        let up = objective(layer, &xp)?;
        xp.data_mut()[i] = orig - h;
        let down = objective(layer, &xp)?;
        xp.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h as f64);
        worst.offer(relative_error(dx.data()[i] as f64, numeric), i, || format!("input[{i}]"));
    }

    let names: Vec<String> = layer.params().into_iter().map(|(n, _)| n).collect();
    let mut base = x.len();
    for (p, grad) in dparams.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = layer.params_mut()[p].data()[i];
            let h = step(orig);
            layer.params_mut()[p].data_mut()[i] = orig + h;
            let up = objective(layer, x)?;
            layer.params_mut()[p].data_mut()[i] = orig - h;
            let down = objective(layer, x)?;
            layer.params_mut()[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h as f64);
            worst.offer(relative_error(grad.data()[i] as f64, numeric), base + i, || {
                format!("{}[{i}]", names[p])
            });
        }
        base += grad.len();
    }

    Ok(GradCheckReport {
        max_relative_error: worst.err,
        worst_parameter_index: worst.index,
        worst_label: worst.label,
        checked: base,
        tolerance,
        passed: worst.err < tolerance,
    })
}

/// Block-level tolerance.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
/// End-to-end tolerance.
pub const NETWORK_TOLERANCE: f64 = 1e-4;

/// Named check result.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Gradient checks of every block type at toy shapes, plus (optionally) a
/// truncated 16x16 end-to-end network. Deterministic in `seed`.
pub fn block_suite(seed: u64, include_network: bool) -> Result<Vec<SuiteEntry>> {
    use crate::attention::AttentionSpec;
    use crate::blocks::{AaInvertedBottleneck, BlockConfig, DenseBlock, Head, InvertedBottleneck, Transition};
    use crate::blurpool::Pooling;
    use crate::config::NetworkConfig;
    use crate::network::build_network;
    use crate::tensor::Shape;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(SuiteEntry {
            name: name.to_string(),
            report,
        })
    };
    let plain = BlockConfig {
        growth: 4,
        expansion: 2,
        ..BlockConfig::default()
    };
    let attn = plain.with_attention(Some(AttentionSpec {
        heads: 2,
        ..AttentionSpec::default()
    }));
    let x = Tensor::normal(Shape::new(1, 4, 4, 6)?, 1.0, &mut rng);

    let mut ib = InvertedBottleneck::random(6, &plain, &mut rng)?;
    push("inverted_bottleneck", grad_check(&mut ib, &x, BLOCK_TOLERANCE, seed)?);
    let mut aa = AaInvertedBottleneck::random(6, &attn, 4, 4, &mut rng)?;
    push("aa_inverted_bottleneck", grad_check(&mut aa, &x, BLOCK_TOLERANCE, seed)?);

    let x2 = Tensor::normal(Shape::new(2, 4, 4, 3)?, 1.0, &mut rng);
    let mut blk = DenseBlock::random(3, 2, &attn, 4, 4, &mut rng)?;
    push("dense_block", grad_check(&mut blk, &x2, BLOCK_TOLERANCE, seed)?);

    for pooling in [Pooling::Blur, Pooling::Average, Pooling::Max] {
        let x3 = Tensor::normal(Shape::new(2, 5, 6, 3)?, 1.0, &mut rng);
        let mut t = Transition::random(3, 4, pooling, 2, &mut rng)?;
        push(
            &format!("transition_{}", pooling.name()),
            grad_check(&mut t, &x3, BLOCK_TOLERANCE, seed)?,
        );
    }

    let x4 = Tensor::normal(Shape::new(2, 3, 3, 5)?, 1.0, &mut rng);
    let mut head = Head::random(5, &mut rng)?;
    push("head", grad_check(&mut head, &x4, BLOCK_TOLERANCE, seed)?);

    if include_network {
        let cfg = NetworkConfig {
            input_height: 16,
            input_width: 16,
            blocks: vec![1, 1],
            transitions: vec![8],
            growth: 4,
            expansion: 2,
            heads: 2,
            ..NetworkConfig::tiny()
        };
        let mut net = build_network(&cfg, seed)?;
        let x5 = Tensor::normal(net.input_shape(2)?, 1.0, &mut rng);
        push("network", grad_check(&mut net, &x5, NETWORK_TOLERANCE, seed)?);
    }
    Ok(out)
}
