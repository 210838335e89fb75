//! Itemized parameter and multiply-accumulate accounting.
//!
//! MACs count convolution and matrix-product multiplies, one per pooling
//! tap, and one per element for batch-norm scaling. Activations, softmax
//! and additions are not counted. FLOPs are `2 x MACs`.

use std::fmt::Write as _;

use crate::blocks::{DenseBlock, DenseLayer, Head, Transition, HEAD_OUTPUTS};
use crate::blurpool::Pooling;
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::network::Network;
use crate::ops::conv::separable_reduction_factor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    /// Row of the architecture table this item belongs to.
    pub group: String,
    pub name: String,
    /// `[h, w, c]`
    pub output: [usize; 3],
    pub params: usize,
    pub macs: u64,
}

impl LayerCost {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

/// Cost reduction of a depthwise-separable layer against a full
/// convolution, `kf^2 d_o / (k^2 + d_o)`, under both readings of `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableFactor {
    pub layer: String,
    pub kf: usize,
    pub d_o: usize,
    /// `k` read as the kernel size `kf`.
    pub by_kernel: f64,
    /// `k` read as the growth rate.
    pub by_growth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub separable: Vec<SeparableFactor>,
}

impl CostReport {
    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    /// Items summed per group, in first-appearance order; the output is
    /// that of the group's last item.
    pub fn grouped(&self) -> Vec<LayerCost> {
        let mut out: Vec<LayerCost> = Vec::new();
        for l in &self.layers {
            match out.last_mut() {
                Some(g) if g.group == l.group => {
                    g.params += l.params;
                    g.macs += l.macs;
                    g.output = l.output;
                }
                _ => out.push(LayerCost {
                    group: l.group.clone(),
                    name: l.group.clone(),
                    ..l.clone()
                }),
            }
        }
        out
    }

    /// Architecture table: one row per group (or per item with `detailed`),
    /// then a totals line equal to the column sums.
    pub fn table(&self, detailed: bool) -> String {
        let rows = if detailed { self.layers.clone() } else { self.grouped() };
        let mut s = String::new();
        let _ = writeln!(s, "{:<40} {:>16} {:>12} {:>16}", "layer", "output", "params", "FLOPs");
        for r in &rows {
            let out = format!("{}x{}x{}", r.output[0], r.output[1], r.output[2]);
            let _ = writeln!(s, "{:<40} {:>16} {:>12} {:>16}", r.name, out, r.params, r.flops());
        }
        let _ = writeln!(
            s,
            "{:<40} {:>16} {:>12} {:>16}",
            "total",
            "",
            rows.iter().map(|r| r.params).sum::<usize>(),
            rows.iter().map(|r| r.flops()).sum::<u64>()
        );
        s
    }
}

struct Builder {
    report: CostReport,
    growth: usize,
}

impl Builder {
    fn push(&mut self, group: &str, name: String, output: [usize; 3], params: usize, macs: u64) {
        self.report.layers.push(LayerCost {
            group: group.to_string(),
            name,
            output,
            params,
            macs,
        });
    }

    fn dense_block(&mut self, group: &str, block: &DenseBlock, h: usize, w: usize) {
        let hw = (h * w) as u64;
        for (i, layer) in block.layers.iter().enumerate() {
            let b = layer.bottleneck();
            let (c_in, e, k) = (b.c_in() as u64, b.expanded() as u64, b.c_out() as u64);
            let kk = (b.depthwise.ksize().0 * b.depthwise.ksize().1) as u64;
            let mut macs = hw * (c_in * e + kk * e + e * k);
            if let DenseLayer::Augmented(a) = layer {
                macs += aac_macs(a.aac.conv_channels() as u64, &a.aac.attn, kk, h, w);
            }
            let name = format!("{group} / layer {} ({})", i + 1, layer.kind());
            self.push(group, name.clone(), [h, w, b.c_in() + b.c_out()], layer.num_params(), macs);
            let kf = b.depthwise.ksize().0;
            self.report.separable.push(SeparableFactor {
                layer: name,
                kf,
                d_o: e as usize,
                by_kernel: separable_reduction_factor(kf, e as usize, kf),
                by_growth: separable_reduction_factor(kf, e as usize, self.growth),
            });
        }
    }

    fn transition(&mut self, group: &str, t: &Transition, h: usize, w: usize) -> Result<(usize, usize)> {
        let (c_in, c_out) = (t.conv.c_in() as u64, t.conv.c_out() as u64);
        let out = t.pool.output_shape(crate::tensor::Shape::new(1, h, w, t.c_out())?)?;
        let ohw = (out.h * out.w) as u64;
        let taps = match t.pool.pooling {
            Pooling::Max => 0,
            _ => (t.pool.window() * t.pool.window()) as u64,
        };
        let params = t.num_params();
        let macs = (h * w) as u64 * c_in * c_out + ohw * taps * c_out + ohw * c_out;
        self.push(group, group.to_string(), [out.h, out.w, t.c_out()], params, macs);
        Ok((out.h, out.w))
    }

    fn head(&mut self, head: &Head, h: usize, w: usize) {
        let c = head.conv.c_in();
        self.push(
            "Average Pool",
            "Average Pool (global)".into(),
            [1, 1, c],
            0,
            (h * w * c) as u64,
        );
        self.push(
            "Head",
            format!("1x1 conv x {HEAD_OUTPUTS}"),
            [1, 1, HEAD_OUTPUTS],
            head.num_params(),
            (c * HEAD_OUTPUTS) as u64,
        );
    }
}

fn aac_macs(conv_out: u64, p: &crate::attention::AttentionParams, kk: u64, h: usize, w: usize) -> u64 {
    let hw = (h * w) as u64;
    let (f_in, dk, dv) = (p.f_in as u64, p.dk as u64, p.dv as u64);
    let conv = hw * kk * f_in * conv_out;
    let projections = hw * f_in * (2 * dk + dv);
    let relative = hw * dk * ((2 * w - 1) + (2 * h - 1)) as u64;
    let logits = hw * hw * dk;
    let weighted = hw * hw * dv;
    let out = hw * dv * dv;
    conv + projections + relative + logits + weighted + out
}

/// Itemized parameters and MACs for `net` at its configured input size.
pub fn cost_report(net: &Network) -> Result<CostReport> {
    let mut b = Builder {
        report: CostReport {
            layers: Vec::new(),
            separable: Vec::new(),
        },
        growth: net.config.growth,
    };
    let (mut h, mut w) = (net.config.input_height, net.config.input_width);
    for (i, s) in net.stages.iter().enumerate() {
        b.dense_block(&format!("Dense Block ({})", i + 1), &s.block, h, w);
        if let Some(t) = &s.transition {
            (h, w) = b.transition(&format!("Transition Layer ({})", i + 1), t, h, w)?;
        }
    }
    if let Some(f) = &net.final_block {
        b.dense_block("AA-Bottleneck", f, h, w);
    }
    b.head(&net.head, h, w);
    Ok(b.report)
}

/// Exact trainable scalar count.
pub fn count_params(net: &Network) -> usize {
    net.num_params()
}

/// Itemized cost at `input` `(h, w)`, which must match the configuration.
pub fn count_flops(net: &Network, input: (usize, usize)) -> Result<CostReport> {
    let want = (net.config.input_height, net.config.input_width);
    if input != want {
        return Err(Error::shape(format!(
            "network is built for {}x{}, asked for {}x{}",
            want.0, want.1, input.0, input.1
        )));
    }
    cost_report(net)
}
