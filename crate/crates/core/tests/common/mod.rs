//! Independent reference implementations used by the integration tests.
//! Everything here is written as plain loops over raw tensor data.

#![allow(dead_code, clippy::needless_range_loop, clippy::unnecessary_cast)]

use aapose::attention::AttentionParams;
use aapose::metrics::EvalRecord;
use aapose::tensor::{Float, Tensor};

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Blur kernel from the triangle `1, 2, .., n, .., 2, 1` and its outer
/// product, normalized by `n^4`.
pub fn blur_kernel_oracle(n: usize) -> Vec<Vec<f64>> {
    let m = 2 * n - 1;
    let tri: Vec<f64> = (0..m).map(|i| (i.min(m - 1 - i) + 1) as f64).collect();
    let norm = (n as f64).powi(4);
    tri.iter().map(|a| tri.iter().map(|b| a * b / norm).collect()).collect()
}

fn get(t: &Tensor, dims: [usize; 4], idx: [usize; 4]) -> f64 {
    let off = ((idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]) * dims[3] + idx[3];
    t.data()[off] as f64
}

/// Relative multi-head self-attention on batch item `item` of `x` by
/// explicit loops over every query/key pair. Returns `HW` rows of `d_v`.
pub fn attention_oracle(x: &Tensor, item: usize, p: &AttentionParams) -> Vec<Vec<f64>> {
    let s = x.shape();
    let (h, w, f) = (s.h, s.w, s.c);
    let hw = h * w;
    let dkh = p.dk / p.heads;
    let dvh = p.dv / p.heads;
    let xv = |i: usize, c: usize| x.at(item, i / w, i % w, c) as f64;
    let proj = |t: &Tensor, cols: usize, i: usize, col: usize| -> f64 {
        (0..f).map(|c| xv(i, c) * get(t, [1, 1, f, cols], [0, 0, c, col])).sum()
    };
    let rw_rows = p.rel_w.shape().w;
    let rh_rows = p.rel_h.shape().w;
    let mut concat = vec![vec![0.0; p.dv]; hw];
    for head in 0..p.heads {
        let q: Vec<Vec<f64>> = (0..hw)
            .map(|i| (0..dkh).map(|d| proj(&p.wq, p.dk, i, head * dkh + d)).collect())
            .collect();
        let k: Vec<Vec<f64>> = (0..hw)
            .map(|i| (0..dkh).map(|d| proj(&p.wk, p.dk, i, head * dkh + d)).collect())
            .collect();
        let v: Vec<Vec<f64>> = (0..hw)
            .map(|i| (0..dvh).map(|d| proj(&p.wv, p.dv, i, head * dvh + d)).collect())
            .collect();
        for i in 0..hw {
            let (iy, ix) = ((i / w) as isize, (i % w) as isize);
            let mut logits = vec![0.0; hw];
            for (j, l) in logits.iter_mut().enumerate() {
                let (jy, jx) = ((j / w) as isize, (j % w) as isize);
                let row_w = (jx - ix + (rw_rows / 2) as isize) as usize;
                let row_h = (jy - iy + (rh_rows / 2) as isize) as usize;
                let mut acc = 0.0;
                for d in 0..dkh {
                    let rw = get(&p.rel_w, [1, p.heads, rw_rows, dkh], [0, head, row_w, d]);
                    let rh = get(&p.rel_h, [1, p.heads, rh_rows, dkh], [0, head, row_h, d]);
                    acc += q[i][d] * (k[j][d] + rw + rh);
                }
                *l = acc / (dkh as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                let a = (l - max).exp() / z;
                for d in 0..dvh {
                    concat[i][head * dvh + d] += a * v[j][d];
                }
            }
        }
    }
    (0..hw)
        .map(|i| {
            (0..p.dv)
                .map(|o| {
                    (0..p.dv)
                        .map(|c| concat[i][c] * get(&p.wo, [1, 1, p.dv, p.dv], [0, 0, c, o]))
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Max relative deviation `|a - b| / max(|a|, |b|, 1)` over two row sets.
pub fn max_rel_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Pooled per-keypoint errors in record order.
pub fn errors_oracle(records: &[EvalRecord]) -> Vec<f64> {
    let mut out = Vec::new();
    for r in records {
        let p = r.prediction.points();
        let g = r.ground_truth.points();
        for i in 0..p.len() {
            if r.ground_truth.is_visible(i) {
                let dx = p[i][0] - g[i][0];
                let dy = p[i][1] - g[i][1];
                out.push((dx * dx + dy * dy).sqrt());
            }
        }
    }
    out
}

pub fn mean_oracle(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

/// Lower-middle element after a selection sort.
pub fn median_oracle(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    for i in 0..v.len() {
        let mut m = i;
        for j in i + 1..v.len() {
            if v[j] < v[m] {
                m = j;
            }
        }
        v.swap(i, m);
    }
    v[(v.len() - 1) / 2]
}

/// Fraction of errors at or below each threshold, by counting.
pub fn pck_oracle(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            let mut n = 0usize;
            for &e in errors {
                if e <= t {
                    n += 1;
                }
            }
            n as f64 / errors.len() as f64
        })
        .collect()
}

/// Trapezoids summed left to right, over the threshold range.
pub fn auc_oracle(curve: &[f64], thresholds: &[f64]) -> f64 {
    let mut area = 0.0;
    for i in 1..curve.len() {
        area += 0.5 * (curve[i] + curve[i - 1]) * (thresholds[i] - thresholds[i - 1]);
    }
    area / (thresholds[thresholds.len() - 1] - thresholds[0])
}

/// Direct same-padded 2D convolution over an NHWC tensor with an
/// `k x k x c_in x c_out` kernel, stride 1, no bias.
pub fn conv_same_oracle(x: &Tensor, kernel: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let ks = kernel.shape();
    let (k, c_in, c_out) = (ks.n, ks.w, ks.c);
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; s.n * s.h * s.w * c_out];
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                for o in 0..c_out {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            let ix = xx as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            for c in 0..c_in {
                                acc += x.at(n, iy as usize, ix as usize, c) as f64
                                    * get(kernel, [k, k, c_in, c_out], [ky, kx, c, o]);
                            }
                        }
                    }
                    out[((n * s.h + y) * s.w + xx) * c_out + o] = acc;
                }
            }
        }
    }
    out
}

pub fn as_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn float(v: f64) -> Float {
    v as Float
}
