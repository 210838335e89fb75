//! Direct NHWC convolutions: standard, depthwise and depthwise-separable.
//!
//! Kernels are stored `(kh, kw, C_in, C_out)` for standard convolutions and
//! `(kh, kw, C, 1)` for depthwise ones, so the innermost loop of both
//! forward and backward runs over contiguous channel slices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding totaling `k - 1`, the odd pixel going bottom/right.
    Same,
    Valid,
}

/// Returns `(pad_before, output_len)` along one axis.
pub fn geometry(input: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 || k == 0 {
        return Err(Error::arg("stride and kernel size must be >= 1"));
    }
    match padding {
        Padding::Same => Ok(((k - 1) / 2, (input - 1) / stride + 1)),
        Padding::Valid => {
            if k > input {
                return Err(Error::shape(format!(
                    "kernel {k} larger than input {input} with valid padding"
                )));
            }
            Ok((0, (input - k) / stride + 1))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvWeights {
    pub fn new(kernel: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if let Some(b) = &bias {
            let want = kernel.shape().c;
            if b.len() != want {
                return Err(Error::shape(format!(
                    "bias has {} entries, kernel produces {want} channels",
                    b.len()
                )));
            }
        }
        Ok(ConvWeights { kernel, bias })
    }

    pub fn zeros(k: usize, c_in: usize, c_out: usize, bias: bool) -> Result<Self> {
        let kernel = Tensor::zeros(Shape::new(k, k, c_in, c_out)?);
        let bias = if bias {
            Some(Tensor::zeros(Shape::new(1, 1, 1, c_out)?))
        } else {
            None
        };
        Ok(ConvWeights { kernel, bias })
    }

    /// He-style uniform init: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(
        k: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (k * k * c_in) as Float;
        let bound = (6.0 / fan_in).sqrt();
        let mut w = ConvWeights::zeros(k, c_in, c_out, bias)?;
        w.kernel = Tensor::uniform(w.kernel.shape(), bound, rng);
        Ok(w)
    }

    /// Depthwise kernel `(k, k, c, 1)`.
    pub fn depthwise_uniform<R: Rng + ?Sized>(k: usize, c: usize, rng: &mut R) -> Result<Self> {
        let bound = (6.0 / (k * k) as Float).sqrt();
        Ok(ConvWeights {
            kernel: Tensor::uniform(Shape::new(k, k, c, 1)?, bound, rng),
            bias: None,
        })
    }

    pub fn ksize(&self) -> (usize, usize) {
        (self.kernel.shape().n, self.kernel.shape().h)
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape().w
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape().c
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dkernel: Tensor,
    pub dbias: Option<Tensor>,
}

impl ConvGrads {
    /// Parameter gradients in `[kernel, bias?]` order.
    pub fn param_grads(self) -> (Tensor, Vec<Tensor>) {
        let mut g = vec![self.dkernel];
        g.extend(self.dbias);
        (self.dx, g)
    }
}

struct Plan {
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    out: Shape,
}

impl Plan {
    #[inline]
    fn input_row(&self, oh: usize, k: usize, h: usize) -> Option<usize> {
        let ih = (oh * self.stride + k) as isize - self.pad_t as isize;
        (ih >= 0 && (ih as usize) < h).then_some(ih as usize)
    }

    #[inline]
    fn input_col(&self, ow: usize, k: usize, w: usize) -> Option<usize> {
        let iw = (ow * self.stride + k) as isize - self.pad_l as isize;
        (iw >= 0 && (iw as usize) < w).then_some(iw as usize)
    }
}

fn plan(x: Shape, kh: usize, kw: usize, c_out: usize, stride: usize, padding: Padding) -> Result<Plan> {
    let (pad_t, oh) = geometry(x.h, kh, stride, padding)?;
    let (pad_l, ow) = geometry(x.w, kw, stride, padding)?;
    Ok(Plan {
        stride,
        pad_t,
        pad_l,
        out: Shape::new(x.n, oh, ow, c_out)?,
    })
}

fn check_conv(x: &Tensor, w: &ConvWeights) -> Result<()> {
    if x.shape().c != w.c_in() {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels, kernel expects {}",
            x.shape().c,
            w.c_in()
        )));
    }
    Ok(())
}

pub fn conv2d(x: &Tensor, w: &ConvWeights, stride: usize, padding: Padding) -> Result<Tensor> {
    check_conv(x, w)?;
    let (kh, kw) = w.ksize();
    let (c_in, c_out) = (w.c_in(), w.c_out());
    let p = plan(x.shape(), kh, kw, c_out, stride, padding)?;
    let xs = x.shape();
    let k = w.kernel.data();
    let mut out = Tensor::zeros(p.out);
    for n in 0..p.out.n {
        for oh in 0..p.out.h {
            for ow in 0..p.out.w {
                let out_px = out.pixel_mut(n, oh, ow);
                if let Some(b) = &w.bias {
                    out_px.copy_from_slice(b.data());
                }
                for ky in 0..kh {
                    let Some(ih) = p.input_row(oh, ky, xs.h) else { continue };
                    for kx in 0..kw {
                        let Some(iw) = p.input_col(ow, kx, xs.w) else { continue };
                        let x_px = x.pixel(n, ih, iw);
                        let base = (ky * kw + kx) * c_in * c_out;
                        for (ci, &xv) in x_px.iter().enumerate() {
                            let w_row = &k[base + ci * c_out..base + (ci + 1) * c_out];
                            for (o, &wv) in out_px.iter_mut().zip(w_row) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &ConvWeights,
    stride: usize,
    padding: Padding,
    dy: &Tensor,
) -> Result<ConvGrads> {
    check_conv(x, w)?;
    let (kh, kw) = w.ksize();
    let (c_in, c_out) = (w.c_in(), w.c_out());
    let p = plan(x.shape(), kh, kw, c_out, stride, padding)?;
    dy.expect_shape(p.out, "conv2d_backward dy")?;
    let xs = x.shape();
    let k = w.kernel.data();
    let mut dx = Tensor::zeros(xs);
    let mut dk = Tensor::zeros(w.kernel.shape());
    let mut db = w.bias.as_ref().map(|b| Tensor::zeros(b.shape()));
    for n in 0..p.out.n {
        for oh in 0..p.out.h {
            for ow in 0..p.out.w {
                let dy_px = dy.pixel(n, oh, ow);
                if let Some(db) = db.as_mut() {
                    for (d, g) in db.data_mut().iter_mut().zip(dy_px) {
                        *d += g;
                    }
                }
                for ky in 0..kh {
                    let Some(ih) = p.input_row(oh, ky, xs.h) else { continue };
                    for kx in 0..kw {
                        let Some(iw) = p.input_col(ow, kx, xs.w) else { continue };
                        let base = (ky * kw + kx) * c_in * c_out;
                        let x_px = x.pixel(n, ih, iw);
                        let dx_px = dx.pixel_mut(n, ih, iw);
                        let dkd = dk.data_mut();
                        for ci in 0..c_in {
                            let range = base + ci * c_out..base + (ci + 1) * c_out;
                            let mut acc = 0.0;
                            for (&wv, &g) in k[range.clone()].iter().zip(dy_px) {
                                acc += wv * g;
                            }
                            dx_px[ci] += acc;
                            let xv = x_px[ci];
                            for (d, &g) in dkd[range].iter_mut().zip(dy_px) {
                                *d += xv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx,
        dkernel: dk,
        dbias: db,
    })
}

fn check_depthwise(x: &Tensor, w: &ConvWeights) -> Result<()> {
    let ks = w.kernel.shape();
    if ks.c != 1 {
        return Err(Error::shape(format!(
            "depthwise kernel must be (k, k, C, 1), got {ks}"
        )));
    }
    if ks.w != x.shape().c {
        return Err(Error::shape(format!(
            "depthwise kernel has {} channels, input has {}",
            ks.w,
            x.shape().c
        )));
    }
    Ok(())
}

pub fn depthwise_conv2d(x: &Tensor, w: &ConvWeights, stride: usize, padding: Padding) -> Result<Tensor> {
    check_depthwise(x, w)?;
    let (kh, kw) = w.ksize();
    let c = x.shape().c;
    let p = plan(x.shape(), kh, kw, c, stride, padding)?;
    let xs = x.shape();
    let k = w.kernel.data();
    let mut out = Tensor::zeros(p.out);
    for n in 0..p.out.n {
        for oh in 0..p.out.h {
            for ow in 0..p.out.w {
                let out_px = out.pixel_mut(n, oh, ow);
                if let Some(b) = &w.bias {
                    out_px.copy_from_slice(b.data());
                }
                for ky in 0..kh {
                    let Some(ih) = p.input_row(oh, ky, xs.h) else { continue };
                    for kx in 0..kw {
                        let Some(iw) = p.input_col(ow, kx, xs.w) else { continue };
                        let taps = &k[(ky * kw + kx) * c..(ky * kw + kx + 1) * c];
                        for ((o, &xv), &t) in out_px.iter_mut().zip(x.pixel(n, ih, iw)).zip(taps) {
                            *o += xv * t;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward(
    x: &Tensor,
    w: &ConvWeights,
    stride: usize,
    padding: Padding,
    dy: &Tensor,
) -> Result<ConvGrads> {
    check_depthwise(x, w)?;
    let (kh, kw) = w.ksize();
    let c = x.shape().c;
    let p = plan(x.shape(), kh, kw, c, stride, padding)?;
    dy.expect_shape(p.out, "depthwise_conv2d_backward dy")?;
    let xs = x.shape();
    let k = w.kernel.data();
    let mut dx = Tensor::zeros(xs);
    let mut dk = Tensor::zeros(w.kernel.shape());
    let mut db = w.bias.as_ref().map(|b| Tensor::zeros(b.shape()));
    for n in 0..p.out.n {
        for oh in 0..p.out.h {
            for ow in 0..p.out.w {
                let dy_px = dy.pixel(n, oh, ow);
                if let Some(db) = db.as_mut() {
                    for (d, g) in db.data_mut().iter_mut().zip(dy_px) {
                        *d += g;
                    }
                }
                for ky in 0..kh {
                    let Some(ih) = p.input_row(oh, ky, xs.h) else { continue };
                    for kx in 0..kw {
                        let Some(iw) = p.input_col(ow, kx, xs.w) else { continue };
                        let tap = (ky * kw + kx) * c;
                        let taps = &k[tap..tap + c];
                        for ((d, &t), &g) in dx.pixel_mut(n, ih, iw).iter_mut().zip(taps).zip(dy_px) {
                            *d += t * g;
                        }
                        let x_px = x.pixel(n, ih, iw);
                        for ((d, &xv), &g) in dk.data_mut()[tap..tap + c].iter_mut().zip(x_px).zip(dy_px) {
                            *d += xv * g;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx,
        dkernel: dk,
        dbias: db,
    })
}

/// Depthwise pass (stride 1, same padding) followed by a pointwise `1x1` conv.
pub fn depthwise_separable_conv(x: &Tensor, dw: &ConvWeights, pw: &ConvWeights) -> Result<Tensor> {
    if pw.ksize() != (1, 1) {
        return Err(Error::shape("pointwise kernel must be 1x1"));
    }
    if pw.c_in() != dw.kernel.shape().w {
        return Err(Error::shape(format!(
            "depthwise produces {} channels, pointwise expects {}",
            dw.kernel.shape().w,
            pw.c_in()
        )));
    }
    let mid = depthwise_conv2d(x, dw, 1, Padding::Same)?;
    conv2d(&mid, pw, 1, Padding::Same)
}

/// Ratio of standard-conv to depthwise-separable multiplies, `kf²·d_o / (denom_k² + d_o)`.
///
/// With `denom_k == kf` this is the exact saving; passing the growth rate
/// instead reproduces the alternative reading of the printed formula.
pub fn separable_reduction_factor(kf: usize, d_o: usize, denom_k: usize) -> f64 {
    let kf2 = (kf * kf) as f64;
    kf2 * d_o as f64 / ((denom_k * denom_k) as f64 + d_o as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, h: usize, w: usize, c: usize) -> Shape {
        Shape::new(n, h, w, c).unwrap()
    }

    /// Six-loop definition with explicit zero padding.
    fn conv_oracle(x: &Tensor, w: &ConvWeights, stride: usize) -> Tensor {
        let xs = x.shape();
        let (kh, kw) = w.ksize();
        let (c_in, c_out) = (w.c_in(), w.c_out());
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let (oh, ow) = ((xs.h - 1) / stride + 1, (xs.w - 1) / stride + 1);
        let mut out = Tensor::zeros(shape(xs.n, oh, ow, c_out));
        for n in 0..xs.n {
            for i in 0..oh {
                for j in 0..ow {
                    for co in 0..c_out {
                        let mut acc = w.bias.as_ref().map_or(0.0, |b| b.data()[co]);
                        for a in 0..kh {
                            for b in 0..kw {
                                let ih = (i * stride + a) as isize - pt as isize;
                                let iw = (j * stride + b) as isize - pl as isize;
                                if ih < 0 || iw < 0 || ih >= xs.h as isize || iw >= xs.w as isize {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    acc += x.at(n, ih as usize, iw as usize, ci)
                                        * w.kernel.at(a, b, ci, co);
                                }
                            }
                        }
                        out.set(n, i, j, co, acc);
                    }
                }
            }
        }
        out
    }

    fn rel_close(a: &Tensor, b: &Tensor, tol: Float) {
        assert_eq!(a.shape(), b.shape());
        let scale = b.max_abs().max(1e-12);
        let diff = a.max_abs_diff(b).unwrap();
        assert!(diff / scale < tol, "relative diff {}", diff / scale);
    }

    #[test]
    fn pointwise_scaling() {
        let x = Tensor::full(shape(1, 3, 3, 1), 1.0);
        let w = ConvWeights::new(Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap(), None).unwrap();
        let y = conv2d(&x, &w, 1, Padding::Same).unwrap();
        assert_eq!(y, Tensor::full(shape(1, 3, 3, 1), 2.0));
    }

    #[test]
    fn identity_kernel_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::normal(shape(1, 4, 4, 1), 1.0, &mut rng);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = ConvWeights::new(Tensor::new([3, 3, 1, 1], k).unwrap(), None).unwrap();
        assert_eq!(conv2d(&x, &w, 1, Padding::Same).unwrap(), x);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::normal(shape(1, 5, 5, 3), 1.0, &mut rng);
        let mut w = ConvWeights::he_uniform(3, 3, 4, true, &mut rng).unwrap();
        w.bias = Some(Tensor::normal(shape(1, 1, 1, 4), 1.0, &mut rng));
        for stride in [1, 2] {
            rel_close(
                &conv2d(&x, &w, stride, Padding::Same).unwrap(),
                &conv_oracle(&x, &w, stride),
                1e-6,
            );
        }
    }

    #[test]
    fn output_geometry() {
        assert_eq!(geometry(7, 3, 2, Padding::Same).unwrap(), (1, 4));
        assert_eq!(geometry(8, 3, 2, Padding::Same).unwrap(), (1, 4));
        assert_eq!(geometry(4, 2, 1, Padding::Same).unwrap(), (0, 4));
        assert_eq!(geometry(5, 3, 1, Padding::Valid).unwrap(), (0, 3));
        assert!(geometry(2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::zeros(shape(1, 3, 3, 2));
        let w = ConvWeights::zeros(3, 3, 1, false).unwrap();
        assert!(matches!(conv2d(&x, &w, 1, Padding::Same), Err(Error::Shape(_))));
    }

    #[test]
    fn reduction_factor_arithmetic() {
        assert!((separable_reduction_factor(3, 64, 3) - 576.0 / 73.0).abs() < 1e-12);
        assert!((separable_reduction_factor(3, 40, 3) - 360.0 / 49.0).abs() < 1e-12);
        assert!((separable_reduction_factor(3, 64, 3) - 7.890).abs() < 1e-3);
    }

    #[test]
    fn separable_with_identities_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::normal(shape(1, 4, 4, 3), 1.0, &mut rng);
        let mut dk = vec![0.0; 9 * 3];
        for c in 0..3 {
            dk[4 * 3 + c] = 1.0;
        }
        let dw = ConvWeights::new(Tensor::new([3, 3, 3, 1], dk).unwrap(), None).unwrap();
        let mut pk = vec![0.0; 9];
        for c in 0..3 {
            pk[c * 3 + c] = 1.0;
        }
        let pw = ConvWeights::new(Tensor::new([1, 1, 3, 3], pk).unwrap(), None).unwrap();
        assert_eq!(depthwise_separable_conv(&x, &dw, &pw).unwrap(), x);
    }

    #[test]
    fn separable_equals_expanded_dense_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::normal(shape(1, 6, 6, 4), 1.0, &mut rng);
        let dw = ConvWeights::depthwise_uniform(3, 4, &mut rng).unwrap();
        let pw = ConvWeights::he_uniform(1, 4, 5, false, &mut rng).unwrap();
        let mut dense = Tensor::zeros(shape(3, 3, 4, 5));
        for a in 0..3 {
            for b in 0..3 {
                for ci in 0..4 {
                    for co in 0..5 {
                        dense.set(a, b, ci, co, dw.kernel.at(a, b, ci, 0) * pw.kernel.at(0, 0, ci, co));
                    }
                }
            }
        }
        let dense = ConvWeights::new(dense, None).unwrap();
        rel_close(
            &depthwise_separable_conv(&x, &dw, &pw).unwrap(),
            &conv_oracle(&x, &dense, 1),
            1e-6,
        );
    }

    #[test]
    fn separable_rejects_mismatched_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::zeros(shape(1, 3, 3, 2));
        let dw = ConvWeights::depthwise_uniform(3, 2, &mut rng).unwrap();
        let pw = ConvWeights::zeros(1, 3, 4, false).unwrap();
        assert!(depthwise_separable_conv(&x, &dw, &pw).is_err());
    }
}
