//! Anti-aliased downsampling.
//!
//! The low-pass filter is built from a length-`n` box `B_n`: the box is
//! convolved with itself into a triangle of length `m = 2n - 1`, and the 2D
//! kernel is the outer product of that triangle with itself, scaled to unit
//! sum. Blur pooling convolves each channel with the kernel (reflect
//! padding) and keeps every `stride`-th sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{Conv2d, Layer};
use crate::ops::pool::{avg_pool, avg_pool_backward, max_pool_backward, max_pool_with_argmax, pool_output_shape};
use crate::ops::Activation;
use crate::tensor::{Float, Shape, Tensor};

/// The box `B_n`: `n` ones.
pub fn make_box(n: usize) -> Result<Vec<Float>> {
    if n == 0 {
        return Err(Error::arg("box length must be >= 1"));
    }
    Ok(vec![1.0; n])
}

/// Full discrete convolution, length `a.len() + b.len() - 1`.
pub fn convolve_full(a: &[Float], b: &[Float]) -> Vec<Float> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &av) in a.iter().enumerate() {
        for (j, &bv) in b.iter().enumerate() {
            out[i + j] += av * bv;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlurFilter {
    n: usize,
    box_m: Vec<Float>,
    kernel: Vec<Float>,
}

pub fn make_blur_filter(n: usize) -> Result<BlurFilter> {
    BlurFilter::new(n)
}

impl BlurFilter {
    pub fn new(n: usize) -> Result<Self> {
        let b = make_box(n)?;
        let box_m = convolve_full(&b, &b);
        let m = box_m.len();
        let total: Float = box_m.iter().sum::<Float>().powi(2);
        let mut kernel = Vec::with_capacity(m * m);
        for &r in &box_m {
            for &c in &box_m {
                kernel.push(r * c / total);
            }
        }
        Ok(BlurFilter { n, box_m, kernel })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Side length `2n - 1`.
    pub fn m(&self) -> usize {
        self.box_m.len()
    }

    /// The unnormalized triangle `B_n * B_n`.
    pub fn box_m(&self) -> &[Float] {
        &self.box_m
    }

    /// Row-major `m x m` kernel with unit sum.
    pub fn kernel(&self) -> &[Float] {
        &self.kernel
    }

    pub fn at(&self, r: usize, c: usize) -> Float {
        self.kernel[r * self.m() + c]
    }

    /// `(sum of box_m)^2 = n^4`, the factor removed by normalization.
    pub fn normalizer(&self) -> Float {
        self.box_m.iter().sum::<Float>().powi(2)
    }

    /// Integer rows of the unnormalized kernel, for display.
    pub fn integer_rows(&self) -> Vec<Vec<u64>> {
        self.box_m
            .iter()
            .map(|&r| self.box_m.iter().map(|&c| (r * c).round() as u64).collect())
            .collect()
    }
}

/// Mirror index without repeating the edge sample; length-1 axes clamp to 0.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let j = i.rem_euclid(period);
    if j >= len as isize {
        (period - j) as usize
    } else {
        j as usize
    }
}

fn tap_indices(out_len: usize, m: usize, stride: usize, len: usize) -> Vec<usize> {
    let pad = ((m - 1) / 2) as isize;
    let mut idx = Vec::with_capacity(out_len * m);
    for o in 0..out_len {
        for a in 0..m {
            idx.push(reflect((o * stride + a) as isize - pad, len));
        }
    }
    idx
}

pub fn blur_pool_output_shape(x: Shape, stride: usize) -> Result<Shape> {
    if stride == 0 {
        return Err(Error::arg("blur_pool stride must be >= 1"));
    }
    Shape::new(x.n, (x.h - 1) / stride + 1, (x.w - 1) / stride + 1, x.c)
}

/// Per-channel blur with reflect padding, sampled every `stride` pixels.
pub fn blur_pool(x: &Tensor, f: &BlurFilter, stride: usize) -> Result<Tensor> {
    let xs = x.shape();
    let os = blur_pool_output_shape(xs, stride)?;
    let m = f.m();
    let rows = tap_indices(os.h, m, stride, xs.h);
    let cols = tap_indices(os.w, m, stride, xs.w);
    let k = f.kernel();
    let mut out = Tensor::zeros(os);
    for n in 0..os.n {
        for oh in 0..os.h {
            for ow in 0..os.w {
                let o = out.pixel_mut(n, oh, ow);
                for a in 0..m {
                    let ih = rows[oh * m + a];
                    for b in 0..m {
                        let iw = cols[ow * m + b];
                        let t = k[a * m + b];
                        for (acc, &v) in o.iter_mut().zip(x.pixel(n, ih, iw)) {
                            *acc += t * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn blur_pool_backward(input: Shape, f: &BlurFilter, stride: usize, dy: &Tensor) -> Result<Tensor> {
    let os = blur_pool_output_shape(input, stride)?;
    dy.expect_shape(os, "blur_pool_backward dy")?;
    let m = f.m();
    let rows = tap_indices(os.h, m, stride, input.h);
    let cols = tap_indices(os.w, m, stride, input.w);
    let k = f.kernel();
    let mut dx = Tensor::zeros(input);
    for n in 0..os.n {
        for oh in 0..os.h {
            for ow in 0..os.w {
                let g = dy.pixel(n, oh, ow);
                for a in 0..m {
                    let ih = rows[oh * m + a];
                    for b in 0..m {
                        let iw = cols[ow * m + b];
                        let t = k[a * m + b];
                        for (d, &v) in dx.pixel_mut(n, ih, iw).iter_mut().zip(g) {
                            *d += t * v;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Blur,
    #[serde(alias = "avg")]
    Average,
    Max,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Blur => "blur",
            Pooling::Average => "average",
            Pooling::Max => "max",
        }
    }
}

/// Stride-2 downsampling by blur (`Filt` with the configured `n`), or by
/// a 2x2 average/max window.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub pooling: Pooling,
    pub filter: BlurFilter,
    pub stride: usize,
}

pub const BASELINE_POOL_WINDOW: usize = 2;

impl Downsample {
    pub fn new(pooling: Pooling, blur_n: usize) -> Result<Self> {
        Ok(Downsample {
            pooling,
            filter: BlurFilter::new(blur_n)?,
            stride: 2,
        })
    }

    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        match self.pooling {
            Pooling::Blur => blur_pool_output_shape(x, self.stride),
            _ => pool_output_shape(x, BASELINE_POOL_WINDOW, self.stride),
        }
    }

    /// Kernel extent in input pixels before and after the sample position.
    pub fn field(&self) -> (usize, usize) {
        match self.pooling {
            Pooling::Blur => {
                let m = self.filter.m();
                ((m - 1) / 2, m - 1 - (m - 1) / 2)
            }
            _ => (0, BASELINE_POOL_WINDOW - 1),
        }
    }

    pub fn window(&self) -> usize {
        match self.pooling {
            Pooling::Blur => self.filter.m(),
            _ => BASELINE_POOL_WINDOW,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DownsampleCache {
    input: Shape,
    argmax: Option<Vec<usize>>,
}

impl Layer for Downsample {
    type Cache = DownsampleCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, DownsampleCache)> {
        let input = x.shape();
        match self.pooling {
            Pooling::Max => {
                let (y, arg) = max_pool_with_argmax(x, BASELINE_POOL_WINDOW, self.stride)?;
                Ok((y, DownsampleCache { input, argmax: Some(arg) }))
            }
            _ => Ok((self.infer(x)?, DownsampleCache { input, argmax: None })),
        }
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self.pooling {
            Pooling::Blur => blur_pool(x, &self.filter, self.stride),
            Pooling::Average => avg_pool(x, BASELINE_POOL_WINDOW, self.stride),
            Pooling::Max => Ok(max_pool_with_argmax(x, BASELINE_POOL_WINDOW, self.stride)?.0),
        }
    }

    fn backward(&self, cache: &DownsampleCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let dx = match self.pooling {
            Pooling::Blur => blur_pool_backward(cache.input, &self.filter, self.stride, dy)?,
            Pooling::Average => avg_pool_backward(cache.input, BASELINE_POOL_WINDOW, self.stride, dy)?,
            Pooling::Max => {
                let arg = cache
                    .argmax
                    .as_ref()
                    .ok_or_else(|| Error::arg("max-pool cache without argmax"))?;
                max_pool_backward(cache.input, arg, dy)?
            }
        };
        Ok((dx, Vec::new()))
    }
}

/// A strided map whose equivariance to input translation can be measured.
pub trait FeatureExtractor {
    fn extract(&self, x: &Tensor) -> Result<Tensor>;

    fn stride(&self) -> usize;

    /// Input rows/cols read before and after `i * stride` to produce output `i`.
    fn field(&self) -> (usize, usize);
}

impl FeatureExtractor for Downsample {
    fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x)
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn field(&self) -> (usize, usize) {
        Downsample::field(self)
    }
}

/// Stride-1 convolution, activation, then a downsampling stage.
#[derive(Debug, Clone)]
pub struct ConvPoolExtractor {
    pub conv: Conv2d,
    pub activation: Activation,
    pub pool: Downsample,
}

impl FeatureExtractor for ConvPoolExtractor {
    fn extract(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv.infer(x)?;
        self.pool.infer(&self.activation.forward(&h))
    }

    fn stride(&self) -> usize {
        self.pool.stride
    }

    fn field(&self) -> (usize, usize) {
        let (kh, _) = self.conv.weights.ksize();
        let before = (kh - 1) / 2;
        let (pb, pa) = self.pool.field();
        (before + pb, kh - 1 - before + pa)
    }
}

/// Translates content by `(dh, dw)` pixels, filling vacated pixels with zero.
pub fn shift_zero_fill(x: &Tensor, dh: isize, dw: isize) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for h in 0..s.h {
            let sh = h as isize - dh;
            if sh < 0 || sh >= s.h as isize {
                continue;
            }
            for w in 0..s.w {
                let sw = w as isize - dw;
                if sw < 0 || sw >= s.w as isize {
                    continue;
                }
                out.pixel_mut(n, h, w)
                    .copy_from_slice(x.pixel(n, sh as usize, sw as usize));
            }
        }
    }
    out
}

/// Output indices along one axis whose values in both the shifted
/// extraction and the translated reference never touch a boundary.
fn interior(in_len: usize, out_len: usize, stride: usize, field: (usize, usize), d: isize) -> Vec<usize> {
    let clean = |i: isize, shift: isize| -> bool {
        if i < 0 || i >= out_len as isize {
            return false;
        }
        let lo = i * stride as isize - field.0 as isize - shift;
        let hi = i * stride as isize + field.1 as isize - shift;
        lo >= 0 && hi < in_len as isize
    };
    let s = stride as isize;
    (0..out_len)
        .filter(|&i| {
            let i = i as isize;
            let p_floor = (i * s - d).div_euclid(s);
            let exact = (i * s - d).rem_euclid(s) == 0;
            clean(i, d) && clean(i, 0) && clean(p_floor, 0) && (exact || clean(p_floor + 1, 0))
        })
        .collect()
}

/// Linear-interpolation weights for sampling at `i - d / stride`.
fn sample_weights(i: usize, stride: usize, d: isize) -> (usize, Float, Float) {
    let s = stride as isize;
    let num = i as isize * s - d;
    let base = num.div_euclid(s) as usize;
    let frac = num.rem_euclid(s) as Float / stride as Float;
    (base, 1.0 - frac, frac)
}

/// L2 distance between `F(shift(x))` and `shift(F(x))`, relative to the
/// per-channel centered energy of `shift(F(x))`, so constant feature
/// offsets neither help nor hurt.
///
/// The output-space shift is `(dh, dw) / stride`; fractional output shifts
/// are realized by bilinear interpolation, integer ones are exact. Only
/// output positions whose receptive fields stay clear of every boundary
/// (zero fill from the shift, padding inside the extractor) are compared.
pub fn shift_equivariance_deviation<F: FeatureExtractor + ?Sized>(
    model: &F,
    x: &Tensor,
    dh: isize,
    dw: isize,
) -> Result<Float> {
    let y0 = model.extract(x)?;
    let y1 = model.extract(&shift_zero_fill(x, dh, dw))?;
    let (xs, ys) = (x.shape(), y0.shape());
    let s = model.stride();
    let field = model.field();
    let rows = interior(xs.h, ys.h, s, field, dh);
    let cols = interior(xs.w, ys.w, s, field, dw);
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::arg(format!(
            "shift ({dh}, {dw}) leaves no interior on a {}x{} input",
            xs.h, xs.w
        )));
    }
    let mut num = 0.0;
    let mut refs = vec![Vec::new(); ys.c];
    for n in 0..ys.n {
        for &i in &rows {
            let (bi, wi0, wi1) = sample_weights(i, s, dh);
            for &j in &cols {
                let (bj, wj0, wj1) = sample_weights(j, s, dw);
                for (c, rc) in refs.iter_mut().enumerate() {
                    let mut r = wi0 * wj0 * y0.at(n, bi, bj, c);
                    if wj1 != 0.0 {
                        r += wi0 * wj1 * y0.at(n, bi, bj + 1, c);
                    }
                    if wi1 != 0.0 {
                        r += wi1 * wj0 * y0.at(n, bi + 1, bj, c);
                        if wj1 != 0.0 {
                            r += wi1 * wj1 * y0.at(n, bi + 1, bj + 1, c);
                        }
                    }
                    let diff = y1.at(n, i, j, c) - r;
                    num += diff * diff;
                    rc.push(r);
                }
            }
        }
    }
    if num == 0.0 {
        return Ok(0.0);
    }
    let den: Float = refs
        .iter()
        .map(|rc| {
            let mean = rc.iter().sum::<Float>() / rc.len() as Float;
            rc.iter().map(|r| (r - mean) * (r - mean)).sum::<Float>()
        })
        .sum();
    Ok((num / den.max(Float::MIN_POSITIVE)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{ConvWeights, Padding};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn boxes() {
        assert_eq!(make_box(1).unwrap(), vec![1.0]);
        assert_eq!(make_box(2).unwrap(), vec![1.0, 1.0]);
        assert_eq!(make_box(4).unwrap(), vec![1.0; 4]);
        assert!(make_box(0).is_err());
        assert!(make_blur_filter(0).is_err());
    }

    #[test]
    fn n1_is_identity_filter() {
        let f = make_blur_filter(1).unwrap();
        assert_eq!(f.m(), 1);
        assert_eq!(f.kernel(), &[1.0]);
    }

    #[test]
    fn n2_kernel_is_binomial_over_16() {
        let f = make_blur_filter(2).unwrap();
        assert_eq!(f.box_m(), &[1.0, 2.0, 1.0]);
        let want = [1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0].map(|v: Float| v / 16.0);
        assert_eq!(f.kernel(), &want);
        assert_eq!(f.integer_rows(), vec![vec![1, 2, 1], vec![2, 4, 2], vec![1, 2, 1]]);
    }

    #[test]
    fn n3_kernel_is_triangle_outer_product_over_81() {
        let f = make_blur_filter(3).unwrap();
        assert_eq!(f.box_m(), &[1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(f.normalizer(), 81.0);
        assert!((f.at(2, 2) - 9.0 / 81.0).abs() < 1e-15);
        assert!((f.at(0, 1) - 2.0 / 81.0).abs() < 1e-15);
    }

    #[test]
    fn kernel_symmetries_and_unit_sum() {
        for n in 1..=8 {
            let f = make_blur_filter(n).unwrap();
            let m = f.m();
            assert_eq!(m, 2 * n - 1);
            for (i, &v) in f.box_m().iter().enumerate() {
                assert_eq!(v, (i + 1).min(m - i) as Float);
            }
            assert!((f.kernel().iter().sum::<Float>() - 1.0).abs() < 1e-9);
            for r in 0..m {
                for c in 0..m {
                    assert_eq!(f.at(r, c), f.at(c, r));
                    assert_eq!(f.at(r, c), f.at(m - 1 - r, c));
                    assert_eq!(f.at(r, c), f.at(r, m - 1 - c));
                }
            }
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-2, 4), 2);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(3, 4), 3);
    }

    #[test]
    fn dc_gain_is_one() {
        let f = make_blur_filter(2).unwrap();
        let x = Tensor::full(Shape::new(1, 7, 6, 3).unwrap(), 2.5);
        let y = blur_pool(&x, &f, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 3, 3).unwrap());
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn n1_reduces_to_subsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::normal(Shape::new(1, 6, 6, 2).unwrap(), 1.0, &mut rng);
        let y = blur_pool(&x, &make_blur_filter(1).unwrap(), 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y.pixel(0, i, j), x.pixel(0, 2 * i, 2 * j));
            }
        }
    }

    fn extractor(pooling: Pooling, seed: u64) -> ConvPoolExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConvPoolExtractor {
            conv: Conv2d::new(ConvWeights::he_uniform(3, 2, 4, false, &mut rng).unwrap(), 1, Padding::Same),
            activation: Activation::Relu,
            pool: Downsample::new(pooling, 2).unwrap(),
        }
    }

    #[test]
    fn zero_shift_has_zero_deviation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::normal(Shape::new(1, 12, 12, 2).unwrap(), 1.0, &mut rng);
        for p in [Pooling::Blur, Pooling::Average, Pooling::Max] {
            assert_eq!(shift_equivariance_deviation(&extractor(p, 3), &x, 0, 0).unwrap(), 0.0);
        }
    }

    #[test]
    fn stride_multiple_shift_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::normal(Shape::new(1, 16, 16, 3).unwrap(), 1.0, &mut rng);
        let blur = Downsample::new(Pooling::Blur, 2).unwrap();
        assert!(shift_equivariance_deviation(&blur, &x, 2, 0).unwrap() < 1e-6);
        assert!(shift_equivariance_deviation(&blur, &x, -2, 4).unwrap() < 1e-6);
    }

    #[test]
    fn shift_too_large_for_interior_errors() {
        let x = Tensor::full(Shape::new(1, 4, 4, 1).unwrap(), 1.0);
        let blur = Downsample::new(Pooling::Blur, 2).unwrap();
        assert!(shift_equivariance_deviation(&blur, &x, 6, 0).is_err());
    }

    #[test]
    fn max_pool_breaks_equivariance_more_than_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::normal(Shape::new(1, 16, 16, 2).unwrap(), 1.0, &mut rng);
        let blur = shift_equivariance_deviation(&extractor(Pooling::Blur, 6), &x, 1, 0).unwrap();
        let max = shift_equivariance_deviation(&extractor(Pooling::Max, 6), &x, 1, 0).unwrap();
        assert!(max > blur, "max {max} blur {blur}");
    }
}
