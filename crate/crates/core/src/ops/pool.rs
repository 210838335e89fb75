//! Windowed average and max pooling.
//!
//! Output length is `ceil((L - k) / stride) + 1`; a trailing window that
//! runs off the input is clipped and pools only the in-bounds elements, so
//! odd sizes round up (7 -> 4 with a 2x2/s2 window).

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

fn out_len(input: usize, k: usize, stride: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::arg("pool window and stride must be >= 1"));
    }
    if k > input {
        return Err(Error::shape(format!(
            "pool window {k} exceeds input extent {input}"
        )));
    }
    Ok((input - k).div_ceil(stride) + 1)
}

pub fn pool_output_shape(x: Shape, k: usize, stride: usize) -> Result<Shape> {
    Shape::new(x.n, out_len(x.h, k, stride)?, out_len(x.w, k, stride)?, x.c)
}

fn window(o: usize, k: usize, stride: usize, len: usize) -> std::ops::Range<usize> {
    let start = o * stride;
    start..(start + k).min(len)
}

pub fn avg_pool(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let xs = x.shape();
    let os = pool_output_shape(xs, k, stride)?;
    let mut out = Tensor::zeros(os);
    for n in 0..os.n {
        for oh in 0..os.h {
            let rows = window(oh, k, stride, xs.h);
            for ow in 0..os.w {
                let cols = window(ow, k, stride, xs.w);
                let count = (rows.len() * cols.len()) as Float;
                let o = out.pixel_mut(n, oh, ow);
                for ih in rows.clone() {
                    for iw in cols.clone() {
                        for (a, v) in o.iter_mut().zip(x.pixel(n, ih, iw)) {
                            *a += v;
                        }
                    }
                }
                o.iter_mut().for_each(|v| *v /= count);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(input: Shape, k: usize, stride: usize, dy: &Tensor) -> Result<Tensor> {
    let os = pool_output_shape(input, k, stride)?;
    dy.expect_shape(os, "avg_pool_backward dy")?;
    let mut dx = Tensor::zeros(input);
    for n in 0..os.n {
        for oh in 0..os.h {
            let rows = window(oh, k, stride, input.h);
            for ow in 0..os.w {
                let cols = window(ow, k, stride, input.w);
                let count = (rows.len() * cols.len()) as Float;
                let g = dy.pixel(n, oh, ow);
                for ih in rows.clone() {
                    for iw in cols.clone() {
                        for (d, v) in dx.pixel_mut(n, ih, iw).iter_mut().zip(g) {
                            *d += v / count;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Windowed maximum; ties resolve to the first element in raster order.
pub fn max_pool(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    Ok(max_pool_with_argmax(x, k, stride)?.0)
}

/// Also returns the flat input offset that won each output element.
pub fn max_pool_with_argmax(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let xs = x.shape();
    let os = pool_output_shape(xs, k, stride)?;
    let mut out = Tensor::zeros(os);
    let mut arg = vec![0usize; os.numel()];
    let xd = x.data();
    for n in 0..os.n {
        for oh in 0..os.h {
            let rows = window(oh, k, stride, xs.h);
            for ow in 0..os.w {
                let cols = window(ow, k, stride, xs.w);
                for ch in 0..xs.c {
                    let mut best = Float::NEG_INFINITY;
                    let mut best_i = 0;
                    for ih in rows.clone() {
                        for iw in cols.clone() {
                            let i = xs.offset(n, ih, iw, ch);
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = os.offset(n, oh, ow, ch);
                    out.data_mut()[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool_backward(input: Shape, argmax: &[usize], dy: &Tensor) -> Result<Tensor> {
    if argmax.len() != dy.len() {
        return Err(Error::shape("max_pool_backward: argmax/dy length mismatch"));
    }
    let mut dx = Tensor::zeros(input);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(n: usize, h: usize, w: usize, c: usize) -> Shape {
        Shape::new(n, h, w, c).unwrap()
    }

    #[test]
    fn two_by_two_examples() {
        let x = Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool(&x, 2, 2).unwrap().data(), &[2.5]);
        assert_eq!(max_pool(&x, 2, 2).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constant_in_constant_out() {
        let x = Tensor::full(s(1, 7, 7, 2), 3.25);
        let a = avg_pool(&x, 2, 2).unwrap();
        let m = max_pool(&x, 2, 2).unwrap();
        assert_eq!(a.shape(), s(1, 4, 4, 2));
        assert!(a.data().iter().chain(m.data()).all(|&v| v == 3.25));
    }

    #[test]
    fn window_larger_than_input_rejected() {
        let x = Tensor::zeros(s(1, 1, 3, 1));
        assert!(avg_pool(&x, 2, 2).is_err());
        assert!(max_pool(&x, 2, 2).is_err());
    }

    #[test]
    fn matches_nested_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::normal(s(1, 4, 4, 2), 1.0, &mut rng);
        let a = avg_pool(&x, 2, 2).unwrap();
        let m = max_pool(&x, 2, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..2 {
                    let vals = [
                        x.at(0, 2 * i, 2 * j, c),
                        x.at(0, 2 * i, 2 * j + 1, c),
                        x.at(0, 2 * i + 1, 2 * j, c),
                        x.at(0, 2 * i + 1, 2 * j + 1, c),
                    ];
                    let mean = vals.iter().sum::<Float>() / 4.0;
                    let max = vals.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
                    assert!((a.at(0, i, j, c) - mean).abs() < 1e-12);
                    assert_eq!(m.at(0, i, j, c), max);
                }
            }
        }
    }
}
