//! The checker must notice broken backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use aapose::blocks::{Head, HeadCache};
use aapose::gradcheck::{grad_check, BLOCK_TOLERANCE};
use aapose::layer::Layer;
use aapose::{Result, Shape, Tensor};

/// A head whose backward pass is off by a small factor in one place.
struct Faulty {
    inner: Head,
    input_scale: f64,
    param_scale: f64,
}

impl Layer for Faulty {
    type Cache = HeadCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, HeadCache)> {
        self.inner.forward(x)
    }

    fn backward(&self, cache: &HeadCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (dx, mut grads) = self.inner.backward(cache, dy)?;
        grads[0] = grads[0].scale(self.param_scale as aapose::Float);
        Ok((dx.scale(self.input_scale as aapose::Float), grads))
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        self.inner.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.inner.params_mut()
    }
}

fn faulty(input_scale: f64, param_scale: f64) -> (Faulty, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inner = Head::random(4, &mut rng).unwrap();
    let x = Tensor::normal(Shape::new(2, 2, 2, 4).unwrap(), 1.0, &mut rng);
    (
        Faulty {
            inner,
            input_scale,
            param_scale,
        },
        x,
    )
}

#[cfg(not(feature = "f32"))]
#[test]
fn intact_backward_passes() {
    let (mut f, x) = faulty(1.0, 1.0);
    assert!(grad_check(&mut f, &x, BLOCK_TOLERANCE, 0).unwrap().passed);
}

#[cfg(not(feature = "f32"))]
#[test]
fn corrupted_parameter_gradient_is_caught() {
    let (mut f, x) = faulty(1.0, 1.001);
    let r = grad_check(&mut f, &x, BLOCK_TOLERANCE, 0).unwrap();
    assert!(!r.passed, "{r}");
    assert!(r.worst_label.starts_with("conv.kernel"), "{r}");
}

#[cfg(not(feature = "f32"))]
#[test]
fn corrupted_input_gradient_is_caught() {
    let (mut f, x) = faulty(0.999, 1.0);
    let r = grad_check(&mut f, &x, BLOCK_TOLERANCE, 0).unwrap();
    assert!(!r.passed, "{r}");
    assert!(r.worst_label.starts_with("input"), "{r}");
}

#[cfg(not(feature = "f32"))]
#[test]
fn reports_are_deterministic() {
    let (mut a, x) = faulty(1.0, 1.0);
    let (mut b, _) = faulty(1.0, 1.0);
    assert_eq!(
        grad_check(&mut a, &x, BLOCK_TOLERANCE, 5).unwrap(),
        grad_check(&mut b, &x, BLOCK_TOLERANCE, 5).unwrap()
    );
}
