use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Float, Tensor};

/// Past this point `softplus(x) == x` to working precision and `exp` is skipped.
const SOFTPLUS_LINEAR_ABOVE: Float = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Mish,
    Relu,
}

impl Activation {
    pub fn apply(self, x: Float) -> Float {
        match self {
            Activation::Mish => mish_scalar(x),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: Float) -> Float {
        match self {
            Activation::Mish => mish_derivative(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        x.map(|v| self.apply(v))
    }

    /// `dy ⊙ f'(x)`, where `x` is the pre-activation input.
    pub fn backward(self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        x.zip_map(dy, |v, g| g * self.derivative(v))
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Mish => "mish",
            Activation::Relu => "relu",
        }
    }
}

pub fn softplus(x: Float) -> Float {
    if x > SOFTPLUS_LINEAR_ABOVE {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x · tanh(softplus(x))`
pub fn mish_scalar(x: Float) -> Float {
    if x > SOFTPLUS_LINEAR_ABOVE {
        x * x.tanh()
    } else {
        x * softplus(x).tanh()
    }
}

pub fn mish_derivative(x: Float) -> Float {
    let t = if x > SOFTPLUS_LINEAR_ABOVE {
        x.tanh()
    } else {
        softplus(x).tanh()
    };
    t + x * (1.0 - t * t) * sigmoid(x)
}

pub fn mish(x: &Tensor) -> Tensor {
    Activation::Mish.forward(x)
}

pub fn relu(x: &Tensor) -> Tensor {
    Activation::Relu.forward(x)
}
