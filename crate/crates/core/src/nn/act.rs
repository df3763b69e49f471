use ndarray::{Array, ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};

use super::Real;

/// Pointwise nonlinearity. Derivatives are expressed in terms of the
/// activation's output, so caches only need to keep `y = f(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// `f'(x)` written as a function of `y = f(x)`.
    pub fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }

    pub fn apply_inplace<T: Real, D: Dimension>(self, x: &mut Array<T, D>) {
        if self != Activation::Identity {
            x.mapv_inplace(|v| self.apply(v));
        }
    }

    /// Turns an upstream gradient into the gradient w.r.t. the
    /// pre-activation, in place.
    pub fn backward_inplace<T: Real, D: Dimension>(self, output: ArrayView<T, D>, grad: &mut Array<T, D>) {
        if self == Activation::Identity {
            return;
        }
        Zip::from(grad).and(&output).for_each(|g, &y| *g *= self.derivative_from_output(y));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_central_differences() {
        for act in [Activation::Identity, Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
            for &x in &[-2.3f64, -0.4, 0.7, 1.9] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let an = act.derivative_from_output(act.apply(x));
                assert!((fd - an).abs() < 1e-8, "{act:?} at {x}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
