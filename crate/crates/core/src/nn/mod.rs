//! Minimal layer library with explicit forward caches and hand-written
//! backward passes.
//!
//! Feature maps for a single image are stored channel-major as
//! `[channels, height * width]` so convolutions and per-position dense maps
//! reduce to matrix products. Layers are generic over [`Real`] so the same
//! code trains in `f32` and is gradient-checked in `f64`.

mod act;
mod conv;
mod linear;
mod lstm;
mod optim;
mod pool;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

pub use act::Activation;
pub use conv::{Conv3x3, ConvStack, ConvStackCache, Skip};
pub use linear::Linear;
pub use lstm::{Lstm, LstmCache};
pub use optim::{clip_grad_norm, Adam};
pub use pool::{max_pool2, max_pool2_backward};

/// Floating-point element type accepted by every layer.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(rng.gen_range(-bound..=bound)));
        Self::new(value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Uniform bound for layers followed by a ReLU (variance `2 / fan_in`).
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Uniform bound giving variance `1 / fan_in`.
pub fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

pub(crate) fn view2<T>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality().expect("rank-2 tensor")
}

pub(crate) fn view2_mut<T>(a: &mut ArrayD<T>) -> ndarray::ArrayViewMut2<'_, T> {
    a.view_mut().into_dimensionality().expect("rank-2 tensor")
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything owning named parameters.
pub trait HasParams<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, p)| p.value.iter().all(|v| v.is_finite()))
    }
}

impl<T: Real, M: HasParams<T>> HasParams<T> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join_name(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join_name(prefix, &i.to_string()), out);
        }
    }
}

impl<T: Real, M: HasParams<T>> HasParams<T> for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        if let Some(m) = self {
            m.visit(prefix, out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        if let Some(m) = self {
            m.visit_mut(prefix, out);
        }
    }
}

/// Converts every parameter of `src` into the element type of `dst`,
/// matching by name. Both must have the same structure.
pub fn copy_params<A: Real, B: Real>(src: &impl HasParams<A>, dst: &mut impl HasParams<B>) {
    let src = src.named_params();
    let mut dst = dst.named_params_mut();
    assert_eq!(src.len(), dst.len(), "parameter structure mismatch");
    for ((sn, sp), (dn, dp)) in src.iter().zip(dst.iter_mut()) {
        assert_eq!(sn, dn, "parameter name mismatch");
        dp.value = sp.value.mapv(|v| B::from_f64(v.to_f64().unwrap()).unwrap());
    }
}
