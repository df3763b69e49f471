use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::{join_name, view2, view2_mut, HasParams, Param, Real};

/// Affine map applied independently to every column of a `[in, n]` input.
///
/// With columns as spatial positions this is a channel-wise fully connected
/// layer (one shared dense map per pixel); with columns as samples it is an
/// ordinary dense layer.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Param<T>,
    /// `[out]`
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Self { weight: Param::uniform(&[outputs, inputs], bound, rng), bias: Param::zeros(&[outputs]) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        assert_eq!(x.nrows(), self.inputs(), "linear input width");
        let bias = self.bias.value.view().into_shape_with_order((self.outputs(), 1)).unwrap();
        let mut y = Array2::zeros((self.outputs(), x.ncols()));
        y += &bias;
        general_mat_mul(T::one(), &view2(&self.weight.value), &x, T::one(), &mut y);
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: ArrayView2<T>, dy: ArrayView2<T>, need_dx: bool) -> Option<Array2<T>> {
        let db = dy.sum_axis(Axis(1));
        self.bias.grad += &db.into_dyn();
        general_mat_mul(T::one(), &dy, &x.t(), T::one(), &mut view2_mut(&mut self.weight.grad));
        need_dx.then(|| view2(&self.weight.value).t().dot(&dy))
    }
}

impl<T: Real> HasParams<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join_name(prefix, "weight"), &self.weight));
        out.push((join_name(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join_name(prefix, "weight"), &mut self.weight));
        out.push((join_name(prefix, "bias"), &mut self.bias));
    }
}
