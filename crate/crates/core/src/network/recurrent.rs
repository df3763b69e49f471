use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::nn::{join_name, lecun_bound, Activation, HasParams, Linear, Lstm, LstmCache, Param, Real};

/// Two stacked LSTM layers mapping `[batch, 128, 64]` audio frames to
/// `[batch, 128, 128]` codes (one hidden vector per step).
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub layers: Vec<Lstm<T>>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    first: LstmCache<T>,
    second: LstmCache<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(frame_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let first = Lstm::new(frame_dim, hidden, rng);
        let second = Lstm::new(hidden, hidden, rng);
        Self { layers: vec![first, second] }
    }

    pub fn zeroed(frame_dim: usize, hidden: usize) -> Self {
        Self { layers: vec![Lstm::zeroed(frame_dim, hidden), Lstm::zeroed(hidden, hidden)] }
    }

    pub fn forward(&self, frames: ArrayView3<T>) -> (Array3<T>, EncoderCache<T>) {
        let (h1, first) = self.layers[0].forward(frames);
        let (h2, second) = self.layers[1].forward(h1.view());
        (h2, EncoderCache { first, second })
    }

    pub fn backward(&mut self, cache: &EncoderCache<T>, dcode: ArrayView3<T>) {
        let dh1 = self.layers[1].backward(&cache.second, dcode, true).unwrap();
        self.layers[0].backward(&cache.first, dh1.view(), false);
    }
}

impl<T: Real> HasParams<T> for Encoder<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.layers.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.layers.visit_mut(prefix, out);
    }
}

/// Mirror of [`Encoder`]: two LSTM layers over the 128 code rows followed by
/// a per-step `hidden -> 64` affine map squashed by `tanh`.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub layers: Vec<Lstm<T>>,
    pub proj: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    first: LstmCache<T>,
    second: LstmCache<T>,
    hidden: Array2<T>,
    output: Array2<T>,
    batch: usize,
    steps: usize,
}

impl<T: Real> Decoder<T> {
    pub fn new(hidden: usize, frame_dim: usize, rng: &mut impl Rng) -> Self {
        let first = Lstm::new(hidden, hidden, rng);
        let second = Lstm::new(hidden, hidden, rng);
        let proj = Linear::new(hidden, frame_dim, lecun_bound(hidden), rng);
        Self { layers: vec![first, second], proj }
    }

    /// Returns frames `[batch, steps, frame_dim]` in `[-1, 1]`.
    pub fn forward(&self, codes: ArrayView3<T>) -> (Array3<T>, DecoderCache<T>) {
        let (batch, steps, _) = codes.dim();
        let (h1, first) = self.layers[0].forward(codes);
        let (h2, second) = self.layers[1].forward(h1.view());
        let hidden = h2.into_shape_with_order((batch * steps, self.proj.inputs())).unwrap();
        let mut y = self.proj.forward(hidden.t());
        Activation::Tanh.apply_inplace(&mut y);
        let frames =
            y.t().as_standard_layout().into_owned().into_shape_with_order((batch, steps, self.proj.outputs())).unwrap();
        (frames, DecoderCache { first, second, hidden, output: y, batch, steps })
    }

    /// Returns the gradient w.r.t. the input codes.
    pub fn backward(&mut self, cache: &DecoderCache<T>, dframes: ArrayView3<T>) -> Array3<T> {
        let (batch, steps) = (cache.batch, cache.steps);
        let flat = dframes
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch * steps, self.proj.outputs()))
            .unwrap();
        let mut dy = flat.t().to_owned();
        Activation::Tanh.backward_inplace(cache.output.view(), &mut dy);
        let dh = self.proj.backward(cache.hidden.t(), dy.view(), true).unwrap();
        let dh2 =
            dh.t().as_standard_layout().into_owned().into_shape_with_order((batch, steps, self.proj.inputs())).unwrap();
        let dh1 = self.layers[1].backward(&cache.second, dh2.view(), true).unwrap();
        self.layers[0].backward(&cache.first, dh1.view(), true).unwrap()
    }
}

impl<T: Real> HasParams<T> for Decoder<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.layers.visit(prefix, out);
        self.proj.visit(&join_name(prefix, "proj"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.layers.visit_mut(prefix, out);
        self.proj.visit_mut(&join_name(prefix, "proj"), out);
    }
}

/// Stacks `[steps, width]` matrices into a `[batch, steps, width]` tensor.
pub(crate) fn stack_batch<T: Real>(items: &[Array2<T>]) -> Array3<T> {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("uniform item shapes")
}
