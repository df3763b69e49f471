use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::nn::{he_bound, join_name, Activation, ConvStack, ConvStackCache, HasParams, Linear, Param, Real};

/// Hides a `[1, 128x128]` code inside a `[3, 128x128]` cover.
///
/// Code and cover go through separate conv stacks, are concatenated along
/// channels, mixed per pixel by a channel-wise fully connected layer and
/// decoded to RGB by a final conv stack ending in a sigmoid.
#[derive(Debug, Clone)]
pub struct Embedder<T> {
    pub code_stack: ConvStack<T>,
    pub cover_stack: ConvStack<T>,
    pub fc: Linear<T>,
    pub out_stack: ConvStack<T>,
}

#[derive(Debug, Clone)]
pub struct EmbedCache<T> {
    pub code: ConvStackCache<T>,
    pub cover: ConvStackCache<T>,
    pub concat: Array2<T>,
    pub fc_out: Array2<T>,
    pub out: ConvStackCache<T>,
}

impl<T> EmbedCache<T> {
    pub fn marked(&self) -> &Array2<T> {
        self.out.output()
    }
}

impl<T: Real> Embedder<T> {
    pub fn new(input_filters: &[usize], fc_units: usize, output_filters: &[usize], rng: &mut impl Rng) -> Self {
        let code_stack = ConvStack::new(1, input_filters, Activation::Relu, rng);
        let cover_stack = ConvStack::new(3, input_filters, Activation::Relu, rng);
        let concat = 2 * code_stack.outputs();
        let fc = Linear::new(concat, fc_units, he_bound(concat), rng);
        let out_stack = ConvStack::new(fc_units, output_filters, Activation::Sigmoid, rng);
        Self { code_stack, cover_stack, fc, out_stack }
    }

    pub fn forward(&self, code: Array2<T>, cover: Array2<T>, side: usize) -> EmbedCache<T> {
        let code = self.code_stack.forward(code, side, side);
        let cover = self.cover_stack.forward(cover, side, side);
        let concat = concatenate(Axis(0), &[code.output().view(), cover.output().view()]).unwrap();
        let mut fc_out = self.fc.forward(concat.view());
        Activation::Relu.apply_inplace(&mut fc_out);
        let out = self.out_stack.forward(fc_out.clone(), side, side);
        EmbedCache { code, cover, concat, fc_out, out }
    }

    /// Returns the gradient w.r.t. the input code.
    pub fn backward(&mut self, cache: &EmbedCache<T>, dmarked: Array2<T>, side: usize) -> Array2<T> {
        let mut dfc = self.out_stack.backward(&cache.out, side, side, dmarked, true).unwrap();
        Activation::Relu.backward_inplace(cache.fc_out.view(), &mut dfc);
        let dconcat = self.fc.backward(cache.concat.view(), dfc.view(), true).unwrap();
        let split = self.code_stack.outputs();
        let dcode = dconcat.slice(s![..split, ..]).to_owned();
        let dcover = dconcat.slice(s![split.., ..]).to_owned();
        self.cover_stack.backward(&cache.cover, side, side, dcover, false);
        self.code_stack.backward(&cache.code, side, side, dcode, true).unwrap()
    }
}

impl<T: Real> HasParams<T> for Embedder<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.code_stack.visit(&join_name(prefix, "code_stack"), out);
        self.cover_stack.visit(&join_name(prefix, "cover_stack"), out);
        self.fc.visit(&join_name(prefix, "fc"), out);
        self.out_stack.visit(&join_name(prefix, "out_stack"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.code_stack.visit_mut(&join_name(prefix, "code_stack"), out);
        self.cover_stack.visit_mut(&join_name(prefix, "cover_stack"), out);
        self.fc.visit_mut(&join_name(prefix, "fc"), out);
        self.out_stack.visit_mut(&join_name(prefix, "out_stack"), out);
    }
}

/// Blind `[3, 128x128] -> [1, 128x128]` code recovery.
///
/// Input stack with a skip over its middle two blocks, a channel-wise fully
/// connected layer, then an output stack with a skip over its middle blocks
/// and a linear single-filter last layer.
#[derive(Debug, Clone)]
pub struct Extractor<T> {
    pub in_stack: ConvStack<T>,
    pub fc: Linear<T>,
    pub out_stack: ConvStack<T>,
}

#[derive(Debug, Clone)]
pub struct ExtractCache<T> {
    pub input: ConvStackCache<T>,
    pub fc_out: Array2<T>,
    pub out: ConvStackCache<T>,
}

impl<T> ExtractCache<T> {
    pub fn code(&self) -> &Array2<T> {
        self.out.output()
    }
}

impl<T: Real> Extractor<T> {
    pub fn new(input_filters: &[usize], fc_units: usize, output_filters: &[usize], rng: &mut impl Rng) -> Self {
        let in_stack = ConvStack::new(3, input_filters, Activation::Relu, rng).with_skip(0, 2, rng);
        let cin = in_stack.outputs();
        let fc = Linear::new(cin, fc_units, he_bound(cin), rng);
        let out_stack = ConvStack::new(fc_units, output_filters, Activation::Identity, rng).with_skip(1, 3, rng);
        Self { in_stack, fc, out_stack }
    }

    pub fn forward(&self, marked: Array2<T>, side: usize) -> ExtractCache<T> {
        let input = self.in_stack.forward(marked, side, side);
        let mut fc_out = self.fc.forward(input.output().view());
        Activation::Relu.apply_inplace(&mut fc_out);
        let out = self.out_stack.forward(fc_out.clone(), side, side);
        ExtractCache { input, fc_out, out }
    }

    /// Returns the gradient w.r.t. the marked image.
    pub fn backward(&mut self, cache: &ExtractCache<T>, dcode: Array2<T>, side: usize) -> Array2<T> {
        let mut dfc = self.out_stack.backward(&cache.out, side, side, dcode, true).unwrap();
        Activation::Relu.backward_inplace(cache.fc_out.view(), &mut dfc);
        let din = self.fc.backward(cache.input.output().view(), dfc.view(), true).unwrap();
        self.in_stack.backward(&cache.input, side, side, din, true).unwrap()
    }
}

impl<T: Real> HasParams<T> for Extractor<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.in_stack.visit(&join_name(prefix, "in_stack"), out);
        self.fc.visit(&join_name(prefix, "fc"), out);
        self.out_stack.visit(&join_name(prefix, "out_stack"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.in_stack.visit_mut(&join_name(prefix, "in_stack"), out);
        self.fc.visit_mut(&join_name(prefix, "fc"), out);
        self.out_stack.visit_mut(&join_name(prefix, "out_stack"), out);
    }
}

/// Channel-wise fully connected layer on an `H x W x C` tensor: one shared
/// affine map applied to the channel vector at every position.
pub fn channel_fc<T: Real>(x: ndarray::ArrayView3<T>, layer: &Linear<T>) -> crate::Result<ndarray::Array3<T>> {
    let (h, w, c) = x.dim();
    if c != layer.inputs() {
        return Err(crate::Error::InvalidInput(format!("channel_fc expects {} channels, got {c}", layer.inputs())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::InvalidInput("channel_fc input is not finite".into()));
    }
    let flat = x.as_standard_layout().into_owned().into_shape_with_order((h * w, c)).unwrap();
    let y = layer.forward(flat.t());
    Ok(y.t().as_standard_layout().into_owned().into_shape_with_order((h, w, layer.outputs())).unwrap())
}

pub(crate) fn feature_map<T: Real>(x: ArrayView2<T>) -> Array2<T> {
    let len = x.len();
    x.as_standard_layout().into_owned().into_shape_with_order((1, len)).unwrap()
}
