use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Ix3};
use rand::Rng;

use super::{he_bound, join_name, Activation, HasParams, Linear, Param, Real};

/// 3x3 convolution, stride 1, zero "same" padding.
///
/// The kernel is stored as `[9, out, in]`, one `[out, in]` mixing matrix per
/// spatial offset `(ky, kx)` in row-major order, so
/// `y[o, i, j] = b[o] + sum_k W[k, o, :] . x[:, i + ky - 1, j + kx - 1]`.
#[derive(Debug, Clone)]
pub struct Conv3x3<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

fn offset(k: usize) -> (isize, isize) {
    ((k / 3) as isize - 1, (k % 3) as isize - 1)
}

/// `dst[c, i, j] = src[c, i + dy, j + dx]`, zero outside the image.
fn shift_into<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, dy: isize, dx: isize) {
    let hw = h * w;
    let j0 = (-dx).max(0) as usize;
    let j1 = (w as isize - dx).min(w as isize) as usize;
    for (s, d) in src.chunks_exact(hw).zip(dst.chunks_exact_mut(hw)) {
        for i in 0..h {
            let row = &mut d[i * w..(i + 1) * w];
            let si = i as isize + dy;
            if si < 0 || si >= h as isize {
                row.fill(T::zero());
                continue;
            }
            let srow = &s[si as usize * w..(si as usize + 1) * w];
            row[..j0].fill(T::zero());
            row[j1..].fill(T::zero());
            let sj0 = (j0 as isize + dx) as usize;
            row[j0..j1].copy_from_slice(&srow[sj0..sj0 + (j1 - j0)]);
        }
    }
}

/// Adjoint of [`shift_into`]: `dst[c, i + dy, j + dx] += src[c, i, j]`.
fn shift_add_adjoint<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, dy: isize, dx: isize) {
    let hw = h * w;
    let j0 = (-dx).max(0) as usize;
    let j1 = (w as isize - dx).min(w as isize) as usize;
    for (s, d) in src.chunks_exact(hw).zip(dst.chunks_exact_mut(hw)) {
        for i in 0..h {
            let di = i as isize + dy;
            if di < 0 || di >= h as isize {
                continue;
            }
            let srow = &s[i * w + j0..i * w + j1];
            let dj0 = (j0 as isize + dx) as usize;
            let drow = &mut d[di as usize * w + dj0..di as usize * w + dj0 + (j1 - j0)];
            for (a, &b) in drow.iter_mut().zip(srow) {
                *a += b;
            }
        }
    }
}

/// Channel products up to this size convolve directly instead of through
/// shifted copies and GEMM, whose setup dominates for thin layers.
const DIRECT_LIMIT: usize = 64;

/// `y[o] += sum_k W[k, o, c] * shift_k(x[c])`, reading shifted rows in place.
fn direct_accumulate<T: Real>(kernel: ArrayView3<T>, x: &[T], y: &mut [T], h: usize, w: usize) {
    let (_, outputs, inputs) = kernel.dim();
    let hw = h * w;
    for k in 0..9 {
        let (dy, dx) = offset(k);
        let j0 = (-dx).max(0) as usize;
        let j1 = (w as isize - dx).min(w as isize) as usize;
        let sj0 = (j0 as isize + dx) as usize;
        let i0 = (-dy).max(0) as usize;
        let i1 = (h as isize - dy).min(h as isize) as usize;
        for o in 0..outputs {
            let yo = &mut y[o * hw..(o + 1) * hw];
            for c in 0..inputs {
                let wv = kernel[[k, o, c]];
                let xc = &x[c * hw..(c + 1) * hw];
                for i in i0..i1 {
                    let si = (i as isize + dy) as usize;
                    let src = &xc[si * w + sj0..si * w + sj0 + (j1 - j0)];
                    let dst = &mut yo[i * w + j0..i * w + j1];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += wv * v;
                    }
                }
            }
        }
    }
}

impl<T: Real> Conv3x3<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::uniform(&[9, outputs, inputs], he_bound(inputs * 9), rng),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn kernel(&self) -> ArrayView3<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix3>().unwrap()
    }

    fn kernel_grad(&mut self) -> ArrayViewMut3<'_, T> {
        self.weight.grad.view_mut().into_dimensionality::<Ix3>().unwrap()
    }

    /// `x` is `[in, h * w]`; returns `[out, h * w]`.
    pub fn forward(&self, x: ArrayView2<T>, h: usize, w: usize) -> Array2<T> {
        assert_eq!(x.dim(), (self.inputs(), h * w), "conv input shape");
        let x = x.as_standard_layout();
        let kernel = self.kernel();
        let bias = self.bias.value.view().into_shape_with_order((self.outputs(), 1)).unwrap();
        let mut y = Array2::zeros((self.outputs(), h * w));
        y += &bias;
        if self.inputs() * self.outputs() <= DIRECT_LIMIT {
            direct_accumulate(kernel, x.as_slice().unwrap(), y.as_slice_mut().unwrap(), h, w);
            return y;
        }
        let mut buf = Array2::zeros(x.raw_dim());
        for k in 0..9 {
            let (dy, dx) = offset(k);
            let wk = kernel.index_axis(Axis(0), k);
            if dy == 0 && dx == 0 {
                general_mat_mul(T::one(), &wk, &x, T::one(), &mut y);
            } else {
                shift_into(x.as_slice().unwrap(), buf.as_slice_mut().unwrap(), h, w, dy, dx);
                general_mat_mul(T::one(), &wk, &buf, T::one(), &mut y);
            }
        }
        y
    }

    /// Accumulates parameter gradients given the forward input `x` and the
    /// output gradient `dy`; returns the input gradient when asked.
    pub fn backward(
        &mut self,
        x: ArrayView2<T>,
        h: usize,
        w: usize,
        dy: ArrayView2<T>,
        need_dx: bool,
    ) -> Option<Array2<T>> {
        let x = x.as_standard_layout();
        let dy = dy.as_standard_layout();
        self.bias.grad += &dy.sum_axis(Axis(1)).into_dyn();
        let mut buf = Array2::zeros(x.raw_dim());
        let mut dx = need_dx.then(|| Array2::zeros(x.raw_dim()));
        let mut dbuf = Array2::zeros(x.raw_dim());
        for k in 0..9 {
            let (oy, ox) = offset(k);
            let shifted = if oy == 0 && ox == 0 {
                x.view()
            } else {
                shift_into(x.as_slice().unwrap(), buf.as_slice_mut().unwrap(), h, w, oy, ox);
                buf.view()
            };
            {
                let mut gk = self.kernel_grad();
                let mut gk = gk.index_axis_mut(Axis(0), k);
                general_mat_mul(T::one(), &dy, &shifted.t(), T::one(), &mut gk);
            }
            if let Some(dx) = dx.as_mut() {
                let kernel = self.kernel();
                let wk = kernel.index_axis(Axis(0), k);
                if oy == 0 && ox == 0 {
                    general_mat_mul(T::one(), &wk.t(), &dy, T::one(), dx);
                } else {
                    general_mat_mul(T::one(), &wk.t(), &dy, T::zero(), &mut dbuf);
                    shift_add_adjoint(dbuf.as_slice().unwrap(), dx.as_slice_mut().unwrap(), h, w, oy, ox);
                }
            }
        }
        dx
    }
}

impl<T: Real> HasParams<T> for Conv3x3<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join_name(prefix, "weight"), &self.weight));
        out.push((join_name(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join_name(prefix, "weight"), &mut self.weight));
        out.push((join_name(prefix, "bias"), &mut self.bias));
    }
}

/// Additive skip connection inside a [`ConvStack`]: the output of block
/// `from` (optionally projected by a 1x1 map) is added to the activated
/// output of block `to`.
#[derive(Debug, Clone)]
pub struct Skip<T> {
    pub from: usize,
    pub to: usize,
    pub proj: Option<Linear<T>>,
}

/// Sequence of 3x3 conv blocks, ReLU after each except the last, which uses
/// `final_activation`.
#[derive(Debug, Clone)]
pub struct ConvStack<T> {
    pub layers: Vec<Conv3x3<T>>,
    pub final_activation: Activation,
    pub skip: Option<Skip<T>>,
}

#[derive(Debug, Clone)]
pub struct ConvStackCache<T> {
    pub input: Array2<T>,
    /// Output of every block, after any skip addition.
    pub outs: Vec<Array2<T>>,
    /// Activated main-branch output of the skip target, before the addition.
    pub skip_main: Option<Array2<T>>,
}

impl<T> ConvStackCache<T> {
    pub fn output(&self) -> &Array2<T> {
        self.outs.last().expect("non-empty stack")
    }
}

impl<T: Real> ConvStack<T> {
    /// Builds `in -> filters[0] -> ... -> filters[n-1]`.
    pub fn new(inputs: usize, filters: &[usize], final_activation: Activation, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(filters.len());
        let mut cin = inputs;
        for &f in filters {
            layers.push(Conv3x3::new(cin, f, rng));
            cin = f;
        }
        Self { layers, final_activation, skip: None }
    }

    /// Adds a skip from block `from` to block `to`, with a 1x1 projection
    /// when their channel counts differ.
    pub fn with_skip(mut self, from: usize, to: usize, rng: &mut impl Rng) -> Self {
        assert!(from < to && to < self.layers.len(), "skip must jump forward");
        let cin = self.layers[from].outputs();
        let cout = self.layers[to].outputs();
        let proj = (cin != cout).then(|| Linear::new(cin, cout, super::lecun_bound(cin), rng));
        self.skip = Some(Skip { from, to, proj });
        self
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty stack").outputs()
    }

    fn activation(&self, k: usize) -> Activation {
        if k + 1 == self.layers.len() {
            self.final_activation
        } else {
            Activation::Relu
        }
    }

    pub fn forward(&self, x: Array2<T>, h: usize, w: usize) -> ConvStackCache<T> {
        let mut outs: Vec<Array2<T>> = Vec::with_capacity(self.layers.len());
        let mut skip_main = None;
        for (k, layer) in self.layers.iter().enumerate() {
            let input = if k == 0 { x.view() } else { outs[k - 1].view() };
            let mut z = layer.forward(input, h, w);
            self.activation(k).apply_inplace(&mut z);
            if let Some(skip) = self.skip.as_ref().filter(|s| s.to == k) {
                skip_main = Some(z.clone());
                let source = outs[skip.from].view();
                match &skip.proj {
                    Some(p) => z += &p.forward(source),
                    None => z += &source,
                }
            }
            outs.push(z);
        }
        ConvStackCache { input: x, outs, skip_main }
    }

    pub fn backward(
        &mut self,
        cache: &ConvStackCache<T>,
        h: usize,
        w: usize,
        dout: Array2<T>,
        need_dx: bool,
    ) -> Option<Array2<T>> {
        let n = self.layers.len();
        let mut g = dout;
        let mut pending: Option<Array2<T>> = None;
        for k in (0..n).rev() {
            let act = self.activation(k);
            let skip_from = self.skip.as_ref().map(|s| s.from);
            if skip_from == Some(k) {
                if let Some(p) = pending.take() {
                    g += &p;
                }
            }
            let mut activated = cache.outs[k].view();
            if let Some(skip) = self.skip.as_mut().filter(|s| s.to == k) {
                let source = cache.outs[skip.from].view();
                pending = Some(match skip.proj.as_mut() {
                    Some(p) => p.backward(source, g.view(), true).unwrap(),
                    None => g.clone(),
                });
                activated = cache.skip_main.as_ref().expect("skip cache").view();
            }
            act.backward_inplace(activated, &mut g);
            let input = if k == 0 { cache.input.view() } else { cache.outs[k - 1].view() };
            g = self.layers[k].backward(input, h, w, g.view(), k > 0 || need_dx)?;
        }
        Some(g)
    }
}

impl<T: Real> HasParams<T> for ConvStack<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.layers.visit(prefix, out);
        if let Some(skip) = &self.skip {
            skip.proj.visit(&join_name(prefix, "skip"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.layers.visit_mut(prefix, out);
        if let Some(skip) = &mut self.skip {
            skip.proj.visit_mut(&join_name(prefix, "skip"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(conv: &Conv3x3<f64>, x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
        let (cout, cin) = (conv.outputs(), conv.inputs());
        let wt = conv.kernel();
        let mut y = Array2::zeros((cout, h * w));
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = conv.bias.value[[o]];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let si = i as isize + ky as isize - 1;
                            let sj = j as isize + kx as isize - 1;
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                acc += wt[[ky * 3 + kx, o, c]] * x[[c, si as usize * w + sj as usize]];
                            }
                        }
                    }
                    y[[o, i * w + j]] = acc;
                }
            }
        }
        y
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Thin layers take the direct path, wider ones the GEMM path.
        for (cin, cout) in [(3, 4), (9, 8)] {
            let mut conv = Conv3x3::<f64>::new(cin, cout, &mut rng);
            conv.bias.value.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            let (h, w) = (5, 7);
            let x = random(&mut rng, cin, h * w);
            let fast = conv.forward(x.view(), h, w);
            let slow = naive_conv(&conv, &x, h, w);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (4, 6);
        let mut conv = Conv3x3::<f64>::new(2, 3, &mut rng);
        let x = random(&mut rng, 2, h * w);
        let proj = random(&mut rng, 3, h * w);
        let loss = |c: &Conv3x3<f64>, x: &Array2<f64>| (c.forward(x.view(), h, w) * &proj).sum();
        let dx = conv.backward(x.view(), h, w, proj.view(), true).unwrap();
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
        for idx in 0..conv.weight.len() {
            let g = conv.weight.grad.as_slice().unwrap()[idx];
            let mut cp = conv.clone();
            cp.weight.value.as_slice_mut().unwrap()[idx] += eps;
            let mut cm = conv.clone();
            cm.weight.value.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((fd - g).abs() < 1e-7, "weight {idx}: {fd} vs {g}");
        }
        let db: f64 = proj.row(1).sum();
        assert!((conv.bias.grad[[1]] - db).abs() < 1e-12);
    }

    #[test]
    fn stack_with_skip_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w) = (4, 4);
        let mut stack =
            ConvStack::<f64>::new(2, &[3, 4, 5, 2], Activation::Sigmoid, &mut rng).with_skip(0, 2, &mut rng);
        let x = random(&mut rng, 2, h * w);
        let proj = random(&mut rng, 2, h * w);
        let loss = |s: &ConvStack<f64>, x: &Array2<f64>| (s.forward(x.clone(), h, w).output() * &proj).sum();
        let cache = stack.forward(x.clone(), h, w);
        let dx = stack.backward(&cache, h, w, proj.clone(), true).unwrap();
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&stack, &xp) - loss(&stack, &xm)) / (2.0 * eps);
            assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
        let names: Vec<String> = stack.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"skip.weight".to_string()));
        let snapshot = stack.clone();
        for (name, p) in snapshot.named_params() {
            for idx in [0, p.len() / 2] {
                let g = p.grad.as_slice().unwrap()[idx];
                let bump = |delta: f64| {
                    let mut s = snapshot.clone();
                    for (n, q) in s.named_params_mut() {
                        if n == name {
                            q.value.as_slice_mut().unwrap()[idx] += delta;
                        }
                    }
                    loss(&s, &x)
                };
                let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                assert!((fd - g).abs() < 1e-6, "{name}[{idx}]: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn zeroed_skip_target_passes_projection_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (3, 3);
        let mut stack = ConvStack::<f64>::new(1, &[2, 3, 4], Activation::Identity, &mut rng).with_skip(0, 2, &mut rng);
        stack.layers[2].weight.value.fill(0.0);
        stack.layers[2].bias.value.fill(0.0);
        let x = random(&mut rng, 1, h * w);
        let cache = stack.forward(x, h, w);
        let expected = stack.skip.as_ref().unwrap().proj.as_ref().unwrap().forward(cache.outs[0].view());
        assert_eq!(cache.output(), &expected);
    }
}
