use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::act::sigmoid;
use super::{join_name, lecun_bound, view2, view2_mut, HasParams, Param, Real};

/// Single LSTM layer over a batch of sequences, zero initial state.
///
/// Gate columns are ordered `[input, forget, cell, output]`:
/// `z = x W_in + h W_hid + b`, `c' = f c + i g`, `h' = o tanh(c')`.
#[derive(Debug, Clone)]
pub struct Lstm<T> {
    /// `[in, 4 * hidden]`
    pub w_input: Param<T>,
    /// `[hidden, 4 * hidden]`
    pub w_hidden: Param<T>,
    /// `[4 * hidden]`
    pub bias: Param<T>,
}

/// Time-major activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    x: Array3<T>,
    gates: Array3<T>,
    cells: Array3<T>,
    tanh_cells: Array3<T>,
    hidden: Array3<T>,
}

/// Gram-Schmidt orthonormalization of the rows of a square Gaussian matrix.
fn orthogonal(n: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((n, n), || rng.sample::<f64, _>(StandardNormal));
    for i in 0..n {
        for j in 0..i {
            let d = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-d, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}

/// Below this many rows the recurrent products skip GEMM packing, whose
/// cost is fixed by the kernel size and dominates at small batch.
const SMALL_BATCH: usize = 8;

/// `out += a w`.
fn mul_add<T: Real>(a: ArrayView2<T>, w: ArrayView2<T>, mut out: ArrayViewMut2<T>) {
    if a.nrows() > SMALL_BATCH {
        general_mat_mul(T::one(), &a, &w, T::one(), &mut out);
        return;
    }
    for (a_row, mut o_row) in a.outer_iter().zip(out.outer_iter_mut()) {
        for (&v, w_row) in a_row.iter().zip(w.outer_iter()) {
            if v != T::zero() {
                o_row.scaled_add(v, &w_row);
            }
        }
    }
}

/// `out = a w^T`.
fn mul_transposed<T: Real>(a: ArrayView2<T>, w: ArrayView2<T>, mut out: ArrayViewMut2<T>) {
    if a.nrows() > SMALL_BATCH {
        general_mat_mul(T::one(), &a, &w.t(), T::zero(), &mut out);
        return;
    }
    for (a_row, mut o_row) in a.outer_iter().zip(out.outer_iter_mut()) {
        for (o, w_row) in o_row.iter_mut().zip(w.outer_iter()) {
            *o = a_row.dot(&w_row);
        }
    }
}

impl<T: Real> Lstm<T> {
    /// Fan-in uniform input kernel, orthogonal recurrent kernel per gate,
    /// zero bias except a forget-gate bias of one.
    pub fn new(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_input = Param::uniform(&[inputs, 4 * hidden], lecun_bound(inputs), rng);
        let mut rec = Array2::<f64>::zeros((hidden, 4 * hidden));
        for gate in 0..4 {
            rec.slice_mut(s![.., gate * hidden..(gate + 1) * hidden]).assign(&orthogonal(hidden, rng));
        }
        let mut bias = Param::zeros(&[4 * hidden]);
        bias.value.slice_mut(s![hidden..2 * hidden]).fill(T::one());
        Self { w_input, w_hidden: Param::new(rec.mapv(T::lit).into_dyn()), bias }
    }

    /// All-zero weights and biases.
    pub fn zeroed(inputs: usize, hidden: usize) -> Self {
        Self {
            w_input: Param::zeros(&[inputs, 4 * hidden]),
            w_hidden: Param::zeros(&[hidden, 4 * hidden]),
            bias: Param::zeros(&[4 * hidden]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w_input.value.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.value.shape()[0]
    }

    /// `x` is `[batch, steps, in]`; returns the hidden sequence
    /// `[batch, steps, hidden]`.
    pub fn forward(&self, x: ArrayView3<T>) -> (Array3<T>, LstmCache<T>) {
        let (batch, steps, inputs) = x.dim();
        assert_eq!(inputs, self.inputs(), "lstm input width");
        let hid = self.hidden();
        let xt = x.permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
        let flat = xt.view().into_shape_with_order((steps * batch, inputs)).unwrap();
        let mut proj = Array2::zeros((steps * batch, 4 * hid));
        proj += &self.bias.value.view().into_shape_with_order((1, 4 * hid)).unwrap();
        general_mat_mul(T::one(), &flat, &view2(&self.w_input.value), T::one(), &mut proj);

        let w_h = view2(&self.w_hidden.value);
        let mut gates = Array3::zeros((steps, batch, 4 * hid));
        let mut cells = Array3::zeros((steps, batch, hid));
        let mut tanh_cells = Array3::zeros((steps, batch, hid));
        let mut hidden = Array3::zeros((steps, batch, hid));
        let mut h = Array2::<T>::zeros((batch, hid));
        let mut c = Array2::<T>::zeros((batch, hid));
        for t in 0..steps {
            let mut z = proj.slice(s![t * batch..(t + 1) * batch, ..]).to_owned();
            mul_add(h.view(), w_h, z.view_mut());
            for b in 0..batch {
                for j in 0..hid {
                    let i = sigmoid(z[[b, j]]);
                    let f = sigmoid(z[[b, hid + j]]);
                    let g = z[[b, 2 * hid + j]].tanh();
                    let o = sigmoid(z[[b, 3 * hid + j]]);
                    z[[b, j]] = i;
                    z[[b, hid + j]] = f;
                    z[[b, 2 * hid + j]] = g;
                    z[[b, 3 * hid + j]] = o;
                    let cn = f * c[[b, j]] + i * g;
                    let tc = cn.tanh();
                    c[[b, j]] = cn;
                    h[[b, j]] = o * tc;
                    tanh_cells[[t, b, j]] = tc;
                }
            }
            gates.index_axis_mut(Axis(0), t).assign(&z);
            cells.index_axis_mut(Axis(0), t).assign(&c);
            hidden.index_axis_mut(Axis(0), t).assign(&h);
        }
        let out = hidden.view().permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
        (out, LstmCache { x: xt, gates, cells, tanh_cells, hidden })
    }

    /// Backpropagation through time. `dh` is `[batch, steps, hidden]`.
    pub fn backward(&mut self, cache: &LstmCache<T>, dh: ArrayView3<T>, need_dx: bool) -> Option<Array3<T>> {
        let (steps, batch, inputs) = cache.x.dim();
        let hid = self.hidden();
        let dh_t = dh.permuted_axes([1, 0, 2]);
        let mut dz = Array2::<T>::zeros((steps * batch, 4 * hid));
        let mut dh_next = Array2::<T>::zeros((batch, hid));
        let mut dc_next = Array2::<T>::zeros((batch, hid));
        let w_h = view2(&self.w_hidden.value).to_owned();
        let one = T::one();
        for t in (0..steps).rev() {
            let g = cache.gates.index_axis(Axis(0), t);
            let tcs = cache.tanh_cells.index_axis(Axis(0), t);
            let dh_step = dh_t.index_axis(Axis(0), t);
            let mut dz_t = dz.slice_mut(s![t * batch..(t + 1) * batch, ..]);
            for b in 0..batch {
                for j in 0..hid {
                    let i = g[[b, j]];
                    let f = g[[b, hid + j]];
                    let gg = g[[b, 2 * hid + j]];
                    let o = g[[b, 3 * hid + j]];
                    let tc = tcs[[b, j]];
                    let c_prev = if t > 0 { cache.cells[[t - 1, b, j]] } else { T::zero() };
                    let dhv = dh_step[[b, j]] + dh_next[[b, j]];
                    let d_o = dhv * tc;
                    let dc = dhv * o * (one - tc * tc) + dc_next[[b, j]];
                    dz_t[[b, j]] = dc * gg * i * (one - i);
                    dz_t[[b, hid + j]] = dc * c_prev * f * (one - f);
                    dz_t[[b, 2 * hid + j]] = dc * i * (one - gg * gg);
                    dz_t[[b, 3 * hid + j]] = d_o * o * (one - o);
                    dc_next[[b, j]] = dc * f;
                }
            }
            mul_transposed(dz_t.view(), w_h.view(), dh_next.view_mut());
        }

        let x_flat = cache.x.view().into_shape_with_order((steps * batch, inputs)).unwrap();
        general_mat_mul(one, &x_flat.t(), &dz, one, &mut view2_mut(&mut self.w_input.grad));
        let mut h_prev = Array2::<T>::zeros((steps * batch, hid));
        if steps > 1 {
            let hidden = cache.hidden.view().into_shape_with_order((steps * batch, hid)).unwrap();
            h_prev.slice_mut(s![batch.., ..]).assign(&hidden.slice(s![..(steps - 1) * batch, ..]));
        }
        general_mat_mul(one, &h_prev.t(), &dz, one, &mut view2_mut(&mut self.w_hidden.grad));
        self.bias.grad += &dz.sum_axis(Axis(0)).into_dyn();

        need_dx.then(|| {
            let dx = dz.dot(&view2(&self.w_input.value).t());
            dx.into_shape_with_order((steps, batch, inputs))
                .unwrap()
                .permuted_axes([1, 0, 2])
                .as_standard_layout()
                .into_owned()
        })
    }
}

impl<T: Real> HasParams<T> for Lstm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join_name(prefix, "w_input"), &self.w_input));
        out.push((join_name(prefix, "w_hidden"), &self.w_hidden));
        out.push((join_name(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join_name(prefix, "w_input"), &mut self.w_input));
        out.push((join_name(prefix, "w_hidden"), &mut self.w_hidden));
        out.push((join_name(prefix, "bias"), &mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar per-step reference recurrence.
    fn reference(l: &Lstm<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (batch, steps, inputs) = x.dim();
        let hid = l.hidden();
        let mut out = Array3::zeros((batch, steps, hid));
        for b in 0..batch {
            let mut h = vec![0.0; hid];
            let mut c = vec![0.0; hid];
            for t in 0..steps {
                let mut z = vec![0.0; 4 * hid];
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk = l.bias.value[[k]];
                    for i in 0..inputs {
                        *zk += x[[b, t, i]] * l.w_input.value[[i, k]];
                    }
                    for (j, hj) in h.iter().enumerate() {
                        *zk += hj * l.w_hidden.value[[j, k]];
                    }
                }
                let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
                for j in 0..hid {
                    let (i, f, g, o) = (sig(z[j]), sig(z[hid + j]), z[2 * hid + j].tanh(), sig(z[3 * hid + j]));
                    c[j] = f * c[j] + i * g;
                    h[j] = o * c[j].tanh();
                    out[[b, t, j]] = h[j];
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Lstm::<f64>::new(3, 4, &mut rng);
        let x = Array3::from_shape_fn((2, 5, 3), |_| rng.gen_range(-1.0..1.0));
        let (y, _) = l.forward(x.view());
        let r = reference(&l, &x);
        for (a, b) in y.iter().zip(r.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_and_large_batches_agree_with_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Lstm::<f64>::new(3, 4, &mut rng);
        for batch in [1, SMALL_BATCH, SMALL_BATCH + 3] {
            let x = Array3::from_shape_fn((batch, 4, 3), |_| rng.gen_range(-1.0..1.0));
            let (y, _) = l.forward(x.view());
            let r = reference(&l, &x);
            assert!(y.iter().zip(r.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let l = Lstm::<f64>::zeroed(3, 4);
        let x = Array3::zeros((1, 6, 3));
        let (y, _) = l.forward(x.view());
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_kernel_blocks_are_orthogonal() {
        let l = Lstm::<f64>::new(2, 6, &mut ChaCha8Rng::seed_from_u64(4));
        let w = view2(&l.w_hidden.value);
        for gate in 0..4 {
            let q = w.slice(s![.., gate * 6..(gate + 1) * 6]);
            let qtq = q.dot(&q.t());
            for i in 0..6 {
                for j in 0..6 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((qtq[[i, j]] - e).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for batch in [2, SMALL_BATCH + 2] {
            check_backward(batch);
        }
    }

    fn check_backward(batch: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut l = Lstm::<f64>::new(3, 4, &mut rng);
        let x = Array3::from_shape_fn((batch, 5, 3), |_| rng.gen_range(-1.0..1.0));
        let proj = Array3::from_shape_fn((batch, 5, 4), |_| rng.gen_range(-1.0..1.0));
        let loss = |l: &Lstm<f64>, x: &Array3<f64>| (l.forward(x.view()).0 * &proj).sum();
        let (_, cache) = l.forward(x.view());
        let dx = l.backward(&cache, proj.view(), true).unwrap();
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&l, &xp) - loss(&l, &xm)) / (2.0 * eps);
            assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
        let snapshot = l.clone();
        for (name, p) in snapshot.named_params() {
            for idx in 0..p.len() {
                let g = p.grad.as_slice().unwrap()[idx];
                let bump = |delta: f64| {
                    let mut m = snapshot.clone();
                    for (n, q) in m.named_params_mut() {
                        if n == name {
                            q.value.as_slice_mut().unwrap()[idx] += delta;
                        }
                    }
                    loss(&m, &x)
                };
                let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                assert!((fd - g).abs() < 1e-8, "{name}[{idx}]: {fd} vs {g}");
            }
        }
    }
}
