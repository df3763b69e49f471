use std::collections::HashMap;

use ndarray::{ArrayD, Zip};

use super::{Param, Real};

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut [(String, &mut Param<T>)], max_norm: f64) -> f64 {
    let norm =
        params.iter().map(|(_, p)| p.grad.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::lit(max_norm / norm);
        for (_, p) in params.iter_mut() {
            p.grad.mapv_inplace(|g| g * scale);
        }
    }
    norm
}

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    moments: HashMap<String, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [(String, &mut Param<T>)]) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let lr = T::lit(self.learning_rate * c2.sqrt() / c1);
        let eps = T::lit(self.epsilon * c2.sqrt());
        for (name, p) in params.iter_mut() {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w -= lr * *m / (v.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new(array![1.0f64, -1.0].into_dyn());
        p.grad = array![0.5, -3.0].into_dyn();
        let mut adam = Adam::new(0.1);
        adam.step(&mut [("p".into(), &mut p)]);
        assert!((p.value[[0]] - 0.9).abs() < 1e-6);
        assert!((p.value[[1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(array![3.0f64, -2.0].into_dyn());
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            p.grad = p.value.mapv(|x| 2.0 * x);
            adam.step(&mut [("p".into(), &mut p)]);
        }
        assert!(p.value.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut a = Param::new(array![0.0f64, 0.0].into_dyn());
        a.grad = array![3.0, 0.0].into_dyn();
        let mut b = Param::new(array![0.0f64].into_dyn());
        b.grad = array![4.0].into_dyn();
        let mut params = vec![("a".to_string(), &mut a), ("b".to_string(), &mut b)];
        let before = clip_grad_norm(&mut params, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let after: f64 = params.iter().map(|(_, p)| p.grad.iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
