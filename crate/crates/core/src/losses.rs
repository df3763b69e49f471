//! Training losses and evaluation metrics.

use ndarray::{s, Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::Image;

/// Test-set watermark RMSE reported for the full-scale model.
pub const REFERENCE_TEST_RMSE: f64 = 0.009452;
/// Validation-set watermark RMSE reported for the full-scale model.
pub const REFERENCE_VAL_RMSE: f64 = 0.010664;
/// Validation and test marked-image SSIM reported for the full-scale model.
pub const REFERENCE_SSIM: [f64; 2] = [0.988365, 0.988230];
/// Validation and test similarity accuracy reported for the full-scale model.
pub const REFERENCE_SIMILARITY_ACCURACY: [f64; 2] = [0.9933, 0.9898];
/// RMSE of the handcrafted audio-in-image baseline, for comparison only.
pub const HANDCRAFTED_BASELINE_RMSE: f64 = 0.022325;

/// Probability clamp used by [`bce_loss`].
pub const BCE_EPSILON: f64 = 1e-7;

/// Weights of the extraction and fidelity terms of the watermarking loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0 }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda1) || !ok(self.lambda2) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(Error::invalid("loss weights cannot both be zero"));
        }
        Ok(())
    }
}

/// Mean of squared differences.
pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("mse of empty inputs"));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Autoencoder reconstruction loss.
pub fn pretrain_loss(w: &[f32], w_bar: &[f32]) -> Result<f64> {
    mse(w, w_bar)
}

/// `lambda1 * MSE(w, w') + lambda2 * MSE(c, m)`.
pub fn wm_loss(w: &[f32], w_prime: &[f32], c: &[f32], m: &[f32], weights: LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.lambda1 * mse(w, w_prime)? + weights.lambda2 * mse(c, m)?)
}

/// Binary cross-entropy, negated so that minimizing it fits the labels.
pub fn bce_loss(label: bool, p: f64) -> f64 {
    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `d bce / d p` of the clamped loss (zero where the clamp is active).
pub fn bce_grad(label: bool, p: f64) -> f64 {
    if !(BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&p) {
        return 0.0;
    }
    if label {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

pub fn rmse(a: &[f32], b: &[f32]) -> Result<f64> {
    mse(a, b).map(f64::sqrt)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable Gaussian filtering, "valid" region only.
fn filter_valid(x: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..SSIM_WINDOW).map(|t| k[t] * x[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..SSIM_WINDOW).map(|t| k[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

fn ssim_channel(a: ArrayView2<f64>, b: ArrayView2<f64>, range: f64) -> f64 {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let mu_a = filter_valid(&a.to_owned(), &k);
    let mu_b = filter_valid(&b.to_owned(), &k);
    let aa = filter_valid(&(&a * &a), &k);
    let bb = filter_valid(&(&b * &b), &k);
    let ab = filter_valid(&(&a * &b), &k);
    let mut total = 0.0;
    for ((((&ma, &mb), &saa), &sbb), &sab) in mu_a.iter().zip(&mu_b).zip(&aa).zip(&bb).zip(&ab) {
        let var_a = saa - ma * ma;
        let var_b = sbb - mb * mb;
        let cov = sab - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Mean SSIM of two `[height, width, channels]` tensors with dynamic range
/// 1, averaged over channels.
pub fn ssim_arrays(a: ArrayView3<f32>, b: ArrayView3<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w, c) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW || c == 0 {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let mut sum = 0.0;
    for ch in 0..c {
        let pa = a.slice(s![.., .., ch]).mapv(f64::from);
        let pb = b.slice(s![.., .., ch]).mapv(f64::from);
        sum += ssim_channel(pa.view(), pb.view(), 1.0);
    }
    Ok(sum / c as f64)
}

pub fn ssim(a: &Image, b: &Image) -> f64 {
    ssim_arrays(a.pixels().view(), b.pixels().view()).expect("images share a fixed shape")
}
