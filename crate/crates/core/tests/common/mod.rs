//! Independent reference computations and fixtures shared by integration tests.

#![allow(dead_code)]

use std::path::Path;

use audiowm::dataset::{build_manifest, PairManifest, SplitSizes};
use audiowm::media::{AudioClip, Image, AUDIO_LEN};
use audiowm::network::WmConfig;
use audiowm::nn::HasParams;
use audiowm::similarity::SimilarityConfig;
use audiowm::synth::{write_audio_corpus, write_image_corpus, SynthConfig};
use ndarray::Array3;
use rand::Rng;

/// Mean squared error by explicit double loop over rows of `width`.
pub fn oracle_mse(a: &[f32], b: &[f32], width: usize) -> f64 {
    assert_eq!(a.len(), b.len());
    let rows = a.len() / width;
    let mut total = 0.0f64;
    for r in 0..rows {
        let mut row = 0.0f64;
        for c in 0..width {
            let d = f64::from(a[r * width + c]) - f64::from(b[r * width + c]);
            row += d * d;
        }
        total += row;
    }
    total / a.len() as f64
}

pub fn oracle_mse_f64(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += (x - y) * (x - y);
    }
    total / a.len() as f64
}

pub fn oracle_wm_loss(w: &[f32], w_prime: &[f32], c: &[f32], m: &[f32], l1: f64, l2: f64) -> f64 {
    l1 * oracle_mse(w, w_prime, 64) + l2 * oracle_mse(c, m, 3)
}

/// Textbook cross-entropy for a single probability.
pub fn oracle_bce(y: f64, p: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn random_clip(rng: &mut impl Rng) -> AudioClip {
    AudioClip::new((0..AUDIO_LEN).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).unwrap()
}

pub fn random_image(rng: &mut impl Rng) -> Image {
    Image::new(Array3::from_shape_simple_fn((128, 128, 3), || rng.gen_range(0.0f32..=1.0))).unwrap()
}

/// Canonical recurrent parts with thin convolutional stacks.
pub fn narrow_wm(seed: u64) -> WmConfig {
    WmConfig {
        embed_input_filters: vec![2, 2, 3, 2],
        fc_units: 4,
        embed_output_filters: vec![3, 2, 2, 2, 2, 2, 3],
        extract_input_filters: vec![2, 3, 2, 2],
        extract_output_filters: vec![3, 2, 3, 2, 2, 2, 1],
        seed,
        ..WmConfig::default()
    }
}

pub fn narrow_similarity(seed: u64) -> SimilarityConfig {
    SimilarityConfig { filters: vec![2, 3, 2, 4], head_units: 6, seed }
}

/// Synthetic corpus plus manifest under `root`.
pub fn synthetic_manifest(root: &Path, synth: &SynthConfig, sizes: SplitSizes, seed: u64) -> PairManifest {
    write_audio_corpus(&root.join("audio"), synth).unwrap();
    write_image_corpus(&root.join("images"), synth).unwrap();
    build_manifest(&root.join("images"), &root.join("audio"), sizes, seed).unwrap()
}

/// Every parameter value, in visiting order.
pub fn flat_values<M: HasParams<f32>>(m: &M) -> Vec<f32> {
    m.named_params().iter().flat_map(|(_, p)| p.value.iter().copied()).collect()
}

/// Outcome of one central-difference probe.
#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// Relative error with an absolute floor for near-zero gradients.
    pub fn error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Picks `ceil(share * len)` distinct indices of every tensor, at least one each.
pub fn stratified_sample(sizes: &[(String, usize)], share: f64, rng: &mut impl Rng) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (name, len) in sizes {
        let k = ((share * *len as f64).ceil() as usize).clamp(1, *len);
        for i in rand::seq::index::sample(rng, *len, k) {
            out.push((name.clone(), i));
        }
    }
    out
}
