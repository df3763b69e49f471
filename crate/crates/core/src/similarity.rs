//! Siamese verifier scoring whether two audio clips carry the same content.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::BCE_EPSILON;
use crate::media::{reshape_audio, AudioClip};
use crate::network::{stack_batch, Encoder, WmNetwork, CODE_SIDE};
use crate::nn::{
    join_name, lecun_bound, max_pool2, max_pool2_backward, Activation, Conv3x3, HasParams, Linear, Param, Real,
};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    /// Filters of the conv + pool blocks; each block halves the side.
    pub filters: Vec<usize>,
    pub head_units: usize,
    pub seed: u64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self { filters: vec![32, 64, 128, 256], head_units: 4096, seed: 0 }
    }
}

impl SimilarityConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) || self.head_units == 0 {
            return Err(Error::config("similarity filters and head units must be positive"));
        }
        if !CODE_SIDE.is_multiple_of(1 << self.filters.len()) {
            return Err(Error::config(format!(
                "{} pooling blocks do not divide a {CODE_SIDE}-pixel side",
                self.filters.len()
            )));
        }
        Ok(())
    }

    /// Side of the final feature map.
    pub fn feature_side(&self) -> usize {
        CODE_SIDE >> self.filters.len()
    }

    /// Length of the flattened twin-branch output.
    pub fn flat_len(&self) -> usize {
        self.feature_side().pow(2) * self.filters.last().copied().unwrap_or(0)
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.filters == other.filters && self.head_units == other.head_units
    }
}

/// Probability that two clips are the same, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::invalid(format!("similarity score {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `true` iff `score >= threshold`.
pub fn classify(score: SimilarityScore, threshold: f64) -> bool {
    debug_assert!((0.0..=1.0).contains(&threshold));
    score.0 >= threshold
}

pub fn check_threshold(threshold: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(threshold)
    } else {
        Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")))
    }
}

/// Frozen encoder followed by a weight-shared conv/pool branch, an affine
/// head, and a sigmoid readout of the absolute feature difference.
#[derive(Debug, Clone)]
pub struct SimilarityNetwork<T> {
    pub config: SimilarityConfig,
    pub encoder: Encoder<T>,
    pub blocks: Vec<Conv3x3<T>>,
    pub head: Linear<T>,
    pub readout: Linear<T>,
}

#[derive(Debug, Clone)]
struct BranchCache<T> {
    inputs: Vec<Array2<T>>,
    outs: Vec<Array2<T>>,
    argmax: Vec<Vec<u32>>,
}

/// Per-pair training outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOutcome {
    pub loss: f64,
    pub score: f64,
}

impl<T: Real> SimilarityNetwork<T> {
    /// Fresh branch, head and readout on top of `encoder`.
    pub fn new(config: SimilarityConfig, encoder: Encoder<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::with_capacity(config.filters.len());
        let mut cin = 1;
        for &f in &config.filters {
            blocks.push(Conv3x3::new(cin, f, &mut rng));
            cin = f;
        }
        let flat = config.flat_len();
        let head = Linear::new(flat, config.head_units, lecun_bound(flat), &mut rng);
        let readout = Linear::new(config.head_units, 1, lecun_bound(config.head_units), &mut rng);
        Ok(Self { config, encoder, blocks, head, readout })
    }

    /// Reuses the encoder of a trained watermarking network.
    pub fn from_wm(config: SimilarityConfig, wm: &WmNetwork<T>) -> Result<Self> {
        Self::new(config, wm.encoder.clone())
    }

    /// Frozen-encoder code of each clip, `[128, 128]`.
    pub fn encode_clips(&self, clips: &[&AudioClip]) -> Vec<Array2<T>> {
        if clips.is_empty() {
            return Vec::new();
        }
        let frames: Vec<Array2<T>> =
            clips.iter().map(|c| reshape_audio(c).frames().mapv(|v| T::lit(v as f64))).collect();
        let (codes, _) = self.encoder.forward(stack_batch(&frames).view());
        codes.outer_iter().map(|c| c.to_owned()).collect()
    }

    fn branch_cached(&self, code: ArrayView2<T>) -> (Array1<T>, BranchCache<T>) {
        let mut x = code.as_standard_layout().into_owned().into_shape_with_order((1, CODE_SIDE * CODE_SIDE)).unwrap();
        let mut side = CODE_SIDE;
        let mut cache = BranchCache { inputs: Vec::new(), outs: Vec::new(), argmax: Vec::new() };
        for conv in &self.blocks {
            let mut z = conv.forward(x.view(), side, side);
            Activation::Relu.apply_inplace(&mut z);
            let (pooled, arg) = max_pool2(z.view(), side, side);
            cache.inputs.push(x);
            cache.outs.push(z);
            cache.argmax.push(arg);
            x = pooled;
            side /= 2;
        }
        let flat = x.into_shape_with_order(self.config.flat_len()).unwrap();
        (flat, cache)
    }

    fn branch_backward(&mut self, cache: &BranchCache<T>, dflat: ArrayView1<T>) {
        let last = self.config.filters.len();
        let mut side = self.config.feature_side();
        let channels = *self.config.filters.last().unwrap();
        let mut g = dflat.to_owned().into_shape_with_order((channels, side * side)).unwrap();
        for k in (0..last).rev() {
            let full = side * 2;
            let mut dz = max_pool2_backward(g.view(), &cache.argmax[k], full, full);
            Activation::Relu.backward_inplace(cache.outs[k].view(), &mut dz);
            match self.blocks[k].backward(cache.inputs[k].view(), full, full, dz.view(), k > 0) {
                Some(dx) => g = dx,
                None => break,
            }
            side = full;
        }
    }

    /// Last pooled feature map of a branch, `[channels, side * side]`.
    pub fn conv_features(&self, code: ArrayView2<T>) -> Array2<T> {
        let side = self.config.feature_side();
        let channels = *self.config.filters.last().expect("validated filters");
        self.branch_cached(code)
            .0
            .into_shape_with_order((channels, side * side))
            .expect("flat length matches the feature map")
    }

    /// Flattened twin-branch output, before the head.
    pub fn branch_features(&self, code: ArrayView2<T>) -> Array1<T> {
        self.branch_cached(code).0
    }

    /// Head vectors for a set of codes, one column each.
    pub fn embed_codes(&self, codes: &[ArrayView2<T>]) -> Array2<T> {
        let flats: Vec<Array1<T>> = codes.iter().map(|c| self.branch_features(*c)).collect();
        let views: Vec<_> = flats.iter().map(|f| f.view()).collect();
        let x = ndarray::stack(Axis(1), &views).expect("uniform branch output");
        self.head.forward(x.view())
    }

    /// `|v1 - v2|` between head vectors of two codes.
    pub fn difference_vector<'a>(&self, a: ArrayView2<'a, T>, b: ArrayView2<'a, T>) -> Array1<T> {
        let v = self.embed_codes(&[a, b]);
        (&v.column(0) - &v.column(1)).mapv(|d| d.abs())
    }

    /// Score for a pair of encoder codes.
    pub fn score_codes<'a>(&self, a: ArrayView2<'a, T>, b: ArrayView2<'a, T>) -> f64 {
        let d = self.difference_vector(a, b);
        self.readout_prob(d.view().insert_axis(Axis(1)))[0]
    }

    fn readout_prob(&self, d: ArrayView2<T>) -> Vec<f64> {
        let mut z = self.readout.forward(d);
        Activation::Sigmoid.apply_inplace(&mut z);
        z.iter().map(|p| p.to_f64().unwrap()).collect()
    }

    /// Scores many pairs of codes; columns of the head are computed once per code.
    pub fn score_code_pairs<'a>(&self, pairs: &[(ArrayView2<'a, T>, ArrayView2<'a, T>)]) -> Vec<f64> {
        if pairs.is_empty() {
            return Vec::new();
        }
        let codes: Vec<_> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
        let v = self.embed_codes(&codes);
        let mut d = Array2::zeros((self.config.head_units, pairs.len()));
        for i in 0..pairs.len() {
            let diff = (&v.column(2 * i) - &v.column(2 * i + 1)).mapv(|x| x.abs());
            d.column_mut(i).assign(&diff);
        }
        self.readout_prob(d.view())
    }

    pub fn similarity(&self, w1: &AudioClip, w2: &AudioClip) -> Result<SimilarityScore> {
        let codes = self.encode_clips(&[w1, w2]);
        SimilarityScore::new(self.score_codes(codes[0].view(), codes[1].view()))
    }

    /// Accumulates `scale * d(-log-likelihood)/dtheta` over the batch into the
    /// branch, head and readout. The encoder never receives gradient.
    pub fn accumulate_gradients<'a>(
        &mut self,
        pairs: &[(ArrayView2<'a, T>, ArrayView2<'a, T>, bool)],
        scale: f64,
    ) -> Vec<PairOutcome> {
        let n = pairs.len();
        if n == 0 {
            return Vec::new();
        }
        let mut flats = Vec::with_capacity(2 * n);
        let mut caches = Vec::with_capacity(2 * n);
        for (a, b, _) in pairs {
            for code in [a, b] {
                let (f, c) = self.branch_cached(*code);
                flats.push(f);
                caches.push(c);
            }
        }
        let views: Vec<_> = flats.iter().map(|f| f.view()).collect();
        let x = ndarray::stack(Axis(1), &views).unwrap();
        let v = self.head.forward(x.view());
        let mut diff = Array2::zeros((self.config.head_units, n));
        for i in 0..n {
            diff.column_mut(i).assign(&(&v.column(2 * i) - &v.column(2 * i + 1)));
        }
        let d = diff.mapv(|x| x.abs());
        let probs = self.readout_prob(d.view());

        let mut outcomes = Vec::with_capacity(n);
        let mut dz = Array2::zeros((1, n));
        for (i, ((_, _, label), &p)) in pairs.iter().zip(&probs).enumerate() {
            let target = if *label { 1.0 } else { 0.0 };
            let pc = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            let loss = -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
            outcomes.push(PairOutcome { loss, score: p });
            dz[[0, i]] = T::lit((p - target) * scale);
        }
        let dd = self.readout.backward(d.view(), dz.view(), true).unwrap();
        let mut dv = Array2::zeros(v.raw_dim());
        for i in 0..n {
            let g = ndarray::Zip::from(dd.column(i)).and(diff.column(i)).map_collect(|&g, &s| {
                if s > T::zero() {
                    g
                } else if s < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            });
            dv.column_mut(2 * i).assign(&g);
            dv.column_mut(2 * i + 1).assign(&g.mapv(|x| -x));
        }
        let dx = self.head.backward(x.view(), dv.view(), true).unwrap();
        for (j, cache) in caches.iter().enumerate() {
            self.branch_backward(cache, dx.slice(s![.., j]));
        }
        outcomes
    }

    /// Parameters updated by training (everything except the encoder).
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.blocks.visit_mut("blocks", &mut out);
        self.head.visit_mut("head", &mut out);
        self.readout.visit_mut("readout", &mut out);
        out
    }
}

impl SimilarityNetwork<f32> {
    /// Same as [`SimilarityNetwork::score_codes`] for public `f32` codes.
    pub fn score_watermark_codes<'a>(&self, a: ArrayView2<'a, f32>, b: ArrayView2<'a, f32>) -> Result<SimilarityScore> {
        for code in [&a, &b] {
            crate::error::ensure_shape("watermark code", code.shape(), &[CODE_SIDE, CODE_SIDE])?;
        }
        SimilarityScore::new(self.score_codes(a, b))
    }
}

impl<T: Real> HasParams<T> for SimilarityNetwork<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.encoder.visit(&join_name(prefix, "encoder"), out);
        self.blocks.visit(&join_name(prefix, "blocks"), out);
        self.head.visit(&join_name(prefix, "head"), out);
        self.readout.visit(&join_name(prefix, "readout"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.encoder.visit_mut(&join_name(prefix, "encoder"), out);
        self.blocks.visit_mut(&join_name(prefix, "blocks"), out);
        self.head.visit_mut(&join_name(prefix, "head"), out);
        self.readout.visit_mut(&join_name(prefix, "readout"), out);
    }
}
