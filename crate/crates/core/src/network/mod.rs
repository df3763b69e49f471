//! The watermarking network: Encoder, Embedder, Extractor and Decoder nets
//! composed into one end-to-end trainable model.
//!
//! Shapes through the full chain (per sample):
//!
//! ```text
//! audio 8192 -> frames 128x64 -> Encoder -> code 128x128(x1)
//! code + cover 128x128x3 -> Embedder -> marked 128x128x3
//! marked -> Extractor -> code' 128x128(x1) -> Decoder -> audio' 8192
//! ```

mod convnets;
mod recurrent;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use convnets::{channel_fc, EmbedCache, Embedder, ExtractCache, Extractor};
pub(crate) use recurrent::stack_batch;
pub use recurrent::{Decoder, DecoderCache, Encoder, EncoderCache};

use crate::error::{ensure_shape, Error, Result};
use crate::losses::LossWeights;
use crate::media::{
    reshape_audio, AudioClip, AudioFrameMatrix, CoverImage, Image, MarkedImage, AUDIO_LEN, FRAME_DIM, FRAME_STEPS,
    IMAGE_SIDE,
};
use crate::nn::{join_name, HasParams, Param, Real};

pub(crate) use convnets::feature_map;

/// Side of the square watermark code; equals the encoder hidden size and
/// the number of time steps.
pub const CODE_SIDE: usize = 128;

/// Architecture hyperparameters recorded in every checkpoint header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WmConfig {
    pub steps: usize,
    pub frame_dim: usize,
    pub hidden: usize,
    pub embed_input_filters: Vec<usize>,
    pub fc_units: usize,
    pub embed_output_filters: Vec<usize>,
    pub extract_input_filters: Vec<usize>,
    pub extract_output_filters: Vec<usize>,
    pub seed: u64,
}

impl Default for WmConfig {
    fn default() -> Self {
        Self {
            steps: FRAME_STEPS,
            frame_dim: FRAME_DIM,
            hidden: CODE_SIDE,
            embed_input_filters: vec![8, 16, 32, 64],
            fc_units: 512,
            embed_output_filters: vec![128, 64, 32, 16, 8, 4, 3],
            extract_input_filters: vec![8, 16, 32, 64],
            extract_output_filters: vec![128, 64, 32, 16, 8, 4, 1],
            seed: 0,
        }
    }
}

impl WmConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps != FRAME_STEPS || self.frame_dim != FRAME_DIM || self.hidden != CODE_SIDE {
            return Err(Error::config(format!(
                "recurrent shape must be {FRAME_STEPS} steps x {FRAME_DIM} inputs, hidden {CODE_SIDE}"
            )));
        }
        if self.embed_input_filters.is_empty() || self.embed_output_filters.last() != Some(&3) {
            return Err(Error::config("embedder must end in 3 filters"));
        }
        if self.extract_input_filters.len() < 3 || self.extract_output_filters.len() < 4 {
            return Err(Error::config("extractor stacks too short to hold both skips"));
        }
        if self.extract_output_filters.last() != Some(&1) {
            return Err(Error::config("extractor must end in 1 filter"));
        }
        if self.fc_units == 0 {
            return Err(Error::config("fc_units must be positive"));
        }
        Ok(())
    }

    /// Equality ignoring the initialization seed.
    pub fn same_architecture(&self, other: &Self) -> bool {
        Self { seed: 0, ..self.clone() } == Self { seed: 0, ..other.clone() }
    }
}

/// 128x128x1 latent code bridging the audio and image domains, stored as
/// `[step, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkCode {
    code: Array2<f32>,
}

impl WatermarkCode {
    pub fn new(code: Array2<f32>) -> Result<Self> {
        ensure_shape("watermark code", code.shape(), &[CODE_SIDE, CODE_SIDE])?;
        if code.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("watermark code contains non-finite values"));
        }
        Ok(Self { code })
    }

    pub fn shape(&self) -> [usize; 3] {
        [CODE_SIDE, CODE_SIDE, 1]
    }

    pub fn values(&self) -> ArrayView2<'_, f32> {
        self.code.view()
    }
}

/// Per-term breakdown of the watermarking loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WmLossParts {
    pub total: f64,
    pub audio_mse: f64,
    pub image_mse: f64,
}

/// Everything computed by one end-to-end forward pass.
#[derive(Debug, Clone)]
pub struct WmForwardCache<T> {
    pub encoder: EncoderCache<T>,
    /// `[1, 128, 128]`
    pub code: Array3<T>,
    pub embed: EmbedCache<T>,
    pub extract: ExtractCache<T>,
    pub decoder: DecoderCache<T>,
    /// `[1, 128, 64]`
    pub frames_out: Array3<T>,
}

#[derive(Debug, Clone)]
pub struct WmNetwork<T> {
    pub config: WmConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub embedder: Embedder<T>,
    pub extractor: Extractor<T>,
}

fn cast<A: Real, B: Real>(v: A) -> B {
    B::from_f64(v.to_f64().unwrap()).unwrap()
}

fn sq_err_mean<T: Real>(a: impl Iterator<Item = T>, b: impl Iterator<Item = T>, n: usize) -> f64 {
    a.zip(b)
        .map(|(x, y)| {
            let d = x.to_f64().unwrap() - y.to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / n as f64
}

impl<T: Real> WmNetwork<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: WmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::new(config.frame_dim, config.hidden, &mut rng);
        let decoder = Decoder::new(config.hidden, config.frame_dim, &mut rng);
        let embedder =
            Embedder::new(&config.embed_input_filters, config.fc_units, &config.embed_output_filters, &mut rng);
        let extractor =
            Extractor::new(&config.extract_input_filters, config.fc_units, &config.extract_output_filters, &mut rng);
        Ok(Self { config, encoder, decoder, embedder, extractor })
    }

    // ---- raw staged forward passes (arrays in, arrays out) ----

    /// `[batch, 128, 64] -> [batch, 128, 128]`
    pub fn encode_raw(&self, frames: ArrayView3<T>) -> Array3<T> {
        self.encoder.forward(frames).0
    }

    /// `[batch, 128, 128] -> [batch, 128, 64]`
    pub fn decode_raw(&self, codes: ArrayView3<T>) -> Array3<T> {
        self.decoder.forward(codes).0
    }

    /// `([1, 128, 128], [3, HW]) -> [3, HW]`
    pub fn embed_raw(&self, code: ArrayView2<T>, cover: Array2<T>) -> Array2<T> {
        self.embedder.forward(feature_map(code), cover, IMAGE_SIDE).marked().clone()
    }

    /// `[3, HW] -> [128, 128]`
    pub fn extract_raw(&self, marked: Array2<T>) -> Array2<T> {
        let cache = self.extractor.forward(marked, IMAGE_SIDE);
        cache.code().clone().into_shape_with_order((CODE_SIDE, CODE_SIDE)).unwrap()
    }

    // ---- typed operations ----

    pub fn encode(&self, frames: &AudioFrameMatrix) -> WatermarkCode {
        self.encode_batch(std::slice::from_ref(frames)).remove(0)
    }

    pub fn encode_array(&self, frames: ArrayView2<f32>) -> Result<WatermarkCode> {
        Ok(self.encode(&AudioFrameMatrix::new(frames.to_owned())?))
    }

    pub fn encode_batch(&self, frames: &[AudioFrameMatrix]) -> Vec<WatermarkCode> {
        if frames.is_empty() {
            return Vec::new();
        }
        let items: Vec<Array2<T>> = frames.iter().map(|f| f.frames().mapv(cast)).collect();
        let codes = self.encode_raw(stack_batch(&items).view());
        codes.outer_iter().map(|c| WatermarkCode::new(c.mapv(cast)).expect("encoder output is finite")).collect()
    }

    pub fn decode(&self, code: &WatermarkCode) -> AudioClip {
        let codes = code.code.mapv(cast::<f32, T>).insert_axis(Axis(0));
        let frames = self.decode_raw(codes.view());
        AudioClip::new(frames.iter().map(|&v| cast::<T, f32>(v).clamp(-1.0, 1.0)).collect())
            .expect("decoder output is bounded by tanh")
    }

    pub fn decode_array(&self, code: ArrayView2<f32>) -> Result<AudioClip> {
        Ok(self.decode(&WatermarkCode::new(code.to_owned())?))
    }

    pub fn embed(&self, code: &WatermarkCode, cover: &CoverImage) -> MarkedImage {
        let marked = self.embed_raw(code.code.mapv(cast::<f32, T>).view(), cover.to_chw());
        Image::from_chw(marked.view()).expect("embedder output is bounded by sigmoid")
    }

    pub fn embed_array(&self, code: ArrayView2<f32>, cover: ndarray::ArrayView3<f32>) -> Result<MarkedImage> {
        let code = WatermarkCode::new(code.to_owned())?;
        let cover = Image::new(cover.to_owned())?;
        Ok(self.embed(&code, &cover))
    }

    pub fn extract(&self, marked: &MarkedImage) -> WatermarkCode {
        let code = self.extract_raw(marked.to_chw());
        WatermarkCode::new(code.mapv(cast)).expect("extractor output is finite")
    }

    pub fn extract_array(&self, marked: ndarray::ArrayView3<f32>) -> Result<WatermarkCode> {
        Ok(self.extract(&Image::new(marked.to_owned())?))
    }

    /// `(M, W')` with `M = embed(encode(reshape(w)), c)` and
    /// `W' = decode(extract(M))`.
    pub fn wm_forward(&self, audio: &AudioClip, cover: &CoverImage) -> (MarkedImage, AudioClip) {
        let code = self.encode(&reshape_audio(audio));
        let marked = self.embed(&code, cover);
        let recovered = self.decode(&self.extract(&marked));
        (marked, recovered)
    }

    // ---- training passes ----

    /// End-to-end forward for one sample keeping every activation.
    pub fn forward_cached(&self, frames: ArrayView2<T>, cover: Array2<T>) -> WmForwardCache<T> {
        let (code, encoder) = self.encoder.forward(frames.insert_axis(Axis(0)));
        let embed = self.embedder.forward(feature_map(code.index_axis(Axis(0), 0)), cover, IMAGE_SIDE);
        let extract = self.extractor.forward(embed.marked().clone(), IMAGE_SIDE);
        let recovered = extract.code().view().into_shape_with_order((1, CODE_SIDE, CODE_SIDE)).unwrap();
        let (frames_out, decoder) = self.decoder.forward(recovered);
        WmForwardCache { encoder, code, embed, extract, decoder, frames_out }
    }

    /// Watermarking loss of an already computed forward pass.
    pub fn wm_loss_parts(
        &self,
        cache: &WmForwardCache<T>,
        frames: ArrayView2<T>,
        cover: ArrayView2<T>,
        w: LossWeights,
    ) -> WmLossParts {
        let audio_mse = sq_err_mean(cache.frames_out.iter().copied(), frames.iter().copied(), AUDIO_LEN);
        let image_mse = sq_err_mean(cache.embed.marked().iter().copied(), cover.iter().copied(), cover.len());
        WmLossParts { total: w.lambda1 * audio_mse + w.lambda2 * image_mse, audio_mse, image_mse }
    }

    /// Forward-only watermarking loss for one sample.
    pub fn wm_loss_value(&self, frames: ArrayView2<T>, cover: Array2<T>, weights: LossWeights) -> WmLossParts {
        let cache = self.forward_cached(frames, cover.clone());
        self.wm_loss_parts(&cache, frames, cover.view(), weights)
    }

    /// Adds `scale * dL/dtheta` for one sample into every parameter gradient
    /// and returns the (unscaled) loss.
    pub fn accumulate_wm_gradients(
        &mut self,
        frames: ArrayView2<T>,
        cover: Array2<T>,
        weights: LossWeights,
        scale: f64,
    ) -> WmLossParts {
        let cache = self.forward_cached(frames, cover.clone());
        let parts = self.wm_loss_parts(&cache, frames, cover.view(), weights);

        let audio_coef = T::lit(2.0 * weights.lambda1 * scale / AUDIO_LEN as f64);
        let image_coef = T::lit(2.0 * weights.lambda2 * scale / cover.len() as f64);
        let target = frames.insert_axis(Axis(0));
        let mut dframes = &cache.frames_out - &target;
        dframes.mapv_inplace(|v| v * audio_coef);
        let dcode_out = self.decoder.backward(&cache.decoder, dframes.view());
        let dcode_out = feature_map(dcode_out.index_axis(Axis(0), 0));
        let mut dmarked = self.extractor.backward(&cache.extract, dcode_out, IMAGE_SIDE);
        Zip::from(&mut dmarked).and(cache.embed.marked()).and(&cover).for_each(|d, &m, &c| *d += image_coef * (m - c));
        let dcode = self.embedder.backward(&cache.embed, dmarked, IMAGE_SIDE);
        let dcode = dcode.into_shape_with_order((1, CODE_SIDE, CODE_SIDE)).unwrap();
        self.encoder.backward(&cache.encoder, dcode.view());
        parts
    }

    /// Mean reconstruction MSE of `decode(encode(w))` over a batch
    /// `[batch, 128, 64]`.
    pub fn pretrain_loss_value(&self, frames: ArrayView3<T>) -> f64 {
        let rebuilt = self.decode_raw(self.encode_raw(frames).view());
        sq_err_mean(rebuilt.iter().copied(), frames.iter().copied(), frames.len())
    }

    /// Accumulates gradients of the batch-mean reconstruction loss into the
    /// encoder and decoder; returns that loss.
    pub fn accumulate_pretrain_gradients(&mut self, frames: ArrayView3<T>) -> f64 {
        let (codes, enc_cache) = self.encoder.forward(frames);
        let (rebuilt, dec_cache) = self.decoder.forward(codes.view());
        let loss = sq_err_mean(rebuilt.iter().copied(), frames.iter().copied(), frames.len());
        let coef = T::lit(2.0 / frames.len() as f64);
        let mut d = &rebuilt - &frames;
        d.mapv_inplace(|v| v * coef);
        let dcodes = self.decoder.backward(&dec_cache, d.view());
        self.encoder.backward(&enc_cache, dcodes.view());
        loss
    }

    /// Parameters updated during pretraining.
    pub fn autoencoder_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.encoder.visit_mut("encoder", &mut out);
        self.decoder.visit_mut("decoder", &mut out);
        out
    }
}

impl<T: Real> HasParams<T> for WmNetwork<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.encoder.visit(&join_name(prefix, "encoder"), out);
        self.decoder.visit(&join_name(prefix, "decoder"), out);
        self.embedder.visit(&join_name(prefix, "embedder"), out);
        self.extractor.visit(&join_name(prefix, "extractor"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.encoder.visit_mut(&join_name(prefix, "encoder"), out);
        self.decoder.visit_mut(&join_name(prefix, "decoder"), out);
        self.embedder.visit_mut(&join_name(prefix, "embedder"), out);
        self.extractor.visit_mut(&join_name(prefix, "extractor"), out);
    }
}
