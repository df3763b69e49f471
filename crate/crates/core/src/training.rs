//! Three-stage training: autoencoder pretraining, end-to-end watermarking,
//! then the similarity verifier on a frozen encoder.
//!
//! Every numeric step runs on the calling thread, so a fixed seed gives
//! bit-identical losses. Rayon is used only to decode media files, which
//! preserves order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::file_sha256;
use crate::dataset::{PairList, PairManifest, PairRecord, Split, SplitSizes};
use crate::losses::LossWeights;
use crate::media::{load_audio, read_clip, reshape_audio, AudioClip, CoverImage, SAMPLE_RATE};
use crate::network::{stack_batch, WmConfig, WmNetwork};
use crate::nn::{clip_grad_norm, Adam, HasParams, Param};
use crate::similarity::{SimilarityConfig, SimilarityNetwork, DEFAULT_THRESHOLD};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Wm,
    Similarity,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Wm => "wm",
            Stage::Similarity => "similarity",
        }
    }

    /// File name of the best checkpoint this stage writes.
    pub fn checkpoint_name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain.ckpt",
            Stage::Wm => "wm.ckpt",
            Stage::Similarity => "similarity.ckpt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Zero writes the initialization as the checkpoint.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Use at most this many training examples.
    pub max_train: Option<usize>,
    /// Use at most this many validation examples.
    pub max_val: Option<usize>,
    pub wm: WmConfig,
    pub similarity: SimilarityConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_path: PathBuf::from("learning_curve.csv"),
            clip_norm: 5.0,
            max_train: None,
            max_val: None,
            wm: WmConfig::default(),
            similarity: SimilarityConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let epochs = match stage {
            Stage::Pretrain => 50,
            Stage::Wm => 200,
            Stage::Similarity => 100,
        };
        Self { stage, epochs, log_path: PathBuf::from(format!("{}_curve.csv", stage.name())), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::config("gradient clip norm must be positive"));
        }
        self.loss_weights.validate()?;
        self.wm.validate()?;
        self.similarity.validate()
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        self.validate()?;
        if self.stage == stage {
            Ok(())
        } else {
            Err(Error::config(format!("configuration is for the {} stage, not {}", self.stage.name(), stage.name())))
        }
    }

    fn wm_config(&self) -> WmConfig {
        WmConfig { seed: self.seed, ..self.wm.clone() }
    }

    fn meta(&self, epoch: usize, record: Option<&EpochRecord>) -> BTreeMap<String, Value> {
        let mut meta = BTreeMap::new();
        meta.insert("stage".into(), json!(self.stage.name()));
        meta.insert("epoch".into(), json!(epoch));
        meta.insert("optimizer".into(), json!("adam"));
        meta.insert("train_config".into(), serde_json::to_value(self).unwrap_or(Value::Null));
        if let Some(r) = record {
            meta.insert("val_loss".into(), json!(r.val_loss));
            if let Some(acc) = r.val_acc {
                meta.insert("val_acc".into(), json!(acc));
            }
        }
        meta
    }
}

/// Desk and full-scale presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Tiny,
    Small,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileSettings {
    pub manifest: SplitSizes,
    pub pretrain_clips: Option<usize>,
    pub pretrain_epochs: usize,
    /// Small pretraining sets need more, smaller steps to leave the
    /// all-zero reconstruction plateau.
    pub pretrain_batch_size: usize,
    pub wm_epochs: usize,
    /// Source draws per split; each yields one positive and one negative pair.
    pub similarity_sources: SplitSizes,
    pub similarity_epochs: usize,
    pub batch_size: usize,
}

impl Profile {
    pub fn settings(self) -> ProfileSettings {
        match self {
            Profile::Tiny => ProfileSettings {
                manifest: SplitSizes::new(2000, 200, 200),
                pretrain_clips: Some(500),
                pretrain_epochs: 50,
                pretrain_batch_size: 4,
                wm_epochs: 50,
                similarity_sources: SplitSizes::new(4000, 500, 500),
                similarity_epochs: 20,
                batch_size: 32,
            },
            Profile::Small => ProfileSettings {
                manifest: SplitSizes::new(10_000, 1000, 1000),
                pretrain_clips: None,
                pretrain_epochs: 50,
                pretrain_batch_size: 32,
                wm_epochs: 100,
                similarity_sources: SplitSizes::new(25_000, 2500, 2500),
                similarity_epochs: 50,
                batch_size: 32,
            },
            Profile::Paper => ProfileSettings {
                manifest: SplitSizes::new(42_600, 9700, 5800),
                pretrain_clips: None,
                pretrain_epochs: 50,
                pretrain_batch_size: 32,
                wm_epochs: 200,
                similarity_sources: SplitSizes::new(170_000, 32_000, 23_000),
                similarity_epochs: 100,
                batch_size: 32,
            },
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "small" => Ok(Profile::Small),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config(format!("unknown profile `{other}` (tiny, small, paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Watermark and image terms of the watermarking loss.
    pub train_parts: Option<(f64, f64)>,
    pub val_parts: Option<(f64, f64)>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LearningCurve {
    pub records: Vec<EpochRecord>,
}

impl LearningCurve {
    fn header(stage: Stage) -> &'static str {
        match stage {
            Stage::Pretrain => "epoch,train_loss,val_loss",
            Stage::Wm => "epoch,train_loss,val_loss,train_audio_mse,train_image_mse,val_audio_mse,val_image_mse",
            Stage::Similarity => "epoch,train_loss,val_loss,val_acc",
        }
    }

    fn row(stage: Stage, r: &EpochRecord) -> String {
        let mut row = format!("{},{},{}", r.epoch, r.train_loss, r.val_loss);
        match stage {
            Stage::Pretrain => {}
            Stage::Wm => {
                let (ta, ti) = r.train_parts.unwrap_or((f64::NAN, f64::NAN));
                let (va, vi) = r.val_parts.unwrap_or((f64::NAN, f64::NAN));
                row.push_str(&format!(",{ta},{ti},{va},{vi}"));
            }
            Stage::Similarity => row.push_str(&format!(",{}", r.val_acc.unwrap_or(f64::NAN))),
        }
        row
    }
}

/// Appends one CSV row per epoch, flushing each so partial runs keep a log.
struct CurveLog {
    stage: Stage,
    file: fs::File,
    path: PathBuf,
}

impl CurveLog {
    fn create(path: &Path, stage: Stage) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", LearningCurve::header(stage)).map_err(|e| Error::io(path, e))?;
        Ok(Self { stage, file, path: path.to_path_buf() })
    }

    fn append(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.file, "{}", LearningCurve::row(self.stage, r))
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best checkpoint written by the run.
    pub checkpoint: PathBuf,
    pub sha256: String,
    pub curve: LearningCurve,
    /// 0 when the initialization was never beaten.
    pub best_epoch: usize,
}

fn check_finite(value: f64, what: &str, epoch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence(format!("{what} became {value} in epoch {epoch}")))
    }
}

fn ensure_params_finite<M: HasParams<f32>>(model: &M, epoch: usize) -> Result<()> {
    if model.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite parameters after epoch {epoch}")))
    }
}

fn take_limit<T>(mut items: Vec<T>, limit: Option<usize>) -> Vec<T> {
    if let Some(n) = limit {
        items.truncate(n);
    }
    items
}

fn update(params: &mut [(String, &mut Param<f32>)], adam: &mut Adam<f32>, clip: f64) {
    clip_grad_norm(params, clip);
    adam.step(params);
    for (_, p) in params.iter_mut() {
        p.zero_grad();
    }
}

fn frames_of(clip: &AudioClip) -> Array2<f32> {
    reshape_audio(clip).frames().to_owned()
}

/// Root of the mean squared reconstruction error of `decode(encode(w))`
/// over all clips.
pub fn reconstruction_rmse(net: &WmNetwork<f32>, clips: &[AudioClip]) -> f64 {
    let frames: Vec<Array2<f32>> = clips.iter().map(frames_of).collect();
    mean_reconstruction_mse(net, &frames, 32).sqrt()
}

fn mean_reconstruction_mse(net: &WmNetwork<f32>, frames: &[Array2<f32>], batch: usize) -> f64 {
    if frames.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for chunk in frames.chunks(batch) {
        total += net.pretrain_loss_value(stack_batch(chunk).view()) * chunk.len() as f64;
    }
    total / frames.len() as f64
}

/// Trains encoder and decoder to reproduce their input frames.
pub fn pretrain_encoder_decoder(cfg: &TrainConfig, data: &PairManifest) -> Result<TrainOutcome> {
    cfg.expect_stage(Stage::Pretrain)?;
    let train: Vec<Array2<f32>> =
        take_limit(data.load_audio(Split::Train)?, cfg.max_train).iter().map(frames_of).collect();
    let val: Vec<Array2<f32>> = take_limit(data.load_audio(Split::Val)?, cfg.max_val).iter().map(frames_of).collect();
    if train.is_empty() {
        return Err(Error::config("pretraining needs at least one training clip"));
    }
    let mut net = WmNetwork::<f32>::new(cfg.wm_config())?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = CurveLog::create(&cfg.log_path, Stage::Pretrain)?;
    let path = cfg.checkpoint_dir.join(Stage::Pretrain.checkpoint_name());
    let score = |net: &WmNetwork<f32>, fallback: &[Array2<f32>]| {
        mean_reconstruction_mse(net, if val.is_empty() { fallback } else { &val }, cfg.batch_size)
    };

    let mut best = score(&net, &train);
    let mut sha = net.save(&path, cfg.meta(0, None))?;
    let mut best_epoch = 0;
    let mut curve = LearningCurve::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<Array2<f32>> = batch.iter().map(|&i| train[i].clone()).collect();
            let loss = net.accumulate_pretrain_gradients(stack_batch(&items).view());
            sum += check_finite(loss, "training loss", epoch)? * batch.len() as f64;
            update(&mut net.autoencoder_params_mut(), &mut adam, cfg.clip_norm);
        }
        ensure_params_finite(&net, epoch)?;
        let val_loss = check_finite(score(&net, &train), "validation loss", epoch)?;
        let record = EpochRecord {
            epoch,
            train_loss: sum / train.len() as f64,
            val_loss,
            train_parts: None,
            val_parts: None,
            val_acc: None,
        };
        log::info!("pretrain epoch {epoch}: train {:.6} val {val_loss:.6}", record.train_loss);
        log.append(&record)?;
        if val_loss < best {
            best = val_loss;
            best_epoch = epoch;
            sha = net.save(&path, cfg.meta(epoch, Some(&record)))?;
        }
        curve.records.push(record);
    }
    Ok(TrainOutcome { checkpoint: path, sha256: sha, curve, best_epoch })
}

fn require_checkpoint(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(format!("{what} checkpoint {} does not exist", path.display())))
    }
}

/// Mean watermarking loss and its two terms over `(frames, cover)` pairs.
fn wm_validation(net: &WmNetwork<f32>, items: &[(Array2<f32>, Array2<f32>)], w: LossWeights) -> (f64, f64, f64) {
    let n = items.len() as f64;
    let (mut t, mut a, mut i) = (0.0, 0.0, 0.0);
    for (frames, cover) in items {
        let parts = net.wm_loss_value(frames.view(), cover.clone(), w);
        t += parts.total;
        a += parts.audio_mse;
        i += parts.image_mse;
    }
    (t / n, a / n, i / n)
}

fn wm_items(pairs: Vec<(AudioClip, CoverImage)>) -> Vec<(Array2<f32>, Array2<f32>)> {
    pairs.iter().map(|(a, c)| (frames_of(a), c.to_chw())).collect()
}

/// Fine-tunes the pretrained encoder and decoder together with a freshly
/// initialized embedder and extractor.
pub fn train_wm(cfg: &TrainConfig, data: &PairManifest, init: &Path) -> Result<TrainOutcome> {
    cfg.expect_stage(Stage::Wm)?;
    require_checkpoint(init, "pretrain")?;
    let (pretrained, _) = WmNetwork::<f32>::load_expecting(init, &cfg.wm)?;
    let mut net = WmNetwork::<f32>::new(cfg.wm_config())?;
    net.encoder = pretrained.encoder;
    net.decoder = pretrained.decoder;

    let train = wm_items(take_limit(data.load_pairs(Split::Train)?, cfg.max_train));
    let val = wm_items(take_limit(data.load_pairs(Split::Val)?, cfg.max_val));
    if train.is_empty() {
        return Err(Error::config("watermark training needs at least one training pair"));
    }
    let weights = cfg.loss_weights;
    let score_set = if val.is_empty() { &train } else { &val };
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = CurveLog::create(&cfg.log_path, Stage::Wm)?;
    let path = cfg.checkpoint_dir.join(Stage::Wm.checkpoint_name());

    let mut best = wm_validation(&net, score_set, weights).0;
    let mut sha = net.save(&path, cfg.meta(0, None))?;
    let mut best_epoch = 0;
    let mut curve = LearningCurve::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut t, mut a, mut im) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (frames, cover) = &train[i];
                let parts = net.accumulate_wm_gradients(frames.view(), cover.clone(), weights, scale);
                t += check_finite(parts.total, "training loss", epoch)?;
                a += parts.audio_mse;
                im += parts.image_mse;
            }
            update(&mut net.named_params_mut(), &mut adam, cfg.clip_norm);
        }
        ensure_params_finite(&net, epoch)?;
        let n = train.len() as f64;
        let (vt, va, vi) = wm_validation(&net, score_set, weights);
        let record = EpochRecord {
            epoch,
            train_loss: t / n,
            val_loss: check_finite(vt, "validation loss", epoch)?,
            train_parts: Some((a / n, im / n)),
            val_parts: Some((va, vi)),
            val_acc: None,
        };
        log::info!("wm epoch {epoch}: train {:.6} val {vt:.6} (audio {va:.6}, image {vi:.6})", record.train_loss);
        log.append(&record)?;
        if vt < best {
            best = vt;
            best_epoch = epoch;
            sha = net.save(&path, cfg.meta(epoch, Some(&record)))?;
        }
        curve.records.push(record);
    }
    Ok(TrainOutcome { checkpoint: path, sha256: sha, curve, best_epoch })
}

/// Frozen-encoder codes keyed by clip path, computed once per run.
pub struct CodeCache {
    codes: HashMap<PathBuf, Array2<f32>>,
}

impl CodeCache {
    /// Encodes every `w1` (a source clip) and `w2` (an extraction) in `records`.
    pub fn build<'a>(net: &SimilarityNetwork<f32>, records: impl IntoIterator<Item = &'a PairRecord>) -> Result<Self> {
        let mut sources = Vec::new();
        let mut extractions = Vec::new();
        for r in records {
            sources.push(r.w1.clone());
            extractions.push(r.w2.clone());
        }
        for list in [&mut sources, &mut extractions] {
            list.sort();
            list.dedup();
        }
        let mut clips: Vec<(PathBuf, AudioClip)> =
            sources.par_iter().map(|p| Ok((p.clone(), load_audio(p, SAMPLE_RATE)?))).collect::<Result<_>>()?;
        let extracted: Vec<(PathBuf, AudioClip)> =
            extractions.par_iter().map(|p| Ok((p.clone(), read_clip(p)?))).collect::<Result<_>>()?;
        clips.extend(extracted);
        let mut codes = HashMap::with_capacity(clips.len());
        for chunk in clips.chunks(64) {
            let refs: Vec<&AudioClip> = chunk.iter().map(|(_, c)| c).collect();
            for ((path, _), code) in chunk.iter().zip(net.encode_clips(&refs)) {
                codes.insert(path.clone(), code);
            }
        }
        Ok(Self { codes })
    }

    pub fn get(&self, path: &Path) -> &Array2<f32> {
        &self.codes[path]
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Mean loss, accuracy at the default threshold, and the scores of `records`.
pub fn similarity_metrics(
    net: &SimilarityNetwork<f32>,
    cache: &CodeCache,
    records: &[&PairRecord],
) -> (f64, f64, Vec<f64>) {
    let mut scores = Vec::with_capacity(records.len());
    for chunk in records.chunks(32) {
        let pairs: Vec<_> = chunk.iter().map(|r| (cache.get(&r.w1).view(), cache.get(&r.w2).view())).collect();
        scores.extend(net.score_code_pairs(&pairs));
    }
    let n = records.len().max(1) as f64;
    let loss = records.iter().zip(&scores).map(|(r, &p)| crate::losses::bce_loss(r.label, p)).sum::<f64>() / n;
    let correct = records.iter().zip(&scores).filter(|(r, &p)| (p >= DEFAULT_THRESHOLD) == r.label).count();
    (loss, correct as f64 / n, scores)
}

fn check_balance(records: &[&PairRecord], split: Split) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let share = records.iter().filter(|r| r.label).count() as f64 / records.len() as f64;
    if (share - 0.5).abs() > 0.01 {
        return Err(Error::config(format!("{split} pairs are unbalanced: {:.1}% positive", share * 100.0)));
    }
    Ok(())
}

/// Trains the verifier head on top of the encoder stored in `encoder`.
pub fn train_similarity(cfg: &TrainConfig, pairs: &PairList, encoder: &Path) -> Result<TrainOutcome> {
    cfg.expect_stage(Stage::Similarity)?;
    require_checkpoint(encoder, "encoder")?;
    let (wm, _) = WmNetwork::<f32>::load(encoder)?;
    let encoder_sha = file_sha256(encoder)?;
    let sim_config = SimilarityConfig { seed: cfg.seed, ..cfg.similarity.clone() };
    let mut net = SimilarityNetwork::from_wm(sim_config, &wm)?;
    drop(wm);

    let train = take_limit(pairs.split(Split::Train).collect::<Vec<_>>(), cfg.max_train);
    let val = take_limit(pairs.split(Split::Val).collect::<Vec<_>>(), cfg.max_val);
    check_balance(&train, Split::Train)?;
    check_balance(&val, Split::Val)?;
    if train.is_empty() {
        return Err(Error::config("similarity training needs at least one training pair"));
    }
    let cache = CodeCache::build(&net, train.iter().chain(&val).copied())?;
    let score_set = if val.is_empty() { &train } else { &val };
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = CurveLog::create(&cfg.log_path, Stage::Similarity)?;
    let path = cfg.checkpoint_dir.join(Stage::Similarity.checkpoint_name());
    let save = |net: &SimilarityNetwork<f32>, meta| net.save(&path, &wm_config_of(encoder)?, &encoder_sha, meta);

    let (init_loss, init_acc, _) = similarity_metrics(&net, &cache, score_set);
    let mut best = (init_acc, -init_loss);
    let mut sha = save(&net, cfg.meta(0, None))?;
    let mut best_epoch = 0;
    let mut curve = LearningCurve::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<_> = batch
                .iter()
                .map(|&i| (cache.get(&train[i].w1).view(), cache.get(&train[i].w2).view(), train[i].label))
                .collect();
            for outcome in net.accumulate_gradients(&items, 1.0 / batch.len() as f64) {
                sum += check_finite(outcome.loss, "training loss", epoch)?;
            }
            update(&mut net.trainable_params_mut(), &mut adam, cfg.clip_norm);
        }
        ensure_params_finite(&net, epoch)?;
        let (val_loss, val_acc, _) = similarity_metrics(&net, &cache, score_set);
        let record = EpochRecord {
            epoch,
            train_loss: sum / train.len() as f64,
            val_loss: check_finite(val_loss, "validation loss", epoch)?,
            train_parts: None,
            val_parts: None,
            val_acc: Some(val_acc),
        };
        log::info!("similarity epoch {epoch}: train {:.6} val {val_loss:.6} acc {val_acc:.4}", record.train_loss);
        log.append(&record)?;
        if (val_acc, -val_loss) > best {
            best = (val_acc, -val_loss);
            best_epoch = epoch;
            sha = save(&net, cfg.meta(epoch, Some(&record)))?;
        }
        curve.records.push(record);
    }
    Ok(TrainOutcome { checkpoint: path, sha256: sha, curve, best_epoch })
}

fn wm_config_of(path: &Path) -> Result<WmConfig> {
    crate::checkpoint::Checkpoint::read(path)?.config()
}

/// Mean training loss of one pretraining epoch on `clips`, without touching the disk.
pub fn first_epoch_pretrain_loss(cfg: &TrainConfig, clips: &[AudioClip]) -> Result<f64> {
    cfg.validate()?;
    let train: Vec<Array2<f32>> = clips.iter().map(frames_of).collect();
    let mut net = WmNetwork::<f32>::new(cfg.wm_config())?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut sum = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let items: Vec<Array2<f32>> = batch.iter().map(|&i| train[i].clone()).collect();
        sum += net.accumulate_pretrain_gradients(stack_batch(&items).view()) * batch.len() as f64;
        update(&mut net.autoencoder_params_mut(), &mut adam, cfg.clip_norm);
    }
    Ok(sum / train.len().max(1) as f64)
}
