use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use audiowm::dataset::{
    build_manifest, build_similarity_pairs, default_distortion_grid, PairList, PairManifest, Split, SplitSizes,
};
use audiowm::distortion::{self, DistortionKind, DistortionSpec};
use audiowm::eval::{ablation_table, evaluate_wm, run_sweep, SweepConfig};
use audiowm::losses::ssim;
use audiowm::media::{
    load_audio, load_image, read_clip, read_wav, reshape_audio, save_audio_exact, save_image, AudioClip, AUDIO_LEN,
    SAMPLE_RATE,
};
use audiowm::network::WmNetwork;
use audiowm::similarity::{check_threshold, classify, SimilarityNetwork, DEFAULT_THRESHOLD};
use audiowm::synth::{write_audio_corpus, write_image_corpus, SynthConfig};
use audiowm::training::{
    pretrain_encoder_decoder, train_similarity, train_wm, Profile, Stage, TrainConfig, TrainOutcome,
};

#[derive(Parser)]
#[command(name = "audiowm", version, about = "Hide spoken-command audio in images and verify extractions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic command corpus and cover images.
    SynthCorpus(SynthArgs),
    /// Pair covers with clips and split by command.
    BuildManifest(ManifestArgs),
    /// Pretrain the encoder/decoder autoencoder.
    Pretrain(PretrainArgs),
    /// Train the full watermarking network from a pretrained autoencoder.
    TrainWm(TrainWmArgs),
    /// Generate labeled, distorted pairs for the verifier.
    BuildPairs(BuildPairsArgs),
    /// Train the similarity verifier on a frozen encoder.
    TrainSim(TrainSimArgs),
    /// Hide an audio clip in a cover image.
    Embed(EmbedArgs),
    /// Recover the watermark from a marked image alone.
    Extract(ExtractArgs),
    /// Decide whether two clips carry the same watermark (exit 0 same, 1 different).
    Verify(VerifyArgs),
    /// Mean SSIM and RMSE of clean embedding and extraction on a split.
    EvalWm(EvalWmArgs),
    /// Accuracy and RMSE over a grid of cutout or rotation strengths.
    Sweep(SweepArgs),
    /// Per-pair RMSE beside the verifier's score.
    Ablation(AblationArgs),
    /// Apply a single distortion to a marked image.
    Distort(DistortArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    commands: usize,
    #[arg(long, default_value_t = 300)]
    clips_per_command: usize,
    #[arg(long, default_value_t = 2600)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SizeArgs {
    /// Preset sizes; explicit counts override it.
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

impl SizeArgs {
    fn resolve(&self, preset: impl Fn(Profile) -> SplitSizes) -> SplitSizes {
        let base = preset(self.profile.unwrap_or(Profile::Tiny));
        SplitSizes::new(self.train.unwrap_or(base.train), self.val.unwrap_or(base.val), self.test.unwrap_or(base.test))
    }
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sizes: SizeArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_train: Option<usize>,
    #[arg(long)]
    max_val: Option<usize>,
    /// Directory for the best checkpoint.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Learning-curve CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self, stage: Stage) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => TrainConfig::for_stage(stage),
        };
        cfg.stage = stage;
        if let Some(profile) = self.profile {
            let s = profile.settings();
            cfg.batch_size = s.batch_size;
            match stage {
                Stage::Pretrain => {
                    cfg.epochs = s.pretrain_epochs;
                    cfg.batch_size = s.pretrain_batch_size;
                    cfg.max_train = s.pretrain_clips;
                }
                Stage::Wm => cfg.epochs = s.wm_epochs,
                Stage::Similarity => cfg.epochs = s.similarity_epochs,
            }
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.max_train.is_some() {
            cfg.max_train = self.max_train;
        }
        if self.max_val.is_some() {
            cfg.max_val = self.max_val;
        }
        if let Some(v) = &self.out_dir {
            cfg.checkpoint_dir = v.clone();
        }
        if let Some(v) = &self.log {
            cfg.log_path = v.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct TrainWmArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct BuildPairsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    wm_ckpt: PathBuf,
    /// Receives marked/, extracted/ and pairs.tsv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Source draws per split; each yields two pairs.
    #[command(flatten)]
    sizes: SizeArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainSimArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    wm_ckpt: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    wm_ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    /// Marked image; no cover is needed.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    wm_ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    audio1: PathBuf,
    #[arg(long)]
    audio2: PathBuf,
    #[arg(long)]
    sim_ckpt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct EvalWmArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    wm_ckpt: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    wm_ckpt: PathBuf,
    #[arg(long)]
    sim_ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML sweep description; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    attack: Option<DistortionKind>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    sim_ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct DistortArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kind: DistortionKind,
    /// Cutout fraction or rotation degrees.
    #[arg(long, allow_hyphen_values = true)]
    parameter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn report(outcome: &TrainOutcome) {
    println!("best epoch {} -> {} (sha256 {})", outcome.best_epoch, outcome.checkpoint.display(), outcome.sha256);
}

/// Extractions written by this tool are read verbatim; anything else is
/// resampled and peak-normalized like corpus clips.
fn load_watermark(path: &Path) -> Result<AudioClip> {
    let (samples, rate) = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
    if rate == SAMPLE_RATE && samples.len() == AUDIO_LEN {
        Ok(read_clip(path)?)
    } else {
        Ok(load_audio(path, SAMPLE_RATE)?)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SynthCorpus(a) => {
            let cfg = SynthConfig {
                commands: a.commands,
                clips_per_command: a.clips_per_command,
                images: a.images,
                seed: a.seed,
            };
            let clips = write_audio_corpus(&a.out.join("audio"), &cfg)?;
            let images = write_image_corpus(&a.out.join("images"), &cfg)?;
            println!("wrote {} clips and {} images under {}", clips.len(), images.len(), a.out.display());
        }
        Command::BuildManifest(a) => {
            let sizes = a.sizes.resolve(|p| p.settings().manifest);
            let manifest = build_manifest(&a.images, &a.audio, sizes, a.seed)?;
            manifest.save(&a.out)?;
            let c = manifest.counts();
            println!("train {} val {} test {} -> {}", c.train, c.val, c.test, a.out.display());
        }
        Command::Pretrain(a) => {
            let cfg = a.train.resolve(Stage::Pretrain)?;
            let manifest = PairManifest::load(&a.manifest)?;
            report(&pretrain_encoder_decoder(&cfg, &manifest)?);
        }
        Command::TrainWm(a) => {
            let mut cfg = a.train.resolve(Stage::Wm)?;
            if let Some(v) = a.lambda1 {
                cfg.loss_weights.lambda1 = v;
            }
            if let Some(v) = a.lambda2 {
                cfg.loss_weights.lambda2 = v;
            }
            let manifest = PairManifest::load(&a.manifest)?;
            report(&train_wm(&cfg, &manifest, &a.pretrained)?);
        }
        Command::BuildPairs(a) => {
            let sizes = a.sizes.resolve(|p| p.settings().similarity_sources);
            let manifest = PairManifest::load(&a.manifest)?;
            let (wm, _) = WmNetwork::<f32>::load(&a.wm_ckpt)?;
            let pairs = build_similarity_pairs(&manifest, &wm, &default_distortion_grid(), sizes, &a.out_dir, a.seed)?;
            println!("wrote {} pairs to {}", pairs.records.len(), a.out_dir.join("pairs.tsv").display());
        }
        Command::TrainSim(a) => {
            let cfg = a.train.resolve(Stage::Similarity)?;
            let pairs = PairList::load(&a.pairs)?;
            report(&train_similarity(&cfg, &pairs, &a.wm_ckpt)?);
        }
        Command::Embed(a) => {
            let (wm, _) = WmNetwork::<f32>::load(&a.wm_ckpt)?;
            let audio = load_audio(&a.audio, SAMPLE_RATE)?;
            let cover = load_image(&a.image)?;
            let code = wm.encode(&reshape_audio(&audio));
            let marked = wm.embed(&code, &cover).quantize();
            save_image(&marked, &a.out)?;
            println!("{:.6}", ssim(&cover, &marked));
        }
        Command::Extract(a) => {
            let (wm, _) = WmNetwork::<f32>::load(&a.wm_ckpt)?;
            let marked = load_image(&a.image)?;
            let extracted = wm.decode(&wm.extract(&marked));
            save_audio_exact(&extracted, &a.out)?;
        }
        Command::Verify(a) => {
            let threshold = check_threshold(a.threshold)?;
            let (sim, _) = SimilarityNetwork::<f32>::load(&a.sim_ckpt)?;
            let w1 = load_watermark(&a.audio1)?;
            let w2 = load_watermark(&a.audio2)?;
            let score = sim.similarity(&w1, &w2)?;
            let same = classify(score, threshold);
            println!("{:.6} {}", score.value(), if same { "same" } else { "different" });
            return Ok(if same { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::EvalWm(a) => {
            let manifest = PairManifest::load(&a.manifest)?;
            let (wm, _) = WmNetwork::<f32>::load(&a.wm_ckpt)?;
            let mut pairs = manifest.load_pairs(a.split)?;
            if let Some(n) = a.limit {
                pairs.truncate(n);
            }
            let e = evaluate_wm(&wm, &pairs)?;
            println!(
                "ssim {:.6} rmse {:.6} continuous_ssim {:.6} continuous_rmse {:.6} n {}",
                e.ssim, e.rmse, e.continuous_ssim, e.continuous_rmse, e.n
            );
        }
        Command::Sweep(a) => {
            let mut sweep = match (&a.config, a.attack) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str::<SweepConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                (None, Some(kind)) => SweepConfig::for_attack(kind)?,
                (None, None) => SweepConfig::cutout(),
            };
            if let (Some(_), Some(kind)) = (&a.config, a.attack) {
                if kind != sweep.attack {
                    bail!("--attack {kind} conflicts with the sweep file's {}", sweep.attack);
                }
            }
            if let Some(v) = a.trials {
                sweep.trials_per_point = v;
            }
            if let Some(v) = a.seed {
                sweep.seeds = vec![v];
            }
            if let Some(v) = a.threshold {
                sweep.threshold = v;
            }
            sweep.validate()?;
            let manifest = PairManifest::load(&a.manifest)?;
            let (wm, _) = WmNetwork::<f32>::load(&a.wm_ckpt)?;
            let (sim, _) = SimilarityNetwork::<f32>::load(&a.sim_ckpt)?;
            let report = run_sweep(&sweep, &manifest, &wm, &sim)?;
            report.write_csv(&a.out)?;
            for row in &report.rows {
                println!(
                    "{} {:>6}: rmse {:.6} accuracy {:.4}",
                    row.attack, row.parameter, row.mean_rmse, row.similarity_accuracy
                );
            }
        }
        Command::Ablation(a) => {
            let threshold = check_threshold(a.threshold)?;
            let pairs = PairList::load(&a.pairs)?;
            let (sim, _) = SimilarityNetwork::<f32>::load(&a.sim_ckpt)?;
            let report = ablation_table(&sim, &pairs, a.split)?;
            report.write_csv(&a.out)?;
            let flagged = report.high_rmse_accepted(3.0, threshold).count();
            println!(
                "{} pairs; baseline rmse {:.6}; {flagged} matched pairs with rmse >= 3x baseline accepted",
                report.rows.len(),
                report.baseline_rmse
            );
        }
        Command::Distort(a) => {
            let spec = match a.kind {
                DistortionKind::None => DistortionSpec::none(),
                DistortionKind::Cutout => DistortionSpec::cutout(a.parameter, a.seed)?,
                DistortionKind::Rotation => DistortionSpec::rotation(a.parameter)?,
            };
            let img = load_image(&a.image)?;
            save_image(&distortion::apply(&img, &spec)?, &a.out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
