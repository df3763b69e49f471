//! Synthetic stand-ins for a spoken-command corpus and a natural-image set.
//!
//! Each command is a fixed sequence of voiced syllables with its own formant
//! targets; clips vary speaker pitch, tempo, onset, loudness and noise. Covers
//! are smooth gradients overlaid with random shapes and fine texture.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::media::{save_image, Image, IMAGE_CHANNELS, IMAGE_SIDE};
use crate::{Error, Result};

/// Names used for the first command directories.
pub const COMMAND_NAMES: [&str; 20] = [
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go", "zero", "one", "two", "three", "four",
    "five", "six", "seven", "eight", "nine",
];

/// Rate the clips are written at, so loading exercises resampling.
pub const SYNTH_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub commands: usize,
    pub clips_per_command: usize,
    pub images: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { commands: 12, clips_per_command: 300, images: 2600, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.commands < 2 || self.commands > COMMAND_NAMES.len() {
            return Err(Error::config(format!("commands must be between 2 and {}", COMMAND_NAMES.len())));
        }
        if self.clips_per_command == 0 {
            return Err(Error::config("clips per command must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Syllable {
    formants: [f64; 3],
    /// Relative duration.
    weight: f64,
    /// Pitch glide over the syllable, as a ratio of the speaker's pitch.
    glide: f64,
}

/// Deterministic per-command template.
fn command_template(index: usize, seed: u64) -> Vec<Syllable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00 ^ (index as u64) << 8);
    let count = rng.gen_range(1..=3);
    (0..count)
        .map(|_| Syllable {
            formants: [rng.gen_range(250.0..900.0), rng.gen_range(900.0..2400.0), rng.gen_range(2400.0..3400.0)],
            weight: rng.gen_range(0.6..1.4),
            glide: rng.gen_range(-0.25..0.25),
        })
        .collect()
}

/// One utterance of `template` at `rate` Hz, 1 s long.
fn render_clip(template: &[Syllable], rate: u32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = rate as usize;
    let fs = rate as f64;
    let pitch = rng.gen_range(90.0..240.0);
    let formant_shift = rng.gen_range(0.9..1.12);
    let onset = rng.gen_range(0.05..0.3);
    let total = rng.gen_range(0.4..0.6);
    let gap = 0.04;
    let weights: f64 = template.iter().map(|s| s.weight).sum();
    let noise = Normal::new(0.0, rng.gen_range(0.002..0.02)).expect("valid deviation");

    let mut out = vec![0.0f64; n];
    let mut start = onset;
    for syl in template {
        let dur = total * syl.weight / weights;
        let (a, b) = ((start * fs) as usize, (((start + dur) * fs) as usize).min(n));
        let mut phase = 0.0;
        for (k, slot) in out.iter_mut().enumerate().take(b).skip(a) {
            let u = (k - a) as f64 / (b - a).max(1) as f64;
            let f0 = pitch * (1.0 + syl.glide * u);
            phase += 2.0 * PI * f0 / fs;
            let env = (PI * u).sin().powf(0.6);
            let mut v = 0.0;
            let mut h = 1;
            while (h as f64) * f0 < 0.45 * fs && h <= 40 {
                let fh = h as f64 * f0;
                let gain: f64 = syl
                    .formants
                    .iter()
                    .enumerate()
                    .map(|(i, &f)| {
                        let centre = f * formant_shift;
                        let bw = 80.0 + 40.0 * i as f64;
                        (1.0 / (1.0 + ((fh - centre) / bw).powi(2))) / (i + 1) as f64
                    })
                    .sum();
                v += gain * (h as f64 * phase).sin();
                h += 1;
            }
            *slot += env * v;
        }
        start += dur + gap;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let level = rng.gen_range(0.3..0.9) / peak;
    out.iter().map(|v| ((v * level + noise.sample(rng)).clamp(-1.0, 1.0)) as f32).collect()
}

fn write_wav16(path: &Path, samples: &[f32], rate: u32) -> Result<()> {
    let spec =
        hound::WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample((s * 32767.0).round() as i16).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Writes `<dir>/<command>/<index>.wav` for every command and clip.
pub fn write_audio_corpus(dir: &Path, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..cfg.commands).flat_map(|c| (0..cfg.clips_per_command).map(move |k| (c, k))).collect();
    let templates: Vec<Vec<Syllable>> = (0..cfg.commands).map(|c| command_template(c, cfg.seed)).collect();
    for name in &COMMAND_NAMES[..cfg.commands] {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    jobs.par_iter()
        .map(|&(c, k)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9) ^ ((c as u64) << 32 | k as u64));
            let samples = render_clip(&templates[c], SYNTH_RATE, &mut rng);
            let path = dir.join(COMMAND_NAMES[c]).join(format!("{k:05}.wav"));
            write_wav16(&path, &samples, SYNTH_RATE)?;
            Ok(path)
        })
        .collect()
}

fn render_image(rng: &mut ChaCha8Rng) -> Image {
    let side = IMAGE_SIDE as f32;
    let base: [[f32; 3]; 2] = [[rng.gen(), rng.gen(), rng.gen()], [rng.gen(), rng.gen(), rng.gen()]];
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut px = Array3::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS), |(y, x, c)| {
        let t = ((x as f32 / side - 0.5) * dx + (y as f32 / side - 0.5) * dy + 0.5).clamp(0.0, 1.0);
        base[0][c] * (1.0 - t) + base[1][c] * t
    });
    for _ in 0..rng.gen_range(3..12) {
        let colour: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (cx, cy) = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
        let (rx, ry) = (rng.gen_range(4.0..40.0f32), rng.gen_range(4.0..40.0f32));
        let disc = rng.gen_bool(0.5);
        let alpha = rng.gen_range(0.5..1.0f32);
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let (u, v) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let inside = if disc { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    for c in 0..IMAGE_CHANNELS {
                        let p = &mut px[[y, x, c]];
                        *p = *p * (1.0 - alpha) + colour[c] * alpha;
                    }
                }
            }
        }
    }
    let grain = Normal::new(0.0f32, rng.gen_range(0.0..0.04)).expect("valid deviation");
    px.mapv_inplace(|v| (v + grain.sample(rng)).clamp(0.0, 1.0));
    Image::new(px).expect("pixels are within [0, 1]")
}

/// Writes `<dir>/<index>.png` covers.
pub fn write_image_corpus(dir: &Path, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..cfg.images)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1AA6_E000_0000 ^ i as u64);
            let path = dir.join(format!("{i:05}.png"));
            save_image(&render_image(&mut rng), &path)?;
            Ok(path)
        })
        .collect()
}
