//! Audio and image loading, validation and canonical reshaping.
//!
//! Audio is mono, 8192 samples at 8192 Hz, peak-normalized to `[-1, 1]`.
//! Images are 128x128 RGB stored height-major as `[row, col, channel]` with
//! values in `[0, 1]`.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array2, Array3, ArrayView2};
use rubato::{FftFixedInOut, Resampler};

use crate::error::{ensure_shape, Error, Result};
use crate::nn::Real;

pub const SAMPLE_RATE: u32 = 8192;
pub const AUDIO_LEN: usize = 8192;
pub const FRAME_STEPS: usize = 128;
pub const FRAME_DIM: usize = 64;
pub const IMAGE_SIDE: usize = 128;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Fixed-length mono waveform; the watermark payload.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.len() != AUDIO_LEN {
            return Err(Error::invalid(format!("audio clip must have {AUDIO_LEN} samples, got {}", samples.len())));
        }
        if let Some(bad) = samples.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::invalid(format!("audio sample {bad} outside [-1, 1]")));
        }
        Ok(Self { samples })
    }

    pub fn silence() -> Self {
        Self { samples: vec![0.0; AUDIO_LEN] }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// `[128 steps, 64 features]` view of an [`AudioClip`].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFrameMatrix {
    frames: Array2<f32>,
}

impl AudioFrameMatrix {
    pub fn new(frames: Array2<f32>) -> Result<Self> {
        ensure_shape("audio frames", frames.shape(), &[FRAME_STEPS, FRAME_DIM])?;
        Ok(Self { frames })
    }

    pub fn frames(&self) -> ArrayView2<'_, f32> {
        self.frames.view()
    }

    /// Row-major flatten; inverse of [`reshape_audio`].
    pub fn flatten(&self) -> Result<AudioClip> {
        AudioClip::new(self.frames.iter().copied().collect())
    }
}

/// `frames[i][j] = samples[64 i + j]`.
pub fn reshape_audio(clip: &AudioClip) -> AudioFrameMatrix {
    let frames = Array2::from_shape_vec((FRAME_STEPS, FRAME_DIM), clip.samples.clone()).expect("clip length is fixed");
    AudioFrameMatrix { frames }
}

/// 128x128 RGB tensor with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f32>,
}

/// Host image before embedding.
pub type CoverImage = Image;
/// Host image carrying an embedded watermark code.
pub type MarkedImage = Image;

impl Image {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        ensure_shape("image", pixels.shape(), &[IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS])?;
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn filled(value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS), value))
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    /// Mutable access for attacks; callers keep values inside `[0, 1]`.
    pub(crate) fn pixels_mut(&mut self) -> &mut Array3<f32> {
        &mut self.pixels
    }

    /// Channel-major `[3, 128 * 128]` layout used by the convolutional nets.
    pub fn to_chw<T: Real>(&self) -> Array2<T> {
        let mut out = Array2::zeros((IMAGE_CHANNELS, IMAGE_PIXELS));
        for ((y, x, c), &v) in self.pixels.indexed_iter() {
            out[[c, y * IMAGE_SIDE + x]] = T::lit(v as f64);
        }
        out
    }

    pub fn from_chw<T: Real>(chw: ArrayView2<T>) -> Result<Self> {
        ensure_shape("channel-major image", chw.shape(), &[IMAGE_CHANNELS, IMAGE_PIXELS])?;
        let pixels = Array3::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS), |(y, x, c)| {
            chw[[c, y * IMAGE_SIDE + x]].to_f32().unwrap_or(f32::NAN)
        });
        Self::new(pixels)
    }

    /// Round-trips every value through 8-bit storage.
    pub fn quantize(&self) -> Self {
        Self { pixels: self.pixels.mapv(|v| to_u8(v) as f32 / 255.0) }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Band-limited resampling of a mono signal.
fn resample(signal: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if from == to {
        return Ok(signal.to_vec());
    }
    let mut resampler = FftFixedInOut::<f64>::new(from as usize, to as usize, 1024, 1)
        .map_err(|e| Error::invalid(format!("cannot resample {from} Hz -> {to} Hz: {e}")))?;
    let delay = resampler.output_delay();
    let wanted = (signal.len() as u64 * to as u64).div_ceil(from as u64) as usize;
    let mut out = Vec::with_capacity(wanted + delay);
    let mut pos = 0;
    while out.len() < wanted + delay {
        let chunk = resampler.input_frames_next();
        let mut block = vec![0.0; chunk];
        if pos < signal.len() {
            let n = chunk.min(signal.len() - pos);
            block[..n].copy_from_slice(&signal[pos..pos + n]);
        }
        pos += chunk;
        let produced =
            resampler.process(&[block], None).map_err(|e| Error::invalid(format!("resampling failed: {e}")))?;
        out.extend_from_slice(&produced[0]);
    }
    Ok(out[delay..delay + wanted].to_vec())
}

/// Reads a PCM or float WAV file without any processing: channels are mixed
/// down and integer samples scaled by their positive full-scale value.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(other),
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(wav_err)?
        }
        hound::SampleFormat::Int => {
            let full = ((1i64 << (spec.bits_per_sample - 1)) - 1) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 / full).clamp(-1.0, 1.0)))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let mono = interleaved.chunks(channels).map(|frame| frame.iter().sum::<f64>() / frame.len() as f64).collect();
    Ok((mono, spec.sample_rate))
}

/// Loads, mixes to mono, resamples, peak-normalizes, then pads or truncates
/// to exactly [`AUDIO_LEN`] samples.
pub fn load_audio(path: &Path, target_rate: u32) -> Result<AudioClip> {
    if target_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!("target rate must be {SAMPLE_RATE} Hz, got {target_rate}")));
    }
    let (mono, rate) = read_wav(path)?;
    if mono.is_empty() {
        return Err(Error::invalid(format!("{} contains no audio", path.display())));
    }
    if rate == 0 {
        return Err(Error::invalid(format!("{} has a zero sample rate", path.display())));
    }
    let resampled = resample(&mono, rate, target_rate)?;
    let peak = resampled.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let mut samples: Vec<f32> =
        resampled.iter().take(AUDIO_LEN).map(|s| ((s * scale) as f32).clamp(-1.0, 1.0)).collect();
    samples.resize(AUDIO_LEN, 0.0);
    AudioClip::new(samples)
}

/// Reads a WAV written by [`save_audio`] (or any 8192-sample mono clip)
/// without resampling or normalization.
pub fn read_clip(path: &Path) -> Result<AudioClip> {
    let (mono, rate) = read_wav(path)?;
    if rate != SAMPLE_RATE {
        return Err(Error::invalid(format!("{}: expected {SAMPLE_RATE} Hz, found {rate} Hz", path.display())));
    }
    AudioClip::new(mono.iter().map(|&s| s as f32).collect())
}

fn wav_writer(
    path: &Path,
    bits: u16,
    format: hound::SampleFormat,
) -> Result<hound::WavWriter<std::io::BufWriter<std::fs::File>>> {
    let spec = hound::WavSpec { channels: 1, sample_rate: SAMPLE_RATE, bits_per_sample: bits, sample_format: format };
    hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        source => Error::Wav { path: path.to_path_buf(), source },
    })
}

/// 16-bit PCM mono at 8192 Hz.
pub fn save_audio(clip: &AudioClip, path: &Path) -> Result<()> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut writer = wav_writer(path, 16, hound::SampleFormat::Int)?;
    for &s in &clip.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// 32-bit float mono at 8192 Hz; [`read_clip`] returns the exact samples.
pub fn save_audio_exact(clip: &AudioClip, path: &Path) -> Result<()> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut writer = wav_writer(path, 32, hound::SampleFormat::Float)?;
    for &s in &clip.samples {
        writer.write_sample(s).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), source: other },
    }
}

/// Decodes any raster format, replicates grayscale to RGB, bilinearly
/// rescales to 128x128 and maps to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<CoverImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let side = IMAGE_SIDE as u32;
    let img = if img.dimensions() == (side, side) {
        img
    } else {
        image::imageops::resize(&img, side, side, FilterType::Triangle)
    };
    let pixels = Array3::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    });
    Image::new(pixels)
}

/// Lossless 8-bit PNG.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let side = IMAGE_SIDE as u32;
    let buf = image::RgbImage::from_fn(side, side, |x, y| {
        let p = |c| to_u8(img.pixels[[y as usize, x as usize, c]]);
        image::Rgb([p(0), p(1), p(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_save_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let clip = AudioClip::new((0..AUDIO_LEN).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).unwrap();
        save_audio_exact(&clip, &path).unwrap();
        assert_eq!(read_clip(&path).unwrap(), clip);
    }

    fn write_wav_f32(path: &Path, rate: u32, channels: u16, data: &[f32]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in data {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    fn random_clip(rng: &mut impl Rng) -> AudioClip {
        AudioClip::new((0..AUDIO_LEN).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).unwrap()
    }

    #[test]
    fn clip_invariants_are_enforced() {
        assert!(AudioClip::new(vec![0.0; 10]).is_err());
        let mut v = vec![0.0; AUDIO_LEN];
        v[3] = 1.5;
        assert!(AudioClip::new(v).is_err());
    }

    #[test]
    fn reshape_is_row_major() {
        let clip = AudioClip::new((0..AUDIO_LEN).map(|i| i as f32 / AUDIO_LEN as f32).collect()).unwrap();
        let frames = reshape_audio(&clip);
        for i in [0, 5, 127] {
            for j in [0, 17, 63] {
                assert_eq!(frames.frames()[[i, j]], clip.samples()[64 * i + j]);
            }
        }
        let zero = reshape_audio(&AudioClip::silence());
        assert!(zero.frames().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn reshape_round_trips_exactly(seed in any::<u64>()) {
            let clip = random_clip(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(reshape_audio(&clip).flatten().unwrap(), clip);
        }
    }

    #[test]
    fn load_resamples_16khz_second_to_canonical_clip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let data: Vec<f32> =
            (0..16000).map(|i| 0.3 * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 16000.0).sin()).collect();
        write_wav_f32(&path, 16000, 1, &data);
        let clip = load_audio(&path, SAMPLE_RATE).unwrap();
        assert_eq!(clip.samples().len(), AUDIO_LEN);
        assert_eq!(clip.sample_rate(), 8192);
        let peak = clip.samples().iter().fold(0.0f32, |m, s| m.max(s.abs()));
        assert!((peak - 1.0).abs() < 1e-6);
        // 16000 samples at 16 kHz give 8192 samples at 8192 Hz, no padding.
        assert!(clip.samples()[8100..].iter().any(|s| s.abs() > 0.5));
    }

    #[test]
    fn canonical_clip_loads_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut data: Vec<f32> = (0..AUDIO_LEN).map(|_| rng.gen_range(-0.9..0.9)).collect();
        data[100] = 1.0;
        write_wav_f32(&path, SAMPLE_RATE, 1, &data);
        assert_eq!(load_audio(&path, SAMPLE_RATE).unwrap().samples(), &data[..]);
    }

    #[test]
    fn short_clip_is_zero_padded_and_stereo_mixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let data: Vec<f32> = (0..4096)
            .flat_map(|i| {
                let v = if i % 2 == 0 { 0.5 } else { -0.25 };
                [v, v]
            })
            .collect();
        write_wav_f32(&path, SAMPLE_RATE, 2, &data);
        let clip = load_audio(&path, SAMPLE_RATE).unwrap();
        assert_eq!(clip.samples()[0], 1.0);
        assert_eq!(clip.samples()[1], -0.5);
        assert!(clip.samples()[4096..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.wav");
        assert!(matches!(load_audio(&missing, SAMPLE_RATE), Err(Error::Io { .. })));
        let empty = dir.path().join("empty.wav");
        write_wav_f32(&empty, SAMPLE_RATE, 1, &[]);
        assert!(matches!(load_audio(&empty, SAMPLE_RATE), Err(Error::InvalidInput(_))));
        let garbage = dir.path().join("garbage.png");
        std::fs::write(&garbage, b"not an image").unwrap();
        assert!(load_image(&garbage).is_err());
    }

    #[test]
    fn audio_save_load_within_one_quantization_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.wav");
        let clip = random_clip(&mut ChaCha8Rng::seed_from_u64(8));
        save_audio(&clip, &path).unwrap();
        let back = read_clip(&path).unwrap();
        let worst = clip.samples().iter().zip(back.samples()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 32767.0, "worst {worst}");
    }

    #[test]
    fn load_audio_is_idempotent_on_its_own_output() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let mut clip = random_clip(&mut ChaCha8Rng::seed_from_u64(2)).into_samples();
        clip[7] = -1.0;
        let clip = AudioClip::new(clip).unwrap();
        save_audio(&clip, &path).unwrap();
        let once = load_audio(&path, SAMPLE_RATE).unwrap();
        save_audio(&once, &path).unwrap();
        let twice = load_audio(&path, SAMPLE_RATE).unwrap();
        for (a, b) in once.samples().iter().zip(twice.samples()) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }

    #[test]
    fn image_load_rescales_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let photo = dir.path().join("photo.jpg");
        image::RgbImage::from_fn(640, 480, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 90]))
            .save(&photo)
            .unwrap();
        let img = load_image(&photo).unwrap();
        assert_eq!(img.pixels().shape(), &[128, 128, 3]);
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));

        let white = dir.path().join("white.png");
        image::RgbImage::from_pixel(128, 128, image::Rgb([255, 255, 255])).save(&white).unwrap();
        assert!(load_image(&white).unwrap().pixels().iter().all(|&v| v == 1.0));

        let black = dir.path().join("black.png");
        image::GrayImage::from_pixel(50, 70, image::Luma([0])).save(&black).unwrap();
        assert!(load_image(&black).unwrap().pixels().iter().all(|&v| v == 0.0));

        let gray = dir.path().join("gray.png");
        image::GrayImage::from_pixel(128, 128, image::Luma([51])).save(&gray).unwrap();
        assert!(load_image(&gray).unwrap().pixels().iter().all(|&v| v == 0.2));
    }

    #[test]
    fn image_save_load_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let zero = Image::filled(0.0).unwrap();
        let p = dir.path().join("z.png");
        save_image(&zero, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), zero);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Image::new(Array3::from_shape_simple_fn((128, 128, 3), || rng.gen_range(0.0..=1.0))).unwrap();
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            let worst = (img.pixels() - back.pixels()).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
            assert!(worst <= 1.0 / 255.0);
            assert_eq!(img.quantize(), back);
        }
    }

    #[test]
    fn chw_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Image::new(Array3::from_shape_simple_fn((128, 128, 3), || rng.gen_range(0.0..=1.0))).unwrap();
        let chw = img.to_chw::<f32>();
        assert_eq!(chw[[2, 5 * 128 + 9]], img.pixels()[[5, 9, 2]]);
        assert_eq!(Image::from_chw(chw.view()).unwrap(), img);
    }
}
