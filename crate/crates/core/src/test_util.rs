use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::media::{save_audio, save_image, AudioClip, Image};

/// Writes `commands` directories of tonal clips plus `images` patterned covers.
pub fn write_corpus(root: &Path, commands: usize, per_command: usize, images: usize) -> (PathBuf, PathBuf) {
    let audio = root.join("audio");
    let img = root.join("images");
    for c in 0..commands {
        let dir = audio.join(format!("cmd{c:02}"));
        fs::create_dir_all(&dir).unwrap();
        for k in 0..per_command {
            let samples = (0..8192).map(|t| 0.5 * ((t as f32) * 0.01 * (c + 1) as f32 + k as f32).sin()).collect();
            save_audio(&AudioClip::new(samples).unwrap(), &dir.join(format!("{k:03}.wav"))).unwrap();
        }
    }
    fs::create_dir_all(&img).unwrap();
    for i in 0..images {
        let v = (i % 255) as f32 / 255.0;
        let px = Array3::from_shape_fn((128, 128, 3), |(y, x, c)| ((x + y + c) % 7) as f32 / 7.0 * 0.5 + v * 0.5);
        save_image(&Image::new(px).unwrap(), &img.join(format!("{i:04}.png"))).unwrap();
    }
    (img, audio)
}
