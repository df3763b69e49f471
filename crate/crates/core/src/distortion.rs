//! Marked-image attacks: random rectangular cutout and small rotations.

use std::fmt;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::media::{MarkedImage, IMAGE_CHANNELS, IMAGE_SIDE};
use crate::{Error, Result};

pub const MAX_CUTOUT_FRACTION: f64 = 0.9;
pub const MAX_ROTATION_DEGREES: f64 = 6.0;
/// Side lengths of cutout rectangles, inclusive.
pub const CUTOUT_SIDE_RANGE: (usize, usize) = (8, 48);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionKind {
    None,
    Cutout,
    Rotation,
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistortionKind::None => "none",
            DistortionKind::Cutout => "cutout",
            DistortionKind::Rotation => "rotation",
        })
    }
}

impl std::str::FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DistortionKind::None),
            "cutout" => Ok(DistortionKind::Cutout),
            "rotation" | "rotate" => Ok(DistortionKind::Rotation),
            other => Err(Error::invalid(format!("unknown distortion kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    #[serde(default)]
    pub cutout_fraction: f64,
    #[serde(default)]
    pub rotation_degrees: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DistortionSpec {
    pub fn none() -> Self {
        Self { kind: DistortionKind::None, cutout_fraction: 0.0, rotation_degrees: 0.0, seed: 0 }
    }

    pub fn cutout(fraction: f64, seed: u64) -> Result<Self> {
        let spec = Self { kind: DistortionKind::Cutout, cutout_fraction: fraction, ..Self::none() };
        spec.validate()?;
        Ok(Self { seed, ..spec })
    }

    pub fn rotation(degrees: f64) -> Result<Self> {
        let spec = Self { kind: DistortionKind::Rotation, rotation_degrees: degrees, ..Self::none() };
        spec.validate()?;
        Ok(spec)
    }

    /// The parameter selected by `kind` (0 for `none`).
    pub fn parameter(&self) -> f64 {
        match self.kind {
            DistortionKind::None => 0.0,
            DistortionKind::Cutout => self.cutout_fraction,
            DistortionKind::Rotation => self.rotation_degrees,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DistortionKind::None => Ok(()),
            DistortionKind::Cutout => check_fraction(self.cutout_fraction),
            DistortionKind::Rotation => check_degrees(self.rotation_degrees),
        }
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if (0.0..=MAX_CUTOUT_FRACTION).contains(&fraction) {
        Ok(())
    } else {
        Err(Error::invalid(format!("cutout fraction {fraction} outside [0, {MAX_CUTOUT_FRACTION}]")))
    }
}

fn check_degrees(degrees: f64) -> Result<()> {
    if degrees.abs() <= MAX_ROTATION_DEGREES {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "rotation {degrees} degrees outside [-{MAX_ROTATION_DEGREES}, {MAX_ROTATION_DEGREES}]"
        )))
    }
}

/// Boolean mask of the pixels a cutout removes.
///
/// Rectangles are drawn until the number of unique covered pixels reaches
/// `ceil(fraction * 128^2)`. The last rectangle is filled row by row and
/// stops at the row that reaches the target, so the overshoot is below one
/// rectangle row.
pub fn cutout_mask(fraction: f64, seed: u64) -> Result<Vec<bool>> {
    check_fraction(fraction)?;
    let side = IMAGE_SIDE;
    let target = (fraction * (side * side) as f64).ceil() as usize;
    let mut mask = vec![false; side * side];
    let mut covered = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = CUTOUT_SIDE_RANGE;
    while covered < target {
        let w = rng.gen_range(lo..=hi);
        let h = rng.gen_range(lo..=hi);
        let x0 = rng.gen_range(0..=side - w);
        let y0 = rng.gen_range(0..=side - h);
        for y in y0..y0 + h {
            for m in &mut mask[y * side + x0..y * side + x0 + w] {
                if !*m {
                    *m = true;
                    covered += 1;
                }
            }
            if covered >= target {
                break;
            }
        }
    }
    Ok(mask)
}

/// Zeroes randomly placed rectangles covering at least `fraction` of the
/// image area.
pub fn cutout(m: &MarkedImage, fraction: f64, seed: u64) -> Result<MarkedImage> {
    let mask = cutout_mask(fraction, seed)?;
    let mut out = m.clone();
    for ((y, x, _), v) in out.pixels_mut().indexed_iter_mut() {
        if mask[y * IMAGE_SIDE + x] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Rotates counter-clockwise (in display coordinates, y down) about the image
/// center with bilinear sampling; samples outside the source read as 0.
pub fn rotate(m: &MarkedImage, degrees: f64) -> Result<MarkedImage> {
    check_degrees(degrees)?;
    if degrees == 0.0 {
        return Ok(m.clone());
    }
    let src = m.pixels();
    let side = IMAGE_SIDE as isize;
    let center = (IMAGE_SIDE as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let fetch = |y: isize, x: isize, c: usize| -> f64 {
        if (0..side).contains(&y) && (0..side).contains(&x) {
            src[[y as usize, x as usize, c]] as f64
        } else {
            0.0
        }
    };
    let mut out = Array3::<f32>::zeros((IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS));
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            // Inverse map: output pixel -> source location.
            let dx = x as f64 - center;
            let dy = y as f64 - center;
            let sx = cos * dx - sin * dy + center;
            let sy = sin * dx + cos * dy + center;
            let (fx, fy) = (sx.floor(), sy.floor());
            let (ax, ay) = (sx - fx, sy - fy);
            let (x0, y0) = (fx as isize, fy as isize);
            for c in 0..IMAGE_CHANNELS {
                let top = (1.0 - ax) * fetch(y0, x0, c) + ax * fetch(y0, x0 + 1, c);
                let bottom = (1.0 - ax) * fetch(y0 + 1, x0, c) + ax * fetch(y0 + 1, x0 + 1, c);
                let v = (1.0 - ay) * top + ay * bottom;
                out[[y, x, c]] = (v as f32).clamp(0.0, 1.0);
            }
        }
    }
    MarkedImage::new(out)
}

pub fn apply(m: &MarkedImage, spec: &DistortionSpec) -> Result<MarkedImage> {
    spec.validate()?;
    match spec.kind {
        DistortionKind::None => Ok(m.clone()),
        DistortionKind::Cutout => cutout(m, spec.cutout_fraction, spec.seed),
        DistortionKind::Rotation => rotate(m, spec.rotation_degrees),
    }
}

/// Fraction of pixels that are exactly zero in every channel.
pub fn zeroed_fraction(m: &MarkedImage) -> f64 {
    let p = m.pixels();
    let mut zero = 0;
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            if (0..IMAGE_CHANNELS).all(|c| p[[y, x, c]] == 0.0) {
                zero += 1;
            }
        }
    }
    zero as f64 / (IMAGE_SIDE * IMAGE_SIDE) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn smooth_image() -> MarkedImage {
        let s = IMAGE_SIDE as f32;
        MarkedImage::new(Array3::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE, 3), |(y, x, c)| {
            let (u, v) = (x as f32 / s, y as f32 / s);
            let phase = c as f32 * 1.3;
            0.5 + 0.35 * (6.0 * u + phase).sin() * (4.0 * v - phase).cos()
        }))
        .unwrap()
    }

    fn interior_mae(a: &MarkedImage, b: &MarkedImage, border: usize) -> f64 {
        let (mut sum, mut n) = (0.0, 0);
        for y in border..IMAGE_SIDE - border {
            for x in border..IMAGE_SIDE - border {
                for c in 0..3 {
                    sum += (a.pixels()[[y, x, c]] - b.pixels()[[y, x, c]]).abs() as f64;
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn zero_parameters_are_exact_identities() {
        let img = smooth_image();
        assert_eq!(cutout(&img, 0.0, 3).unwrap(), img);
        assert_eq!(rotate(&img, 0.0).unwrap(), img);
        assert_eq!(apply(&img, &DistortionSpec::none()).unwrap(), img);
    }

    #[test]
    fn half_cutout_zeroes_between_half_and_55_percent() {
        let img = MarkedImage::filled(0.7).unwrap();
        for seed in 0..20 {
            let f = zeroed_fraction(&cutout(&img, 0.5, seed).unwrap());
            assert!((0.5..=0.55).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn overshoot_is_below_one_rectangle_row() {
        for seed in 0..10 {
            for fraction in [0.05, 0.3, 0.9] {
                let covered = cutout_mask(fraction, seed).unwrap().iter().filter(|&&m| m).count();
                let target = (fraction * 16384.0).ceil() as usize;
                assert!(covered >= target && covered < target + CUTOUT_SIDE_RANGE.1);
            }
        }
    }

    #[test]
    fn cutout_leaves_unmasked_pixels_alone() {
        let img = smooth_image();
        let mask = cutout_mask(0.25, 9).unwrap();
        let out = cutout(&img, 0.25, 9).unwrap();
        for ((y, x, c), &v) in out.pixels().indexed_iter() {
            if mask[y * IMAGE_SIDE + x] {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, img.pixels()[[y, x, c]]);
            }
        }
    }

    #[test]
    fn cutout_is_reproducible_per_seed() {
        let img = smooth_image();
        let spec = DistortionSpec::cutout(0.25, 42).unwrap();
        assert_eq!(apply(&img, &spec).unwrap(), apply(&img, &spec).unwrap());
        assert_ne!(cutout_mask(0.25, 42).unwrap(), cutout_mask(0.25, 43).unwrap());
    }

    #[test]
    fn rotation_round_trip_is_close_on_the_interior() {
        let img = smooth_image();
        for deg in [1.0, 3.0, 5.0, -6.0] {
            let back = rotate(&rotate(&img, deg).unwrap(), -deg).unwrap();
            let mae = interior_mae(&img, &back, 10);
            assert!(mae < 0.02, "{deg}: {mae}");
        }
    }

    #[test]
    fn rotation_matches_dispatch_and_fills_corners_with_zero() {
        let img = MarkedImage::filled(1.0).unwrap();
        let r = rotate(&img, 6.0).unwrap();
        assert_eq!(apply(&img, &DistortionSpec::rotation(6.0).unwrap()).unwrap(), r);
        assert_eq!(r.pixels()[[0, 0, 0]], 0.0);
        assert_eq!(r.pixels()[[64, 64, 1]], 1.0);
    }

    #[test]
    fn positive_angle_turns_counter_clockwise() {
        // A bright pixel right of center moves up for a positive angle.
        let mut px = Array3::zeros((IMAGE_SIDE, IMAGE_SIDE, 3));
        px[[64, 110, 0]] = 1.0;
        let img = MarkedImage::new(px).unwrap();
        let r = rotate(&img, 6.0).unwrap();
        let (mut best, mut at) = (0.0, (0, 0));
        for ((y, x, c), &v) in r.pixels().indexed_iter() {
            if c == 0 && v > best {
                best = v;
                at = (y, x);
            }
        }
        assert!(at.0 < 64, "moved to {at:?}");
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let img = smooth_image();
        assert!(matches!(cutout(&img, 0.95, 0), Err(Error::InvalidInput(_))));
        assert!(matches!(cutout(&img, -0.1, 0), Err(Error::InvalidInput(_))));
        assert!(matches!(rotate(&img, 6.5), Err(Error::InvalidInput(_))));
        assert!(DistortionSpec::rotation(-7.0).is_err());
        assert_eq!("rotation".parse::<DistortionKind>().unwrap(), DistortionKind::Rotation);
        assert!("jpeg".parse::<DistortionKind>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn outputs_stay_in_unit_range(fraction in 0.0f64..0.9, deg in -6.0f64..6.0, seed in any::<u64>()) {
            let img = smooth_image();
            let c = cutout(&img, fraction, seed).unwrap();
            let r = rotate(&img, deg).unwrap();
            prop_assert!(c.pixels().iter().chain(r.pixels().iter()).all(|v| (0.0..=1.0).contains(v)));
            let f = zeroed_fraction(&c);
            prop_assert!(f >= fraction - 1e-12 && f < fraction + 48.0 / 16384.0 + 1e-12);
        }
    }
}
