//! Test-set metrics, robustness sweeps and the RMSE-versus-verifier table.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{attacked_extraction, PairList, PairManifest, PairRecord, Split};
use crate::distortion::{self, DistortionKind, DistortionSpec};
use crate::losses::{rmse, ssim};
use crate::media::{AudioClip, CoverImage};
use crate::network::WmNetwork;
use crate::similarity::{check_threshold, SimilarityNetwork, DEFAULT_THRESHOLD};
use crate::training::CodeCache;
use crate::{Error, Result};

/// Average extraction RMSE on clean held-out watermarks at full scale.
pub const CLEAN_TEST_RMSE_REFERENCE: f64 = 0.009452;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WmEvaluation {
    /// Mean SSIM between covers and their stored (8-bit) marked images.
    pub ssim: f64,
    /// Mean per-clip RMSE between watermarks and their clean extractions.
    pub rmse: f64,
    /// SSIM of the unquantized marked images.
    pub continuous_ssim: f64,
    /// RMSE of extractions from the unquantized marked images.
    pub continuous_rmse: f64,
    pub n: usize,
}

/// Embeds, stores and extracts every pair without distortion, through both
/// the 8-bit stored path and the continuous training path.
pub fn evaluate_wm(wm: &WmNetwork<f32>, pairs: &[(AudioClip, CoverImage)]) -> Result<WmEvaluation> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluation needs at least one pair"));
    }
    let none = DistortionSpec::none();
    let per_pair: Vec<[f64; 4]> = pairs
        .par_iter()
        .map(|(audio, cover)| {
            let (marked, extracted) = attacked_extraction(wm, audio, cover, &none)?;
            let code = wm.encode(&crate::media::reshape_audio(audio));
            let raw = wm.embed(&code, cover);
            let raw_extracted = wm.decode(&wm.extract(&raw));
            Ok([
                ssim(cover, &marked),
                rmse(audio.samples(), extracted.samples())?,
                ssim(cover, &raw),
                rmse(audio.samples(), raw_extracted.samples())?,
            ])
        })
        .collect::<Result<_>>()?;
    let mean = |k: usize| per_pair.iter().map(|p| p[k]).sum::<f64>() / per_pair.len() as f64;
    Ok(WmEvaluation {
        ssim: mean(0),
        rmse: mean(1),
        continuous_ssim: mean(2),
        continuous_rmse: mean(3),
        n: per_pair.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub attack: DistortionKind,
    /// Cutout fractions or rotation degrees, in sweep order.
    pub grid: Vec<f64>,
    /// Test sources per grid point; each yields one matched and one mismatched pair.
    pub trials_per_point: usize,
    /// Cutout placement seeds, cycled over trials.
    pub seeds: Vec<u64>,
    pub threshold: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self::cutout()
    }
}

impl SweepConfig {
    /// Cutout fractions 0, 0.1, ..., 0.9.
    pub fn cutout() -> Self {
        Self {
            attack: DistortionKind::Cutout,
            grid: (0..=9).map(|i| i as f64 / 10.0).collect(),
            trials_per_point: 100,
            seeds: vec![0],
            threshold: DEFAULT_THRESHOLD,
        }
    }

    /// Rotations of -6 to +6 degrees in whole-degree steps.
    pub fn rotation() -> Self {
        Self { attack: DistortionKind::Rotation, grid: (-6..=6).map(f64::from).collect(), ..Self::cutout() }
    }

    pub fn for_attack(kind: DistortionKind) -> Result<Self> {
        match kind {
            DistortionKind::Cutout => Ok(Self::cutout()),
            DistortionKind::Rotation => Ok(Self::rotation()),
            DistortionKind::None => Err(Error::config("a sweep needs a cutout or rotation attack")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.attack == DistortionKind::None {
            return Err(Error::config("a sweep needs a cutout or rotation attack"));
        }
        if self.grid.is_empty() {
            return Err(Error::config("sweep grid is empty"));
        }
        if self.trials_per_point == 0 {
            return Err(Error::config("sweep needs at least one trial per point"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("sweep needs at least one seed"));
        }
        check_threshold(self.threshold)?;
        for &p in &self.grid {
            self.spec(p, 0)?;
        }
        Ok(())
    }

    fn spec(&self, parameter: f64, seed: u64) -> Result<DistortionSpec> {
        match self.attack {
            DistortionKind::Cutout => DistortionSpec::cutout(parameter, seed),
            DistortionKind::Rotation => DistortionSpec::rotation(parameter),
            DistortionKind::None => Ok(DistortionSpec::none()),
        }
    }

    fn trial_seed(&self, point: usize, trial: usize) -> u64 {
        let base = self.seeds[trial % self.seeds.len()];
        base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((point as u64) << 32 | trial as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub attack: DistortionKind,
    pub parameter: f64,
    /// Mean RMSE between each watermark and its attacked extraction.
    pub mean_rmse: f64,
    pub similarity_accuracy: f64,
    /// Pairs scored: half matched, half mismatched.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Writes the CSV through a temporary file so an aborted run leaves nothing behind.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomically(path, |file| {
            let mut w = csv::Writer::from_writer(file);
            for row in &self.rows {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        })
    }

    /// Increases of accuracy between consecutive grid points, as
    /// `(index of the later point, rise in accuracy)`.
    pub fn inversions(&self) -> Vec<(usize, f64)> {
        self.rows
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1].similarity_accuracy > w[0].similarity_accuracy)
            .map(|(i, w)| (i + 1, w[1].similarity_accuracy - w[0].similarity_accuracy))
            .collect()
    }

    /// Non-increasing accuracy up to `max_count` rises of at most `max_rise` each.
    pub fn is_non_increasing_within(&self, max_count: usize, max_rise: f64) -> bool {
        let inv = self.inversions();
        inv.len() <= max_count && inv.iter().all(|&(_, rise)| rise <= max_rise)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }
}

fn write_atomically(path: &Path, body: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let result = fs::File::create(&tmp)
        .map_err(|e| Error::io(&tmp, e))
        .and_then(|mut f| body(&mut f))
        .and_then(|_| fs::rename(&tmp, path).map_err(|e| Error::io(path, e)));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

struct SweepSource {
    audio: AudioClip,
    marked: CoverImage,
    code: Array2<f32>,
    /// Index of a source from a different command, for the mismatched pair.
    impostor: usize,
}

/// Distorts stored marked test images over `sweep.grid`, extracts, and
/// scores matched and mismatched pairs at every point.
pub fn run_sweep(
    sweep: &SweepConfig,
    manifest: &PairManifest,
    wm: &WmNetwork<f32>,
    sim: &SimilarityNetwork<f32>,
) -> Result<SweepReport> {
    sweep.validate()?;
    let entries: Vec<_> = manifest.split(Split::Test).cloned().collect();
    let commands: Vec<String> = entries.iter().map(|e| e.command()).collect();
    let loaded = manifest.load_pairs(Split::Test)?;
    if loaded.is_empty() {
        return Err(Error::config("manifest has no test pairs to sweep"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sweep.seeds[0]);
    let mut order: Vec<usize> = (0..loaded.len()).collect();
    order.shuffle(&mut rng);
    let picks: Vec<usize> = order.iter().cycle().take(sweep.trials_per_point).copied().collect();
    let mut impostors = Vec::with_capacity(picks.len());
    for &i in &picks {
        let others: Vec<usize> = (0..loaded.len()).filter(|&j| commands[j] != commands[i]).collect();
        let j = *others.choose(&mut rng).ok_or_else(|| Error::config("test split needs at least two commands"))?;
        impostors.push(j);
    }

    let none = DistortionSpec::none();
    let marked: Vec<CoverImage> = picks
        .par_iter()
        .map(|&i| {
            let (audio, cover) = &loaded[i];
            Ok(attacked_extraction(wm, audio, cover, &none)?.0)
        })
        .collect::<Result<_>>()?;
    let audio_refs: Vec<&AudioClip> = loaded.iter().map(|(a, _)| a).collect();
    let codes = sim.encode_clips(&audio_refs);
    let sources: Vec<SweepSource> = picks
        .iter()
        .zip(marked)
        .zip(&impostors)
        .map(|((&i, marked), &impostor)| SweepSource {
            audio: loaded[i].0.clone(),
            marked,
            code: codes[i].clone(),
            impostor,
        })
        .collect();

    let mut rows = Vec::with_capacity(sweep.grid.len());
    for (point, &parameter) in sweep.grid.iter().enumerate() {
        let trials: Vec<(f64, bool, bool)> = sources
            .par_iter()
            .enumerate()
            .map(|(t, src)| {
                let spec = sweep.spec(parameter, sweep.trial_seed(point, t))?;
                let attacked = distortion::apply(&src.marked, &spec)?;
                let extracted = wm.decode(&wm.extract(&attacked));
                let err = rmse(src.audio.samples(), extracted.samples())?;
                let code = sim.encode_clips(&[&extracted]).remove(0);
                let matched = sim.score_codes(src.code.view(), code.view());
                let mismatched = sim.score_codes(codes[src.impostor].view(), code.view());
                Ok((err, matched >= sweep.threshold, mismatched < sweep.threshold))
            })
            .collect::<Result<_>>()?;
        let k = trials.len() as f64;
        let correct: usize = trials.iter().map(|t| t.1 as usize + t.2 as usize).sum();
        let row = SweepRow {
            attack: sweep.attack,
            parameter,
            mean_rmse: trials.iter().map(|t| t.0).sum::<f64>() / k,
            similarity_accuracy: correct as f64 / (2.0 * k),
            n: 2 * trials.len(),
        };
        log::info!("{} {parameter}: rmse {:.6} accuracy {:.4}", row.attack, row.mean_rmse, row.similarity_accuracy);
        rows.push(row);
    }
    Ok(SweepReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: bool,
    pub kind: DistortionKind,
    pub parameter: f64,
    pub rmse: f64,
    pub score: f64,
    /// `rmse` over the measured clean baseline.
    pub rmse_ratio: f64,
    pub w1: PathBuf,
    pub w2: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub reference_rmse: f64,
    /// Mean RMSE of the undistorted matched pairs in the table.
    pub baseline_rmse: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Matched pairs whose RMSE is at least `factor` times the baseline
    /// yet which the verifier still accepts.
    pub fn high_rmse_accepted(&self, factor: f64, threshold: f64) -> impl Iterator<Item = &AblationRow> {
        let limit = factor * self.baseline_rmse;
        self.rows.iter().filter(move |r| r.label && r.rmse >= limit && r.score >= threshold)
    }

    /// Two `#` comment lines carry the baselines; the table follows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomically(path, |file| {
            writeln!(file, "# clean_test_rmse_reference={}", self.reference_rmse)
                .and_then(|_| writeln!(file, "# clean_baseline_rmse={}", self.baseline_rmse))
                .map_err(|e| Error::io(path, e))?;
            let mut w = csv::Writer::from_writer(file);
            for row in &self.rows {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header = |key: &str| -> Result<f64> {
            text.lines()
                .filter_map(|l| l.strip_prefix("# "))
                .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::invalid(format!("{} lacks the `{key}` line", path.display())))
        };
        let reference_rmse = header("clean_test_rmse_reference")?;
        let baseline_rmse = header("clean_baseline_rmse")?;
        let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { reference_rmse, baseline_rmse, rows })
    }
}

/// Scores every pair of `split` and tabulates RMSE next to the verifier's
/// score; the baseline is the mean RMSE of undistorted matched pairs, or the
/// reference constant when the list has none.
pub fn ablation_table(sim: &SimilarityNetwork<f32>, pairs: &PairList, split: Split) -> Result<AblationReport> {
    let records: Vec<&PairRecord> = pairs.split(split).collect();
    if records.is_empty() {
        return Err(Error::config(format!("pair list has no {split} pairs")));
    }
    let cache = CodeCache::build(sim, records.iter().copied())?;
    let errors: Vec<f64> = records
        .par_iter()
        .map(|r| {
            let pair = r.load()?;
            rmse(pair.w1.samples(), pair.w2.samples())
        })
        .collect::<Result<_>>()?;
    let clean: Vec<f64> = records
        .iter()
        .zip(&errors)
        .filter(|(r, _)| r.label && r.distortion.kind == DistortionKind::None)
        .map(|(_, &e)| e)
        .collect();
    let baseline_rmse =
        if clean.is_empty() { CLEAN_TEST_RMSE_REFERENCE } else { clean.iter().sum::<f64>() / clean.len() as f64 };
    let rows = records
        .iter()
        .zip(errors)
        .map(|(r, err)| AblationRow {
            label: r.label,
            kind: r.distortion.kind,
            parameter: r.distortion.parameter(),
            rmse: err,
            score: sim.score_codes(cache.get(&r.w1).view(), cache.get(&r.w2).view()),
            rmse_ratio: err / baseline_rmse,
            w1: r.w1.clone(),
            w2: r.w2.clone(),
        })
        .collect();
    Ok(AblationReport { reference_rmse: CLEAN_TEST_RMSE_REFERENCE, baseline_rmse, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_manifest, build_similarity_pairs, default_distortion_grid, SplitSizes};
    use crate::network::WmConfig;
    use crate::similarity::SimilarityConfig;
    use crate::test_util::write_corpus;

    fn models() -> (WmNetwork<f32>, SimilarityNetwork<f32>) {
        let wm = WmNetwork::<f32>::new(WmConfig {
            embed_input_filters: vec![2, 2, 2, 2],
            fc_units: 4,
            embed_output_filters: vec![2, 2, 2, 2, 2, 2, 3],
            extract_input_filters: vec![2, 2, 2, 2],
            extract_output_filters: vec![2, 2, 2, 2, 2, 2, 1],
            seed: 4,
            ..WmConfig::default()
        })
        .unwrap();
        let sim =
            SimilarityNetwork::from_wm(SimilarityConfig { filters: vec![2, 2, 2, 2], head_units: 4, seed: 1 }, &wm)
                .unwrap();
        (wm, sim)
    }

    fn fixture(root: &Path) -> PairManifest {
        let (img, audio) = write_corpus(root, 6, 3, 16);
        build_manifest(&img, &audio, SplitSizes::new(6, 3, 4), 9).unwrap()
    }

    fn row(p: f64, acc: f64) -> SweepRow {
        SweepRow { attack: DistortionKind::Cutout, parameter: p, mean_rmse: 0.1, similarity_accuracy: acc, n: 2 }
    }

    #[test]
    fn sweep_rows_are_balanced_and_start_at_the_clean_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = fixture(dir.path());
        let (wm, sim) = models();
        let sweep = SweepConfig { grid: vec![0.0, 0.5, 0.9], trials_per_point: 4, ..SweepConfig::cutout() };
        let report = run_sweep(&sweep, &manifest, &wm, &sim).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows.iter().all(|r| r.n == 8 && (0.0..=1.0).contains(&r.similarity_accuracy)));
        let clean = evaluate_wm(&wm, &manifest.load_pairs(Split::Test).unwrap()).unwrap();
        assert!((report.rows[0].mean_rmse - clean.rmse).abs() < 1e-9);
        assert_eq!(report, run_sweep(&sweep, &manifest, &wm, &sim).unwrap());

        let path = dir.path().join("out/sweep.csv");
        report.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "attack,parameter,mean_rmse,similarity_accuracy,n");
        assert_eq!(SweepReport::read_csv(&path).unwrap(), report);
    }

    #[test]
    fn invalid_sweeps_are_rejected() {
        let bad_grid = SweepConfig { grid: vec![0.95], ..SweepConfig::cutout() };
        assert!(bad_grid.validate().is_err());
        assert!(SweepConfig { trials_per_point: 0, ..SweepConfig::rotation() }.validate().is_err());
        assert!(SweepConfig::for_attack(DistortionKind::None).is_err());
        assert!(SweepConfig::rotation().validate().is_ok());
        assert_eq!(*SweepConfig::cutout().grid.last().unwrap(), 0.9);
    }

    #[test]
    fn failed_writes_leave_no_file_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let err = write_atomically(&path, |_| Err(Error::invalid("abort")));
        assert!(err.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn trend_allows_one_small_inversion() {
        let report = |accs: &[f64]| SweepReport {
            rows: accs.iter().enumerate().map(|(i, &a)| row(i as f64 / 10.0, a)).collect(),
        };
        assert!(report(&[1.0, 0.95, 0.9, 0.6]).is_non_increasing_within(1, 0.02));
        assert!(report(&[1.0, 0.95, 0.96, 0.6]).is_non_increasing_within(1, 0.02));
        assert!(!report(&[1.0, 0.95, 0.98, 0.6]).is_non_increasing_within(1, 0.02));
        assert!(!report(&[1.0, 0.95, 0.96, 0.9, 0.91]).is_non_increasing_within(1, 0.02));
    }

    #[test]
    fn ablation_table_reports_scores_against_the_clean_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = fixture(dir.path());
        let (wm, sim) = models();
        let pairs = build_similarity_pairs(
            &manifest,
            &wm,
            &default_distortion_grid(),
            SplitSizes::new(2, 2, 6),
            &dir.path().join("pairs"),
            3,
        )
        .unwrap();
        let report = ablation_table(&sim, &pairs, Split::Test).unwrap();
        assert_eq!(report.rows.len(), 12);
        assert_eq!(report.reference_rmse, 0.009452);
        assert!(report.baseline_rmse > 0.0);
        for r in &report.rows {
            assert!((r.rmse_ratio - r.rmse / report.baseline_rmse).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&r.score));
        }
        let accepted: Vec<_> = report.high_rmse_accepted(0.0, 0.0).collect();
        assert_eq!(accepted.len(), 6);

        let path = dir.path().join("ablation.csv");
        report.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "# clean_test_rmse_reference=0.009452");
        assert_eq!(AblationReport::read_csv(&path).unwrap(), report);
        assert!(ablation_table(&sim, &PairList { records: vec![] }, Split::Test).is_err());
    }
}
