//! Audio/image pair manifests and labeled audio/audio pairs for the verifier.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distortion::{self, DistortionKind, DistortionSpec};
use crate::media::{
    load_audio, load_image, read_clip, save_audio_exact, save_image, AudioClip, CoverImage, SAMPLE_RATE,
};
use crate::network::WmNetwork;
use crate::{Error, Result};

/// Share of similarity sources left undistorted.
pub const UNDISTORTED_SHARE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub image: PathBuf,
    pub audio: PathBuf,
}

impl ManifestEntry {
    /// Spoken command: the name of the directory holding the clip.
    pub fn command(&self) -> String {
        command_of(&self.audio)
    }
}

fn command_of(audio: &Path) -> String {
    audio.parent().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Audio/image pairs with a train/val/test assignment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairManifest {
    pub entries: Vec<ManifestEntry>,
}

impl PairManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn counts(&self) -> SplitSizes {
        let n = |s| self.split(s).count();
        SplitSizes::new(n(Split::Train), n(Split::Val), n(Split::Test))
    }

    pub fn commands(&self, split: Split) -> BTreeSet<String> {
        self.split(split).map(ManifestEntry::command).collect()
    }

    /// Tab-separated `split, image, audio`, one record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut w = tsv_writer(path)?;
        for e in &self.entries {
            w.write_record([e.split.to_string(), path_str(&e.image)?, path_str(&e.audio)?])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (line, record) in tsv_reader(path)?.records().enumerate() {
            let record = record?;
            if record.len() != 3 {
                return Err(Error::invalid(format!(
                    "{}:{}: expected 3 fields, found {}",
                    path.display(),
                    line + 1,
                    record.len()
                )));
            }
            entries.push(ManifestEntry {
                split: record[0].parse()?,
                image: PathBuf::from(&record[1]),
                audio: PathBuf::from(&record[2]),
            });
        }
        Ok(Self { entries })
    }

    /// Loads every (watermark, cover) pair of a split.
    pub fn load_pairs(&self, split: Split) -> Result<Vec<(AudioClip, CoverImage)>> {
        let entries: Vec<_> = self.split(split).collect();
        entries.par_iter().map(|e| Ok((load_audio(&e.audio, SAMPLE_RATE)?, load_image(&e.image)?))).collect()
    }

    pub fn load_audio(&self, split: Split) -> Result<Vec<AudioClip>> {
        let entries: Vec<_> = self.split(split).collect();
        entries.par_iter().map(|e| load_audio(&e.audio, SAMPLE_RATE)).collect()
    }
}

fn path_str(p: &Path) -> Result<String> {
    p.to_str().map(str::to_string).ok_or_else(|| Error::invalid(format!("path {} is not valid UTF-8", p.display())))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn tsv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().delimiter(b'\t').has_headers(false).from_writer(file))
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().delimiter(b'\t').has_headers(false).flexible(true).from_reader(file))
}

/// Sorted files under `dir` (recursively) whose extension is in `exts`.
pub fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Samples audio/image pairs so that no spoken command is shared between
/// splits.
///
/// Commands are shuffled and handed to test, then val, until each holds
/// enough clips (and at least two commands, so negatives exist); every
/// remaining command goes to train. Clips are drawn round-robin across a
/// split's commands, images without replacement.
pub fn build_manifest(image_dir: &Path, audio_dir: &Path, sizes: SplitSizes, seed: u64) -> Result<PairManifest> {
    let mut images = list_files(image_dir, &["png", "jpg", "jpeg"])?;
    if images.len() < sizes.total() {
        return Err(Error::config(format!(
            "{} holds {} images, {} needed",
            image_dir.display(),
            images.len(),
            sizes.total()
        )));
    }
    let mut by_command: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for clip in list_files(audio_dir, &["wav"])? {
        by_command.entry(command_of(&clip)).or_default().push(clip);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut commands: Vec<String> = by_command.keys().cloned().collect();
    commands.shuffle(&mut rng);
    images.shuffle(&mut rng);

    let mut pool: BTreeMap<Split, Vec<Vec<PathBuf>>> = BTreeMap::new();
    let mut remaining = commands.into_iter();
    for split in [Split::Test, Split::Val] {
        let want = sizes.get(split);
        if want == 0 {
            continue;
        }
        let groups = pool.entry(split).or_default();
        while groups.iter().map(Vec::len).sum::<usize>() < want || groups.len() < 2 {
            let Some(cmd) = remaining.next() else {
                return Err(Error::config(format!(
                    "not enough audio commands in {} for the {split} split",
                    audio_dir.display()
                )));
            };
            groups.push(by_command[&cmd].clone());
        }
    }
    let train = pool.entry(Split::Train).or_default();
    for cmd in remaining {
        train.push(by_command[&cmd].clone());
    }

    let mut images = images.into_iter();
    let mut entries = Vec::with_capacity(sizes.total());
    for split in Split::ALL {
        let want = sizes.get(split);
        let mut groups = pool.remove(&split).unwrap_or_default();
        let available: usize = groups.iter().map(Vec::len).sum();
        if available < want {
            return Err(Error::config(format!(
                "the {split} split needs {want} clips but its commands provide {available}"
            )));
        }
        // Round-robin over commands so small splits still mix commands.
        for g in &mut groups {
            g.shuffle(&mut rng);
            g.reverse();
        }
        let mut chosen = Vec::with_capacity(want);
        while chosen.len() < want {
            for g in groups.iter_mut() {
                if chosen.len() < want {
                    if let Some(clip) = g.pop() {
                        chosen.push(clip);
                    }
                }
            }
        }
        chosen.shuffle(&mut rng);
        for audio in chosen {
            let image = images.next().expect("image count checked above");
            entries.push(ManifestEntry { split, image, audio });
        }
    }
    Ok(PairManifest { entries })
}

/// One labeled audio/audio example on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub split: Split,
    pub label: bool,
    /// Original or substituted watermark (a source clip, loaded with resampling).
    pub w1: PathBuf,
    /// Extraction from the distorted marked image (exact float WAV).
    pub w2: PathBuf,
    /// Quantized marked image before distortion.
    pub marked: PathBuf,
    pub distortion: DistortionSpec,
}

/// A labeled pair loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPair {
    pub split: Split,
    pub w1: AudioClip,
    pub w2: AudioClip,
    pub label: bool,
    pub distortion: DistortionSpec,
}

impl PairRecord {
    pub fn load(&self) -> Result<SimilarityPair> {
        Ok(SimilarityPair {
            split: self.split,
            w1: load_audio(&self.w1, SAMPLE_RATE)?,
            w2: read_clip(&self.w2)?,
            label: self.label,
            distortion: self.distortion,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairList {
    pub records: Vec<PairRecord>,
}

const PAIR_COLUMNS: [&str; 8] = ["split", "label", "w1", "w2", "marked", "kind", "parameter", "seed"];

impl PairList {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn positive_share(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.label).count() as f64 / self.records.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut w = tsv_writer(path)?;
        w.write_record(PAIR_COLUMNS)?;
        for r in &self.records {
            w.write_record([
                r.split.to_string(),
                u8::from(r.label).to_string(),
                path_str(&r.w1)?,
                path_str(&r.w2)?,
                path_str(&r.marked)?,
                r.distortion.kind.to_string(),
                r.distortion.parameter().to_string(),
                r.distortion.seed.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let bad = |line: usize, what: &str| Error::invalid(format!("{}:{line}: {what}", path.display()));
        for (i, record) in tsv_reader(path)?.records().enumerate() {
            let record = record?;
            if i == 0 && record.iter().eq(PAIR_COLUMNS) {
                continue;
            }
            if record.len() != PAIR_COLUMNS.len() {
                return Err(bad(i + 1, "wrong number of fields"));
            }
            let kind: DistortionKind = record[5].parse()?;
            let parameter: f64 = record[6].parse().map_err(|_| bad(i + 1, "bad distortion parameter"))?;
            let seed: u64 = record[7].parse().map_err(|_| bad(i + 1, "bad seed"))?;
            let distortion = match kind {
                DistortionKind::None => DistortionSpec::none(),
                DistortionKind::Cutout => DistortionSpec::cutout(parameter, seed)?,
                DistortionKind::Rotation => DistortionSpec::rotation(parameter)?,
            };
            let label = match &record[1] {
                "1" => true,
                "0" => false,
                _ => return Err(bad(i + 1, "label must be 0 or 1")),
            };
            records.push(PairRecord {
                split: record[0].parse()?,
                label,
                w1: PathBuf::from(&record[2]),
                w2: PathBuf::from(&record[3]),
                marked: PathBuf::from(&record[4]),
                distortion,
            });
        }
        Ok(Self { records })
    }
}

/// Cutout 5..50% in 5% steps and rotations of -5..5 degrees, excluding the
/// undistorted case, which is drawn separately.
pub fn default_distortion_grid() -> Vec<DistortionSpec> {
    let mut grid = Vec::new();
    for i in 1..=10 {
        grid.push(DistortionSpec::cutout(i as f64 * 0.05, 0).unwrap());
    }
    for d in -5..=5 {
        if d != 0 {
            grid.push(DistortionSpec::rotation(d as f64).unwrap());
        }
    }
    grid
}

/// Draws a distortion: `none` with probability [`UNDISTORTED_SHARE`],
/// otherwise a uniform grid point (cutouts get a fresh placement seed).
pub fn sample_distortion(grid: &[DistortionSpec], rng: &mut impl Rng) -> DistortionSpec {
    if grid.is_empty() || rng.gen_bool(UNDISTORTED_SHARE) {
        return DistortionSpec::none();
    }
    let mut spec = grid[rng.gen_range(0..grid.len())];
    if spec.kind == DistortionKind::Cutout {
        spec.seed = rng.gen();
    }
    spec
}

/// Embeds, quantizes, distorts and extracts: the verifier's view of a
/// marked image after it has been stored and attacked.
pub fn attacked_extraction(
    wm: &WmNetwork<f32>,
    audio: &AudioClip,
    cover: &CoverImage,
    spec: &DistortionSpec,
) -> Result<(CoverImage, AudioClip)> {
    let code = wm.encode(&crate::media::reshape_audio(audio));
    let marked = wm.embed(&code, cover).quantize();
    let attacked = distortion::apply(&marked, spec)?;
    let extracted = wm.decode(&wm.extract(&attacked));
    Ok((marked, extracted))
}

/// Generates balanced labeled pairs from `sources.get(split)` draws per split.
///
/// Each draw embeds its watermark into its cover, distorts the stored marked
/// image and extracts `w'`; it yields `(w, w', 1)` and `(w_other, w', 0)`
/// where `w_other` comes from a different command of the same split. Marked
/// PNGs, extracted WAVs and `pairs.tsv` are written under `out_dir`.
pub fn build_similarity_pairs(
    manifest: &PairManifest,
    wm: &WmNetwork<f32>,
    grid: &[DistortionSpec],
    sources: SplitSizes,
    out_dir: &Path,
    seed: u64,
) -> Result<PairList> {
    for spec in grid {
        spec.validate()?;
    }
    let marked_dir = out_dir.join("marked");
    let extracted_dir = out_dir.join("extracted");
    for d in [&marked_dir, &extracted_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    struct Job<'a> {
        index: usize,
        split: Split,
        entry: &'a ManifestEntry,
        other: &'a ManifestEntry,
        distortion: DistortionSpec,
    }
    let mut jobs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for split in Split::ALL {
        let want = sources.get(split);
        if want == 0 {
            continue;
        }
        let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
        if entries.is_empty() {
            return Err(Error::config(format!("the manifest has no {split} entries")));
        }
        let mut order: Vec<usize> = Vec::with_capacity(want);
        while order.len() < want {
            let mut round: Vec<usize> = (0..entries.len()).collect();
            round.shuffle(&mut rng);
            order.extend(round.into_iter().take(want - order.len()));
        }
        for i in order {
            let entry = entries[i];
            let command = entry.command();
            let others: Vec<&ManifestEntry> = entries.iter().copied().filter(|e| e.command() != command).collect();
            let other = *others.choose(&mut rng).ok_or_else(|| {
                Error::config(format!("the {split} split needs at least two commands for negative pairs"))
            })?;
            let distortion = sample_distortion(grid, &mut rng);
            jobs.push(Job { index: jobs.len(), split, entry, other, distortion });
        }
    }

    let records: Vec<[PairRecord; 2]> = jobs
        .par_iter()
        .map(|job| {
            let audio = load_audio(&job.entry.audio, SAMPLE_RATE)?;
            let cover = load_image(&job.entry.image)?;
            let (marked, extracted) = attacked_extraction(wm, &audio, &cover, &job.distortion)?;
            let marked_path = marked_dir.join(format!("{:06}.png", job.index));
            let w2 = extracted_dir.join(format!("{:06}.wav", job.index));
            save_image(&marked, &marked_path)?;
            save_audio_exact(&extracted, &w2)?;
            let record = |label: bool, w1: &Path| PairRecord {
                split: job.split,
                label,
                w1: w1.to_path_buf(),
                w2: w2.clone(),
                marked: marked_path.clone(),
                distortion: job.distortion,
            };
            Ok([record(true, &job.entry.audio), record(false, &job.other.audio)])
        })
        .collect::<Result<_>>()?;
    let list = PairList { records: records.into_iter().flatten().collect() };
    list.save(&out_dir.join("pairs.tsv"))?;
    Ok(list)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::Image;
    use crate::network::WmConfig;
    use crate::test_util::write_corpus;

    #[test]
    fn manifest_has_requested_counts_and_disjoint_commands() {
        let dir = tempfile::tempdir().unwrap();
        let (img, audio) = write_corpus(dir.path(), 8, 6, 30);
        let m = build_manifest(&img, &audio, SplitSizes::new(20, 5, 5), 7).unwrap();
        assert_eq!(m.counts(), SplitSizes::new(20, 5, 5));
        let (tr, va, te) = (m.commands(Split::Train), m.commands(Split::Val), m.commands(Split::Test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert!(va.len() >= 2 && te.len() >= 2);
        let images: BTreeSet<_> = m.entries.iter().map(|e| e.image.clone()).collect();
        assert_eq!(images.len(), 30);
        assert_eq!(m, build_manifest(&img, &audio, SplitSizes::new(20, 5, 5), 7).unwrap());
        assert_ne!(m, build_manifest(&img, &audio, SplitSizes::new(20, 5, 5), 8).unwrap());
    }

    #[test]
    fn manifest_round_trips_through_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let (img, audio) = write_corpus(dir.path(), 6, 4, 12);
        let m = build_manifest(&img, &audio, SplitSizes::new(6, 2, 2), 1).unwrap();
        let path = dir.path().join("manifest.tsv");
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert_eq!(text.lines().next().unwrap().split('\t').count(), 3);
        assert_eq!(PairManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn insufficient_media_is_a_configuration_error() {
        let dir = tempfile::tempdir().unwrap();
        let (img, audio) = write_corpus(dir.path(), 4, 3, 10);
        assert!(matches!(build_manifest(&img, &audio, SplitSizes::new(8, 1, 1), 0), Err(Error::Config(_))));
        assert!(matches!(build_manifest(&img, &audio, SplitSizes::new(2, 2, 20), 0), Err(Error::Config(_))));
    }

    #[test]
    fn distortion_sampling_honours_the_undistorted_share() {
        let grid = default_distortion_grid();
        assert_eq!(grid.len(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<_> = (0..5000).map(|_| sample_distortion(&grid, &mut rng)).collect();
        let none = draws.iter().filter(|d| d.kind == DistortionKind::None).count() as f64 / 5000.0;
        assert!((none - 0.2).abs() < 0.02);
        assert!(draws.iter().all(|d| d.validate().is_ok()));
        assert!(draws.iter().any(|d| d.kind == DistortionKind::Rotation));
    }

    #[test]
    fn pairs_are_balanced_reproducible_and_faithful() {
        let dir = tempfile::tempdir().unwrap();
        let (img, audio) = write_corpus(dir.path(), 6, 3, 12);
        let manifest = build_manifest(&img, &audio, SplitSizes::new(6, 2, 2), 2).unwrap();
        let wm = WmNetwork::<f32>::new(WmConfig {
            embed_input_filters: vec![2, 2, 2, 2],
            fc_units: 4,
            embed_output_filters: vec![2, 2, 2, 2, 2, 2, 3],
            extract_input_filters: vec![2, 2, 2, 2],
            extract_output_filters: vec![2, 2, 2, 2, 2, 2, 1],
            ..WmConfig::with_seed(3)
        })
        .unwrap();
        let grid = default_distortion_grid();
        let out = dir.path().join("pairs");
        let list = build_similarity_pairs(&manifest, &wm, &grid, SplitSizes::new(5, 2, 2), &out, 4).unwrap();
        assert_eq!(list.records.len(), 18);
        assert_eq!(list.positive_share(), 0.5);
        assert_eq!(PairList::load(&out.join("pairs.tsv")).unwrap(), list);

        let again =
            build_similarity_pairs(&manifest, &wm, &grid, SplitSizes::new(5, 2, 2), &dir.path().join("again"), 4)
                .unwrap();
        for (a, b) in list.records.iter().zip(&again.records) {
            assert_eq!((a.label, &a.w1, a.distortion), (b.label, &b.w1, b.distortion));
            assert_eq!(read_clip(&a.w2).unwrap(), read_clip(&b.w2).unwrap());
        }

        for r in &list.records {
            let w1_cmd = command_of(&r.w1);
            let positive = list.records.iter().find(|p| p.label && p.w2 == r.w2).unwrap();
            assert_eq!(r.label, w1_cmd == command_of(&positive.w1));
            // Re-applying the stored spec to the stored marked image reproduces w2.
            let marked = load_image(&r.marked).unwrap();
            let attacked = distortion::apply(&marked, &r.distortion).unwrap();
            assert_eq!(wm.decode(&wm.extract(&attacked)), read_clip(&r.w2).unwrap());
            let split_commands = manifest.commands(r.split);
            assert!(split_commands.contains(&w1_cmd));
        }
    }

    #[test]
    fn clean_positive_matches_direct_extraction_error() {
        let wm = WmNetwork::<f32>::new(WmConfig {
            embed_input_filters: vec![2, 2, 2, 2],
            fc_units: 4,
            embed_output_filters: vec![2, 2, 2, 2, 2, 2, 3],
            extract_input_filters: vec![2, 2, 2, 2],
            extract_output_filters: vec![2, 2, 2, 2, 2, 2, 1],
            ..WmConfig::with_seed(5)
        })
        .unwrap();
        let audio = AudioClip::new((0..8192).map(|t| (t as f32 * 0.02).sin() * 0.8).collect()).unwrap();
        let cover = Image::filled(0.4).unwrap();
        let (_, w2) = attacked_extraction(&wm, &audio, &cover, &DistortionSpec::none()).unwrap();
        let marked = wm.embed(&wm.encode(&crate::media::reshape_audio(&audio)), &cover).quantize();
        let direct = wm.decode(&wm.extract(&marked));
        let rmse = |a: &AudioClip, b: &AudioClip| crate::losses::rmse(a.samples(), b.samples()).unwrap();
        assert_eq!(rmse(&audio, &w2), rmse(&audio, &direct));
    }
}
