//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as raw little-endian values at the offsets the
//! header lists. Values are stored at their in-memory precision, so a
//! save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::network::{Encoder, WmConfig, WmNetwork};
use crate::nn::{HasParams, Real};
use crate::similarity::{SimilarityConfig, SimilarityNetwork};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"AUDIOWM\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Wm,
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub dtype: String,
    pub config: Value,
    /// Free-form provenance: training stage, epoch, hyperparameters, hashes.
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
    pub tensors: Vec<TensorEntry>,
}

/// A checkpoint read from disk, before it is bound to a network.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    data: Vec<u8>,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(path, format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| corrupt(path, "truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        let data = bytes[20 + len..].to_vec();
        Ok(Self { header, data })
    }

    pub fn config<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.header.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad config header: {e}")))
    }

    pub fn meta(&self, key: &str) -> Option<&Value> {
        self.header.meta.get(key)
    }

    /// Overwrites every parameter of `model`; names, shapes and dtype must
    /// match the stored tensors one to one.
    pub fn load_into<T: Real, M: HasParams<T>>(&self, model: &mut M, prefix: &str) -> Result<()> {
        if self.header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint stores {}, expected {}", self.header.dtype, T::DTYPE)));
        }
        let entries: BTreeMap<&str, &TensorEntry> = self.header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut params = Vec::new();
        model.visit_mut(prefix, &mut params);
        for (name, param) in params {
            let entry =
                entries.get(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if entry.shape != param.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    entry.shape,
                    param.value.shape()
                )));
            }
            let n = param.value.len();
            let raw = self
                .data
                .get(entry.offset..entry.offset + n * T::BYTES)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` runs past the end of the file")))?;
            for (v, chunk) in param.value.iter_mut().zip(raw.chunks_exact(T::BYTES)) {
                *v = T::read_le(chunk);
            }
        }
        Ok(())
    }
}

/// Writes `model` and returns the sha256 of the written file.
pub fn write_checkpoint<T: Real, M: HasParams<T>, C: Serialize>(
    path: &Path,
    kind: CheckpointKind,
    config: &C,
    meta: BTreeMap<String, Value>,
    model: &M,
) -> Result<String> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (name, p) in model.named_params() {
        tensors.push(TensorEntry { name, shape: p.value.shape().to_vec(), offset: data.len() });
        for &v in p.value.iter() {
            v.write_le(&mut data);
        }
    }
    let header =
        CheckpointHeader { kind, dtype: T::DTYPE.to_string(), config: serde_json::to_value(config)?, meta, tensors };
    let header = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write to a sibling file first so an interrupted save never leaves a
    // truncated checkpoint behind.
    let tmp = path.with_extension("partial");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&data)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    file_sha256(path)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn expect_kind(ckpt: &Checkpoint, kind: CheckpointKind, path: &Path) -> Result<()> {
    if ckpt.header.kind == kind {
        Ok(())
    } else {
        Err(corrupt(path, format!("expected a {kind:?} checkpoint, found {:?}", ckpt.header.kind)))
    }
}

impl<T: Real> WmNetwork<T> {
    pub fn save(&self, path: &Path, meta: BTreeMap<String, Value>) -> Result<String> {
        write_checkpoint(path, CheckpointKind::Wm, &self.config, meta, self)
    }

    /// Loads a watermarking network using the architecture in the file.
    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::read(path)?;
        expect_kind(&ckpt, CheckpointKind::Wm, path)?;
        let config: WmConfig = ckpt.config()?;
        let mut net = Self::new(config)?;
        ckpt.load_into(&mut net, "")?;
        Ok((net, ckpt))
    }

    /// Loads and refuses files whose architecture differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &WmConfig) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::read(path)?;
        expect_kind(&ckpt, CheckpointKind::Wm, path)?;
        let found: WmConfig = ckpt.config()?;
        if !found.same_architecture(expected) {
            return Err(Error::Checkpoint(format!("{} was written for a different architecture", path.display())));
        }
        let mut net = Self::new(found)?;
        ckpt.load_into(&mut net, "")?;
        Ok((net, ckpt))
    }
}

/// Header stored with a similarity checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHeader {
    pub similarity: SimilarityConfig,
    pub encoder: WmConfig,
    /// sha256 of the watermarking checkpoint the encoder was copied from.
    pub encoder_sha256: String,
}

impl<T: Real> SimilarityNetwork<T> {
    pub fn save(
        &self,
        path: &Path,
        encoder: &WmConfig,
        encoder_sha256: &str,
        meta: BTreeMap<String, Value>,
    ) -> Result<String> {
        let header = SimilarityHeader {
            similarity: self.config.clone(),
            encoder: encoder.clone(),
            encoder_sha256: encoder_sha256.to_string(),
        };
        write_checkpoint(path, CheckpointKind::Similarity, &header, meta, self)
    }

    pub fn load(path: &Path) -> Result<(Self, SimilarityHeader)> {
        let ckpt = Checkpoint::read(path)?;
        expect_kind(&ckpt, CheckpointKind::Similarity, path)?;
        let header: SimilarityHeader = ckpt.config()?;
        header.encoder.validate()?;
        let encoder = Encoder::zeroed(header.encoder.frame_dim, header.encoder.hidden);
        let mut net = Self::new(header.similarity.clone(), encoder)?;
        ckpt.load_into(&mut net, "")?;
        Ok((net, header))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{AudioClip, Image};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn narrow_wm(seed: u64) -> WmConfig {
        WmConfig {
            embed_input_filters: vec![2, 2, 2, 2],
            fc_units: 4,
            embed_output_filters: vec![2, 2, 2, 2, 2, 2, 3],
            extract_input_filters: vec![2, 2, 2, 2],
            extract_output_filters: vec![2, 2, 2, 2, 2, 2, 1],
            seed,
            ..WmConfig::default()
        }
    }

    fn fixtures(seed: u64) -> (AudioClip, Image) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clip = AudioClip::new((0..8192).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).unwrap();
        let img =
            Image::new(ndarray::Array3::from_shape_simple_fn((128, 128, 3), || rng.gen_range(0.0f32..=1.0))).unwrap();
        (clip, img)
    }

    #[test]
    fn wm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wm.ckpt");
        let net = WmNetwork::<f32>::new(narrow_wm(1)).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("stage".into(), Value::from("wm"));
        let hash = net.save(&path, meta).unwrap();
        assert_eq!(hash, file_sha256(&path).unwrap());
        let (loaded, ckpt) = WmNetwork::<f32>::load(&path).unwrap();
        assert_eq!(ckpt.meta("stage"), Some(&Value::from("wm")));
        for ((na, a), (nb, b)) in net.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(na, &nb);
            assert_eq!(a.value, b.value);
        }
        let (clip, img) = fixtures(2);
        assert_eq!(net.wm_forward(&clip, &img), loaded.wm_forward(&clip, &img));
        assert!(!path.with_extension("partial").exists());
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wm64.ckpt");
        let net = WmNetwork::<f64>::new(narrow_wm(3)).unwrap();
        net.save(&path, BTreeMap::new()).unwrap();
        let (loaded, _) = WmNetwork::<f64>::load(&path).unwrap();
        assert_eq!(
            net.named_params().iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>(),
            loaded.named_params().iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>()
        );
        assert!(matches!(WmNetwork::<f32>::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatched_architecture_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wm.ckpt");
        WmNetwork::<f32>::new(narrow_wm(1)).unwrap().save(&path, BTreeMap::new()).unwrap();
        assert!(WmNetwork::<f32>::load_expecting(&path, &narrow_wm(9)).is_ok());
        assert!(matches!(WmNetwork::<f32>::load_expecting(&path, &WmConfig::default()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_files_are_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(WmNetwork::<f32>::load(&path), Err(Error::Checkpoint(_))));
        let good = dir.path().join("wm.ckpt");
        WmNetwork::<f32>::new(narrow_wm(1)).unwrap().save(&good, BTreeMap::new()).unwrap();
        let bytes = fs::read(&good).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(WmNetwork::<f32>::load(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(WmNetwork::<f32>::load(&dir.path().join("missing")), Err(Error::Io { .. })));
        assert!(matches!(SimilarityNetwork::<f32>::load(&good), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn similarity_round_trip_keeps_encoder_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let wm_path = dir.path().join("wm.ckpt");
        let wm = WmNetwork::<f32>::new(narrow_wm(4)).unwrap();
        let hash = wm.save(&wm_path, BTreeMap::new()).unwrap();
        let cfg = SimilarityConfig { filters: vec![2, 2, 2, 2], head_units: 5, seed: 5 };
        let net = SimilarityNetwork::from_wm(cfg, &wm).unwrap();
        let path = dir.path().join("sim.ckpt");
        net.save(&path, &wm.config, &hash, BTreeMap::new()).unwrap();
        let (loaded, header) = SimilarityNetwork::<f32>::load(&path).unwrap();
        assert_eq!(header.encoder_sha256, hash);
        let (a, _) = fixtures(6);
        let (b, _) = fixtures(7);
        assert_eq!(net.similarity(&a, &b).unwrap(), loaded.similarity(&a, &b).unwrap());
    }
}
