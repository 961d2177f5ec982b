//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `FSDETCKP`, `u32` format version, `u64` manifest
//! length, the JSON manifest, then every parameter as little-endian `f64`
//! in manifest order, then the SHA-256 of everything before it. All
//! integers are little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::DetectorConfig;
use super::model::Detector;
use crate::error::{Error, Result};
use crate::gcl::ClassifierLayout;
use crate::params::Group;
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 8] = b"FSDETCKP";
pub const FORMAT_VERSION: u32 = 2;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Finetuned,
}

/// Position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub key: String,
    pub stream: u64,
    /// Decimal word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            key: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.key.len() != 64 {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, k) in key.iter_mut().enumerate() {
            *k = u8::from_str_radix(&self.key[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub phase: Phase,
    pub seed: u64,
    pub steps: usize,
    pub rng: RngState,
    pub config: DetectorConfig,
    pub layout: ClassifierLayout,
    pub params: Vec<ParamEntry>,
    /// Resolved configuration of the invoking command, when there was one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub phase: Phase,
    /// Seed of the run that produced this checkpoint.
    pub seed: u64,
    /// Optimizer steps taken in that run.
    pub steps: usize,
    pub rng: RngState,
    pub detector: Detector,
    pub run_config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            phase: self.phase,
            seed: self.seed,
            steps: self.steps,
            rng: self.rng.clone(),
            config: self.detector.config.clone(),
            layout: self.detector.layout.clone(),
            params: self
                .detector
                .store
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.value.shape(),
                })
                .collect(),
            run_config: self.run_config.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let n = self.detector.num_params();
        let mut out = Vec::with_capacity(20 + manifest.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, p) in self.detector.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version} unsupported (expected {FORMAT_VERSION})")));
        }
        if bytes.len() < 20 + DIGEST_LEN {
            return Err(err("truncated checkpoint"));
        }
        let (bytes, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(bytes).as_slice() != digest {
            return Err(err("checksum mismatch; the file is corrupt or truncated"));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| err("truncated manifest"))?;
        let m: Manifest = serde_json::from_slice(body)?;
        let base_classes = m.layout.base_classes.clone();
        let mut detector = Detector::new(m.config, base_classes, 0)?;
        if detector.layout.placeholders != m.layout.placeholders {
            return Err(err("layout placeholder count disagrees with config"));
        }
        let mut pos = 20 + len;
        let mut values = Vec::with_capacity(m.params.len());
        for e in &m.params {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| err("truncated parameter data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            values.push((e.name.clone(), Tensor4::new(e.shape, data)?));
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(err("trailing bytes after parameter data"));
        }
        detector.store.load(values)?;
        detector.layout = m.layout;
        m.rng.restore()?;
        Ok(Self {
            phase: m.phase,
            seed: m.seed,
            steps: m.steps,
            rng: m.rng,
            detector,
            run_config: m.run_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
