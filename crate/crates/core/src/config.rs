//! The JSON run configuration shared by every command.
//!
//! Resolution order: built-in defaults, then the `--config` file merged key
//! by key (objects merge recursively, everything else replaces), then
//! `--set path=value` overrides, then command flags. The result is checked
//! against the schema, so unknown keys are rejected at any depth.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::DatasetSpec;
use crate::detector::{DetectOptions, DetectorConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generator seed; image `i` draws from stream `i` of this seed.
    pub seed: u64,
    /// Split whose novel classes `gen-data --base-only` leaves out.
    pub split: String,
    pub synthetic: DatasetSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split: "synthetic".into(),
            synthetic: DatasetSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seeds parameter init and shuffling in base training, and the K-shot
    /// draw and shuffling in fine-tuning.
    pub seed: u64,
    pub split: String,
    /// K of the fine-tuning set.
    pub shots: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split: "synthetic".into(),
            shots: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let d = DetectOptions::default();
        Self {
            score_threshold: d.score_threshold,
            nms_threshold: d.nms_threshold,
            max_detections: d.max_detections,
        }
    }
}

impl EvalConfig {
    pub fn detect_options(&self) -> DetectOptions {
        DetectOptions {
            score_threshold: self.score_threshold,
            nms_threshold: self.nms_threshold,
            max_detections: self.max_detections,
            classes: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses the right-hand side of `--set`: JSON when it parses, otherwise a
/// bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// A small CPU-sized setup: 300 images of 128 px for base training,
    /// narrow pyramid and RoI head, 12 base and 20 fine-tuning epochs.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.data.seed = 1;
        c.data.synthetic.images = 300;
        c.data.synthetic.object_size = [12.0, 51.2];
        c.model.backbone.widths = [16, 32, 32, 32];
        c.model.neck.width = 32;
        c.model.roi.hidden = 64;
        c.model.base.epochs = 12;
        c.model.finetune.epochs = 20;
        c
    }

    /// Resolves defaults, an optional file and `path=value` overrides.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let over: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if !over.is_object() {
                return Err(Error::Config(format!("{}: top level must be an object", path.display())));
            }
            merge(&mut v, over);
        }
        for s in sets {
            let (path, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects path=value, got '{s}'")))?;
            let mut over = parse_value(raw);
            for key in path.rsplit('.') {
                if key.is_empty() {
                    return Err(Error::Config(format!("--set path '{path}' has an empty key")));
                }
                over = Value::Object([(key.to_string(), over)].into_iter().collect());
            }
            merge(&mut v, over);
        }
        Self::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let c: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        self.model.validate()?;
        let (h, w) = self.model.image_size;
        let s = self.data.synthetic.image_size;
        if h != s || w != s {
            return Err(Error::Config(format!(
                "data.synthetic.image_size {s} disagrees with model.image_size {h}x{w}"
            )));
        }
        if self.train.shots == 0 {
            return Err(Error::Config("train.shots must be at least 1".into()));
        }
        if !(self.eval.score_threshold >= 0.0 && self.eval.score_threshold < 1.0) {
            return Err(Error::Config("eval.score_threshold must be in [0, 1)".into()));
        }
        if !(self.eval.nms_threshold > 0.0 && self.eval.nms_threshold < 1.0) {
            return Err(Error::Config("eval.nms_threshold must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
