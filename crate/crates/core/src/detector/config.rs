use serde::{Deserialize, Serialize};

use crate::cfpan::NeckConfig;
use crate::error::{Error, Result};
use crate::gcl::GclConfig;
use crate::mrrpn::MrrpnConfig;

/// Plain strided convnet producing C2..C5 at strides 4, 8, 16, 32.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channels of the stride-2 stem.
    pub stem: usize,
    /// Channels of C2..C5.
    pub widths: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem: 16,
            widths: [16, 32, 64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiHeadConfig {
    pub output_size: usize,
    pub sampling: usize,
    pub hidden: usize,
    /// Box side mapped to level 4 by the level-assignment rule.
    pub canonical_size: f64,
    pub rois_per_image: usize,
    pub foreground_fraction: f64,
    pub foreground_iou: f64,
    pub box_coder_weights: [f64; 4],
    pub box_loss_weight: f64,
    pub smooth_l1_beta: f64,
    /// Proposals kept per image at inference.
    pub test_proposals: usize,
}

impl Default for RoiHeadConfig {
    fn default() -> Self {
        Self {
            output_size: 7,
            sampling: 2,
            hidden: 128,
            canonical_size: 64.0,
            rois_per_image: 64,
            foreground_fraction: 0.25,
            foreground_iou: 0.5,
            box_coder_weights: [10.0, 10.0, 5.0, 5.0],
            box_loss_weight: 1.0,
            smooth_l1_beta: 1.0 / 9.0,
            test_proposals: 100,
        }
    }
}

/// Optimizer schedule of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Fractions of the run after which the rate is multiplied by `lr_decay`.
    pub lr_steps: Vec<f64>,
    pub lr_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Random horizontal flips.
    pub flip: bool,
}

impl PhaseConfig {
    pub fn base() -> Self {
        Self {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 12,
            batch_size: 2,
            warmup_steps: 100,
            lr_steps: vec![0.75],
            lr_decay: 0.1,
            grad_clip: 10.0,
            flip: true,
        }
    }

    pub fn finetune() -> Self {
        Self {
            lr: 0.001,
            epochs: 108,
            batch_size: 1,
            warmup_steps: 10,
            ..Self::base()
        }
    }

    /// Learning rate at optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let mut lr = self.lr;
        for &f in &self.lr_steps {
            if step as f64 >= f * total as f64 {
                lr *= self.lr_decay;
            }
        }
        if step < self.warmup_steps {
            let t = (step + 1) as f64 / self.warmup_steps as f64;
            lr *= 0.1 + 0.9 * t;
        }
        lr
    }

    fn validate(&self, section: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{section}.lr must be positive")));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config(format!(
                "{section}: momentum must lie in [0, 1), weight_decay and grad_clip must be non-negative"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{section}.batch_size must be positive")));
        }
        if !(self.lr_decay > 0.0) || self.lr_steps.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("{section}: lr_steps must lie in [0, 1] and lr_decay be positive")));
        }
        Ok(())
    }
}

/// Which instances the fine-tune set holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneSet {
    /// K shots of every base and novel class.
    Balanced,
    /// K shots of each novel class; base instances become ignore regions.
    NovelOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// `(height, width)`; both multiples of 32.
    pub image_size: (usize, usize),
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub rpn: MrrpnConfig,
    pub gcl: GclConfig,
    pub roi: RoiHeadConfig,
    pub base: PhaseConfig,
    pub finetune: PhaseConfig,
    pub finetune_set: FinetuneSet,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: (128, 128),
            backbone: BackboneConfig::default(),
            neck: NeckConfig::default(),
            rpn: MrrpnConfig::default(),
            gcl: GclConfig::default(),
            roi: RoiHeadConfig::default(),
            base: PhaseConfig::base(),
            finetune: PhaseConfig::finetune(),
            finetune_set: FinetuneSet::Balanced,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("image_size ({h}, {w}) must be positive multiples of 32")));
        }
        if self.backbone.stem == 0 || self.backbone.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        self.neck.validate()?;
        self.rpn.validate()?;
        self.gcl.validate()?;
        let r = &self.roi;
        if r.output_size == 0 || r.sampling == 0 || r.hidden == 0 || r.rois_per_image == 0 || r.test_proposals == 0 {
            return Err(Error::Config("roi: sizes and counts must be positive".into()));
        }
        if !(r.canonical_size > 0.0) || !(0.0..=1.0).contains(&r.foreground_fraction) {
            return Err(Error::Config("roi: canonical_size must be positive, foreground_fraction in [0, 1]".into()));
        }
        if !(r.foreground_iou > 0.0 && r.foreground_iou < 1.0) || !(r.smooth_l1_beta > 0.0) || r.box_loss_weight < 0.0 {
            return Err(Error::Config("roi: foreground_iou in (0, 1), smooth_l1_beta > 0, box_loss_weight >= 0".into()));
        }
        if r.box_coder_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("roi.box_coder_weights must be positive".into()));
        }
        if self.rpn.anchors.strides != [4.0, 8.0, 16.0, 32.0] {
            return Err(Error::Config("rpn.anchors.strides must be [4, 8, 16, 32] to match the backbone".into()));
        }
        self.base.validate("base")?;
        self.finetune.validate("finetune")
    }

    /// A 64×64 model with single-digit widths, for gradient checks and
    /// fast tests.
    pub fn micro() -> Self {
        let mut c = Self {
            image_size: (64, 64),
            backbone: BackboneConfig {
                stem: 4,
                widths: [4, 4, 8, 8],
            },
            neck: NeckConfig {
                width: 8,
                ..NeckConfig::default()
            },
            ..Self::default()
        };
        c.rpn.pre_nms = 200;
        c.rpn.post_nms = 20;
        c.rpn.batch_per_image = 32;
        c.roi.hidden = 16;
        c.roi.rois_per_image = 16;
        c.roi.test_proposals = 20;
        c
    }

    /// Spatial sizes of C2..C5.
    pub fn level_sizes(&self) -> [(usize, usize); 4] {
        let (h, w) = self.image_size;
        std::array::from_fn(|i| (h >> (i + 2), w >> (i + 2)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        DetectorConfig::default().validate().unwrap();
        assert_eq!(DetectorConfig::default().level_sizes()[3], (4, 4));
    }

    #[test]
    fn schedule() {
        let p = PhaseConfig {
            warmup_steps: 0,
            ..PhaseConfig::base()
        };
        assert_eq!(p.lr_at(0, 100), 0.005);
        assert!((p.lr_at(80, 100) - 0.0005).abs() < 1e-15);
        let w = PhaseConfig::base();
        assert!((w.lr_at(0, 1000) - 0.005 * (0.1 + 0.9 / 100.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_size_and_unknown_keys() {
        let c = DetectorConfig {
            image_size: (100, 128),
            ..DetectorConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<DetectorConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
