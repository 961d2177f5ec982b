//! Annotated images, the synthetic benchmark, base/novel splits, K-shot
//! sampling and parsers for VOC-XML and NWPU text annotations.

mod disk;
mod kshot;
mod parsers;
mod splits;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub use disk::{load_dataset, save_dataset, save_dataset_with, sha256_hex, DatasetFile, DATASET_SCHEMA_VERSION};
pub use kshot::sample_k_shot;
pub use parsers::{parse_nwpu, parse_voc_xml, VocAnnotation, NWPU_CLASSES};
pub use splits::{make_split, SplitSpec, DIOR_CLASSES, SPLIT_IDS};
pub use synthetic::{generate_synthetic, generate_synthetic_image, DatasetSpec, Shape, Texture};

/// Per-channel normalisation applied when turning pixels into tensors.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: usize,
    /// Present in the image but excluded from training targets.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ignore: bool,
}

/// An RGB8 image with its boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub pixels: Vec<u8>,
    pub annotations: Vec<Annotation>,
}

impl AnnotatedImage {
    /// `(1, 3, H, W)` normalised tensor.
    pub fn to_tensor(&self) -> Tensor4 {
        let (w, h) = (self.width, self.height);
        Tensor4::from_fn([1, 3, h, w], |_, c, y, x| {
            (self.pixels[(y * w + x) * 3 + c] as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD
        })
    }

    /// Horizontally mirrored copy (pixels and boxes).
    pub fn flipped(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut pixels = vec![0u8; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let (s, d) = ((y * w + x) * 3, (y * w + (w - 1 - x)) * 3);
                pixels[d..d + 3].copy_from_slice(&self.pixels[s..s + 3]);
            }
        }
        let wf = w as f64;
        Self {
            id: self.id.clone(),
            width: w,
            height: h,
            pixels,
            annotations: self
                .annotations
                .iter()
                .map(|a| Annotation {
                    bbox: BBox::raw(wf - a.bbox.x2, a.bbox.y1, wf - a.bbox.x1, a.bbox.y2),
                    ..*a
                })
                .collect(),
        }
    }

    /// Instances that count as training targets.
    pub fn targets(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| !a.ignore)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    /// Checks every box is valid and inside its image and every class id
    /// is in the catalogue.
    pub fn validate(&self) -> Result<()> {
        for img in &self.images {
            if img.pixels.len() != img.width * img.height * 3 {
                return Err(Error::invalid("dataset", format!("image {} has a wrong pixel count", img.id)));
            }
            for a in &img.annotations {
                if a.class >= self.classes.len() {
                    return Err(Error::invalid("dataset", format!("image {}: class id {} unknown", img.id, a.class)));
                }
                if !a.bbox.is_valid() || !a.bbox.inside(img.width as f64, img.height as f64) {
                    return Err(Error::invalid("dataset", format!("image {}: box {:?} invalid", img.id, a.bbox)));
                }
            }
        }
        Ok(())
    }

    /// Non-ignored instance count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for img in &self.images {
            for a in img.targets() {
                c[a.class] += 1;
            }
        }
        c
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}
