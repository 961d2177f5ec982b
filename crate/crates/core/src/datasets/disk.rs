//! On-disk layout: `<dir>/images/<id>.png` plus `<dir>/annotations.json`.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "classes": ["square_solid", ...],
//!   "images": [
//!     {"id": "img00000", "file": "images/img00000.png", "width": 128, "height": 128,
//!      "sha256": "...", "annotations": [{"box": [x1, y1, x2, y2], "class": 3}]}
//!   ]
//! }
//! ```
//!
//! Boxes are 0-indexed corner coordinates in pixels. Annotations with
//! `"ignore": true` are excluded from training targets.

use std::fs;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AnnotatedImage, Annotation, Dataset};
use crate::error::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: String,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub sha256: String,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub classes: Vec<String>,
    pub images: Vec<ImageEntry>,
    /// Generator settings and seed, for generated datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_png(img: &AnnotatedImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf).write_image(&img.pixels, img.width as u32, img.height as u32, ExtendedColorType::Rgb8)?;
    Ok(buf)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    save_dataset_with(dataset, dir, None)
}

/// [`save_dataset`] with a provenance record embedded in the manifest.
pub fn save_dataset_with(dataset: &Dataset, dir: &Path, provenance: Option<serde_json::Value>) -> Result<()> {
    dataset.validate()?;
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut entries = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        let png = encode_png(img)?;
        let file = format!("images/{}.png", img.id);
        let path = dir.join(&file);
        fs::write(&path, &png).map_err(|e| Error::io(&path, e))?;
        entries.push(ImageEntry {
            id: img.id.clone(),
            file,
            width: img.width,
            height: img.height,
            sha256: sha256_hex(&png),
            annotations: img.annotations.clone(),
        });
    }
    let manifest = DatasetFile {
        schema_version: DATASET_SCHEMA_VERSION,
        classes: dataset.classes.clone(),
        images: entries,
        provenance,
    };
    let path = dir.join("annotations.json");
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset written by [`save_dataset`], checking each image
/// against its recorded hash and size.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("annotations.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetFile = serde_json::from_str(&text)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Parse {
            location: path.display().to_string(),
            msg: format!("schema_version {} unsupported", manifest.schema_version),
        });
    }
    let mut images = Vec::with_capacity(manifest.images.len());
    for e in manifest.images {
        let p = dir.join(&e.file);
        let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::Parse {
                location: p.display().to_string(),
                msg: "sha256 mismatch".into(),
            });
        }
        let rgb = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?.to_rgb8();
        if rgb.width() as usize != e.width || rgb.height() as usize != e.height {
            return Err(Error::Parse {
                location: p.display().to_string(),
                msg: format!("image is {}x{}, manifest says {}x{}", rgb.width(), rgb.height(), e.width, e.height),
            });
        }
        images.push(AnnotatedImage {
            id: e.id,
            width: e.width,
            height: e.height,
            pixels: rgb.into_raw(),
            annotations: e.annotations,
        });
    }
    let ds = Dataset {
        classes: manifest.classes,
        images,
    };
    ds.validate()?;
    Ok(ds)
}
