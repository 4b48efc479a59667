//! Synthetic grayscale defect imagery: generation, manifests, k-fold
//! splitting, augmentation and the intensity-threshold baseline.

mod augment;
mod baseline;
mod folds;
mod generate;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, hflip, pad_crop, AUGMENT_PAD};
pub use baseline::{threshold_baseline, threshold_sweep, window_deviation, BaselineReport};
pub use folds::{kfold_split, FoldPlan};
pub use generate::{
    generate_dataset, render_image, BlobSpec, ClusterSpec, EllipseSpec, GeneratorConfig, RenderedImage, SpeckSpec,
};

/// Manifest file name inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Generator config copy inside a dataset directory.
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DefectKind {
    /// melt drop: compact high-attenuation ellipse
    D1,
    /// binder bulk: diffuse soft-edged blob
    D2,
    /// shot cluster: scattered small discs
    D3,
    /// burned wool (not visible in X-ray)
    D4,
    /// uncured moist wool (not visible in X-ray)
    D5,
    /// dirt: irregular polygonal speck
    D6,
}

impl DefectKind {
    pub const VISIBLE: [DefectKind; 4] = [DefectKind::D1, DefectKind::D2, DefectKind::D3, DefectKind::D6];

    pub fn is_visible(self) -> bool {
        Self::VISIBLE.contains(&self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonDefective,
    Defective,
}

impl Label {
    /// Class index used by the classifier head.
    pub fn class(self) -> usize {
        match self {
            Label::NonDefective => 0,
            Label::Defective => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub label: Label,
    pub defects: Vec<DefectKind>,
    pub seed: u64,
    #[serde(default)]
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory image paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label.class()).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Checks the record invariants: defective rows name at least one
    /// visible defect kind, clean rows name none.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            let ok = match r.label {
                Label::Defective => !r.defects.is_empty() && r.defects.iter().all(|d| d.is_visible()),
                Label::NonDefective => r.defects.is_empty(),
            };
            if !ok {
                return Err(Error::Input(format!(
                    "record `{}` labelled {:?} lists defects {:?}",
                    r.path, r.label, r.defects
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a JSON-lines manifest; a directory argument means its
    /// `manifest.jsonl`.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let f = fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&file, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Input(format!("{}:{}: {e}", file.display(), i + 1)))?;
            records.push(r);
        }
        let m = DatasetManifest {
            records,
            root: file.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }
}

/// Single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Loads an 8-bit grayscale PNG with intensities 0..=255.
pub fn load_gray(path: &Path) -> Result<Image> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Image::new(h as usize, w as usize, img.into_raw().into_iter().map(f32::from).collect())
}

/// Mean and scale applied to 0..1 intensities before they reach a model.
pub const NORM_MEAN: f32 = 0.5;
pub const NORM_STD: f32 = 0.25;

/// Images resized to `size`x`size` (triangle filter) and normalized, with
/// class labels, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub size: usize,
}

pub fn load_dataset(manifest: &DatasetManifest, size: usize) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Config("input size must be positive".into()));
    }
    let mut images = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let path = manifest.image_path(r);
        let img = image::open(&path)?.into_luma8();
        let img = if img.dimensions() == (size as u32, size as u32) {
            img
        } else {
            image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
        };
        let pixels = img
            .into_raw()
            .into_iter()
            .map(|v| (f32::from(v) / 255.0 - NORM_MEAN) / NORM_STD)
            .collect();
        images.push(Image::new(size, size, pixels)?);
    }
    Ok(Dataset {
        images,
        labels: manifest.labels(),
        size,
    })
}

/// Well-mixed 64-bit seed for item `index` of a stream seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(0, 0), derive_seed(1, 0));
    }

    #[test]
    fn record_serialization() {
        let r = ManifestRecord {
            path: "images/0001.png".into(),
            label: Label::NonDefective,
            defects: vec![],
            seed: 3,
            fold: Some(2),
        };
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"non_defective\""));
        assert_eq!(serde_json::from_str::<ManifestRecord>(&line).unwrap(), r);
    }
}
