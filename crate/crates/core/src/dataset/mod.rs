//! Annotated defect images, incremental few-shot splits and synthetic data.
//!
//! Images are single-channel rasters with values in `[0, 1]`. Boxes are
//! corner-format in continuous pixel coordinates, so a box covering pixel
//! columns `3..=5` has `x1 = 3.0` and `x2 = 6.0`.

mod manifest;
mod split;
mod synth;
mod voc;

pub use manifest::{read_partition_manifest, write_partition_manifest, ManifestRecord, PartitionManifest};
pub use split::{build_ifsnd_split, sample_k_shot, DatasetPartition, SplitSpec, NAMED_SPLITS};
pub use synth::{generate_synthetic_dataset, render_primitive, Primitive, SynthConfig};
pub use voc::{load_gray_image, parse_voc_annotations, write_voc_dataset, IngestReport, RejectedObject};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing annotation file {path}")]
    MissingAnnotation { path: PathBuf },
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed annotation {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("unmapped class name '{name}' in {path}")]
    UnmappedClass { name: String, path: PathBuf },
    #[error("category {category} has {available} usable images, {required} required")]
    InsufficientImages {
        category: String,
        available: usize,
        required: usize,
    },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid synthetic config: {0}")]
    InvalidSynthConfig(String),
    #[error("invalid box ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
}

/// A defect category label with its dataset-stable index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CategoryId {
    pub index: usize,
    pub name: String,
}

impl CategoryId {
    pub fn new(index: usize, name: impl Into<String>) -> Self {
        Self {
            index,
            name: name.into(),
        }
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Short labels of the six NEU-DET defect classes, in index order.
pub const NEU_DET_SHORT_NAMES: [&str; 6] = ["Cr", "In", "PS", "Pa", "Sc", "RS"];

/// On-disk NEU-DET class names, index-aligned with [`NEU_DET_SHORT_NAMES`].
pub const NEU_DET_LONG_NAMES: [&str; 6] = [
    "crazing",
    "inclusion",
    "pitted_surface",
    "patches",
    "scratches",
    "rolled-in_scale",
];

pub fn neu_det_categories() -> Vec<CategoryId> {
    NEU_DET_SHORT_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| CategoryId::new(i, *n))
        .collect()
}

/// Annotation-name map for NEU-DET. Accepts both the long on-disk names and
/// the short labels.
pub fn neu_det_name_map() -> BTreeMap<String, CategoryId> {
    let mut map = BTreeMap::new();
    for (cat, long) in neu_det_categories().into_iter().zip(NEU_DET_LONG_NAMES) {
        map.insert(long.to_string(), cat.clone());
        map.insert(cat.name.clone(), cat);
    }
    map
}

/// Looks up categories by short name, preserving the caller's order.
pub fn categories_by_name(all: &[CategoryId], names: &[&str]) -> Result<Vec<CategoryId>, DatasetError> {
    names
        .iter()
        .map(|n| {
            all.iter()
                .find(|c| c.name == *n)
                .cloned()
                .ok_or_else(|| DatasetError::InvalidSplit(format!("unknown category '{n}'")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, DatasetError> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(DatasetError::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clamps to `[0, width] x [0, height]`. The result may be degenerate.
    pub fn clamped(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub category: CategoryId,
    pub bbox: BoundingBox,
}

/// A grayscale image with its labelled defect instances.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major, `height * width` values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub instances: Vec<Instance>,
}

impl DefectImage {
    pub fn pixel(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// The image's dominant category: the most frequent instance category,
    /// ties going to the lowest index.
    pub fn primary_category(&self) -> Option<&CategoryId> {
        let mut counts: BTreeMap<&CategoryId, usize> = BTreeMap::new();
        for inst in &self.instances {
            *counts.entry(&inst.category).or_default() += 1;
        }
        let best = counts.values().copied().max()?;
        counts.into_iter().find(|(_, n)| *n == best).map(|(c, _)| c)
    }

    pub fn has_category(&self, category: &CategoryId) -> bool {
        self.instances.iter().any(|i| &i.category == category)
    }

    /// Bilinear resize to `size x size`, scaling boxes along.
    pub fn resized(&self, size: usize) -> DefectImage {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let sx = self.width as f64 / size as f64;
        let sy = self.height as f64 / size as f64;
        let mut pixels = Vec::with_capacity(size * size);
        for oy in 0..size {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for ox in 0..size {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let top = self.pixel(x0, y0) as f64 * (1.0 - wx) + self.pixel(x1, y0) as f64 * wx;
                let bot = self.pixel(x0, y1) as f64 * (1.0 - wx) + self.pixel(x1, y1) as f64 * wx;
                pixels.push((top * (1.0 - wy) + bot * wy) as f32);
            }
        }
        let instances = self
            .instances
            .iter()
            .map(|i| Instance {
                category: i.category.clone(),
                bbox: i.bbox.scaled(1.0 / sx, 1.0 / sy),
            })
            .collect();
        DefectImage {
            id: self.id.clone(),
            width: size,
            height: size,
            pixels,
            instances,
        }
    }
}
