use super::{BoundingBox, CategoryId, DatasetError, DefectImage, Instance, NEU_DET_SHORT_NAMES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Background pixels are drawn uniformly from this range; primitive pixels
/// always fall outside it.
pub const BACKGROUND_RANGE: (f32, f32) = (0.25, 0.45);

/// Texture drawn for a synthetic defect category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Primitive {
    /// Crossing thin lines.
    Grid,
    /// Filled ellipse.
    Blob,
    /// Cluster of isolated dots.
    Dots,
    /// Filled rectangle with a hollow centre.
    Frame,
    /// Long thin line along one axis.
    Bar,
    /// Hollow ellipse.
    Ring,
}

const PRIMITIVES: [Primitive; 6] = [
    Primitive::Grid,
    Primitive::Blob,
    Primitive::Dots,
    Primitive::Frame,
    Primitive::Bar,
    Primitive::Ring,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_categories: usize,
    pub images_per_category: usize,
    pub image_size: usize,
    pub max_instances_per_image: usize,
    /// Per-category textures; defaults cycle through all primitives, with
    /// categories beyond the sixth rendered dark instead of bright.
    pub primitives: Option<Vec<Primitive>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_categories: 6,
            images_per_category: 50,
            image_size: 64,
            max_instances_per_image: 1,
            primitives: None,
        }
    }
}

impl SynthConfig {
    pub fn categories(&self) -> Vec<CategoryId> {
        (0..self.num_categories)
            .map(|i| match NEU_DET_SHORT_NAMES.get(i) {
                Some(n) => CategoryId::new(i, *n),
                None => CategoryId::new(i, format!("D{i}")),
            })
            .collect()
    }

    fn primitive(&self, category: usize) -> (Primitive, bool) {
        match &self.primitives {
            Some(p) => (p[category], category % 2 == 0),
            None => (PRIMITIVES[category % 6], category < 6),
        }
    }

    fn primitive_extent(&self) -> (usize, usize) {
        (self.image_size / 6, self.image_size / 3)
    }
}

/// Rasterises a primitive into a `w x h` boolean mask.
pub fn render_primitive(kind: Primitive, w: usize, h: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; w * h];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
    let ellipse = |x: usize, y: usize| {
        let dx = (x as f64 - cx) / rx;
        let dy = (y as f64 - cy) / ry;
        dx * dx + dy * dy
    };
    match kind {
        Primitive::Grid => {
            let step = 3 + rng.gen_range(0..2);
            for y in 0..h {
                for x in 0..w {
                    mask[y * w + x] = x % step == 0 || y % step == 0;
                }
            }
        }
        Primitive::Blob => {
            for y in 0..h {
                for x in 0..w {
                    mask[y * w + x] = ellipse(x, y) <= 1.0;
                }
            }
        }
        Primitive::Dots => {
            let n = (w * h / 12).max(4);
            for _ in 0..n {
                let x = rng.gen_range(0..w);
                let y = rng.gen_range(0..h);
                mask[y * w + x] = true;
            }
        }
        Primitive::Frame => {
            let t = (w.min(h) / 4).max(1);
            for y in 0..h {
                for x in 0..w {
                    mask[y * w + x] = x < t || y < t || x >= w - t || y >= h - t;
                }
            }
        }
        Primitive::Bar => {
            let thick = 1 + rng.gen_range(0..2);
            if w >= h {
                let y0 = (h - thick.min(h)) / 2;
                for y in y0..(y0 + thick).min(h) {
                    for x in 0..w {
                        mask[y * w + x] = true;
                    }
                }
            } else {
                let x0 = (w - thick.min(w)) / 2;
                for y in 0..h {
                    for x in x0..(x0 + thick).min(w) {
                        mask[y * w + x] = true;
                    }
                }
            }
        }
        Primitive::Ring => {
            for y in 0..h {
                for x in 0..w {
                    let r = ellipse(x, y);
                    mask[y * w + x] = (0.45..=1.0).contains(&r);
                }
            }
        }
    }
    mask
}

fn tight_box(mask: &[bool], w: usize, ox: usize, oy: usize) -> Option<BoundingBox> {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let (x, y) = (i % w, i / w);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
        }
    }
    (x1 != usize::MAX).then(|| BoundingBox {
        x1: (ox + x1) as f64,
        y1: (oy + y1) as f64,
        x2: (ox + x2) as f64,
        y2: (oy + y2) as f64,
    })
}

fn overlaps(a: &BoundingBox, b: &BoundingBox, gap: f64) -> bool {
    a.x1 < b.x2 + gap && b.x1 < a.x2 + gap && a.y1 < b.y2 + gap && b.y1 < a.y2 + gap
}

fn render_image(config: &SynthConfig, category: &CategoryId, id: String, rng: &mut ChaCha8Rng) -> DefectImage {
    let size = config.image_size;
    let (lo, hi) = BACKGROUND_RANGE;
    let mut pixels: Vec<f32> = (0..size * size).map(|_| rng.gen_range(lo..hi)).collect();
    let (kind, bright) = config.primitive(category.index);
    let (min_ext, max_ext) = config.primitive_extent();
    let count = rng.gen_range(1..=config.max_instances_per_image.max(1));
    let mut instances: Vec<Instance> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let elongated = kind == Primitive::Bar;
            let (mut w, mut h) = (rng.gen_range(min_ext..=max_ext), rng.gen_range(min_ext..=max_ext));
            if elongated {
                if rng.gen_bool(0.5) {
                    w = max_ext + rng.gen_range(0..=max_ext / 2);
                    h = rng.gen_range(3..=5);
                } else {
                    h = max_ext + rng.gen_range(0..=max_ext / 2);
                    w = rng.gen_range(3..=5);
                }
            }
            let ox = rng.gen_range(0..=size - w);
            let oy = rng.gen_range(0..=size - h);
            let mask = render_primitive(kind, w, h, rng);
            let Some(bbox) = tight_box(&mask, w, ox, oy) else {
                continue;
            };
            if instances.iter().any(|i| overlaps(&i.bbox, &bbox, 2.0)) {
                continue;
            }
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    let p = &mut pixels[(oy + i / w) * size + ox + i % w];
                    *p = if bright {
                        rng.gen_range(0.75..1.0)
                    } else {
                        rng.gen_range(0.0..0.08)
                    };
                }
            }
            instances.push(Instance {
                category: category.clone(),
                bbox,
            });
            break;
        }
    }
    DefectImage {
        id,
        width: size,
        height: size,
        pixels,
        instances,
    }
}

/// Renders `images_per_category` images per category, each showing one to
/// `max_instances_per_image` copies of that category's primitive on a noise
/// background. Ground-truth boxes tightly enclose the primitive pixels.
pub fn generate_synthetic_dataset(config: &SynthConfig, seed: u64) -> Result<Vec<DefectImage>, DatasetError> {
    if config.num_categories < 2 {
        return Err(DatasetError::InvalidSynthConfig("need at least 2 categories".into()));
    }
    if config.image_size < 32 {
        return Err(DatasetError::InvalidSynthConfig(format!(
            "image size {} cannot hold the largest primitive (minimum 32)",
            config.image_size
        )));
    }
    match &config.primitives {
        Some(p) if p.len() != config.num_categories => {
            return Err(DatasetError::InvalidSynthConfig(format!(
                "{} primitives given for {} categories",
                p.len(),
                config.num_categories
            )))
        }
        None if config.num_categories > 12 => {
            return Err(DatasetError::InvalidSynthConfig(
                "at most 12 categories have distinct default textures".into(),
            ))
        }
        _ => {}
    }
    let cats = config.categories();
    let jobs: Vec<(usize, usize)> = (0..cats.len())
        .flat_map(|c| (0..config.images_per_category).map(move |i| (c, i)))
        .collect();
    Ok(jobs
        .par_iter()
        .enumerate()
        .map(|(stream, &(c, i))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64);
            render_image(config, &cats[c], format!("{}_{i:04}", cats[c].name), &mut rng)
        })
        .collect())
}
