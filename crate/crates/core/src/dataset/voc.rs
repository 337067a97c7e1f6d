use super::{BoundingBox, CategoryId, DatasetError, DefectImage, Instance};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

const ANNOTATION_DIRS: [&str; 3] = ["Annotations", "ANNOTATIONS", "annotations"];
const IMAGE_DIRS: [&str; 4] = ["JPEGImages", "IMAGES", "images", "Images"];
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// An annotation object that was dropped during ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedObject {
    pub image_id: String,
    pub object_index: usize,
    pub reason: String,
}

/// Outcome of ingesting a VOC-style directory.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    /// Parsed images sorted by id, including those left without instances.
    pub images: Vec<DefectImage>,
    pub rejected: Vec<RejectedObject>,
    /// Ids of images whose every object was rejected.
    pub empty_images: Vec<String>,
    /// Total `<object>` nodes seen across all annotation files.
    pub object_nodes: usize,
}

impl IngestReport {
    pub fn instance_count(&self) -> usize {
        self.images.iter().map(|i| i.instances.len()).sum()
    }
}

fn first_existing(root: &Path, names: &[&str]) -> PathBuf {
    names
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.is_dir())
        .unwrap_or_else(|| root.to_path_buf())
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Reads an image file as grayscale with values in `[0, 1]`.
pub fn load_gray_image(path: &Path) -> Result<(usize, usize, Vec<f32>), DatasetError> {
    let img = image::open(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let pixels = luma.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok((w as usize, h as usize, pixels))
}

/// Parses a VOC-style dataset: an image directory plus one XML annotation per
/// image. VOC's 1-based inclusive pixel indices become continuous 0-based
/// corners (`x1 = xmin - 1`, `x2 = xmax`); boxes are clamped to the image.
pub fn parse_voc_annotations(
    root: &Path,
    name_map: &BTreeMap<String, CategoryId>,
) -> Result<IngestReport, DatasetError> {
    let ann_dir = first_existing(root, &ANNOTATION_DIRS);
    let img_dir = first_existing(root, &IMAGE_DIRS);
    let entries = fs::read_dir(&img_dir).map_err(|e| DatasetError::Io {
        path: img_dir.clone(),
        message: e.to_string(),
    })?;
    let mut image_paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    image_paths.sort();

    let parsed: Vec<Result<(DefectImage, Vec<RejectedObject>, usize), DatasetError>> = image_paths
        .par_iter()
        .map(|path| {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let xml_path = ann_dir.join(format!("{stem}.xml"));
            if !xml_path.is_file() {
                return Err(DatasetError::MissingAnnotation { path: xml_path });
            }
            let xml = fs::read_to_string(&xml_path).map_err(|e| DatasetError::Io {
                path: xml_path.clone(),
                message: e.to_string(),
            })?;
            let (width, height, pixels) = load_gray_image(path)?;
            let (instances, rejected, nodes) =
                parse_objects(&xml, &xml_path, &stem, width, height, name_map)?;
            Ok((
                DefectImage {
                    id: stem,
                    width,
                    height,
                    pixels,
                    instances,
                },
                rejected,
                nodes,
            ))
        })
        .collect();

    let mut report = IngestReport::default();
    for item in parsed {
        let (image, rejected, nodes) = item?;
        if image.instances.is_empty() {
            report.empty_images.push(image.id.clone());
        }
        report.object_nodes += nodes;
        report.rejected.extend(rejected);
        report.images.push(image);
    }
    report.images.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(report)
}

fn parse_objects(
    xml: &str,
    path: &Path,
    image_id: &str,
    width: usize,
    height: usize,
    name_map: &BTreeMap<String, CategoryId>,
) -> Result<(Vec<Instance>, Vec<RejectedObject>, usize), DatasetError> {
    let malformed = |message: String| DatasetError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    let doc = roxmltree::Document::parse(xml).map_err(|e| malformed(e.to_string()))?;
    let mut instances = Vec::new();
    let mut rejected = Vec::new();
    let objects: Vec<_> = doc
        .root_element()
        .children()
        .filter(|n| n.has_tag_name("object"))
        .collect();
    for (index, obj) in objects.iter().enumerate() {
        let child_text = |node: roxmltree::Node, tag: &str| {
            node.children()
                .find(|n| n.has_tag_name(tag))
                .and_then(|n| n.text())
                .map(|t| t.trim().to_string())
        };
        let name = child_text(*obj, "name").ok_or_else(|| malformed(format!("object {index} has no <name>")))?;
        let category = name_map.get(&name).cloned().ok_or_else(|| DatasetError::UnmappedClass {
            name: name.clone(),
            path: path.to_path_buf(),
        })?;
        let reject = |reason: String| RejectedObject {
            image_id: image_id.to_string(),
            object_index: index,
            reason,
        };
        let Some(bndbox) = obj.children().find(|n| n.has_tag_name("bndbox")) else {
            rejected.push(reject("missing <bndbox>".into()));
            continue;
        };
        let coords: Option<Vec<f64>> = ["xmin", "ymin", "xmax", "ymax"]
            .iter()
            .map(|t| child_text(bndbox, t).and_then(|s| s.parse::<f64>().ok()))
            .collect();
        let Some(c) = coords else {
            rejected.push(reject("unparseable bndbox coordinates".into()));
            continue;
        };
        let (xmin, ymin, xmax, ymax) = (c[0], c[1], c[2], c[3]);
        if xmin > xmax || ymin > ymax {
            rejected.push(reject(format!("degenerate bndbox ({xmin}, {ymin}, {xmax}, {ymax})")));
            continue;
        }
        let bbox = BoundingBox {
            x1: xmin - 1.0,
            y1: ymin - 1.0,
            x2: xmax,
            y2: ymax,
        }
        .clamped(width as f64, height as f64);
        if !bbox.is_valid() {
            rejected.push(reject("box lies outside the image".into()));
            continue;
        }
        instances.push(Instance { category, bbox });
    }
    Ok((instances, rejected, objects.len()))
}

/// Writes images as 8-bit PNG plus VOC XML, readable by
/// [`parse_voc_annotations`].
pub fn write_voc_dataset(root: &Path, images: &[DefectImage]) -> Result<(), DatasetError> {
    let io_err = |path: &Path, e: &dyn std::fmt::Display| DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let img_dir = root.join("images");
    let ann_dir = root.join("annotations");
    for dir in [&img_dir, &ann_dir] {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, &e))?;
    }
    images.par_iter().try_for_each(|im| {
        let bytes: Vec<u8> = im
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::GrayImage::from_raw(im.width as u32, im.height as u32, bytes)
            .expect("pixel buffer matches dimensions");
        let png = img_dir.join(format!("{}.png", im.id));
        buf.save(&png).map_err(|e| io_err(&png, &e))?;

        let mut xml = String::new();
        let _ = writeln!(xml, "<annotation>");
        let _ = writeln!(xml, "  <filename>{}.png</filename>", im.id);
        let _ = writeln!(
            xml,
            "  <size><width>{}</width><height>{}</height><depth>1</depth></size>",
            im.width, im.height
        );
        for inst in &im.instances {
            let b = inst.bbox;
            let _ = writeln!(
                xml,
                "  <object><name>{}</name><bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox></object>",
                inst.category.name,
                b.x1.round() as i64 + 1,
                b.y1.round() as i64 + 1,
                b.x2.round() as i64,
                b.y2.round() as i64
            );
        }
        let _ = writeln!(xml, "</annotation>");
        let path = ann_dir.join(format!("{}.xml", im.id));
        fs::write(&path, xml).map_err(|e| io_err(&path, &e))
    })
}
