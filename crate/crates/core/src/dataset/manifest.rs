//! Line-delimited JSON partition manifest.
//!
//! The first line is a header carrying the split specification and data
//! root; each following line describes one image of one partition:
//!
//! ```text
//! {"kind":"header","version":1,"data_root":"data/synth","spec":{...},"test_per_category":20,"base_train_per_category":40}
//! {"kind":"image","id":"Cr_0003","partition":"test","categories":["Cr"],"boxes":[[12.0,9.0,25.0,30.0]]}
//! ```
//!
//! `partition` is one of `base_train`, `novel_train`, `test`, `novel_pool`.

use super::{BoundingBox, DatasetError, DatasetPartition, DefectImage, Instance, SplitSpec};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestRecord {
    Header {
        version: u32,
        data_root: PathBuf,
        spec: SplitSpec,
        test_per_category: usize,
        base_train_per_category: usize,
    },
    Image {
        id: String,
        partition: String,
        categories: Vec<String>,
        boxes: Vec<[f64; 4]>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionManifest {
    pub data_root: PathBuf,
    pub spec: SplitSpec,
    pub test_per_category: usize,
    pub base_train_per_category: usize,
    /// `(partition, id, instances)` in file order.
    pub entries: Vec<(String, String, Vec<Instance>)>,
}

impl PartitionManifest {
    /// Rebuilds the partition, taking pixels from `images` and labels from
    /// the manifest.
    pub fn materialize(&self, images: &[DefectImage]) -> Result<DatasetPartition, DatasetError> {
        let by_id: HashMap<&str, &DefectImage> = images.iter().map(|i| (i.id.as_str(), i)).collect();
        let mut part = DatasetPartition {
            spec: self.spec.clone(),
            base_train: Vec::new(),
            novel_train: Vec::new(),
            test: Vec::new(),
            novel_pool: Vec::new(),
        };
        for (partition, id, instances) in &self.entries {
            let src = by_id.get(id.as_str()).ok_or_else(|| DatasetError::Malformed {
                path: self.data_root.clone(),
                message: format!("manifest image '{id}' not found in dataset"),
            })?;
            let im = DefectImage {
                instances: instances.clone(),
                ..(*src).clone()
            };
            match partition.as_str() {
                "base_train" => part.base_train.push(im),
                "novel_train" => part.novel_train.push(im),
                "test" => part.test.push(im),
                "novel_pool" => part.novel_pool.push(im),
                other => {
                    return Err(DatasetError::Malformed {
                        path: self.data_root.clone(),
                        message: format!("unknown partition '{other}'"),
                    })
                }
            }
        }
        Ok(part)
    }
}

pub fn write_partition_manifest(
    path: &Path,
    data_root: &Path,
    partition: &DatasetPartition,
    test_per_category: usize,
    base_train_per_category: usize,
) -> Result<(), DatasetError> {
    let io_err = |e: std::io::Error| DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut out = Vec::new();
    let mut push = |rec: &ManifestRecord| {
        serde_json::to_writer(&mut out, rec).expect("manifest records serialize");
        out.push(b'\n');
    };
    push(&ManifestRecord::Header {
        version: MANIFEST_VERSION,
        data_root: data_root.to_path_buf(),
        spec: partition.spec.clone(),
        test_per_category,
        base_train_per_category,
    });
    let groups = [
        ("base_train", &partition.base_train),
        ("novel_train", &partition.novel_train),
        ("test", &partition.test),
        ("novel_pool", &partition.novel_pool),
    ];
    for (name, images) in groups {
        for im in images {
            push(&ManifestRecord::Image {
                id: im.id.clone(),
                partition: name.to_string(),
                categories: im.instances.iter().map(|i| i.category.name.clone()).collect(),
                boxes: im.instances.iter().map(|i| i.bbox.to_array()).collect(),
            });
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io_err)
}

pub fn read_partition_manifest(path: &Path) -> Result<PartitionManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let malformed = |line: usize, message: String| DatasetError::Malformed {
        path: path.to_path_buf(),
        message: format!("line {}: {message}", line + 1),
    };
    let mut header = None;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| malformed(n, e.to_string()))?;
        match rec {
            ManifestRecord::Header {
                version,
                data_root,
                spec,
                test_per_category,
                base_train_per_category,
            } => {
                if version != MANIFEST_VERSION {
                    return Err(malformed(n, format!("unsupported manifest version {version}")));
                }
                header = Some((data_root, spec, test_per_category, base_train_per_category));
            }
            ManifestRecord::Image {
                id,
                partition,
                categories,
                boxes,
            } => {
                let (_, spec, _, _) = header.as_ref().ok_or_else(|| malformed(n, "image before header".into()))?;
                if categories.len() != boxes.len() {
                    return Err(malformed(n, "category and box counts differ".into()));
                }
                let mut instances = Vec::new();
                for (name, b) in categories.iter().zip(&boxes) {
                    let category = spec
                        .all_categories()
                        .into_iter()
                        .find(|c| &c.name == name)
                        .ok_or_else(|| malformed(n, format!("category '{name}' not in split")))?;
                    let bbox = BoundingBox::new(b[0], b[1], b[2], b[3]).map_err(|e| malformed(n, e.to_string()))?;
                    instances.push(Instance { category, bbox });
                }
                entries.push((partition, id, instances));
            }
        }
    }
    let (data_root, spec, test_per_category, base_train_per_category) =
        header.ok_or_else(|| malformed(0, "missing header".into()))?;
    Ok(PartitionManifest {
        data_root,
        spec,
        test_per_category,
        base_train_per_category,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_ifsnd_split, generate_synthetic_dataset, SynthConfig};

    #[test]
    fn manifest_restores_partition() {
        let cfg = SynthConfig {
            images_per_category: 12,
            ..SynthConfig::default()
        };
        let images = generate_synthetic_dataset(&cfg, 1).unwrap();
        let spec = SplitSpec::named("split3", &cfg.categories(), 2, 5).unwrap();
        let part = build_ifsnd_split(&images, &spec, 4, 6).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("partition.jsonl");
        write_partition_manifest(&path, Path::new("data"), &part, 4, 6).unwrap();
        let manifest = read_partition_manifest(&path).unwrap();
        assert_eq!(manifest.data_root, PathBuf::from("data"));
        assert_eq!(manifest.materialize(&images).unwrap(), part);
    }
}
