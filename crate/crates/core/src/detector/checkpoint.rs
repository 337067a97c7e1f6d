//! Versioned checkpoint files.
//!
//! Layout: a magic line, one JSON header line, then every parameter value as
//! little-endian f32 in header order. Values are rounded to f32 on save, so
//! the header checksum describes the rounded parameters.

use super::mini::{DetectorConfig, HeadLayout, MiniDetector};
use super::params::DetectorParams;
use super::DetectorError;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "dkan-checkpoint v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: DetectorConfig,
    pub layout: HeadLayout,
    pub frozen_groups: Vec<String>,
    pub params: Vec<ParamEntry>,
    pub checksum: String,
    /// Free-form metadata such as seed and iteration count.
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

fn err(path: &Path, message: impl Into<String>) -> DetectorError {
    DetectorError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &MiniDetector,
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<(), DetectorError> {
    let mut offset = 0;
    let params = model
        .params
        .tensors()
        .iter()
        .map(|t| {
            let e = ParamEntry {
                name: t.name.clone(),
                group: t.group.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len(),
            };
            offset += t.data.len();
            e
        })
        .collect();
    let mut rounded = DetectorParams::new();
    for t in model.params.tensors() {
        rounded.push(&t.name, &t.group, t.shape.clone(), t.data.iter().map(|&v| v as f32 as f64).collect());
    }
    let header = CheckpointHeader {
        config: model.config.clone(),
        layout: model.layout.clone(),
        frozen_groups: model.params.frozen_groups().iter().cloned().collect(),
        params,
        checksum: rounded.checksum(),
        meta,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| err(path, e.to_string()))?;
    }
    let file = std::fs::File::create(path).map_err(|e| err(path, e.to_string()))?;
    let mut w = std::io::BufWriter::new(file);
    let json = serde_json::to_string(&header).map_err(|e| err(path, e.to_string()))?;
    let io = |e: std::io::Error| err(path, e.to_string());
    writeln!(w, "{CHECKPOINT_MAGIC}").map_err(io)?;
    writeln!(w, "{json}").map_err(io)?;
    for t in model.params.tensors() {
        for v in &t.data {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader, DetectorError> {
    let file = std::fs::File::open(path).map_err(|e| err(path, e.to_string()))?;
    let mut r = BufReader::new(file);
    read_header(path, &mut r)
}

fn read_header<R: BufRead>(path: &Path, r: &mut R) -> Result<CheckpointHeader, DetectorError> {
    let mut magic = String::new();
    r.read_line(&mut magic).map_err(|e| err(path, e.to_string()))?;
    if magic.trim_end() != CHECKPOINT_MAGIC {
        return Err(err(path, format!("unrecognised format line {:?}", magic.trim_end())));
    }
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| err(path, e.to_string()))?;
    serde_json::from_str(&line).map_err(|e| err(path, format!("bad header: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<(MiniDetector, CheckpointHeader), DetectorError> {
    let file = std::fs::File::open(path).map_err(|e| err(path, e.to_string()))?;
    let mut r = BufReader::new(file);
    let header = read_header(path, &mut r)?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob).map_err(|e| err(path, e.to_string()))?;
    let total: usize = header.params.iter().map(|p| p.len).sum();
    if blob.len() != total * 4 {
        return Err(err(path, format!("expected {} value bytes, found {}", total * 4, blob.len())));
    }
    let mut params = DetectorParams::new();
    for p in &header.params {
        if p.shape.iter().product::<usize>() != p.len || p.offset + p.len > total {
            return Err(err(path, format!("inconsistent entry {}", p.name)));
        }
        let data = blob[p.offset * 4..(p.offset + p.len) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.push(&p.name, &p.group, p.shape.clone(), data);
    }
    for g in &header.frozen_groups {
        params.freeze_group(g);
    }
    if params.checksum() != header.checksum {
        return Err(err(path, "parameter checksum mismatch"));
    }
    let model = MiniDetector::from_parts(header.config.clone(), header.layout.clone(), params)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::neu_det_categories;

    #[test]
    fn round_trip_matches_f32_rounding() {
        let cats = neu_det_categories();
        let layout = HeadLayout {
            base: cats[..3].to_vec(),
            novel: cats[3..].to_vec(),
        };
        let mut m = MiniDetector::new(DetectorConfig::desk(), layout, 7).unwrap();
        m.params.freeze_group("backbone");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &m, Default::default()).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        for (a, b) in back.params.tensors().iter().zip(m.params.tensors()) {
            assert_eq!(a.name, b.name);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| *x == *y as f32 as f64));
        }
        save_checkpoint(&path, &back, Default::default()).unwrap();
        let (again, _) = load_checkpoint(&path).unwrap();
        assert_eq!(again.params.checksum(), back.params.checksum());
        assert_eq!(header.layout, m.layout);
        assert!(back.params.frozen_groups().contains("backbone"));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let cats = neu_det_categories();
        let layout = HeadLayout {
            base: cats[..3].to_vec(),
            novel: vec![],
        };
        let m = MiniDetector::new(DetectorConfig::desk(), layout, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &m, Default::default()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(DetectorError::Checkpoint { .. })));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, "hello\n{}\n").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
