use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named learnable tensors, organised in groups that can be frozen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectorParams {
    tensors: Vec<ParamTensor>,
    frozen: BTreeSet<String>,
}

/// Gradients aligned index-for-index with a [`DetectorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub data: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }
}

impl DetectorParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: &str, group: &str, shape: Vec<usize>, data: Vec<f64>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape mismatch for {name}");
        assert!(self.index_of(name).is_none(), "duplicate parameter {name}");
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            group: group.to_string(),
            shape,
            data,
        });
        self.tensors.len() - 1
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    #[inline]
    pub fn data(&self, index: usize) -> &[f64] {
        &self.tensors[index].data
    }

    pub fn data_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.tensors[index].data
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.tensors.iter().map(|t| t.group.as_str()).collect()
    }

    pub fn freeze_group(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.tensors.iter().map(|t| t.group.clone()).collect();
    }

    pub fn frozen_groups(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_frozen(&self, index: usize) -> bool {
        self.frozen.contains(&self.tensors[index].group)
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            data: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            h.update([0u8]);
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
