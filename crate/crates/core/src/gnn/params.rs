//! Named parameter tensors with bit-exact file persistence.
//!
//! Parameter files are a single JSON document: an architecture header plus
//! base64-encoded little-endian f64 tensors, so save→load→save is
//! byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub value: Array2<f64>,
}

/// Flat list of named tensors; slot indices are stable and used by the tape.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: &str, value: Array2<f64>) -> usize {
        self.tensors.push(Tensor {
            name: name.to_string(),
            value,
        });
        self.tensors.len() - 1
    }

    pub fn value(&self, slot: usize) -> &Array2<f64> {
        &self.tensors[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Array2<f64> {
        &mut self.tensors[slot].value
    }

    pub fn slot_by_name(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Σ ‖θ‖² over all tensors (for the ℓ2 penalty).
    pub fn l2_norm_sq(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.value.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Architecture metadata stored alongside tensors; loading checks it against
/// the consumer's expectation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureMeta {
    /// "branch" or "bound".
    pub variant: String,
    pub embedding_dim: usize,
    /// Init-MLP depth (T1: number of layers minus one).
    pub init_depth: usize,
    /// Forward/backward pass rounds (T2).
    pub passes: usize,
    /// Feature dimensions per node class.
    pub feature_dims: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    name: String,
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    architecture: ArchitectureMeta,
    tensors: Vec<TensorFile>,
}

pub fn save_params(path: &Path, meta: &ArchitectureMeta, params: &ParamSet) -> Result<()> {
    let engine = base64::engine::general_purpose::STANDARD;
    let tensors = params
        .tensors
        .iter()
        .map(|t| {
            let mut bytes = Vec::with_capacity(t.value.len() * 8);
            for v in t.value.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            TensorFile {
                name: t.name.clone(),
                rows: t.value.nrows(),
                cols: t.value.ncols(),
                data: engine.encode(&bytes),
            }
        })
        .collect();
    let file = ParamFile {
        architecture: meta.clone(),
        tensors,
    };
    std::fs::write(path, crate::jsonfmt::to_string(&file)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(ArchitectureMeta, ParamSet)> {
    let engine = base64::engine::general_purpose::STANDARD;
    let text = std::fs::read_to_string(path)?;
    let file: ParamFile = serde_json::from_str(&text)?;
    let mut params = ParamSet::new();
    for t in file.tensors {
        let bytes = engine
            .decode(&t.data)
            .map_err(|e| Error::ArchitectureMismatch(format!("bad tensor data: {e}")))?;
        if bytes.len() != t.rows * t.cols * 8 {
            return Err(Error::ArchitectureMismatch(format!(
                "tensor {} has {} bytes, expected {}",
                t.name,
                bytes.len(),
                t.rows * t.cols * 8
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = Array2::from_shape_vec((t.rows, t.cols), values)
            .map_err(|e| Error::ArchitectureMismatch(e.to_string()))?;
        params.push(&t.name, arr);
    }
    Ok((file.architecture, params))
}

/// Check a loaded header against the expected one.
pub fn check_architecture(expected: &ArchitectureMeta, found: &ArchitectureMeta) -> Result<()> {
    if expected != found {
        return Err(Error::ArchitectureMismatch(format!(
            "expected {expected:?}, found {found:?}"
        )));
    }
    Ok(())
}
