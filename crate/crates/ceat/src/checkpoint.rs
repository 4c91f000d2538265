//! Task-boundary checkpoints. Every float is stored as its raw bit
//! pattern, so a round trip is exact in both precisions and
//! `save(load(file))` reproduces the file byte for byte.
//!
//! Checkpoints are only ever written after a task fully completes
//! (post-absorption, prototypes stored, metrics recorded). At that point
//! every RNG stream of the finished tasks has been consumed in full, and
//! all later streams are re-derivable from the root seed and the task
//! index — so the seed plus `tasks_completed` is the entire RNG state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::prototypes::{Prototype, PrototypeStore};
use crate::report::{write_atomic, TaskRecord};
use crate::tensor::{Element, Precision, Tensor};
use crate::vit::{IncrementalViT, ModelShape};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub class_id: usize,
    pub task_of_origin: usize,
    pub bits: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub precision: Precision,
    pub seed: u64,
    pub tasks_completed: usize,
    pub shape: ModelShape,
    pub head_sizes: Vec<usize>,
    pub tensors: Vec<NamedTensorRecord>,
    pub baseline_head_sizes: Vec<usize>,
    pub baseline_tensors: Vec<NamedTensorRecord>,
    pub prototypes: Vec<PrototypeRecord>,
    pub matrix_bits: Vec<Vec<u64>>,
    pub baseline_matrix_bits: Vec<Vec<u64>>,
    pub test_sizes: Vec<usize>,
    pub task_records: Vec<TaskRecord>,
    pub ledger_summary: Vec<(usize, usize, u64)>,
    pub ledger_violations: Vec<String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

fn tensor_record<T: Element>(name: &str, t: &Tensor<T>) -> NamedTensorRecord {
    NamedTensorRecord {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        bits: t.data().iter().map(|v| v.bits()).collect(),
    }
}

fn tensor_from_record<T: Element>(rec: &NamedTensorRecord) -> Result<Tensor<T>> {
    let numel: usize = rec.shape.iter().product();
    if rec.bits.len() != numel {
        return Err(Error::Checkpoint(format!(
            "{}: {} values for shape {:?}",
            rec.name,
            rec.bits.len(),
            rec.shape
        )));
    }
    let data: Vec<T> = rec.bits.iter().map(|&b| T::from_bits64(b)).collect();
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Checkpoint(format!("{}: non-finite value {bad}", rec.name)));
    }
    Tensor::from_vec(rec.shape.clone(), data)
}

/// All model parameters by name. The model must already be absorbed;
/// expansion branches never reach a checkpoint.
pub fn encode_model<T: Element>(model: &IncrementalViT<T>) -> Result<Vec<NamedTensorRecord>> {
    if model.exfusion.is_some() {
        return Err(Error::Checkpoint(
            "model still carries expansion branches; absorb before checkpointing".into(),
        ));
    }
    Ok(model
        .named_params()
        .into_iter()
        .map(|(name, t)| tensor_record(&name, t))
        .collect())
}

/// Rebuilds a model from its shape, head layout, and parameter records.
/// Every parameter must be present exactly once with the right shape.
pub fn decode_model<T: Element>(
    shape: &ModelShape,
    head_sizes: &[usize],
    records: &[NamedTensorRecord],
) -> Result<IncrementalViT<T>> {
    let mut model: IncrementalViT<T> = IncrementalViT::new(shape.clone(), 0)?;
    for (i, &n) in head_sizes.iter().enumerate() {
        model.expand_classifier(n, 0, i)?;
    }
    let mut consumed = vec![false; records.len()];
    for (name, param) in model.named_params_mut() {
        let idx = records
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let tensor = tensor_from_record::<T>(&records[idx])?;
        if tensor.shape() != param.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?} vs model {:?}",
                tensor.shape(),
                param.shape()
            )));
        }
        let keep_grad = param.requires_grad();
        *param = if keep_grad { tensor.with_grad() } else { tensor };
        consumed[idx] = true;
    }
    if let Some(i) = consumed.iter().position(|&c| !c) {
        return Err(Error::Checkpoint(format!("unexpected tensor {}", records[i].name)));
    }
    Ok(model)
}

pub fn encode_prototypes<T: Element>(store: &PrototypeStore<T>) -> Vec<PrototypeRecord> {
    store
        .all()
        .iter()
        .map(|p| PrototypeRecord {
            class_id: p.class_id,
            task_of_origin: p.task_of_origin,
            bits: p.vector.data().iter().map(|v| v.bits()).collect(),
        })
        .collect()
}

pub fn decode_prototypes<T: Element>(
    records: &[PrototypeRecord],
    dim: usize,
) -> Result<PrototypeStore<T>> {
    let mut store = PrototypeStore::new();
    for rec in records {
        if rec.bits.len() != dim {
            return Err(Error::Checkpoint(format!(
                "prototype for class {} has {} values, model dim is {dim}",
                rec.class_id,
                rec.bits.len()
            )));
        }
        let vector = Tensor::from_vec(
            vec![1, dim],
            rec.bits.iter().map(|&b| T::from_bits64(b)).collect(),
        )?;
        store.push(Prototype {
            class_id: rec.class_id,
            vector,
            task_of_origin: rec.task_of_origin,
        })?;
    }
    Ok(store)
}

pub fn encode_matrix(matrix: &AccuracyMatrix) -> Vec<Vec<u64>> {
    matrix
        .rows()
        .iter()
        .map(|row| row.iter().map(|v| v.to_bits()).collect())
        .collect()
}

pub fn decode_matrix(bits: &[Vec<u64>]) -> Result<AccuracyMatrix> {
    AccuracyMatrix::from_rows(
        bits.iter()
            .map(|row| row.iter().map(|&b| f64::from_bits(b)).collect())
            .collect(),
    )
}
