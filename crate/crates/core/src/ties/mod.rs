//! Adapter archives, LoRA deltas and TIES-Merging.

pub mod archive;
pub mod lora;
pub mod merge;

use thiserror::Error;

pub use archive::{read_archive, write_archive, ArchiveError, Dtype, Tensor, TensorArchive};
pub use lora::{materialize, split_adapter, AdapterParts, LoraOverrides, LoraPair, Matrix};
pub use merge::{
    disjoint_merge, elect_sign, keep_count, ties_merge, ties_merge_flat, trim, DenseTensor, KeyPolicy,
    MergeConfig, MergeSpace, Sign, TaskVector,
};

#[derive(Debug, Error)]
pub enum TiesError {
    #[error("invalid merge configuration: {0}")]
    InvalidConfig(String),
    #[error("nothing to merge: no task vectors given")]
    NoTaskVectors,
    #[error("vector length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("tensor `{name}`: task {task} has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch { name: String, task: usize, expected: Vec<usize>, actual: Vec<usize> },
    #[error("tensor `{name}`: task {task} contains non-finite values")]
    NonFinite { name: String, task: usize },
    #[error("task {task} disagrees on tensor names: {names}")]
    KeyMismatch { task: usize, names: String },
    #[error("task vectors share no tensor names")]
    EmptyIntersection,
    #[error("LoRA adapter: {0}")]
    Lora(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

/// Turns an adapter archive into the task vector merged in the given space.
///
/// Materialized: LoRA pairs become dense deltas keyed by their base tensor
/// name. Factor: the A and B factors are kept under their own names. Non-LoRA
/// tensors are treated as dense deltas in both spaces.
pub fn adapter_task_vector(
    archive: &TensorArchive,
    space: MergeSpace,
    overrides: LoraOverrides,
) -> Result<TaskVector, TiesError> {
    let mut tv = TaskVector::new();
    match space {
        MergeSpace::Materialized => {
            let parts = split_adapter(archive, overrides)?;
            for pair in &parts.pairs {
                tv.insert(pair.target_name.clone(), materialize(pair)?);
            }
            for (name, dense) in parts.dense {
                if tv.deltas.contains_key(&name) {
                    return Err(TiesError::Lora(format!(
                        "`{name}` is both a LoRA target and a dense tensor"
                    )));
                }
                tv.insert(name, dense);
            }
        }
        MergeSpace::Factor => {
            // Validates pairing and shapes even though factors stay separate.
            split_adapter(archive, overrides)?;
            for (name, t) in &archive.tensors {
                tv.insert(name.clone(), DenseTensor::from_f32(t.shape().to_vec(), t.data()));
            }
        }
    }
    Ok(tv)
}

fn task_vector_to_archive(tv: &TaskVector) -> Result<TensorArchive, TiesError> {
    let mut out = TensorArchive::new();
    for (name, t) in &tv.deltas {
        let tensor = Tensor::new(t.shape().to_vec(), t.to_f32()).map_err(|e| match e {
            ArchiveError::InvalidShape { shape, .. } => ArchiveError::InvalidShape { name: name.clone(), shape },
            other => other,
        })?;
        out.insert(name.clone(), tensor);
    }
    Ok(out)
}

/// TIES-merges adapter archives into one archive of F32 tensors.
///
/// Output metadata records the merge settings; factor-space output is marked
/// approximate and carries the shared `lora_alpha`/`r`.
pub fn merge_adapters(
    adapters: &[TensorArchive],
    cfg: &MergeConfig,
    overrides: LoraOverrides,
) -> Result<TensorArchive, TiesError> {
    cfg.validate()?;
    if adapters.is_empty() {
        return Err(TiesError::NoTaskVectors);
    }
    let task_vectors = adapters
        .iter()
        .map(|a| adapter_task_vector(a, cfg.space, overrides))
        .collect::<Result<Vec<_>, _>>()?;
    let merged = ties_merge(&task_vectors, cfg)?;
    let mut out = task_vector_to_archive(&merged)?;

    let meta = &mut out.metadata;
    meta.insert("merge_method".into(), "ties".into());
    meta.insert("merge_space".into(), cfg.space.to_string());
    meta.insert("trim_fraction".into(), cfg.trim_fraction.to_string());
    meta.insert("lambda".into(), cfg.lambda.to_string());
    meta.insert("num_tasks".into(), adapters.len().to_string());
    if cfg.space == MergeSpace::Factor {
        meta.insert("approximate".into(), "true".into());
        let params = adapters
            .iter()
            .map(|a| lora::lora_hyperparams(a, overrides))
            .collect::<Result<Vec<_>, _>>()?;
        if params.windows(2).any(|w| w[0] != w[1]) {
            return Err(TiesError::Lora(
                "factor-space merge needs identical lora_alpha and r across adapters".into(),
            ));
        }
        let (alpha, rank) = params[0];
        if let Some(alpha) = alpha {
            meta.insert(lora::ALPHA_KEY.into(), alpha.to_string());
        }
        if let Some(rank) = rank {
            meta.insert(lora::RANK_KEY.into(), rank.to_string());
        }
    }
    Ok(out)
}
