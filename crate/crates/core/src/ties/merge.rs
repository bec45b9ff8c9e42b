//! TIES-Merging of task vectors: trim, elect sign, disjoint merge.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TiesError;

/// Dense f64 tensor. All merge arithmetic happens at this precision.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Self {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Per-tensor parameter deltas of one adapter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskVector {
    pub deltas: BTreeMap<String, DenseTensor>,
}

impl TaskVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DenseTensor) {
        self.deltas.insert(name.into(), tensor);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeSpace {
    /// Merge dense `(alpha / r) * B * A` deltas.
    Materialized,
    /// Merge the A and B factors independently. Approximate.
    Factor,
}

impl fmt::Display for MergeSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeSpace::Materialized => "materialized",
            MergeSpace::Factor => "factor",
        })
    }
}

impl FromStr for MergeSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "materialized" | "dense" => Ok(MergeSpace::Materialized),
            "factor" => Ok(MergeSpace::Factor),
            other => Err(format!("unknown merge space `{other}` (expected materialized or factor)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyPolicy {
    /// Merge only tensor names present in every task vector.
    Intersect,
    /// Fail if the task vectors disagree on tensor names.
    UnionError,
}

impl FromStr for KeyPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "intersect" => Ok(KeyPolicy::Intersect),
            "union_error" | "strict" => Ok(KeyPolicy::UnionError),
            other => Err(format!("unknown key policy `{other}` (expected intersect or union-error)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub trim_fraction: f64,
    pub lambda: f64,
    pub space: MergeSpace,
    pub key_policy: KeyPolicy,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            trim_fraction: 0.20,
            lambda: 1.0,
            space: MergeSpace::Materialized,
            key_policy: KeyPolicy::Intersect,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), TiesError> {
        check_fraction(self.trim_fraction)?;
        if !self.lambda.is_finite() {
            return Err(TiesError::InvalidConfig(format!("lambda must be finite, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_fraction(k: f64) -> Result<(), TiesError> {
    if k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(TiesError::InvalidConfig(format!("trim fraction must be in (0, 1], got {k}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    fn agrees(self, value: f64) -> bool {
        match self {
            Sign::Positive => value > 0.0,
            Sign::Negative => value < 0.0,
        }
    }
}

/// Number of entries kept by [`trim`]: `ceil(k * len)`.
///
/// A small slack absorbs products like `0.2 * 15 = 3.0000000000000004`.
pub fn keep_count(k: f64, len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    let raw = k * len as f64;
    ((raw - 1e-9).ceil().max(1.0) as usize).min(len)
}

/// Keeps the `ceil(k * len)` largest-magnitude entries and zeroes the rest.
/// Equal magnitudes favor the lower index.
pub fn trim(values: &[f64], k: f64) -> Result<Vec<f64>, TiesError> {
    check_fraction(k)?;
    let keep = keep_count(k, values.len());
    if keep == values.len() {
        return Ok(values.to_vec());
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j)));
    let mut out = vec![0.0; values.len()];
    for &i in &order[..keep] {
        out[i] = values[i];
    }
    Ok(out)
}

/// Sign of the per-coordinate sum; a zero sum elects positive.
pub fn elect_sign(trimmed: &[Vec<f64>]) -> Result<Vec<Sign>, TiesError> {
    let len = common_len(trimmed)?;
    Ok((0..len)
        .map(|i| {
            let mut sum = 0.0;
            for v in trimmed {
                sum += v[i];
            }
            if sum < 0.0 {
                Sign::Negative
            } else {
                Sign::Positive
            }
        })
        .collect())
}

/// Mean of the nonzero values that agree with the elected sign, 0 where
/// none survive.
pub fn disjoint_merge(trimmed: &[Vec<f64>], signs: &[Sign]) -> Result<Vec<f64>, TiesError> {
    let len = common_len(trimmed)?;
    if signs.len() != len {
        return Err(TiesError::LengthMismatch { expected: len, actual: signs.len() });
    }
    Ok(signs
        .iter()
        .enumerate()
        .map(|(i, &sign)| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for v in trimmed {
                if sign.agrees(v[i]) {
                    sum += v[i];
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect())
}

fn common_len(vectors: &[Vec<f64>]) -> Result<usize, TiesError> {
    let len = vectors.first().map_or(0, Vec::len);
    match vectors.iter().find(|v| v.len() != len) {
        Some(v) => Err(TiesError::LengthMismatch { expected: len, actual: v.len() }),
        None => Ok(len),
    }
}

/// Trim, elect and merge the flattened tensors of one name, then scale.
pub fn ties_merge_flat(tensors: &[&[f64]], trim_fraction: f64, lambda: f64) -> Result<Vec<f64>, TiesError> {
    let trimmed = tensors
        .iter()
        .map(|t| trim(t, trim_fraction))
        .collect::<Result<Vec<_>, _>>()?;
    let signs = elect_sign(&trimmed)?;
    let mut merged = disjoint_merge(&trimmed, &signs)?;
    for v in &mut merged {
        *v *= lambda;
    }
    Ok(merged)
}

/// Names to merge under the configured key policy.
fn merge_keys(task_vectors: &[TaskVector], policy: KeyPolicy) -> Result<Vec<String>, TiesError> {
    let first: BTreeSet<&String> = task_vectors[0].deltas.keys().collect();
    match policy {
        KeyPolicy::UnionError => {
            for (i, tv) in task_vectors.iter().enumerate().skip(1) {
                let keys: BTreeSet<&String> = tv.deltas.keys().collect();
                if keys != first {
                    let missing: Vec<&str> = first.symmetric_difference(&keys).map(|s| s.as_str()).collect();
                    return Err(TiesError::KeyMismatch { task: i, names: missing.join(", ") });
                }
            }
            Ok(first.into_iter().cloned().collect())
        }
        KeyPolicy::Intersect => {
            let keys: Vec<String> = first
                .into_iter()
                .filter(|k| task_vectors.iter().all(|tv| tv.deltas.contains_key(*k)))
                .cloned()
                .collect();
            if keys.is_empty() {
                return Err(TiesError::EmptyIntersection);
            }
            Ok(keys)
        }
    }
}

pub fn ties_merge(task_vectors: &[TaskVector], cfg: &MergeConfig) -> Result<TaskVector, TiesError> {
    cfg.validate()?;
    if task_vectors.is_empty() {
        return Err(TiesError::NoTaskVectors);
    }
    let keys = merge_keys(task_vectors, cfg.key_policy)?;

    let merged: Vec<(String, DenseTensor)> = keys
        .into_par_iter()
        .map(|name| {
            let tensors: Vec<&DenseTensor> = task_vectors.iter().map(|tv| &tv.deltas[&name]).collect();
            let shape = tensors[0].shape().to_vec();
            for (task, t) in tensors.iter().enumerate() {
                if t.shape() != shape.as_slice() {
                    return Err(TiesError::ShapeMismatch {
                        name: name.clone(),
                        task,
                        expected: shape.clone(),
                        actual: t.shape().to_vec(),
                    });
                }
                if t.data().iter().any(|v| !v.is_finite()) {
                    return Err(TiesError::NonFinite { name: name.clone(), task });
                }
            }
            let flat: Vec<&[f64]> = tensors.iter().map(|t| t.data()).collect();
            let data = ties_merge_flat(&flat, cfg.trim_fraction, cfg.lambda)?;
            Ok((name, DenseTensor::new(shape, data)))
        })
        .collect::<Result<_, _>>()?;

    Ok(TaskVector { deltas: merged.into_iter().collect() })
}
