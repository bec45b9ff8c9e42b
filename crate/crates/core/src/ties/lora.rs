//! LoRA factor pairs and their dense deltas.
//!
//! Adapters store `<target>.lora_A.weight` (r x d_in) and
//! `<target>.lora_B.weight` (d_out x r); the modified base tensor is
//! `<target>.weight` and its delta is `(alpha / r) * B * A`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::archive::TensorArchive;
use super::merge::DenseTensor;
use super::TiesError;

pub const LORA_A_SUFFIX: &str = ".lora_A.weight";
pub const LORA_B_SUFFIX: &str = ".lora_B.weight";
pub const ALPHA_KEY: &str = "lora_alpha";
pub const RANK_KEY: &str = "r";

/// Row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TiesError> {
        if rows * cols != data.len() {
            return Err(TiesError::Lora(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// Base tensor the adapter modifies.
    pub target_name: String,
    /// r x d_in
    pub a: Matrix,
    /// d_out x r
    pub b: Matrix,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraPair {
    pub fn validate(&self) -> Result<(), TiesError> {
        let name = &self.target_name;
        if self.rank < 1 {
            return Err(TiesError::Lora(format!("{name}: rank must be >= 1")));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(TiesError::Lora(format!("{name}: alpha must be positive, got {}", self.alpha)));
        }
        if self.a.rows != self.rank || self.b.cols != self.rank {
            return Err(TiesError::Lora(format!(
                "{name}: rank {} disagrees with A {}x{} / B {}x{}",
                self.rank, self.a.rows, self.a.cols, self.b.rows, self.b.cols
            )));
        }
        Ok(())
    }
}

/// Dense delta `(alpha / r) * B * A`, shape d_out x d_in.
pub fn materialize(pair: &LoraPair) -> Result<DenseTensor, TiesError> {
    pair.validate()?;
    let (d_out, r, d_in) = (pair.b.rows, pair.rank, pair.a.cols);
    let scale = pair.alpha / r as f64;
    let mut out = vec![0.0; d_out * d_in];
    out.par_chunks_mut(d_in.max(1)).enumerate().for_each(|(i, row)| {
        for k in 0..r {
            let b_ik = pair.b.data[i * r + k];
            if b_ik == 0.0 {
                continue;
            }
            let a_row = &pair.a.data[k * d_in..(k + 1) * d_in];
            for (o, &a) in row.iter_mut().zip(a_row) {
                *o += b_ik * a;
            }
        }
        for o in row.iter_mut() {
            *o *= scale;
        }
    });
    Ok(DenseTensor::new(vec![d_out, d_in], out))
}

/// Values that take precedence over archive metadata.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LoraOverrides {
    pub alpha: Option<f64>,
    pub rank: Option<usize>,
}

/// Adapter contents split into LoRA pairs and any other (dense) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParts {
    pub pairs: Vec<LoraPair>,
    pub dense: BTreeMap<String, DenseTensor>,
}

fn metadata_number<T: std::str::FromStr>(archive: &TensorArchive, key: &str) -> Result<Option<T>, TiesError> {
    archive
        .metadata
        .get(key)
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| TiesError::Lora(format!("metadata `{key}` = `{v}` is not a number")))
        })
        .transpose()
}

pub fn target_of(factor_name: &str) -> Option<(&str, bool)> {
    factor_name
        .strip_suffix(LORA_A_SUFFIX)
        .map(|t| (t, true))
        .or_else(|| factor_name.strip_suffix(LORA_B_SUFFIX).map(|t| (t, false)))
}

/// Alpha and rank for an archive, honoring overrides.
pub fn lora_hyperparams(archive: &TensorArchive, overrides: LoraOverrides) -> Result<(Option<f64>, Option<usize>), TiesError> {
    let alpha = match overrides.alpha {
        Some(a) => Some(a),
        None => metadata_number::<f64>(archive, ALPHA_KEY)?,
    };
    let rank = match overrides.rank {
        Some(r) => Some(r),
        None => metadata_number::<usize>(archive, RANK_KEY)?,
    };
    Ok((alpha, rank))
}

pub fn split_adapter(archive: &TensorArchive, overrides: LoraOverrides) -> Result<AdapterParts, TiesError> {
    let (alpha, rank) = lora_hyperparams(archive, overrides)?;
    let mut factors: BTreeMap<&str, (Option<&super::archive::Tensor>, Option<&super::archive::Tensor>)> = BTreeMap::new();
    let mut dense = BTreeMap::new();
    for (name, tensor) in &archive.tensors {
        match target_of(name) {
            Some((target, is_a)) => {
                let slot = factors.entry(target).or_default();
                if is_a {
                    slot.0 = Some(tensor);
                } else {
                    slot.1 = Some(tensor);
                }
            }
            None => {
                dense.insert(name.clone(), DenseTensor::from_f32(tensor.shape().to_vec(), tensor.data()));
            }
        }
    }

    let mut pairs = Vec::with_capacity(factors.len());
    for (target, slot) in factors {
        let (a, b) = match slot {
            (Some(a), Some(b)) => (a, b),
            (Some(_), None) => return Err(TiesError::Lora(format!("{target}: lora_A without lora_B"))),
            (None, Some(_)) => return Err(TiesError::Lora(format!("{target}: lora_B without lora_A"))),
            (None, None) => unreachable!(),
        };
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(TiesError::Lora(format!("{target}: LoRA factors must be 2-D")));
        }
        let a = Matrix::new(a.shape()[0], a.shape()[1], a.data().iter().map(|&v| v as f64).collect())?;
        let b = Matrix::new(b.shape()[0], b.shape()[1], b.data().iter().map(|&v| v as f64).collect())?;
        let pair_rank = rank.unwrap_or(a.rows);
        let pair_alpha = alpha.ok_or_else(|| {
            TiesError::Lora(format!("{target}: no `{ALPHA_KEY}` in metadata and no override given"))
        })?;
        let pair = LoraPair {
            target_name: format!("{target}.weight"),
            a,
            b,
            alpha: pair_alpha,
            rank: pair_rank,
        };
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(AdapterParts { pairs, dense })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ties::archive::Tensor;

    #[test]
    fn all_ones_factors() {
        let pair = LoraPair {
            target_name: "w".into(),
            a: Matrix::filled(2, 3, 1.0),
            b: Matrix::filled(4, 2, 1.0),
            alpha: 2.0,
            rank: 2,
        };
        let d = materialize(&pair).unwrap();
        assert_eq!(d.shape(), &[4, 3]);
        assert!(d.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let pair = LoraPair {
            target_name: "w".into(),
            a: Matrix::filled(2, 3, 0.7),
            b: Matrix::filled(4, 2, 0.0),
            alpha: 8.0,
            rank: 2,
        };
        assert!(materialize(&pair).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_one_outer_product() {
        let pair = LoraPair {
            target_name: "w".into(),
            a: Matrix::new(1, 2, vec![1.0, 0.0]).unwrap(),
            b: Matrix::new(2, 1, vec![3.0, 0.0]).unwrap(),
            alpha: 1.0,
            rank: 1,
        };
        assert_eq!(materialize(&pair).unwrap().data(), &[3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn inconsistent_rank_rejected() {
        let pair = LoraPair {
            target_name: "w".into(),
            a: Matrix::filled(2, 3, 1.0),
            b: Matrix::filled(4, 3, 1.0),
            alpha: 1.0,
            rank: 2,
        };
        assert!(materialize(&pair).is_err());
    }

    fn adapter(meta: &[(&str, &str)]) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert("q.lora_A.weight", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        a.insert("q.lora_B.weight", Tensor::new(vec![3, 1], vec![1.0, 0.0, -1.0]).unwrap());
        a.insert("head.bias", Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        for (k, v) in meta {
            a.metadata.insert(k.to_string(), v.to_string());
        }
        a
    }

    #[test]
    fn split_reads_metadata_and_overrides() {
        let parts = split_adapter(&adapter(&[("lora_alpha", "4"), ("r", "1")]), LoraOverrides::default()).unwrap();
        assert_eq!(parts.pairs.len(), 1);
        assert_eq!(parts.pairs[0].target_name, "q.weight");
        assert_eq!(parts.pairs[0].alpha, 4.0);
        assert!(parts.dense.contains_key("head.bias"));

        let parts = split_adapter(
            &adapter(&[("lora_alpha", "4")]),
            LoraOverrides { alpha: Some(2.0), rank: None },
        )
        .unwrap();
        assert_eq!(parts.pairs[0].alpha, 2.0);
        assert_eq!(parts.pairs[0].rank, 1);
    }

    #[test]
    fn split_errors() {
        assert!(split_adapter(&adapter(&[]), LoraOverrides::default()).is_err());
        assert!(split_adapter(&adapter(&[("lora_alpha", "x")]), LoraOverrides::default()).is_err());
        assert!(split_adapter(&adapter(&[("lora_alpha", "1"), ("r", "3")]), LoraOverrides::default()).is_err());
        let mut lone = adapter(&[("lora_alpha", "1")]);
        lone.tensors.remove("q.lora_B.weight");
        assert!(split_adapter(&lone, LoraOverrides::default()).is_err());
    }
}
