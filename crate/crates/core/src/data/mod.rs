//! Patient tables, standardization, silo partitioning and label scarcity.

mod io;
mod split;
mod synth;

pub use io::{export_csv, load_dataset, parse_dataset, Schema};
pub use split::{dirichlet_partition, make_folds, mask_labels, FoldPlan, SiloPartition, DEFAULT_SEEDS};
pub use synth::{synth_gdm, OGTT_FEATURE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// A feature table with optional binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientDataset {
    pub features: DenseMatrix,
    pub labels: Vec<Option<u8>>,
    /// Marks features that clinical augmentation may perturb.
    pub continuous_mask: Vec<bool>,
    pub feature_names: Vec<String>,
    pub positive_rate: f64,
}

impl PatientDataset {
    pub fn new(
        features: DenseMatrix,
        labels: Vec<Option<u8>>,
        continuous_mask: Vec<bool>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::dim(
                "dataset",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        if continuous_mask.len() != features.cols() || feature_names.len() != features.cols() {
            return Err(Error::dim(
                "dataset",
                format!(
                    "{} features but mask {} / names {}",
                    features.cols(),
                    continuous_mask.len(),
                    feature_names.len()
                ),
            ));
        }
        let positive_rate = positive_rate(&labels);
        Ok(Self {
            features,
            labels,
            continuous_mask,
            feature_names,
            positive_rate,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    /// Label of `row`; panics on unlabeled rows, which the pipeline never asks for.
    pub fn label(&self, row: usize) -> u8 {
        self.labels[row].expect("row has a label")
    }

    pub fn class_rows(&self, class: u8) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| self.labels[i] == Some(class))
            .collect()
    }
}

fn positive_rate(labels: &[Option<u8>]) -> f64 {
    let known: Vec<u8> = labels.iter().flatten().copied().collect();
    if known.is_empty() {
        return 0.0;
    }
    known.iter().filter(|&&y| y == 1).count() as f64 / known.len() as f64
}

/// Per-column z-scoring fitted on a subset of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and std over `fit_indices`.
    pub fn fit(features: &DenseMatrix, fit_indices: &[usize]) -> Result<Self> {
        if fit_indices.is_empty() {
            return Err(Error::Parameter("standardize needs at least one fit row".into()));
        }
        let d = features.cols();
        let n = fit_indices.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in fit_indices {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in fit_indices {
            for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// Zero-variance columns map to 0.
    pub fn apply(&self, features: &DenseMatrix) -> DenseMatrix {
        let mut out = features.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = if *s > 1e-12 { (*v - m) / s } else { 0.0 };
            }
        }
        out
    }
}

/// Standardizes every row with statistics fitted on `fit_indices` only.
pub fn standardize(raw: &PatientDataset, fit_indices: &[usize]) -> Result<PatientDataset> {
    let scaler = Standardizer::fit(&raw.features, fit_indices)?;
    Ok(PatientDataset {
        features: scaler.apply(&raw.features),
        ..raw.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: &[Vec<f64>]) -> PatientDataset {
        let m = DenseMatrix::from_rows(rows).unwrap();
        let d = m.cols();
        PatientDataset::new(
            m,
            vec![Some(0); rows.len()],
            vec![true; d],
            (0..d).map(|j| format!("f{j}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_column_becomes_zero() {
        let raw = ds(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 4.0]]);
        let s = standardize(&raw, &[0, 1, 2]).unwrap();
        assert!((0..3).all(|i| s.features.get(i, 0) == 0.0));
    }

    #[test]
    fn two_point_column_maps_to_plus_minus_one() {
        let raw = ds(&[vec![0.0], vec![2.0]]);
        let s = standardize(&raw, &[0, 1]).unwrap();
        assert_eq!(s.features.as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn statistics_use_fit_rows_only_and_are_idempotent() {
        let raw = ds(&[vec![1.0, 5.0], vec![2.0, -1.0], vec![6.0, 0.5], vec![100.0, 100.0]]);
        let fit = [0, 1, 2];
        let s = standardize(&raw, &fit).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = fit.iter().map(|&i| s.features.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
        // the excluded outlier row is transformed but never fitted
        assert!(s.features.get(3, 0) > 3.0);
        let again = standardize(&s, &fit).unwrap();
        for (a, b) in again.features.as_slice().iter().zip(s.features.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_fit_set_is_rejected() {
        let raw = ds(&[vec![1.0]]);
        assert!(standardize(&raw, &[]).is_err());
    }
}
