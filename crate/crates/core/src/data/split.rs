use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::PatientDataset;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Fold seeds used throughout the evaluation protocol.
pub const DEFAULT_SEEDS: [u64; 5] = [42, 137, 255, 512, 1024];

/// One silo's rows, split into labeled, unlabeled and held-out test rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiloPartition {
    pub silo_id: usize,
    pub row_indices: Vec<usize>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

impl SiloPartition {
    pub fn training_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.labeled.iter().chain(&self.unlabeled).copied().collect();
        rows.sort_unstable();
        rows
    }

    /// Fraction of training rows that are unlabeled.
    pub fn scarcity(&self) -> f64 {
        let total = self.labeled.len() + self.unlabeled.len();
        if total == 0 {
            0.0
        } else {
            self.unlabeled.len() as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub seed: u64,
    pub partitions: Vec<SiloPartition>,
}

impl FoldPlan {
    pub fn training_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.partitions.iter().flat_map(|p| p.training_rows()).collect();
        rows.sort_unstable();
        rows
    }

    pub fn test_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.partitions.iter().flat_map(|p| p.test.iter().copied()).collect();
        rows.sort_unstable();
        rows
    }
}

fn sample_dirichlet(alpha: f64, k: usize, rng: &mut rng::StreamRng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Parameter(format!("dirichlet alpha {alpha}: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Integer counts summing to `n` by the largest-remainder method.
fn largest_remainder(props: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &s in order.iter().take(n.saturating_sub(assigned)) {
        counts[s] += 1;
    }
    counts
}

/// Splits rows across silos with per-class proportions drawn from Dir(α·1).
///
/// Every silo receives at least one row of each class: proportions are
/// redrawn up to 100 times, after which one row is moved from the largest
/// silo into each empty one.
pub fn dirichlet_partition(
    data: &PatientDataset,
    n_silos: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<SiloPartition>> {
    if n_silos < 2 {
        return Err(Error::Partition(format!("need at least 2 silos, got {n_silos}")));
    }
    let mut rng = rng::stream(seed, &[tag::PARTITION]);
    let mut silo_rows: Vec<Vec<usize>> = vec![Vec::new(); n_silos];
    for class in [0u8, 1u8] {
        let mut rows = data.class_rows(class);
        if rows.len() < n_silos {
            return Err(Error::Partition(format!(
                "class {class} has {} rows for {n_silos} silos",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        let mut counts = Vec::new();
        for _ in 0..100 {
            let props = sample_dirichlet(alpha, n_silos, &mut rng)?;
            counts = largest_remainder(&props, rows.len());
            if counts.iter().all(|&c| c >= 1) {
                break;
            }
        }
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let largest = (0..n_silos).max_by_key(|&s| (counts[s], usize::MAX - s)).unwrap();
            counts[largest] -= 1;
            counts[empty] += 1;
        }
        let mut start = 0;
        for (s, &c) in counts.iter().enumerate() {
            silo_rows[s].extend_from_slice(&rows[start..start + c]);
            start += c;
        }
    }
    Ok(silo_rows
        .into_iter()
        .enumerate()
        .map(|(silo_id, mut rows)| {
            rows.sort_unstable();
            SiloPartition {
                silo_id,
                labeled: rows.clone(),
                row_indices: rows,
                unlabeled: Vec::new(),
                test: Vec::new(),
            }
        })
        .collect())
}

/// Stratified k-fold split inside every silo; fold `f` holds out part `f`.
///
/// The returned partitions have all training rows labeled; apply
/// [`mask_labels`] afterwards to simulate scarcity.
pub fn make_folds(
    data: &PatientDataset,
    silos: &[SiloPartition],
    n_folds: usize,
    seeds: &[u64],
) -> Result<Vec<FoldPlan>> {
    if n_folds < 2 {
        return Err(Error::Parameter(format!("need at least 2 folds, got {n_folds}")));
    }
    if seeds.len() < n_folds {
        return Err(Error::Parameter(format!("{} seeds for {n_folds} folds", seeds.len())));
    }
    // assignment[s][k] = fold of row silos[s].row_indices[k]
    let mut assignments: Vec<Vec<(usize, usize)>> = Vec::with_capacity(silos.len());
    for silo in silos {
        let mut rng = rng::stream(seeds[0], &[tag::FOLDS, silo.silo_id as u64]);
        let mut assigned = Vec::with_capacity(silo.row_indices.len());
        let mut next = 0usize;
        for class in [0u8, 1u8] {
            let mut rows: Vec<usize> = silo
                .row_indices
                .iter()
                .copied()
                .filter(|&r| data.labels[r] == Some(class))
                .collect();
            rows.shuffle(&mut rng);
            for r in rows {
                assigned.push((r, next % n_folds));
                next += 1;
            }
        }
        assignments.push(assigned);
    }

    Ok((0..n_folds)
        .map(|f| {
            let partitions = silos
                .iter()
                .zip(&assignments)
                .map(|(silo, assigned)| {
                    let mut test: Vec<usize> = assigned.iter().filter(|a| a.1 == f).map(|a| a.0).collect();
                    let mut train: Vec<usize> = assigned.iter().filter(|a| a.1 != f).map(|a| a.0).collect();
                    test.sort_unstable();
                    train.sort_unstable();
                    SiloPartition {
                        silo_id: silo.silo_id,
                        row_indices: silo.row_indices.clone(),
                        labeled: train,
                        unlabeled: Vec::new(),
                        test,
                    }
                })
                .collect();
            FoldPlan {
                fold_index: f,
                seed: seeds[f],
                partitions,
            }
        })
        .collect())
}

/// Withholds `round(ρ·count)` labels per class among the training rows.
pub fn mask_labels(
    data: &PatientDataset,
    partition: &SiloPartition,
    rho: f64,
    seed: u64,
) -> Result<SiloPartition> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Parameter(format!("scarcity ratio {rho} outside [0, 1)")));
    }
    let mut rng = rng::stream(seed, &[tag::MASK, partition.silo_id as u64]);
    let training = partition.training_rows();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for class in [0u8, 1u8] {
        let mut rows: Vec<usize> = training
            .iter()
            .copied()
            .filter(|&r| data.labels[r] == Some(class))
            .collect();
        rows.shuffle(&mut rng);
        let hidden = (rho * rows.len() as f64).round() as usize;
        if hidden >= rows.len() {
            return Err(Error::Scarcity(format!(
                "silo {} keeps no labeled rows of class {class} at rho={rho} ({} rows)",
                partition.silo_id,
                rows.len()
            )));
        }
        unlabeled.extend_from_slice(&rows[..hidden]);
        labeled.extend_from_slice(&rows[hidden..]);
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(SiloPartition {
        silo_id: partition.silo_id,
        row_indices: partition.row_indices.clone(),
        labeled,
        unlabeled,
        test: partition.test.clone(),
    })
}
