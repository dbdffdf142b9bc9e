//! Clinical metrics and the exact Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Midranks (1-based) of `values`, ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

/// Mann-Whitney AUROC with midrank tie correction.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auroc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let n1 = labels.iter().filter(|&&y| y == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Parameter("auroc needs both classes".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n0 * n1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub macro_f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

pub fn macro_f1_sens_spec(predictions: &[u8], labels: &[u8]) -> Result<ClassificationSummary> {
    if predictions.len() != labels.len() {
        return Err(Error::dim("macro_f1", format!("{} predictions, {} labels", predictions.len(), labels.len())));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    Ok(ClassificationSummary {
        macro_f1: 0.5 * (f1(tp, fp, fn_) + f1(tn, fn_, fp)),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences a − b.
    pub w_plus: f64,
    pub n_nonzero: usize,
    pub p_two_sided: f64,
    /// P(W+ ≥ observed): evidence that a exceeds b.
    pub p_greater: f64,
}

/// Exact signed-rank test by enumerating all sign assignments.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::dim("wilcoxon", format!("{} vs {} paired values", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n > 25 {
        return Err(Error::Parameter(format!("exact enumeration supports n <= 25, got {n}")));
    }
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            n_nonzero: 0,
            p_two_sided: 1.0,
            p_greater: 1.0,
        });
    }
    let ranks = midranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let observed: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    // ranks are multiples of 1/2, so doubling makes every sum an exact integer
    let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
    let obs2 = (2.0 * observed).round() as u64;
    let (mut upper, mut lower) = (0u64, 0u64);
    let total = 1u64 << n;
    for mask in 0..total {
        let s: u64 = (0..n).filter(|&k| mask >> k & 1 == 1).map(|k| doubled[k]).sum();
        if s >= obs2 {
            upper += 1;
        }
        if s <= obs2 {
            lower += 1;
        }
    }
    let p_upper = upper as f64 / total as f64;
    let p_lower = lower as f64 / total as f64;
    Ok(WilcoxonResult {
        w_plus: observed,
        n_nonzero: n,
        p_two_sided: (2.0 * p_upper.min(p_lower)).min(1.0),
        p_greater: p_upper,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
