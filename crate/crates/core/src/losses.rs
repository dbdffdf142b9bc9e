//! Local training objective: supervised focal loss, weighted pseudo-label
//! loss, graph smoothness, supervised contrastive loss, augmentation
//! consistency and the proximal penalty.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, PROB_EPS};
use crate::error::{Error, Result};
use crate::graph::PatientGraph;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eta: f64,
    pub mu: f64,
    pub beta: f64,
    pub gamma_aug: f64,
    pub mu_prox: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub contrast_tau: f64,
    pub noise_sigma: f64,
    pub pl_reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta: 0.8,
            mu: 0.05,
            beta: 0.1,
            gamma_aug: 0.3,
            mu_prox: 0.01,
            focal_alpha: 0.75,
            focal_gamma: 2.0,
            contrast_tau: 0.5,
            noise_sigma: 0.05,
            pl_reduction: Reduction::Sum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("eta", self.eta),
            ("mu", self.mu),
            ("beta", self.beta),
            ("gamma_aug", self.gamma_aug),
            ("mu_prox", self.mu_prox),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("loss weight {name}={v} must be non-negative")));
            }
        }
        if !(self.contrast_tau > 0.0) {
            return Err(Error::Parameter(format!("contrastive temperature {} must be positive", self.contrast_tau)));
        }
        Ok(())
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(DenseMatrix::scalar(0.0))
}

/// Per-node focal terms −α_f (1−p̂)^γ log p̂ as an m×1 column.
fn focal_terms(tape: &mut Tape, probs: Var, indices: &[usize], classes: &[u8], alpha: f64, gamma: f64) -> Result<Var> {
    let c = tape.shape(probs).1;
    let rows = tape.gather_rows(probs, Rc::from(indices))?;
    let mut onehot = DenseMatrix::zeros(indices.len(), c);
    for (k, &y) in classes.iter().enumerate() {
        onehot.set(k, y as usize, 1.0);
    }
    let onehot = tape.constant(onehot);
    let picked = tape.mul(rows, onehot)?;
    let p_true = tape.sum_cols(picked);
    let p_true = tape.clamp(p_true, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.log(p_true)?;
    let term = if gamma == 0.0 {
        log_p
    } else {
        let miss = tape.scale(p_true, -1.0);
        let miss = tape.add_scalar(miss, 1.0);
        let modulator = tape.powf(miss, gamma)?;
        tape.mul(modulator, log_p)?
    };
    Ok(tape.scale(term, -alpha))
}

/// Mean focal loss over labeled `indices`; 0 for an empty set.
pub fn focal_loss(tape: &mut Tape, probs: Var, labels: &[u8], indices: &[usize], alpha: f64, gamma: f64) -> Result<Var> {
    if indices.is_empty() {
        log::debug!("focal loss over an empty labeled set");
        return Ok(zero(tape));
    }
    let classes: Vec<u8> = indices.iter().map(|&i| labels[i]).collect();
    let terms = focal_terms(tape, probs, indices, &classes, alpha, gamma)?;
    Ok(tape.mean(terms))
}

/// One accepted pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub node: usize,
    pub label: u8,
    pub weight: f64,
}

/// Σ w_i·focal_i over pseudo-labeled nodes (or the weighted mean).
pub fn pseudo_label_loss(
    tape: &mut Tape,
    probs: Var,
    entries: &[PseudoLabel],
    alpha: f64,
    gamma: f64,
    reduction: Reduction,
) -> Result<Var> {
    if entries.is_empty() {
        return Ok(zero(tape));
    }
    let nodes: Vec<usize> = entries.iter().map(|e| e.node).collect();
    let classes: Vec<u8> = entries.iter().map(|e| e.label).collect();
    let terms = focal_terms(tape, probs, &nodes, &classes, alpha, gamma)?;
    let w = tape.constant(DenseMatrix::column(entries.iter().map(|e| e.weight).collect()));
    let weighted = tape.mul(terms, w)?;
    let total = tape.sum(weighted);
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.scale(total, 1.0 / entries.len() as f64),
    })
}

/// Mean ‖h_i − h_j‖² over edges whose endpoints share a predicted class.
pub fn smoothness_loss(tape: &mut Tape, embeddings: Var, graph: &PatientGraph, predicted: &[u8]) -> Result<Var> {
    let (a, b): (Vec<usize>, Vec<usize>) = graph
        .edges()
        .iter()
        .filter(|&&(i, j)| predicted[i] == predicted[j])
        .copied()
        .unzip();
    if a.is_empty() {
        return Ok(zero(tape));
    }
    let hi = tape.gather_rows(embeddings, a.into())?;
    let hj = tape.gather_rows(embeddings, b.into())?;
    let diff = tape.sub(hi, hj)?;
    let sq = tape.mul(diff, diff)?;
    let per_edge = tape.sum_cols(sq);
    Ok(tape.mean(per_edge))
}

/// Supervised contrastive loss over labeled nodes.
///
/// Row-wise log-sum-exp shifts are constants, so values and gradients are
/// exact while large similarities cannot overflow.
pub fn contrastive_loss(tape: &mut Tape, embeddings: Var, labels: &[u8], labeled: &[usize], tau: f64) -> Result<Var> {
    let m = labeled.len();
    if m < 2 {
        log::debug!("contrastive loss needs two labeled nodes, got {m}");
        return Ok(zero(tape));
    }
    let classes: Vec<u8> = labeled.iter().map(|&i| labels[i]).collect();
    let anchors: Vec<usize> = (0..m)
        .filter(|&a| (0..m).any(|b| b != a && classes[b] == classes[a]))
        .collect();
    if anchors.is_empty() {
        return Ok(zero(tape));
    }
    let h = tape.gather_rows(embeddings, Rc::from(labeled))?;
    let ht = tape.transpose(h);
    let sim = tape.matmul(h, ht)?;
    let sim = tape.scale(sim, 1.0 / tau);

    let mut pos = DenseMatrix::zeros(m, m);
    let mut all = DenseMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            if a != b {
                all.set(a, b, 1.0);
                if classes[a] == classes[b] {
                    pos.set(a, b, 1.0);
                }
            }
        }
    }
    let log_num = masked_logsumexp(tape, sim, &pos)?;
    let log_den = masked_logsumexp(tape, sim, &all)?;
    let ratio = tape.sub(log_num, log_den)?;
    let ratio = tape.gather_rows(ratio, anchors.into())?;
    let mean = tape.mean(ratio);
    Ok(tape.scale(mean, -1.0))
}

/// log Σ_j mask_ij exp(s_ij) per row (m×1); rows with an empty mask give 0.
fn masked_logsumexp(tape: &mut Tape, s: Var, mask: &DenseMatrix) -> Result<Var> {
    let (m, _) = mask.shape();
    let sv = tape.value(s);
    let shift: Vec<f64> = (0..m)
        .map(|a| {
            let best = sv
                .row(a)
                .iter()
                .zip(mask.row(a))
                .filter(|(_, &k)| k > 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if best.is_finite() {
                best
            } else {
                0.0
            }
        })
        .collect();
    let mut shift_mat = DenseMatrix::zeros(m, m);
    for a in 0..m {
        shift_mat.row_mut(a).iter_mut().for_each(|v| *v = shift[a]);
    }
    let shift_mat = tape.constant(shift_mat);
    let centered = tape.sub(s, shift_mat)?;
    // zero masked entries before exp so an excluded large similarity cannot overflow
    let mask_v = tape.constant(mask.clone());
    let centered = tape.mul(centered, mask_v)?;
    let e = tape.exp(centered);
    let e = tape.mul(e, mask_v)?;
    let sums = tape.sum_cols(e);
    // rows without any entry are filtered out by the caller; keep log finite
    let empty = tape.constant(DenseMatrix::column(
        (0..m).map(|a| if mask.row(a).iter().any(|&k| k > 0.0) { 0.0 } else { 1.0 }).collect(),
    ));
    let sums = tape.add(sums, empty)?;
    let logs = tape.log(sums)?;
    let shift_col = tape.constant(DenseMatrix::column(shift));
    tape.add(logs, shift_col)
}

/// Mean KL(p ‖ q) over `rows`, both distributions clamped to [ε, 1−ε].
pub fn kl_consistency(tape: &mut Tape, clean: Var, perturbed: Var, rows: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return Ok(zero(tape));
    }
    let idx: Rc<[usize]> = Rc::from(rows);
    let p = tape.gather_rows(clean, idx.clone())?;
    let q = tape.gather_rows(perturbed, idx)?;
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let q = tape.clamp(q, PROB_EPS, 1.0 - PROB_EPS);
    let lp = tape.log(p)?;
    let lq = tape.log(q)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let per_row = tape.sum_cols(terms);
    let total = tape.sum(per_row);
    Ok(tape.scale(total, 1.0 / rows.len() as f64))
}

/// (μ_p/2)·Σ‖w − w_g‖² over trainable tensors.
pub fn proximal_term(tape: &mut Tape, local: &[Var], global: &[&DenseMatrix], mu_p: f64) -> Result<Var> {
    if local.len() != global.len() {
        return Err(Error::Contract(format!(
            "proximal term over {} local and {} global tensors",
            local.len(),
            global.len()
        )));
    }
    let mut acc = zero(tape);
    for (&w, g) in local.iter().zip(global) {
        if tape.shape(w) != g.shape() {
            return Err(Error::Contract(format!(
                "proximal term shape {:?} vs {:?}",
                tape.shape(w),
                g.shape()
            )));
        }
        let g = tape.constant((*g).clone());
        let d = tape.sub(w, g)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq);
        acc = tape.add(acc, s)?;
    }
    Ok(tape.scale(acc, mu_p / 2.0))
}

/// Unweighted component handles; absent terms are simply not built.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub supervised: Option<Var>,
    pub pseudo: Option<Var>,
    pub smooth: Option<Var>,
    pub contrast: Option<Var>,
    pub augment: Option<Var>,
    /// Already multiplied by μ_p.
    pub proximal: Option<Var>,
}

/// Component values after the forward pass, reported as telemetry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub supervised: f64,
    pub pseudo: f64,
    pub smooth: f64,
    pub contrast: f64,
    pub augment: f64,
    pub proximal: f64,
}

/// L_sup + η·L_pl + μ·L_smooth + β·L_contra + γ_aug·L_aug + L_prox.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let mut acc = zero(tape);
    let mut report = LossBreakdown::default();
    let parts = [
        (terms.supervised, 1.0, &mut report.supervised),
        (terms.pseudo, w.eta, &mut report.pseudo),
        (terms.smooth, w.mu, &mut report.smooth),
        (terms.contrast, w.beta, &mut report.contrast),
        (terms.augment, w.gamma_aug, &mut report.augment),
        (terms.proximal, 1.0, &mut report.proximal),
    ];
    for (term, weight, slot) in parts {
        if let Some(v) = term {
            *slot = tape.value(v).item();
            if weight != 0.0 {
                let scaled = tape.scale(v, weight);
                acc = tape.add(acc, scaled)?;
            }
        }
    }
    report.total = tape.value(acc).item();
    Ok((acc, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[[f64; 2]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn focal_examples() {
        let mut t = Tape::new();
        let p = t.constant(probs(&[[0.5, 0.5], [0.0, 1.0]]));
        let l = focal_loss(&mut t, p, &[0, 1], &[0], 0.75, 2.0).unwrap();
        assert!((t.value(l).item() - 0.75 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((t.value(l).item() - 0.12996).abs() < 1e-5);
        let l = focal_loss(&mut t, p, &[0, 1], &[1], 0.75, 2.0).unwrap();
        assert!(t.value(l).item() < 1e-12);
        let l = focal_loss(&mut t, p, &[0, 1], &[], 0.75, 2.0).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn focal_degenerates_to_cross_entropy() {
        let mut t = Tape::new();
        let p = t.constant(probs(&[[0.3, 0.7], [0.9, 0.1]]));
        let l = focal_loss(&mut t, p, &[1, 0], &[0, 1], 1.0, 0.0).unwrap();
        let ce = -(0.7f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((t.value(l).item() - ce).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_examples() {
        let mut t = Tape::new();
        let p = t.constant(probs(&[[0.5, 0.5], [0.2, 0.8]]));
        let e = |w| vec![PseudoLabel { node: 0, label: 1, weight: w }, PseudoLabel { node: 1, label: 1, weight: w }];
        let empty = pseudo_label_loss(&mut t, p, &[], 0.75, 2.0, Reduction::Sum).unwrap();
        assert_eq!(t.value(empty).item(), 0.0);
        let one = pseudo_label_loss(&mut t, p, &e(1.0)[..1], 0.75, 2.0, Reduction::Sum).unwrap();
        assert!((t.value(one).item() - 0.12996).abs() < 1e-5);
        let a = pseudo_label_loss(&mut t, p, &e(0.4), 0.75, 2.0, Reduction::Sum).unwrap();
        let b = pseudo_label_loss(&mut t, p, &e(0.8), 0.75, 2.0, Reduction::Sum).unwrap();
        assert!((2.0 * t.value(a).item() - t.value(b).item()).abs() < 1e-12);
        let m = pseudo_label_loss(&mut t, p, &e(0.8), 0.75, 2.0, Reduction::Mean).unwrap();
        assert!((2.0 * t.value(m).item() - t.value(b).item()).abs() < 1e-12);
    }

    #[test]
    fn smoothness_examples() {
        let g = PatientGraph::from_edges(2, &[(0, 1)], &[1.0], 1.0).unwrap();
        let mut t = Tape::new();
        let h = t.constant(DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap());
        let s = smoothness_loss(&mut t, h, &g, &[1, 1]).unwrap();
        assert_eq!(t.value(s).item(), 2.0);
        let s = smoothness_loss(&mut t, h, &g, &[0, 1]).unwrap();
        assert_eq!(t.value(s).item(), 0.0);
        let same = t.constant(DenseMatrix::filled(2, 2, 3.0));
        let s = smoothness_loss(&mut t, same, &g, &[1, 1]).unwrap();
        assert_eq!(t.value(s).item(), 0.0);
    }

    #[test]
    fn contrastive_examples() {
        let mut t = Tape::new();
        let h = t.constant(DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let same = contrastive_loss(&mut t, h, &[1, 1, 1], &[0, 1, 2], 0.5).unwrap();
        assert!(t.value(same).item().abs() < 1e-12);
        let pair = contrastive_loss(&mut t, h, &[0, 1, 0], &[0, 1], 0.5).unwrap();
        assert_eq!(t.value(pair).item(), 0.0);
        // nodes 0,1 positive at identical h, node 2 orthogonal negative:
        // each anchor: exp(1/0.5) / (exp(1/0.5) + exp(0)) ; node 2 skipped
        let v = contrastive_loss(&mut t, h, &[1, 1, 0], &[0, 1, 2], 0.5).unwrap();
        let e2 = 2f64.exp();
        assert!((t.value(v).item() + (e2 / (e2 + 1.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_survives_huge_similarities() {
        let mut t = Tape::new();
        let h = t.parameter(DenseMatrix::from_rows(&[vec![40.0, 0.0], vec![39.0, 1.0], vec![-40.0, 2.0]]).unwrap());
        let v = contrastive_loss(&mut t, h, &[1, 1, 0], &[0, 1, 2], 0.5).unwrap();
        assert!(t.value(v).item().is_finite());
        let g = t.backward(v).unwrap();
        assert!(g.wrt(&t, h).is_finite());
    }

    #[test]
    fn kl_examples() {
        let mut t = Tape::new();
        let p = t.constant(probs(&[[0.3, 0.7], [0.5, 0.5]]));
        let q = t.constant(probs(&[[0.6, 0.4], [0.5, 0.5]]));
        let zero_kl = kl_consistency(&mut t, p, p, &[0, 1]).unwrap();
        assert_eq!(t.value(zero_kl).item(), 0.0);
        let kl = kl_consistency(&mut t, p, q, &[0]).unwrap();
        let expected = 0.3 * (0.3f64 / 0.6).ln() + 0.7 * (0.7f64 / 0.4).ln();
        assert!((t.value(kl).item() - expected).abs() < 1e-12);
        assert!(t.value(kl).item() > 0.0);
    }

    #[test]
    fn proximal_examples() {
        let mut t = Tape::new();
        let w = t.parameter(DenseMatrix::scalar(3.0));
        let g = DenseMatrix::scalar(1.0);
        let p = proximal_term(&mut t, &[w], &[&g], 0.01).unwrap();
        assert!((t.value(p).item() - 0.02).abs() < 1e-15);
        let p0 = proximal_term(&mut t, &[w], &[&g], 0.0).unwrap();
        assert_eq!(t.value(p0).item(), 0.0);
        let same = DenseMatrix::scalar(3.0);
        let p1 = proximal_term(&mut t, &[w], &[&same], 0.01).unwrap();
        assert_eq!(t.value(p1).item(), 0.0);
        let wrong = DenseMatrix::zeros(1, 2);
        assert!(matches!(proximal_term(&mut t, &[w], &[&wrong], 0.01), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_weight_cuts_gradient() {
        let mut t = Tape::new();
        let a = t.parameter(DenseMatrix::scalar(2.0));
        let b = t.parameter(DenseMatrix::scalar(5.0));
        let sa = t.mul(a, a).unwrap();
        let sb = t.mul(b, b).unwrap();
        let w = LossWeights { beta: 0.0, ..LossWeights::default() };
        let terms = LossTerms { supervised: Some(sa), contrast: Some(sb), ..LossTerms::default() };
        let (total, report) = total_loss(&mut t, &terms, &w).unwrap();
        assert_eq!(report.contrast, 25.0);
        assert_eq!(report.total, 4.0);
        let g = t.backward(total).unwrap();
        assert_eq!(g.wrt(&t, b).item(), 0.0);
        assert_eq!(g.wrt(&t, a).item(), 4.0);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights { mu: -0.1, ..LossWeights::default() };
        assert!(w.validate().is_err());
    }
}
