//! Class prototypes, the triple-gate pseudo-labeler and clinical augmentation.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PatientGraph;
use crate::losses::PseudoLabel;
use crate::rng::StreamRng;
use crate::tensor::{euclidean, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub tau0: f64,
    pub lambda: f64,
    pub tau_min: f64,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self {
            tau0: 0.90,
            lambda: 0.03,
            tau_min: 0.70,
        }
    }
}

impl ThresholdSchedule {
    /// τ_t = max(τ_0·e^{−λt}, τ_min).
    pub fn threshold_at(&self, t: u32) -> f64 {
        (self.tau0 * (-self.lambda * f64::from(t)).exp()).max(self.tau_min)
    }
}

pub fn threshold_at(t: u32) -> f64 {
    ThresholdSchedule::default().threshold_at(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Local,
    Global,
    Blended,
}

/// Per-class centroid (absent when no labeled node supports it) and count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub centroids: [Option<Vec<f64>>; 2],
    pub counts: [u64; 2],
    pub provenance: Provenance,
}

impl PrototypeSet {
    pub fn absent(provenance: Provenance) -> Self {
        Self {
            centroids: [None, None],
            counts: [0, 0],
            provenance,
        }
    }

    pub fn centroid(&self, class: u8) -> Option<&[f64]> {
        self.centroids[class as usize].as_deref()
    }
}

/// Exact per-class means of labeled embeddings.
pub fn compute_prototypes(embeddings: &DenseMatrix, labels: &[Option<u8>], labeled: &[usize]) -> PrototypeSet {
    let h = embeddings.cols();
    let mut sums = [vec![0.0; h], vec![0.0; h]];
    let mut counts = [0u64; 2];
    for &i in labeled {
        if let Some(y) = labels[i] {
            counts[y as usize] += 1;
            for (s, v) in sums[y as usize].iter_mut().zip(embeddings.row(i)) {
                *s += v;
            }
        }
    }
    let centroids = [0, 1].map(|c| {
        (counts[c] > 0).then(|| sums[c].iter().map(|s| s / counts[c] as f64).collect())
    });
    PrototypeSet {
        centroids,
        counts,
        provenance: Provenance::Local,
    }
}

/// blend·global + (1−blend)·local per class; a missing side yields the other.
pub fn blend_prototypes(local: &PrototypeSet, global: &PrototypeSet, blend: f64) -> Result<PrototypeSet> {
    let mut centroids: [Option<Vec<f64>>; 2] = [None, None];
    for c in 0..2 {
        centroids[c] = match (&local.centroids[c], &global.centroids[c]) {
            (Some(l), Some(g)) => {
                if l.len() != g.len() {
                    return Err(Error::dim("blend_prototypes", format!("{} vs {}", l.len(), g.len())));
                }
                Some(l.iter().zip(g).map(|(l, g)| blend * g + (1.0 - blend) * l).collect())
            }
            (Some(l), None) => Some(l.clone()),
            (None, Some(g)) => Some(g.clone()),
            (None, None) => None,
        };
    }
    Ok(PrototypeSet {
        centroids,
        counts: local.counts,
        provenance: Provenance::Blended,
    })
}

/// w = p_max·(1 − d_same/(d_same + d_other)); p_max/2 when both distances vanish.
pub fn confidence_weight(p_max: f64, d_same: f64, d_other: f64) -> f64 {
    let total = d_same + d_other;
    if total == 0.0 {
        p_max * 0.5
    } else if total.is_infinite() {
        // no opposing prototype
        p_max
    } else {
        p_max * (1.0 - d_same / total)
    }
}

/// Which gates are active; the confidence gate always is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    pub prototype: bool,
    pub neighborhood: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            prototype: true,
            neighborhood: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateStats {
    pub candidates: usize,
    pub passed_confidence: usize,
    pub passed_prototype: usize,
    pub passed_neighborhood: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabel>,
    pub round: u32,
    pub stats: GateStats,
}

impl PseudoLabelSet {
    pub fn mean_weight(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.entries.iter().map(|e| e.weight).sum::<f64>() / self.entries.len() as f64
        }
    }
}

fn argmax2(row: &[f64]) -> u8 {
    u8::from(row[1] > row[0])
}

/// Accepts unlabeled nodes that pass the confidence, prototype and
/// neighborhood-consensus gates.
///
/// `known` carries true labels for labeled nodes; their classes replace the
/// model's predictions when voting in the neighborhood gate.
#[allow(clippy::too_many_arguments)]
pub fn triple_gate(
    probabilities: &DenseMatrix,
    embeddings: &DenseMatrix,
    graph: &PatientGraph,
    prototypes: &PrototypeSet,
    tau: f64,
    unlabeled: &[usize],
    known: &[Option<u8>],
    gates: GateConfig,
) -> PseudoLabelSet {
    let n = probabilities.rows();
    let votes: Vec<u8> = (0..n)
        .map(|j| known.get(j).copied().flatten().unwrap_or_else(|| argmax2(probabilities.row(j))))
        .collect();
    let mut stats = GateStats {
        candidates: unlabeled.len(),
        ..GateStats::default()
    };
    let mut entries = Vec::new();
    for &i in unlabeled {
        let row = probabilities.row(i);
        let c = argmax2(row);
        let p_max = row[c as usize];
        if p_max < tau {
            continue;
        }
        stats.passed_confidence += 1;

        let h = embeddings.row(i);
        let d_same = prototypes.centroid(c).map(|mu| euclidean(h, mu));
        let d_other = prototypes.centroid(1 - c).map_or(f64::INFINITY, |mu| euclidean(h, mu));
        if gates.prototype {
            match d_same {
                Some(d) if d <= d_other => {}
                _ => continue,
            }
        }
        stats.passed_prototype += 1;

        if gates.neighborhood {
            let nb = graph.neighborhood(i);
            if nb.is_empty() {
                continue;
            }
            let agree = nb.iter().filter(|&&j| votes[j] == c).count();
            if 2 * agree < nb.len() {
                continue;
            }
        }
        stats.passed_neighborhood += 1;

        let weight = if gates.prototype {
            confidence_weight(p_max, d_same.expect("gate 2 passed"), d_other)
        } else {
            p_max
        };
        entries.push(PseudoLabel { node: i, label: c, weight });
    }
    PseudoLabelSet {
        entries,
        round: 0,
        stats,
    }
}

/// Adds N(0, σ²) noise to continuous columns only.
pub fn clinical_augment(features: &DenseMatrix, continuous: &[bool], sigma: f64, rng: &mut StreamRng) -> DenseMatrix {
    let mut out = features.clone();
    if sigma == 0.0 || !continuous.iter().any(|&c| c) {
        return out;
    }
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    for i in 0..out.rows() {
        for (v, &c) in out.row_mut(i).iter_mut().zip(continuous) {
            if c {
                *v += noise.sample(rng);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_at(0), 0.90);
        assert_eq!(threshold_at(10), 0.70);
        assert!((threshold_at(5) - 0.90 * (-0.15f64).exp()).abs() < 1e-15);
        assert!((threshold_at(5) - 0.7747).abs() < 1e-4);
        for t in 0..100 {
            assert!(threshold_at(t + 1) <= threshold_at(t));
            assert!(threshold_at(t) >= 0.70);
        }
    }

    #[test]
    fn prototype_examples() {
        let h = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![5.0, -1.0]]).unwrap();
        let labels = [Some(0), Some(0), Some(1)];
        let p = compute_prototypes(&h, &labels, &[0, 1, 2]);
        assert_eq!(p.centroid(0).unwrap(), &[1.0, 1.0]);
        assert_eq!(p.centroid(1).unwrap(), &[5.0, -1.0]);
        assert_eq!(p.counts, [2, 1]);
        let only0 = compute_prototypes(&h, &labels, &[0, 1]);
        assert!(only0.centroid(1).is_none());
        assert_eq!(only0.counts[1], 0);
    }

    #[test]
    fn blend_examples() {
        let mk = |v: Vec<f64>| PrototypeSet {
            centroids: [Some(v.clone()), Some(v)],
            counts: [1, 1],
            provenance: Provenance::Local,
        };
        let local = mk(vec![0.0, 0.0]);
        let global = mk(vec![2.0, 2.0]);
        assert_eq!(blend_prototypes(&local, &global, 0.5).unwrap().centroid(0).unwrap(), &[1.0, 1.0]);
        assert_eq!(blend_prototypes(&local, &global, 0.0).unwrap().centroid(1).unwrap(), &[0.0, 0.0]);
        assert_eq!(blend_prototypes(&local, &global, 1.0).unwrap().centroid(1).unwrap(), &[2.0, 2.0]);
        let none = PrototypeSet::absent(Provenance::Global);
        assert_eq!(blend_prototypes(&local, &none, 0.5).unwrap().centroid(0).unwrap(), &[0.0, 0.0]);
        let both = blend_prototypes(&none, &none, 0.5).unwrap();
        assert!(both.centroid(0).is_none());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(confidence_weight(0.9, 0.0, 2.0), 0.9);
        assert_eq!(confidence_weight(0.9, 1.5, 1.5), 0.45);
        assert!((confidence_weight(0.8, 1.0, 3.0) - 0.6).abs() < 1e-15);
        assert_eq!(confidence_weight(0.8, 0.0, 0.0), 0.4);
    }

    fn star_case(confidence: f64) -> PseudoLabelSet {
        // node 0 unlabeled, neighbors 1..4 labeled class 1
        let edges: Vec<(usize, usize)> = (1..5).map(|j| (0, j)).collect();
        let g = PatientGraph::from_edges(5, &edges, &[1.0; 4], 1.0).unwrap();
        let mut probs = DenseMatrix::filled(5, 2, 0.5);
        probs.set(0, 0, 1.0 - confidence);
        probs.set(0, 1, confidence);
        let h = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]]).unwrap();
        let protos = PrototypeSet {
            centroids: [Some(vec![-1.0, -1.0]), Some(vec![1.0, 1.0])],
            counts: [3, 4],
            provenance: Provenance::Blended,
        };
        let known = [None, Some(1), Some(1), Some(1), Some(1)];
        triple_gate(&probs, &h, &g, &protos, 0.7, &[0], &known, GateConfig::default())
    }

    #[test]
    fn gate_accepts_exact_prototype_case() {
        let out = star_case(0.95);
        assert_eq!(out.entries.len(), 1);
        assert_eq!(out.entries[0].label, 1);
        assert_eq!(out.entries[0].weight, 0.95);
    }

    #[test]
    fn gate_rejects_low_confidence() {
        let out = star_case(0.60);
        assert!(out.entries.is_empty());
        assert_eq!(out.stats.passed_confidence, 0);
    }

    #[test]
    fn gate_edge_cases_reject() {
        let g = PatientGraph::empty(2);
        let probs = DenseMatrix::from_rows(&[vec![0.05, 0.95], vec![0.05, 0.95]]).unwrap();
        let h = DenseMatrix::zeros(2, 2);
        let protos = PrototypeSet {
            centroids: [None, Some(vec![0.0, 0.0])],
            counts: [0, 1],
            provenance: Provenance::Local,
        };
        // isolated node
        let out = triple_gate(&probs, &h, &g, &protos, 0.7, &[0], &[None, None], GateConfig::default());
        assert!(out.entries.is_empty());
        assert_eq!(out.stats.passed_prototype, 1);
        // absent prototype for the predicted class
        let g2 = PatientGraph::from_edges(2, &[(0, 1)], &[1.0], 1.0).unwrap();
        let missing = PrototypeSet::absent(Provenance::Local);
        let out = triple_gate(&probs, &h, &g2, &missing, 0.7, &[0], &[None, None], GateConfig::default());
        assert!(out.entries.is_empty());
        let out = triple_gate(&probs, &h, &g2, &missing, 0.7, &[0], &[None, None], GateConfig { prototype: false, neighborhood: false });
        assert_eq!(out.entries.len(), 1);
        assert_eq!(out.entries[0].weight, 0.95);
    }

    #[test]
    fn augment_respects_mask() {
        let x = DenseMatrix::from_rows(&[vec![1.0, 0.0, 3.0], vec![2.0, 1.0, 4.0]]).unwrap();
        let mask = [true, false, true];
        let a = clinical_augment(&x, &mask, 0.05, &mut rng::stream(1, &[]));
        let b = clinical_augment(&x, &mask, 0.05, &mut rng::stream(1, &[]));
        assert_eq!(a, b);
        for i in 0..2 {
            assert_eq!(a.get(i, 1).to_bits(), x.get(i, 1).to_bits());
            assert_ne!(a.get(i, 0), x.get(i, 0));
        }
        assert_eq!(clinical_augment(&x, &[false; 3], 0.05, &mut rng::stream(1, &[])), x);
        assert_eq!(clinical_augment(&x, &mask, 0.0, &mut rng::stream(1, &[])), x);
    }
}
