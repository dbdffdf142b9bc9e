//! Brute-force oracles and whole-system checks shared by the integration
//! tests and the acceptance target.

#![allow(dead_code)]

use rand::Rng;

use fedtgnn::autodiff::Tape;
use fedtgnn::federation::{local_objective, run_federation, train_standalone, SiloState, TrainConfig};
use fedtgnn::graph::{build_knn_graph, PatientGraph};
use fedtgnn::losses::PseudoLabel;
use fedtgnn::metrics::{auroc, wilcoxon_signed_rank};
use fedtgnn::model::{dropout_mask, ForwardMode, GraphTensors, ModelParams};
use fedtgnn::rng::{stream, StreamRng};
use fedtgnn::ssl::{triple_gate, GateConfig, PrototypeSet, Provenance};
use fedtgnn::DenseMatrix;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn random_points(rng: &mut StreamRng, n: usize, d: usize, grid: bool) -> DenseMatrix {
    let values = (0..n * d)
        .map(|_| {
            if grid {
                f64::from(rng.random_range(0..4u8))
            } else {
                rng.random_range(-2.0..2.0)
            }
        })
        .collect();
    DenseMatrix::from_vec(n, d, values).unwrap()
}

/// Edge list and weights from a full sort of every row's candidates.
pub fn knn_oracle(points: &DenseMatrix, k: usize) -> Vec<((usize, usize), f64)> {
    let n = points.rows();
    let mut all: Vec<f64> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            all.push(dist(points.row(i), points.row(j)));
        }
    }
    all.sort_by(f64::total_cmp);
    let m = all.len();
    let mut sigma = if m % 2 == 1 { all[m / 2] } else { (all[m / 2 - 1] + all[m / 2]) / 2.0 };
    if sigma == 0.0 {
        sigma = 1.0;
    }
    let mut edges = std::collections::BTreeMap::new();
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(points.row(i), points.row(j)), j)).collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in &others[..k] {
            edges.insert((i.min(j), i.max(j)), (-(d * d) / (2.0 * sigma * sigma)).exp());
        }
    }
    edges.into_iter().collect()
}

/// Number of random graphs (n ≤ 50) whose edges or weights disagree with the oracle.
pub fn knn_mismatches(instances: usize, seed: u64) -> usize {
    let mut rng = stream(seed, &[901]);
    let mut bad = 0;
    for inst in 0..instances {
        let n = rng.random_range(2..=50);
        let d = rng.random_range(1..=5);
        let k = rng.random_range(1..n);
        let points = random_points(&mut rng, n, d, inst % 3 == 0);
        let g = build_knn_graph(&points, k).unwrap();
        let want = knn_oracle(&points, k);
        let got: Vec<((usize, usize), f64)> = g.edges().iter().copied().zip(g.static_weights().iter().copied()).collect();
        let same = got.len() == want.len()
            && got.iter().zip(&want).all(|(a, b)| a.0 == b.0 && (a.1 - b.1).abs() <= 1e-12);
        if !same {
            bad += 1;
        }
    }
    bad
}

pub struct GateInstance {
    pub probs: DenseMatrix,
    pub emb: DenseMatrix,
    pub graph: PatientGraph,
    pub protos: PrototypeSet,
    pub tau: f64,
    pub unlabeled: Vec<usize>,
    pub known: Vec<Option<u8>>,
    pub gates: GateConfig,
}

pub fn gate_instance(rng: &mut StreamRng, n: usize) -> GateInstance {
    let probs = DenseMatrix::from_rows(
        &(0..n)
            .map(|_| {
                let p: f64 = match rng.random_range(0..10) {
                    0 => 0.5,
                    1 => 0.8,
                    _ => rng.random(),
                };
                vec![1.0 - p, p]
            })
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let grid = rng.random_bool(0.2);
    let emb = random_points(rng, n, 3, grid);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.2) {
                edges.push((i, j));
            }
        }
    }
    let weights = vec![1.0; edges.len()];
    let graph = PatientGraph::from_edges(n, &edges, &weights, 1.0).unwrap();
    let centroid = |rng: &mut StreamRng| (!rng.random_bool(0.15)).then(|| (0..3).map(|_| rng.random_range(0.0..3.0)).collect::<Vec<f64>>());
    let centroids = [centroid(rng), centroid(rng)];
    let counts = [0, 1].map(|c| u64::from(centroids[c].is_some()) * 5);
    let known: Vec<Option<u8>> = (0..n).map(|_| rng.random_bool(0.4).then(|| rng.random_range(0..2u8))).collect();
    let unlabeled = (0..n).filter(|&i| known[i].is_none()).collect();
    GateInstance {
        probs,
        emb,
        graph,
        protos: PrototypeSet {
            centroids,
            counts,
            provenance: Provenance::Blended,
        },
        tau: [0.5, 0.7, 0.8, 0.9][rng.random_range(0..4)],
        unlabeled,
        known,
        gates: GateConfig {
            prototype: rng.random_bool(0.8),
            neighborhood: rng.random_bool(0.8),
        },
    }
}

/// Direct evaluation of the acceptance predicate for every unlabeled node.
pub fn gate_oracle(g: &GateInstance) -> Vec<PseudoLabel> {
    let pred = |j: usize| -> u8 { if g.probs.get(j, 1) > g.probs.get(j, 0) { 1 } else { 0 } };
    let mut out = Vec::new();
    for &i in &g.unlabeled {
        let c = pred(i);
        let p = g.probs.get(i, c as usize);
        let conf = p >= g.tau;
        let h = g.emb.row(i);
        let d_same = g.protos.centroids[c as usize].as_ref().map(|m| dist(h, m));
        let d_other = g.protos.centroids[1 - c as usize].as_ref().map(|m| dist(h, m));
        let proto = match (d_same, d_other) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(a), Some(b)) => a <= b,
        };
        let nb = g.graph.neighborhood(i);
        let agree = nb.iter().filter(|&&j| g.known[j].unwrap_or_else(|| pred(j)) == c).count();
        let consensus = !nb.is_empty() && agree as f64 >= nb.len() as f64 / 2.0;
        if conf && (!g.gates.prototype || proto) && (!g.gates.neighborhood || consensus) {
            let weight = if !g.gates.prototype {
                p
            } else {
                match (d_same, d_other) {
                    (Some(a), Some(b)) if a + b > 0.0 => p * b / (a + b),
                    (Some(_), Some(_)) => p / 2.0,
                    _ => p,
                }
            };
            out.push(PseudoLabel { node: i, label: c, weight });
        }
    }
    out
}

/// (mismatching instances, total pseudo-labels accepted by the oracle).
pub fn gate_mismatches(instances: usize, n: usize, seed: u64) -> (usize, usize) {
    let mut rng = stream(seed, &[902]);
    let (mut bad, mut accepted) = (0, 0);
    for _ in 0..instances {
        let g = gate_instance(&mut rng, n);
        let got = triple_gate(&g.probs, &g.emb, &g.graph, &g.protos, g.tau, &g.unlabeled, &g.known, g.gates).entries;
        let want = gate_oracle(&g);
        accepted += want.len();
        let differs = got.len() != want.len()
            || got
                .iter()
                .zip(&want)
                .any(|(a, b)| a.node != b.node || a.label != b.label || (a.weight - b.weight).abs() > 1e-12);
        bad += usize::from(differs);
    }
    (bad, accepted)
}

pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn auroc_mismatches(instances: usize, seed: u64) -> usize {
    let mut rng = stream(seed, &[903]);
    let mut bad = 0;
    let mut done = 0;
    while done < instances {
        let n = rng.random_range(2..=30);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        if labels.iter().all(|&y| y == labels[0]) {
            continue;
        }
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 8.0).collect();
        done += 1;
        if (auroc(&scores, &labels).unwrap() - auroc_pairs(&scores, &labels)).abs() > 1e-12 {
            bad += 1;
        }
    }
    bad
}

/// Two-sided exact p from an explicit walk over every sign pattern.
pub fn wilcoxon_oracle(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let rank = |v: f64| -> f64 {
        let less = d.iter().filter(|x| x.abs() < v).count() as f64;
        let equal = d.iter().filter(|x| x.abs() == v).count() as f64;
        less + (equal + 1.0) / 2.0
    };
    let ranks: Vec<f64> = d.iter().map(|x| rank(x.abs())).collect();
    let observed: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let (mut ge, mut le) = (0usize, 0usize);
    for signs in 0..(1usize << n) {
        let w: f64 = (0..n).filter(|k| signs & (1 << k) != 0).map(|k| ranks[k]).sum();
        if w >= observed - 1e-9 {
            ge += 1;
        }
        if w <= observed + 1e-9 {
            le += 1;
        }
    }
    let total = (1usize << n) as f64;
    (2.0 * (ge.min(le) as f64) / total).min(1.0)
}

pub fn wilcoxon_mismatches(per_size: usize, seed: u64) -> usize {
    let mut rng = stream(seed, &[904]);
    let mut bad = 0;
    for n in 3..=6 {
        for _ in 0..per_size {
            let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) / 10.0).collect();
            let b: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) / 10.0).collect();
            let got = wilcoxon_signed_rank(&a, &b).unwrap().p_two_sided;
            if (got - wilcoxon_oracle(&a, &b)).abs() > 1e-12 {
                bad += 1;
            }
        }
    }
    bad
}

/// A 12-node silo with every loss term active.
pub fn gradient_fixture() -> (SiloState, TrainConfig, ForwardMode, DenseMatrix) {
    let mut rng = stream(2024, &[905]);
    let n = 12;
    let features = random_points(&mut rng, n, 4, false);
    let labels: Vec<Option<u8>> = (0..n).map(|i| if i < 6 { Some((i % 2) as u8) } else { None }).collect();
    let mut cfg = TrainConfig::default();
    cfg.k = 3;
    cfg.model.hidden = 6;
    cfg.model.attn_hidden = 5;
    let mut silo = SiloState::new(0, features.clone(), labels, vec![true, true, false, true], &cfg, 7).unwrap();
    silo.pseudo.entries = vec![
        PseudoLabel { node: 6, label: 1, weight: 0.9 },
        PseudoLabel { node: 8, label: 0, weight: 0.6 },
        PseudoLabel { node: 11, label: 1, weight: 0.75 },
    ];
    let mut global = silo.params.clone();
    let mut flat = global.flatten();
    for v in flat.iter_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    global.unflatten(&flat).unwrap();
    silo.global_model = global;
    let mask = dropout_mask(n, cfg.model.hidden, 0.4, &mut rng);
    let noisy = features.zip_map(&random_points(&mut rng, n, 4, false), |x, e| x + 0.05 * e);
    (silo, cfg, ForwardMode::Train { dropout_mask: mask }, noisy)
}

pub struct GradientReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub terms_active: bool,
    pub seconds: f64,
}

/// Analytic gradients of the local objective against central differences.
pub fn gradient_check(h: f64, floor: f64) -> GradientReport {
    let started = std::time::Instant::now();
    let (mut silo, cfg, mode, noisy) = gradient_fixture();
    let gt = GraphTensors::new(&silo.graph);
    let mut tape = Tape::new();
    let obj = local_objective(&mut tape, &silo, &gt, &mode, Some(&noisy), &cfg).unwrap();
    let r = obj.report;
    let terms_active = [r.supervised, r.pseudo, r.smooth, r.contrast, r.augment, r.proximal].iter().all(|v| *v > 0.0);
    let grads = tape.backward(obj.total).unwrap();
    let analytic: Vec<f64> = obj.vars.in_order().into_iter().flat_map(|v| grads.wrt(&tape, v).into_vec()).collect();
    drop(tape);

    let base = silo.params.flatten();
    let trainable = silo.params.trainable_mask();
    let mut eval = |theta: &[f64]| -> f64 {
        silo.params.unflatten(theta).unwrap();
        let mut t = Tape::new();
        local_objective(&mut t, &silo, &gt, &mode, Some(&noisy), &cfg).unwrap().report.total
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in (0..base.len()).filter(|&i| trainable[i] > 0.0) {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
        checked += 1;
    }
    GradientReport {
        checked,
        max_rel_error: worst,
        terms_active,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Federation with one silo against standalone training; returns the number
/// of rounds whose parameters differ in any bit.
pub fn single_silo_divergence(rounds: u32) -> usize {
    let mut rng = stream(77, &[906]);
    let n = 30;
    let features = random_points(&mut rng, n, 5, false);
    let labels: Vec<Option<u8>> = (0..n).map(|i| if i % 3 == 0 { None } else { Some(u8::from(features.get(i, 0) > 0.0)) }).collect();
    let mut cfg = TrainConfig::default();
    cfg.rounds = rounds;
    cfg.k = 4;
    cfg.model.hidden = 8;
    cfg.model.attn_hidden = 8;
    cfg.weights.mu_prox = 0.0;
    cfg.schedule.tau0 = 0.55;
    cfg.schedule.tau_min = 0.5;
    cfg.agr_period = 3;
    let silo = SiloState::new(0, features, labels, vec![true; 5], &cfg, 11).unwrap();
    let init = ModelParams::init(&cfg.model_for(5), &mut stream(11, &[fedtgnn::rng::tag::INIT]));
    let mut fed = [silo.clone()];
    let mut alone = silo;
    let a = run_federation(&mut fed, &cfg, &init, None).unwrap();
    let b = train_standalone(&mut alone, &cfg, &init).unwrap();
    assert_eq!(a.trajectory.len(), rounds as usize);
    a.trajectory
        .iter()
        .zip(&b.trajectory)
        .filter(|(x, y)| x.len() != y.len() || x.iter().zip(y.iter()).any(|(p, q)| p.to_bits() != q.to_bits()))
        .count()
}
