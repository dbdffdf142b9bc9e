//! Cross-validated experiments: methods, ablations, scoring and reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{dirichlet_partition, make_folds, mask_labels, FoldPlan, PatientDataset, Standardizer};
use crate::error::{Error, Result};
use crate::federation::{run_federation, silo_graph, train_standalone, RoundTelemetry, SiloState, TrainConfig};
use crate::head::{CalibratedHead, HeadConfig};
use crate::metrics::{auroc, macro_f1_sens_spec, mean_std, wilcoxon_signed_rank};
use crate::model::{forward, ForwardMode, Fusion, ModelParams};
use crate::rng::{self, tag};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Pgpl,
    Agr,
    Caa,
    ProtoShare,
    Focal,
    Contrastive,
    Smoothness,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Pgpl,
        Component::Agr,
        Component::Caa,
        Component::ProtoShare,
        Component::Focal,
        Component::Contrastive,
        Component::Smoothness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pgpl => "pgpl",
            Self::Agr => "agr",
            Self::Caa => "caa",
            Self::ProtoShare => "proto_share",
            Self::Focal => "focal",
            Self::Contrastive => "contrastive",
            Self::Smoothness => "smoothness",
        }
    }
}

/// Returns `cfg` with one component switched off.
pub fn ablate(cfg: &TrainConfig, component: Component) -> TrainConfig {
    let mut out = cfg.clone();
    match component {
        Component::Pgpl => {
            out.gates.prototype = false;
            out.gates.neighborhood = false;
        }
        Component::Agr => out.agr = false,
        Component::Caa => out.weights.gamma_aug = 0.0,
        Component::ProtoShare => out.share_prototypes = false,
        Component::Focal => {
            out.weights.focal_alpha = 1.0;
            out.weights.focal_gamma = 0.0;
        }
        Component::Contrastive => out.weights.beta = 0.0,
        Component::Smoothness => out.weights.mu = 0.0,
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    FedTgnn,
    /// The full method with one component disabled.
    Without(Component),
    /// Federated training with every semi-supervised term switched off.
    FedSupervised,
    LocalGcn,
    FedavgGcn,
    FedavgSage,
    LocalTgnn,
    FedSelftrain,
}

impl Method {
    pub fn name(self) -> String {
        match self {
            Self::FedTgnn => "fedtgnn".into(),
            Self::Without(c) => format!("no_{}", c.name()),
            Self::FedSupervised => "fed_supervised".into(),
            Self::LocalGcn => "local_gcn".into(),
            Self::FedavgGcn => "fedavg_gcn".into(),
            Self::FedavgSage => "fedavg_sage".into(),
            Self::LocalTgnn => "local_tgnn".into(),
            Self::FedSelftrain => "fed_selftrain".into(),
        }
    }

    pub fn all() -> Vec<Method> {
        let mut v = vec![Self::FedTgnn];
        v.extend(Component::ALL.iter().map(|&c| Self::Without(c)));
        v.extend([
            Self::FedSupervised,
            Self::LocalGcn,
            Self::FedavgGcn,
            Self::FedavgSage,
            Self::LocalTgnn,
            Self::FedSelftrain,
        ]);
        v
    }

    pub fn ablations() -> Vec<Method> {
        let mut v = vec![Self::FedTgnn];
        v.extend(Component::ALL.iter().map(|&c| Self::Without(c)));
        v
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Calibrated logistic head on [X ‖ H].
    Head,
    /// The encoder's own softmax.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub train: TrainConfig,
    pub federated: bool,
    pub scoring: Scoring,
}

fn supervised_only(cfg: &mut TrainConfig) {
    cfg.weights.eta = 0.0;
    cfg.weights.mu = 0.0;
    cfg.weights.beta = 0.0;
    cfg.weights.gamma_aug = 0.0;
    cfg.agr = false;
}

fn plain_baseline(base: &TrainConfig, alpha: f64) -> TrainConfig {
    let mut cfg = base.clone();
    supervised_only(&mut cfg);
    cfg.weights.mu_prox = 0.0;
    cfg.weights.focal_alpha = 1.0;
    cfg.weights.focal_gamma = 0.0;
    cfg.model.fusion = Fusion::Fixed(alpha);
    cfg.model.edge_attention = false;
    cfg.share_prototypes = false;
    cfg
}

/// Training configuration, federation mode and scoring for `method`.
pub fn method_spec(method: Method, base: &TrainConfig) -> MethodSpec {
    let (train, federated, scoring) = match method {
        Method::FedTgnn => (base.clone(), true, Scoring::Head),
        Method::Without(c) => (ablate(base, c), true, Scoring::Head),
        Method::FedSupervised => {
            let mut cfg = base.clone();
            supervised_only(&mut cfg);
            (cfg, true, Scoring::Head)
        }
        Method::LocalGcn => (plain_baseline(base, 1.0), false, Scoring::Softmax),
        Method::FedavgGcn => (plain_baseline(base, 1.0), true, Scoring::Softmax),
        Method::FedavgSage => (plain_baseline(base, 0.0), true, Scoring::Softmax),
        Method::LocalTgnn => {
            let mut cfg = base.clone();
            cfg.weights.mu_prox = 0.0;
            (cfg, false, Scoring::Head)
        }
        Method::FedSelftrain => {
            let mut cfg = base.clone();
            cfg.use_graph = false;
            cfg.agr = false;
            cfg.gates.prototype = false;
            cfg.gates.neighborhood = false;
            cfg.weights.mu = 0.0;
            cfg.weights.beta = 0.0;
            cfg.weights.gamma_aug = 0.0;
            cfg.share_prototypes = false;
            (cfg, true, Scoring::Softmax)
        }
    };
    MethodSpec { train, federated, scoring }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub auroc: f64,
    pub macro_f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub metrics: FoldMetrics,
    pub n_test: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub final_pseudo_labels: usize,
    pub refinements: u32,
    /// Held-out probabilities and labels, in test-row order.
    pub test_rows: Vec<usize>,
    pub test_scores: Vec<f64>,
    pub telemetry: Vec<RoundTelemetry>,
}

fn vstack(blocks: &[DenseMatrix]) -> Result<DenseMatrix> {
    let cols = blocks.first().map_or(0, |b| b.cols());
    let mut values = Vec::new();
    let mut rows = 0;
    for b in blocks {
        if b.cols() != cols {
            return Err(Error::dim("vstack", format!("{} vs {} columns", b.cols(), cols)));
        }
        rows += b.rows();
        values.extend_from_slice(b.as_slice());
    }
    DenseMatrix::from_vec(rows, cols, values)
}

/// Per-silo scoring view: training rows followed by that silo's test rows.
struct ScoringView {
    features: DenseMatrix,
    embeddings: DenseMatrix,
    probabilities: DenseMatrix,
    labels: Vec<Option<u8>>,
    labeled: Vec<usize>,
    test: Vec<usize>,
    test_rows: Vec<usize>,
}

fn score_silo(
    data: &PatientDataset,
    train_rows: &[usize],
    test_rows: &[usize],
    labeled_rows: &[usize],
    scaler: &Standardizer,
    params: &ModelParams,
    silo: &SiloState,
    cfg: &TrainConfig,
) -> Result<ScoringView> {
    let all: Vec<usize> = train_rows.iter().chain(test_rows).copied().collect();
    let x = scaler.apply(&data.features.select_rows(&all));
    let mut graph = silo_graph(&x, cfg.k, cfg)?;
    if cfg.refines_graph() {
        let first = forward(&x, &graph, params, &silo.model_cfg, &ForwardMode::Eval)?;
        graph = silo_graph(&first.embeddings, cfg.k_agr, cfg)?;
    }
    let out = forward(&x, &graph, params, &silo.model_cfg, &ForwardMode::Eval)?;
    let labels: Vec<Option<u8>> = all
        .iter()
        .map(|&r| if labeled_rows.binary_search(&r).is_ok() { data.labels[r] } else { None })
        .collect();
    let labeled = (0..train_rows.len()).filter(|&i| labels[i].is_some()).collect();
    Ok(ScoringView {
        features: x,
        embeddings: out.embeddings,
        probabilities: out.probabilities,
        labels,
        labeled,
        test: (train_rows.len()..all.len()).collect(),
        test_rows: test_rows.to_vec(),
    })
}

fn head_scores(views: &[ScoringView], head_cfg: &HeadConfig) -> Result<Vec<f64>> {
    let mut offset = 0;
    let mut labeled = Vec::new();
    let mut test = Vec::new();
    let mut labels = Vec::new();
    for v in views {
        labeled.extend(v.labeled.iter().map(|i| i + offset));
        test.extend(v.test.iter().map(|i| i + offset));
        labels.extend_from_slice(&v.labels);
        offset += v.features.rows();
    }
    let x = vstack(&views.iter().map(|v| v.features.clone()).collect::<Vec<_>>())?;
    let h = vstack(&views.iter().map(|v| v.embeddings.clone()).collect::<Vec<_>>())?;
    let head = CalibratedHead::train(&x, &h, &labels, &labeled, head_cfg)?;
    head.predict_proba(&x, &h, &test)
}

pub fn fold_metrics(scores: &[f64], labels: &[u8]) -> Result<FoldMetrics> {
    let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
    let cls = macro_f1_sens_spec(&preds, labels)?;
    Ok(FoldMetrics {
        auroc: auroc(scores, labels)?,
        macro_f1: cls.macro_f1,
        sensitivity: cls.sensitivity,
        specificity: cls.specificity,
    })
}

/// Trains and scores one method on one masked fold.
pub fn run_fold(
    data: &PatientDataset,
    fold: &FoldPlan,
    method: Method,
    base: &TrainConfig,
    head_cfg: &HeadConfig,
    dump_dir: Option<&Path>,
) -> Result<FoldOutcome> {
    let spec = method_spec(method, base);
    let cfg = &spec.train;
    cfg.validate()?;

    // one fold-wide fit keeps feature scales comparable across silos for the pooled head
    let scaler = Standardizer::fit(&data.features, &fold.training_rows())?;
    let mut silos = Vec::with_capacity(fold.partitions.len());
    for p in &fold.partitions {
        let train_rows = p.training_rows();
        let x = scaler.apply(&data.features.select_rows(&train_rows));
        let labels = train_rows
            .iter()
            .map(|&r| if p.labeled.binary_search(&r).is_ok() { data.labels[r] } else { None })
            .collect();
        silos.push(SiloState::new(p.silo_id, x, labels, data.continuous_mask.clone(), cfg, fold.seed)?);
    }
    let init = ModelParams::init(&cfg.model_for(data.n_features()), &mut rng::stream(fold.seed, &[tag::INIT]));

    let (per_silo_params, telemetry) = if spec.federated {
        let out = run_federation(&mut silos, cfg, &init, dump_dir)?;
        (vec![out.global; silos.len()], out.telemetry)
    } else {
        let outs: Vec<_> = silos
            .par_iter_mut()
            .map(|s| train_standalone(s, cfg, &init))
            .collect::<Result<_>>()?;
        let mut telemetry = Vec::new();
        for o in &outs {
            telemetry.extend(o.telemetry.iter().cloned());
        }
        (outs.into_iter().map(|o| o.global).collect(), telemetry)
    };

    let views: Vec<ScoringView> = fold
        .partitions
        .iter()
        .zip(&silos)
        .zip(&per_silo_params)
        .map(|((p, silo), params)| score_silo(data, &p.training_rows(), &p.test, &p.labeled, &scaler, params, silo, cfg))
        .collect::<Result<_>>()?;

    let mut test_rows = Vec::new();
    let mut scores = Vec::new();
    match spec.scoring {
        Scoring::Softmax => {
            for v in &views {
                test_rows.extend_from_slice(&v.test_rows);
                scores.extend(v.test.iter().map(|&i| v.probabilities.get(i, 1)));
            }
        }
        Scoring::Head => {
            scores = head_scores(&views, head_cfg)?;
            for v in &views {
                test_rows.extend_from_slice(&v.test_rows);
            }
        }
    }
    let labels: Vec<u8> = test_rows.iter().map(|&r| data.label(r)).collect();
    Ok(FoldOutcome {
        metrics: fold_metrics(&scores, &labels)?,
        n_test: test_rows.len(),
        n_labeled: fold.partitions.iter().map(|p| p.labeled.len()).sum(),
        n_unlabeled: fold.partitions.iter().map(|p| p.unlabeled.len()).sum(),
        final_pseudo_labels: silos.iter().map(|s| s.pseudo.entries.len()).sum(),
        refinements: silos.iter().map(|s| s.refinements).max().unwrap_or(0),
        test_rows,
        test_scores: scores,
        telemetry,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub dataset: String,
    pub scarcity: Vec<f64>,
    pub methods: Vec<Method>,
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub n_silos: usize,
    pub dirichlet_alpha: f64,
    pub train: TrainConfig,
    pub head: HeadConfig,
    pub jobs: usize,
    pub dump_messages: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Skipped { reason: String },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub dataset: String,
    pub scarcity: f64,
    pub method: String,
    pub fold: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub status: CellStatus,
    pub metrics: Option<FoldMetrics>,
    pub n_test: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub final_pseudo_labels: usize,
    pub refinements: u32,
    pub seconds: f64,
    pub telemetry: Vec<RoundTelemetry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    fn of(values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scarcity: f64,
    pub method: String,
    pub completed_folds: usize,
    pub auroc: Stat,
    pub macro_f1: Stat,
    pub sensitivity: Stat,
    pub specificity: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub scarcity: f64,
    pub method_a: String,
    pub method_b: String,
    pub mean_diff: f64,
    pub p_two_sided: f64,
    /// One-sided exact p for "a exceeds b".
    pub p_one_sided: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub plan: ExperimentPlan,
    pub records: Vec<FoldRecord>,
    pub summaries: Vec<MetricsReport>,
    pub significance: Vec<Significance>,
}

impl ExperimentResult {
    pub fn summary(&self, scarcity: f64, method: Method) -> Option<&MetricsReport> {
        let name = method.name();
        self.summaries.iter().find(|s| s.scarcity == scarcity && s.method == name)
    }

    pub fn incomplete(&self) -> Vec<&FoldRecord> {
        self.records.iter().filter(|r| r.status != CellStatus::Ok).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
            path: Some(path.to_path_buf()),
            detail: e.to_string(),
        })?;
        let csv_err = |e: csv::Error| Error::Format {
            path: Some(path.to_path_buf()),
            detail: e.to_string(),
        };
        w.write_record([
            "dataset", "scarcity", "method", "fold", "seed", "status", "auroc", "macro_f1", "sensitivity", "specificity", "n_test", "n_labeled",
            "n_unlabeled", "final_pseudo_labels", "refinements", "seconds",
        ])
        .map_err(csv_err)?;
        for r in &self.records {
            let m = |f: fn(&FoldMetrics) -> f64| r.metrics.as_ref().map_or(String::new(), |x| format!("{:.6}", f(x)));
            let status = match &r.status {
                CellStatus::Ok => "ok".to_string(),
                CellStatus::Skipped { reason } => format!("skipped: {reason}"),
                CellStatus::Failed { reason } => format!("failed: {reason}"),
            };
            w.write_record([
                r.dataset.clone(),
                format!("{}", r.scarcity),
                r.method.clone(),
                r.fold.to_string(),
                r.seed.to_string(),
                status,
                m(|x| x.auroc),
                m(|x| x.macro_f1),
                m(|x| x.sensitivity),
                m(|x| x.specificity),
                r.n_test.to_string(),
                r.n_labeled.to_string(),
                r.n_unlabeled.to_string(),
                r.final_pseudo_labels.to_string(),
                r.refinements.to_string(),
                format!("{:.3}", r.seconds),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn masked_fold(data: &PatientDataset, fold: &FoldPlan, rho: f64) -> Result<FoldPlan> {
    let partitions = fold
        .partitions
        .iter()
        .map(|p| mask_labels(data, p, rho, fold.seed))
        .collect::<Result<_>>()?;
    Ok(FoldPlan {
        partitions,
        ..fold.clone()
    })
}

fn run_cell(data: &PatientDataset, plan: &ExperimentPlan, fold: &FoldPlan, rho: f64, method: Method) -> FoldRecord {
    let started = Instant::now();
    let mut record = FoldRecord {
        dataset: plan.dataset.clone(),
        scarcity: rho,
        method: method.name(),
        fold: fold.fold_index,
        seed: fold.seed,
        status: CellStatus::Ok,
        metrics: None,
        n_test: 0,
        n_labeled: 0,
        n_unlabeled: 0,
        final_pseudo_labels: 0,
        refinements: 0,
        seconds: 0.0,
        telemetry: Vec::new(),
    };
    let dump = plan
        .dump_messages
        .as_ref()
        .map(|d| d.join(format!("rho{rho}_{}_fold{}", method.name(), fold.fold_index)));
    let outcome = masked_fold(data, fold, rho).and_then(|f| run_fold(data, &f, method, &plan.train, &plan.head, dump.as_deref()));
    match outcome {
        Ok(o) => {
            record.metrics = Some(o.metrics);
            record.n_test = o.n_test;
            record.n_labeled = o.n_labeled;
            record.n_unlabeled = o.n_unlabeled;
            record.final_pseudo_labels = o.final_pseudo_labels;
            record.refinements = o.refinements;
            record.telemetry = o.telemetry;
        }
        Err(Error::Scarcity(reason)) => record.status = CellStatus::Skipped { reason },
        Err(e) => record.status = CellStatus::Failed { reason: e.to_string() },
    }
    record.seconds = started.elapsed().as_secs_f64();
    log::info!(
        "{} rho={rho} {} fold {}: {}",
        plan.dataset,
        method.name(),
        fold.fold_index,
        match (&record.status, &record.metrics) {
            (CellStatus::Ok, Some(m)) => format!("auroc={:.4} macro_f1={:.4} ({:.1}s)", m.auroc, m.macro_f1, record.seconds),
            (s, _) => format!("{s:?}"),
        }
    );
    record
}

fn summarize(records: &[FoldRecord]) -> Vec<MetricsReport> {
    let mut keys: Vec<(f64, String)> = Vec::new();
    for r in records {
        if !keys.iter().any(|k| k.0 == r.scarcity && k.1 == r.method) {
            keys.push((r.scarcity, r.method.clone()));
        }
    }
    keys.into_iter()
        .map(|(rho, method)| {
            let ok: Vec<&FoldMetrics> = records
                .iter()
                .filter(|r| r.scarcity == rho && r.method == method)
                .filter_map(|r| r.metrics.as_ref())
                .collect();
            let col = |f: fn(&FoldMetrics) -> f64| Stat::of(ok.iter().map(|m| f(m)).collect());
            MetricsReport {
                scarcity: rho,
                method,
                completed_folds: ok.len(),
                auroc: col(|m| m.auroc),
                macro_f1: col(|m| m.macro_f1),
                sensitivity: col(|m| m.sensitivity),
                specificity: col(|m| m.specificity),
            }
        })
        .collect()
}

fn significance(summaries: &[MetricsReport], folds: usize) -> Result<Vec<Significance>> {
    let mut out = Vec::new();
    for (i, a) in summaries.iter().enumerate() {
        for b in &summaries[i + 1..] {
            if a.scarcity != b.scarcity || a.completed_folds != folds || b.completed_folds != folds {
                continue;
            }
            let w = wilcoxon_signed_rank(&a.auroc.values, &b.auroc.values)?;
            out.push(Significance {
                scarcity: a.scarcity,
                method_a: a.method.clone(),
                method_b: b.method.clone(),
                mean_diff: a.auroc.mean - b.auroc.mean,
                p_two_sided: w.p_two_sided,
                p_one_sided: w.p_greater,
                significant: w.p_two_sided < 0.05,
            });
        }
    }
    Ok(out)
}

/// Runs every (scarcity, method, fold) cell of `plan` on `data`.
pub fn run_experiment(plan: &ExperimentPlan, data: &PatientDataset) -> Result<ExperimentResult> {
    if plan.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    if plan.methods.is_empty() || plan.scarcity.is_empty() {
        return Err(Error::Config("experiment needs at least one method and one scarcity ratio".into()));
    }
    let silos = dirichlet_partition(data, plan.n_silos, plan.dirichlet_alpha, plan.seeds[0])?;
    let folds = make_folds(data, &silos, plan.folds, &plan.seeds)?;
    let mut cells = Vec::new();
    for &rho in &plan.scarcity {
        for &method in &plan.methods {
            for fold in &folds {
                cells.push((rho, method, fold));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut records: Vec<FoldRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(rho, method, fold)| run_cell(data, plan, fold, rho, method))
            .collect()
    });
    records.sort_by(|a, b| {
        a.scarcity
            .total_cmp(&b.scarcity)
            .then_with(|| a.method.cmp(&b.method))
            .then(a.fold.cmp(&b.fold))
    });
    let summaries = summarize(&records);
    let significance = significance(&summaries, plan.folds)?;
    Ok(ExperimentResult {
        plan: plan.clone(),
        records,
        summaries,
        significance,
    })
}

/// Text table of each ablation against the full method.
pub fn ablation_table(result: &ExperimentResult) -> String {
    let mut out = String::new();
    let full_name = Method::FedTgnn.name();
    for &rho in &result.plan.scarcity {
        let _ = writeln!(out, "scarcity {rho}");
        let _ = writeln!(out, "{:<18} {:>16} {:>16} {:>9} {:>9}", "method", "auroc", "macro_f1", "d_auroc", "p(two)");
        let full = result.summaries.iter().find(|s| s.scarcity == rho && s.method == full_name);
        for s in result.summaries.iter().filter(|s| s.scarcity == rho) {
            let d = full.map_or(f64::NAN, |f| s.auroc.mean - f.auroc.mean);
            let p = result
                .significance
                .iter()
                .find(|x| x.scarcity == rho && ((x.method_a == s.method && x.method_b == full_name) || (x.method_b == s.method && x.method_a == full_name)))
                .map_or("-".to_string(), |x| format!("{:.4}", x.p_two_sided));
            let _ = writeln!(
                out,
                "{:<18} {:>7.4}±{:<8.4} {:>7.4}±{:<8.4} {:>+9.4} {:>9}",
                s.method, s.auroc.mean, s.auroc.std, s.macro_f1.mean, s.macro_f1.std, d, p
            );
        }
    }
    out
}
