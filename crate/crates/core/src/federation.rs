//! Round-based federation: silo state, local rounds, FedAvg and prototype
//! aggregation, and the binary message format.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{build_knn_graph, PatientGraph, StaticWeights};
use crate::losses::{self, LossBreakdown, LossTerms, LossWeights};
use crate::model::{self, dropout_mask, forward_with, ForwardMode, GraphTensors, ModelConfig, ModelParams, ParamVars};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{self, tag};
use crate::ssl::{self, GateConfig, GateStats, PrototypeSet, Provenance, PseudoLabelSet, ThresholdSchedule};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: u32,
    pub local_epochs: u32,
    pub agr_period: u32,
    pub k: usize,
    pub k_agr: usize,
    pub lr: f64,
    pub static_weights: StaticWeights,
    /// False trains on an edgeless graph.
    pub use_graph: bool,
    pub agr: bool,
    pub share_prototypes: bool,
    pub prototype_blend: f64,
    pub gates: GateConfig,
    pub schedule: ThresholdSchedule,
    pub weights: LossWeights,
    pub reset_optimizer_each_round: bool,
    /// `in_dim` is filled in per dataset.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_epochs: 3,
            agr_period: 5,
            k: 10,
            k_agr: 15,
            lr: 1e-3,
            static_weights: StaticWeights::Gaussian,
            use_graph: true,
            agr: true,
            share_prototypes: true,
            prototype_blend: 0.5,
            gates: GateConfig::default(),
            schedule: ThresholdSchedule::default(),
            weights: LossWeights::default(),
            reset_optimizer_each_round: false,
            model: ModelConfig::new(0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 || self.agr_period == 0 {
            return Err(Error::Config("rounds, local_epochs and agr_period must all be at least 1".into()));
        }
        if self.k == 0 || self.k_agr == 0 {
            return Err(Error::Config("k and k_agr must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.prototype_blend) {
            return Err(Error::Config(format!("prototype_blend {} outside [0, 1]", self.prototype_blend)));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.model.dropout)));
        }
        if self.model.hidden == 0 || self.model.attn_hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        self.weights.validate()
    }

    pub fn model_for(&self, in_dim: usize) -> ModelConfig {
        ModelConfig {
            in_dim,
            ..self.model.clone()
        }
    }

    /// True when the final training graph lives in embedding space.
    pub fn refines_graph(&self) -> bool {
        self.use_graph && self.agr && self.rounds >= self.agr_period
    }
}

/// k-NN graph with k capped at n−1; edgeless when graphs are disabled.
pub fn silo_graph(points: &DenseMatrix, k: usize, cfg: &TrainConfig) -> Result<PatientGraph> {
    let n = points.rows();
    if !cfg.use_graph || n < 2 {
        return Ok(PatientGraph::empty(n));
    }
    let g = build_knn_graph(points, k.min(n - 1))?;
    Ok(match cfg.static_weights {
        StaticWeights::Gaussian => g,
        StaticWeights::Unit => g.with_unit_weights(),
    })
}

/// Everything one hospital holds. Nothing here is ever read by another silo.
#[derive(Debug, Clone)]
pub struct SiloState {
    pub silo_id: usize,
    pub features: DenseMatrix,
    /// `Some` only for labeled nodes.
    pub labels: Vec<Option<u8>>,
    label_values: Vec<u8>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub continuous: Vec<bool>,
    pub graph: PatientGraph,
    pub model_cfg: ModelConfig,
    pub params: ModelParams,
    pub global_model: ModelParams,
    pub adam: AdamState,
    pub pseudo: PseudoLabelSet,
    pub local_protos: PrototypeSet,
    pub global_protos: PrototypeSet,
    pub refinements: u32,
    pub seed: u64,
}

impl SiloState {
    /// `features` are the silo's standardized training rows; `labels[i]` is
    /// `None` for unlabeled nodes.
    pub fn new(
        silo_id: usize,
        features: DenseMatrix,
        labels: Vec<Option<u8>>,
        continuous: Vec<bool>,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if labels.len() != features.rows() || continuous.len() != features.cols() {
            return Err(Error::dim(
                "silo",
                format!("{}x{} features, {} labels, {} mask", features.rows(), features.cols(), labels.len(), continuous.len()),
            ));
        }
        if features.rows() == 0 {
            return Err(Error::Parameter(format!("silo {silo_id} has no training rows")));
        }
        let labeled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        let unlabeled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_none()).collect();
        if labeled.is_empty() {
            log::warn!("silo {silo_id} has no labeled nodes; supervised loss is zero");
        }
        let graph = silo_graph(&features, cfg.k, cfg)?;
        let model_cfg = cfg.model_for(features.cols());
        let params = ModelParams::init(&model_cfg, &mut rng::stream(seed, &[tag::INIT]));
        let adam = AdamState::new(params.n_values());
        Ok(Self {
            silo_id,
            label_values: labels.iter().map(|l| l.unwrap_or(0)).collect(),
            features,
            labels,
            labeled,
            unlabeled,
            continuous,
            graph,
            global_model: params.clone(),
            params,
            model_cfg,
            adam,
            pseudo: PseudoLabelSet::default(),
            local_protos: PrototypeSet::absent(Provenance::Local),
            global_protos: PrototypeSet::absent(Provenance::Global),
            refinements: 0,
            seed,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiloUpload {
    pub silo_id: u64,
    pub n_k: u64,
    pub params: Vec<f64>,
    pub centroids: [Option<Vec<f64>>; 2],
    pub counts: [u64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBroadcast {
    pub params: Vec<f64>,
    pub centroids: [Option<Vec<f64>>; 2],
    pub counts: [u64; 2],
}

impl GlobalBroadcast {
    pub fn initial(params: &ModelParams) -> Self {
        Self {
            params: params.flatten(),
            centroids: [None, None],
            counts: [0, 0],
        }
    }

    pub fn prototypes(&self) -> PrototypeSet {
        PrototypeSet {
            centroids: self.centroids.clone(),
            counts: self.counts,
            provenance: Provenance::Global,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FederationMessage {
    Upload(SiloUpload),
    Broadcast(GlobalBroadcast),
}

pub const MESSAGE_MAGIC: &[u8; 4] = b"FTGM";
pub const MESSAGE_VERSION: u16 = 1;
const KIND_UPLOAD: u8 = 1;
const KIND_BROADCAST: u8 = 2;

/// One decoded payload field, as seen by the privacy audit.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Count(&'static str, u64),
    Array(&'static str, Vec<f64>),
}

fn put_array(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_count(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_centroids(out: &mut Vec<u8>, centroids: &[Option<Vec<f64>>; 2], counts: &[u64; 2]) {
    for c in 0..2 {
        put_count(out, counts[c]);
        put_array(out, centroids[c].as_deref().unwrap_or(&[]));
    }
}

struct Reader<'a>(model::ByteReader<'a>);

impl Reader<'_> {
    fn count(&mut self, name: &'static str) -> Result<u64> {
        self.0.u64().ok_or_else(|| Error::Protocol(format!("truncated field {name}")))
    }

    fn array(&mut self, name: &'static str) -> Result<Vec<f64>> {
        let n = self.count(name)? as usize;
        if n > (1 << 28) {
            return Err(Error::Protocol(format!("field {name} claims {n} values")));
        }
        (0..n)
            .map(|_| self.0.f64().ok_or_else(|| Error::Protocol(format!("truncated field {name}"))))
            .collect()
    }
}

impl FederationMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MESSAGE_MAGIC);
        out.extend_from_slice(&MESSAGE_VERSION.to_le_bytes());
        match self {
            Self::Upload(u) => {
                out.push(KIND_UPLOAD);
                put_count(&mut out, u.silo_id);
                put_count(&mut out, u.n_k);
                put_array(&mut out, &u.params);
                put_centroids(&mut out, &u.centroids, &u.counts);
            }
            Self::Broadcast(b) => {
                out.push(KIND_BROADCAST);
                put_array(&mut out, &b.params);
                put_centroids(&mut out, &b.centroids, &b.counts);
            }
        }
        out
    }

    /// Header check plus field-by-field parse; rejects trailing bytes.
    pub fn fields(bytes: &[u8]) -> Result<(u8, Vec<Field>)> {
        let mut r = Reader(model::ByteReader::new(bytes));
        if r.0.take(4) != Some(MESSAGE_MAGIC.as_slice()) {
            return Err(Error::Protocol("bad magic".into()));
        }
        let version = r.0.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]));
        if version != Some(MESSAGE_VERSION) {
            return Err(Error::Protocol(format!("unsupported version {version:?}")));
        }
        let kind = *r.0.take(1).ok_or_else(|| Error::Protocol("missing kind".into()))?.first().unwrap();
        let mut fields = Vec::new();
        match kind {
            KIND_UPLOAD => {
                fields.push(Field::Count("silo_id", r.count("silo_id")?));
                fields.push(Field::Count("n_k", r.count("n_k")?));
                fields.push(Field::Array("params", r.array("params")?));
            }
            KIND_BROADCAST => fields.push(Field::Array("params", r.array("params")?)),
            other => return Err(Error::Protocol(format!("unknown message kind {other}"))),
        }
        for (count, centroid) in [("count_0", "centroid_0"), ("count_1", "centroid_1")] {
            fields.push(Field::Count(count, r.count(count)?));
            fields.push(Field::Array(centroid, r.array(centroid)?));
        }
        if !r.0.is_done() {
            return Err(Error::Protocol("trailing bytes after message".into()));
        }
        Ok((kind, fields))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (kind, fields) = Self::fields(bytes)?;
        let mut counts = Vec::new();
        let mut arrays = Vec::new();
        for f in fields {
            match f {
                Field::Count(_, v) => counts.push(v),
                Field::Array(_, a) => arrays.push(a),
            }
        }
        let centroid = |a: &Vec<f64>| (!a.is_empty()).then(|| a.clone());
        Ok(match kind {
            KIND_UPLOAD => Self::Upload(SiloUpload {
                silo_id: counts[0],
                n_k: counts[1],
                params: arrays[0].clone(),
                centroids: [centroid(&arrays[1]), centroid(&arrays[2])],
                counts: [counts[2], counts[3]],
            }),
            _ => Self::Broadcast(GlobalBroadcast {
                params: arrays[0].clone(),
                centroids: [centroid(&arrays[1]), centroid(&arrays[2])],
                counts: [counts[0], counts[1]],
            }),
        })
    }
}

fn sorted_uploads(uploads: &[SiloUpload]) -> Vec<&SiloUpload> {
    let mut v: Vec<&SiloUpload> = uploads.iter().collect();
    v.sort_by_key(|u| u.silo_id);
    v
}

/// Σ_k (n_k/n)·w_k. Uploads are combined in silo order, so the result does
/// not depend on arrival order, and a single upload is returned unchanged.
pub fn fedavg_aggregate(uploads: &[SiloUpload]) -> Result<Vec<f64>> {
    let ordered = sorted_uploads(uploads);
    let first = ordered.first().ok_or_else(|| Error::Protocol("no uploads to aggregate".into()))?;
    let len = first.params.len();
    if let Some(bad) = ordered.iter().find(|u| u.params.len() != len) {
        return Err(Error::Protocol(format!(
            "silo {} uploaded {} parameters, expected {len}",
            bad.silo_id,
            bad.params.len()
        )));
    }
    let total: u64 = ordered.iter().map(|u| u.n_k).sum();
    if total == 0 {
        return Err(Error::Protocol("uploads report zero samples".into()));
    }
    let weight = |u: &SiloUpload| u.n_k as f64 / total as f64;
    let w0 = weight(first);
    let mut acc: Vec<f64> = first.params.iter().map(|v| w0 * v).collect();
    for u in &ordered[1..] {
        let w = weight(u);
        for (a, v) in acc.iter_mut().zip(&u.params) {
            *a += w * v;
        }
    }
    Ok(acc)
}

/// Count-weighted class centroids; classes absent everywhere stay absent.
pub fn aggregate_prototypes(uploads: &[SiloUpload]) -> Result<PrototypeSet> {
    let ordered = sorted_uploads(uploads);
    if ordered.is_empty() {
        return Err(Error::Protocol("no uploads to aggregate".into()));
    }
    let mut out = PrototypeSet::absent(Provenance::Global);
    for c in 0..2 {
        let present: Vec<(&Vec<f64>, u64)> = ordered
            .iter()
            .filter_map(|u| u.centroids[c].as_ref().filter(|_| u.counts[c] > 0).map(|m| (m, u.counts[c])))
            .collect();
        let total: u64 = present.iter().map(|p| p.1).sum();
        out.counts[c] = total;
        let Some(&(first, n0)) = present.first() else { continue };
        if let Some((bad, _)) = present.iter().find(|p| p.0.len() != first.len()) {
            return Err(Error::Protocol(format!("centroid length {} vs {}", bad.len(), first.len())));
        }
        let w0 = n0 as f64 / total as f64;
        let mut acc: Vec<f64> = first.iter().map(|v| w0 * v).collect();
        for &(m, n) in &present[1..] {
            let w = n as f64 / total as f64;
            for (a, v) in acc.iter_mut().zip(m) {
                *a += w * v;
            }
        }
        out.centroids[c] = Some(acc);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiloRoundTelemetry {
    pub silo_id: usize,
    pub round: u32,
    pub tau: f64,
    pub epoch_losses: Vec<LossBreakdown>,
    pub gate: GateStats,
    pub pseudo_labels: usize,
    pub mean_pseudo_weight: f64,
    pub refined: bool,
    pub n_edges: usize,
    pub upload_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTelemetry {
    pub round: u32,
    pub tau: f64,
    pub broadcast_bytes: usize,
    pub silos: Vec<SiloRoundTelemetry>,
}

/// The local objective built on a tape, with the handles needed to step.
pub struct LocalObjective {
    pub total: Var,
    pub report: LossBreakdown,
    pub vars: ParamVars,
    pub bn_batch: Option<(Var, Var)>,
}

/// Builds the full local loss for `silo` at its current parameters.
///
/// `noisy` supplies the augmented features for the consistency term; the
/// same `mode` (and so the same dropout mask) is used for both passes.
pub fn local_objective(
    tape: &mut Tape,
    silo: &SiloState,
    gt: &GraphTensors,
    mode: &ForwardMode,
    noisy: Option<&DenseMatrix>,
    cfg: &TrainConfig,
) -> Result<LocalObjective> {
    let w = &cfg.weights;
    let n = silo.n_nodes();
    let vars = silo.params.register(tape);
    let x = tape.constant(silo.features.clone());
    let out = model::forward_on_tape(tape, x, gt, &vars, &silo.model_cfg, mode)?;
    let mut terms = LossTerms {
        supervised: Some(losses::focal_loss(tape, out.probabilities, &silo.label_values, &silo.labeled, w.focal_alpha, w.focal_gamma)?),
        ..LossTerms::default()
    };
    if w.eta > 0.0 && !silo.pseudo.entries.is_empty() {
        terms.pseudo = Some(losses::pseudo_label_loss(tape, out.probabilities, &silo.pseudo.entries, w.focal_alpha, w.focal_gamma, w.pl_reduction)?);
    }
    if w.mu > 0.0 {
        let probs = tape.value(out.probabilities);
        let predicted: Vec<u8> = (0..n).map(|i| u8::from(probs.get(i, 1) > probs.get(i, 0))).collect();
        terms.smooth = Some(losses::smoothness_loss(tape, out.embeddings, &silo.graph, &predicted)?);
    }
    if w.beta > 0.0 {
        terms.contrast = Some(losses::contrastive_loss(tape, out.embeddings, &silo.label_values, &silo.labeled, w.contrast_tau)?);
    }
    if let Some(noisy) = noisy.filter(|_| w.gamma_aug > 0.0 && !silo.unlabeled.is_empty()) {
        let xn = tape.constant(noisy.clone());
        let out2 = model::forward_on_tape(tape, xn, gt, &vars, &silo.model_cfg, mode)?;
        terms.augment = Some(losses::kl_consistency(tape, out.probabilities, out2.probabilities, &silo.unlabeled)?);
    }
    if w.mu_prox > 0.0 {
        let (local, global): (Vec<_>, Vec<_>) = vars
            .in_order()
            .into_iter()
            .zip(silo.global_model.tensors())
            .filter(|(_, (_, _, trainable))| *trainable)
            .map(|(v, (_, m, _))| (v, m))
            .unzip();
        terms.proximal = Some(losses::proximal_term(tape, &local, &global, w.mu_prox)?);
    }
    let (total, report) = losses::total_loss(tape, &terms, w)?;
    Ok(LocalObjective {
        total,
        report,
        vars,
        bn_batch: out.bn_batch,
    })
}

fn train_epoch(silo: &mut SiloState, gt: &GraphTensors, t: u32, epoch: u32, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let stream_tags = |kind: u64| [kind, silo.silo_id as u64, u64::from(t), u64::from(epoch)];
    let n = silo.n_nodes();
    let mask = dropout_mask(n, silo.model_cfg.hidden, silo.model_cfg.dropout, &mut rng::stream(silo.seed, &stream_tags(tag::DROPOUT)));
    let mode = ForwardMode::Train { dropout_mask: mask };
    let noisy = (cfg.weights.gamma_aug > 0.0 && !silo.unlabeled.is_empty()).then(|| {
        ssl::clinical_augment(&silo.features, &silo.continuous, cfg.weights.noise_sigma, &mut rng::stream(silo.seed, &stream_tags(tag::AUGMENT)))
    });

    let mut tape = Tape::new();
    let obj = local_objective(&mut tape, silo, gt, &mode, noisy.as_ref(), cfg)?;
    if !obj.report.total.is_finite() {
        return Err(Error::Domain {
            op: "local_round",
            detail: format!("silo {} round {t} epoch {epoch}: non-finite loss", silo.silo_id),
        });
    }

    let grads = tape.backward(obj.total)?;
    let mut flat_grad = Vec::with_capacity(silo.params.n_values());
    for v in obj.vars.in_order() {
        flat_grad.extend_from_slice(grads.wrt(&tape, v).as_slice());
    }
    let batch = obj.bn_batch.map(|(m, v)| (tape.value(m).as_slice().to_vec(), tape.value(v).as_slice().to_vec()));
    drop(tape);

    let mut flat = silo.params.flatten();
    adam_step(&mut flat, &flat_grad, &mut silo.adam, &AdamConfig::with_lr(cfg.lr))?;
    silo.params.unflatten(&flat)?;
    silo.params.clamp_temperature();
    if let Some((mean, var)) = batch {
        silo.params.update_running_stats(&mean, &var, silo.model_cfg.bn_momentum);
    }
    Ok(obj.report)
}

/// One silo's part of a round: load w_g, train R epochs, refresh
/// pseudo-labels, optionally refine the graph, and upload.
pub fn local_round(silo: &mut SiloState, broadcast: &GlobalBroadcast, t: u32, cfg: &TrainConfig) -> Result<(SiloUpload, SiloRoundTelemetry)> {
    silo.params.unflatten(&broadcast.params)?;
    silo.global_model = silo.params.clone();
    silo.global_protos = if cfg.share_prototypes {
        broadcast.prototypes()
    } else {
        PrototypeSet::absent(Provenance::Global)
    };
    if cfg.reset_optimizer_each_round {
        silo.adam.reset();
    }
    let tau = cfg.schedule.threshold_at(t);

    let gt = GraphTensors::new(&silo.graph);
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs as usize);
    for epoch in 0..cfg.local_epochs {
        epoch_losses.push(train_epoch(silo, &gt, t, epoch, cfg)?);
    }

    let out = forward_with(&silo.features, &gt, &silo.params, &silo.model_cfg, &ForwardMode::Eval)?;
    let current = ssl::compute_prototypes(&out.embeddings, &silo.labels, &silo.labeled);
    let guide = if cfg.share_prototypes {
        ssl::blend_prototypes(&current, &silo.global_protos, cfg.prototype_blend)?
    } else {
        current
    };
    let mut pseudo = ssl::triple_gate(
        &out.probabilities,
        &out.embeddings,
        &silo.graph,
        &guide,
        tau,
        &silo.unlabeled,
        &silo.labels,
        cfg.gates,
    );
    pseudo.round = t;
    silo.pseudo = pseudo;

    let mut embeddings = out.embeddings;
    let refined = cfg.use_graph && cfg.agr && t % cfg.agr_period == 0;
    if refined {
        silo.graph = silo_graph(&embeddings, cfg.k_agr, cfg)?;
        silo.refinements += 1;
        let gt = GraphTensors::new(&silo.graph);
        embeddings = forward_with(&silo.features, &gt, &silo.params, &silo.model_cfg, &ForwardMode::Eval)?.embeddings;
    }
    silo.local_protos = ssl::compute_prototypes(&embeddings, &silo.labels, &silo.labeled);

    let upload = SiloUpload {
        silo_id: silo.silo_id as u64,
        n_k: silo.n_nodes() as u64,
        params: silo.params.flatten(),
        centroids: silo.local_protos.centroids.clone(),
        counts: silo.local_protos.counts,
    };
    let telemetry = SiloRoundTelemetry {
        silo_id: silo.silo_id,
        round: t,
        tau,
        epoch_losses,
        gate: silo.pseudo.stats,
        pseudo_labels: silo.pseudo.entries.len(),
        mean_pseudo_weight: silo.pseudo.mean_weight(),
        refined,
        n_edges: silo.graph.n_edges(),
        upload_bytes: 0,
    };
    Ok((upload, telemetry))
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub global: ModelParams,
    pub prototypes: PrototypeSet,
    /// Aggregated parameters after each round.
    pub trajectory: Vec<Vec<f64>>,
    pub telemetry: Vec<RoundTelemetry>,
}

/// Sizes the privacy audit needs to recognise per-node payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub param_len: usize,
    pub embedding_dim: usize,
    pub silos: Vec<SiloFootprint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiloFootprint {
    pub silo_id: usize,
    pub n_nodes: usize,
    pub n_features: usize,
    pub n_edges: usize,
}

fn dump(dir: Option<&Path>, name: &str, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

/// Runs T rounds of parallel local training followed by aggregation.
///
/// Every message goes through encode/decode, and is written to `dump_dir`
/// when given.
pub fn run_federation(silos: &mut [SiloState], cfg: &TrainConfig, init: &ModelParams, dump_dir: Option<&Path>) -> Result<FederationOutcome> {
    cfg.validate()?;
    if silos.is_empty() {
        return Err(Error::Protocol("federation needs at least one silo".into()));
    }
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir)?;
        let manifest = DumpManifest {
            param_len: init.n_values(),
            embedding_dim: silos[0].model_cfg.hidden,
            silos: silos
                .iter()
                .map(|s| SiloFootprint {
                    silo_id: s.silo_id,
                    n_nodes: s.n_nodes(),
                    n_features: s.features.cols(),
                    n_edges: s.graph.n_edges(),
                })
                .collect(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }

    let mut broadcast = GlobalBroadcast::initial(init);
    let mut trajectory = Vec::with_capacity(cfg.rounds as usize);
    let mut telemetry = Vec::with_capacity(cfg.rounds as usize);
    for t in 1..=cfg.rounds {
        let wire = FederationMessage::Broadcast(broadcast.clone()).encode();
        dump(dump_dir, &format!("round{t:03}_broadcast.msg"), &wire)?;
        let received = match FederationMessage::decode(&wire)? {
            FederationMessage::Broadcast(b) => b,
            FederationMessage::Upload(_) => return Err(Error::Protocol("expected a broadcast".into())),
        };

        let results: Vec<(SiloUpload, SiloRoundTelemetry)> = silos
            .par_iter_mut()
            .map(|s| local_round(s, &received, t, cfg))
            .collect::<Result<_>>()?;

        let mut uploads = Vec::with_capacity(results.len());
        let mut silo_tel = Vec::with_capacity(results.len());
        for (upload, mut tel) in results {
            let wire = FederationMessage::Upload(upload).encode();
            dump(dump_dir, &format!("round{t:03}_silo{:02}_upload.msg", tel.silo_id), &wire)?;
            tel.upload_bytes = wire.len();
            match FederationMessage::decode(&wire)? {
                FederationMessage::Upload(u) => uploads.push(u),
                FederationMessage::Broadcast(_) => return Err(Error::Protocol("expected an upload".into())),
            }
            silo_tel.push(tel);
        }

        let params = fedavg_aggregate(&uploads)?;
        let protos = aggregate_prototypes(&uploads)?;
        broadcast = GlobalBroadcast {
            params,
            centroids: protos.centroids,
            counts: protos.counts,
        };
        trajectory.push(broadcast.params.clone());
        log::info!(
            "round {t}/{}: tau={:.4} pseudo-labels={:?}",
            cfg.rounds,
            cfg.schedule.threshold_at(t),
            silo_tel.iter().map(|s| s.pseudo_labels).collect::<Vec<_>>()
        );
        telemetry.push(RoundTelemetry {
            round: t,
            tau: cfg.schedule.threshold_at(t),
            broadcast_bytes: wire.len(),
            silos: silo_tel,
        });
    }
    dump(dump_dir, "final_broadcast.msg", &FederationMessage::Broadcast(broadcast.clone()).encode())?;

    let mut global = init.clone();
    global.unflatten(&broadcast.params)?;
    Ok(FederationOutcome {
        global,
        prototypes: broadcast.prototypes(),
        trajectory,
        telemetry,
    })
}

/// Local-only training: each round the silo reloads its own parameters and
/// uses its own prototypes as the "global" ones.
pub fn train_standalone(silo: &mut SiloState, cfg: &TrainConfig, init: &ModelParams) -> Result<FederationOutcome> {
    cfg.validate()?;
    let mut state = GlobalBroadcast::initial(init);
    let mut trajectory = Vec::with_capacity(cfg.rounds as usize);
    let mut telemetry = Vec::with_capacity(cfg.rounds as usize);
    for t in 1..=cfg.rounds {
        let (upload, tel) = local_round(silo, &state, t, cfg)?;
        state = GlobalBroadcast {
            params: upload.params,
            centroids: upload.centroids,
            counts: upload.counts,
        };
        trajectory.push(state.params.clone());
        telemetry.push(RoundTelemetry {
            round: t,
            tau: tel.tau,
            broadcast_bytes: 0,
            silos: vec![tel],
        });
    }
    let mut global = init.clone();
    global.unflatten(&state.params)?;
    Ok(FederationOutcome {
        global,
        prototypes: state.prototypes(),
        trajectory,
        telemetry,
    })
}
