//! Graph encoder: edge attention, two hybrid GCN/SAGE layers and a
//! temperature-scaled linear classifier.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::PatientGraph;
use crate::rng::StreamRng;
use crate::tensor::DenseMatrix;

pub const MIN_TEMPERATURE: f64 = 0.1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"FTGP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// α = sigmoid(learned logit).
    Learned,
    /// α held at a constant; 1 gives a pure GCN, 0 a pure GraphSAGE encoder.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub attn_hidden: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub fusion: Fusion,
    /// When false every edge uses its static weight alone.
    pub edge_attention: bool,
}

impl ModelConfig {
    pub fn new(in_dim: usize) -> Self {
        Self {
            in_dim,
            hidden: 64,
            attn_hidden: 64,
            dropout: 0.4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            fusion: Fusion::Learned,
            edge_attention: true,
        }
    }
}

/// Name, shape and trainability of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

macro_rules! param_fields {
    ($mac:ident) => {
        $mac! {
            att_w1_src: true,
            att_w1_dst: true,
            att_b1: true,
            att_w2: true,
            att_b2: true,
            l1_gcn: true,
            l1_self: true,
            l1_neigh: true,
            l2_gcn: true,
            l2_self: true,
            l2_neigh: true,
            alpha_logit: true,
            bn_gamma: true,
            bn_beta: true,
            bn_mean: false,
            bn_var: false,
            cls_w: true,
            cls_b: true,
            temperature: true,
        }
    };
}

macro_rules! define_params {
    ($($field:ident: $trainable:expr),* $(,)?) => {
        /// All encoder tensors. Batch-norm running statistics are carried but
        /// never receive gradients.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct ModelParams {
            $(pub $field: DenseMatrix,)*
        }

        /// Tape handles for one forward pass.
        #[derive(Debug, Clone, Copy)]
        pub struct ParamVars {
            $(pub $field: Var,)*
        }

        impl ModelParams {
            pub fn tensors(&self) -> Vec<(&'static str, &DenseMatrix, bool)> {
                vec![$((stringify!($field), &self.$field, $trainable),)*]
            }

            fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
                vec![$(&mut self.$field,)*]
            }

            /// Registers trainable tensors as parameters and running stats as constants.
            pub fn register(&self, tape: &mut Tape) -> ParamVars {
                ParamVars {
                    $($field: if $trainable {
                        tape.parameter(self.$field.clone())
                    } else {
                        tape.constant(self.$field.clone())
                    },)*
                }
            }
        }

        impl ParamVars {
            pub fn in_order(&self) -> Vec<Var> {
                vec![$(self.$field,)*]
            }
        }
    };
}

param_fields!(define_params);

fn glorot(rows: usize, cols: usize, rng: &mut StreamRng) -> DenseMatrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    DenseMatrix::from_vec(rows, cols, values).expect("shape matches")
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut StreamRng) -> Self {
        let (d, h, a) = (cfg.in_dim, cfg.hidden, cfg.attn_hidden);
        // the first attention layer acts on [x_i ‖ x_j]; its two halves are stored apart
        let att_w1 = glorot(2 * d, a, rng);
        let (src, dst) = att_w1.as_slice().split_at(d * a);
        Self {
            att_w1_src: DenseMatrix::from_vec(d, a, src.to_vec()).expect("shape"),
            att_w1_dst: DenseMatrix::from_vec(d, a, dst.to_vec()).expect("shape"),
            att_b1: DenseMatrix::zeros(1, a),
            att_w2: glorot(a, 1, rng),
            att_b2: DenseMatrix::zeros(1, 1),
            l1_gcn: glorot(d, h, rng),
            l1_self: glorot(d, h, rng),
            l1_neigh: glorot(d, h, rng),
            l2_gcn: glorot(h, h, rng),
            l2_self: glorot(h, h, rng),
            l2_neigh: glorot(h, h, rng),
            alpha_logit: DenseMatrix::scalar(0.0),
            bn_gamma: DenseMatrix::filled(1, h, 1.0),
            bn_beta: DenseMatrix::zeros(1, h),
            bn_mean: DenseMatrix::zeros(1, h),
            bn_var: DenseMatrix::filled(1, h, 1.0),
            cls_w: glorot(h, 2, rng),
            cls_b: DenseMatrix::zeros(1, 2),
            temperature: DenseMatrix::scalar(1.0),
        }
    }

    pub fn manifest(&self) -> Vec<TensorSpec> {
        self.tensors()
            .into_iter()
            .map(|(name, m, trainable)| TensorSpec {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                trainable,
            })
            .collect()
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.1.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_values());
        for (_, m, _) in self.tensors() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Overwrites every tensor from a flat vector laid out as [`Self::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_values() {
            return Err(Error::Contract(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.n_values()
            )));
        }
        let mut offset = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// 1.0 for entries that receive gradients, 0.0 for running statistics.
    pub fn trainable_mask(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_values());
        for (_, m, trainable) in self.tensors() {
            out.extend(std::iter::repeat_n(if trainable { 1.0 } else { 0.0 }, m.len()));
        }
        out
    }

    pub fn alpha(&self, cfg: &ModelConfig) -> f64 {
        match cfg.fusion {
            Fusion::Learned => crate::autodiff::sigmoid(self.alpha_logit.item()),
            Fusion::Fixed(a) => a,
        }
    }

    pub fn clamp_temperature(&mut self) {
        let t = self.temperature.item().max(MIN_TEMPERATURE);
        self.temperature = DenseMatrix::scalar(t);
    }

    /// Exponential moving average of batch-norm statistics.
    pub fn update_running_stats(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, b) in self.bn_mean.as_mut_slice().iter_mut().zip(batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.bn_var.as_mut_slice().iter_mut().zip(batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let manifest = self.manifest();
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        for spec in &manifest {
            out.extend_from_slice(&(spec.name.len() as u64).to_le_bytes());
            out.extend_from_slice(spec.name.as_bytes());
            out.extend_from_slice(&(spec.rows as u64).to_le_bytes());
            out.extend_from_slice(&(spec.cols as u64).to_le_bytes());
            out.push(u8::from(spec.trainable));
        }
        let flat = self.flatten();
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for v in flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    /// Loads a checkpoint whose manifest must match `cfg`.
    pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |detail: &str| Error::Format {
            path: Some(path.to_path_buf()),
            detail: detail.to_string(),
        };
        let mut r = ByteReader::new(&bytes);
        if r.take(4).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4).ok_or_else(|| bad("truncated header"))?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut params = Self::init(cfg, &mut crate::rng::stream(0, &[]));
        let expected = params.manifest();
        let n = r.u64().ok_or_else(|| bad("truncated manifest"))? as usize;
        if n != expected.len() {
            return Err(bad("manifest length mismatch"));
        }
        for spec in &expected {
            let len = r.u64().ok_or_else(|| bad("truncated manifest"))? as usize;
            let name = r.take(len).ok_or_else(|| bad("truncated manifest"))?;
            let rows = r.u64().ok_or_else(|| bad("truncated manifest"))? as usize;
            let cols = r.u64().ok_or_else(|| bad("truncated manifest"))? as usize;
            let trainable = r.take(1).ok_or_else(|| bad("truncated manifest"))?[0] == 1;
            if name != spec.name.as_bytes() || rows != spec.rows || cols != spec.cols || trainable != spec.trainable {
                return Err(bad(&format!("tensor {} does not match the model configuration", spec.name)));
            }
        }
        let count = r.u64().ok_or_else(|| bad("truncated values"))? as usize;
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            flat.push(r.f64().ok_or_else(|| bad("truncated values"))?);
        }
        if !r.is_done() {
            return Err(bad("trailing bytes"));
        }
        params.unflatten(&flat)?;
        Ok(params)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    pub(crate) fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Index arrays for message passing over a fixed graph.
///
/// Directed edge `e < E` runs i→j for undirected edge e = (i, j); edge `E + e`
/// is its reverse. Aggregation targets are the `src` side.
#[derive(Debug, Clone)]
pub struct GraphTensors {
    pub n_nodes: usize,
    pub n_edges: usize,
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
    forward_half: Rc<[usize]>,
    reverse_half: Rc<[usize]>,
    both_halves: Rc<[usize]>,
    static_w: DenseMatrix,
    inv_degree: DenseMatrix,
}

impl GraphTensors {
    pub fn new(graph: &PatientGraph) -> Self {
        let e = graph.n_edges();
        let mut src = Vec::with_capacity(2 * e);
        let mut dst = Vec::with_capacity(2 * e);
        for &(i, j) in graph.edges() {
            src.push(i);
            dst.push(j);
        }
        for &(i, j) in graph.edges() {
            src.push(j);
            dst.push(i);
        }
        let mut w = graph.static_weights().to_vec();
        w.extend_from_slice(graph.static_weights());
        let inv_degree = (0..graph.n_nodes())
            .map(|i| match graph.degree(i) {
                0 => 0.0,
                d => 1.0 / d as f64,
            })
            .collect();
        Self {
            n_nodes: graph.n_nodes(),
            n_edges: e,
            src: src.into(),
            dst: dst.into(),
            forward_half: (0..e).collect::<Vec<_>>().into(),
            reverse_half: (e..2 * e).collect::<Vec<_>>().into(),
            both_halves: (0..e).chain(0..e).collect::<Vec<_>>().into(),
            static_w: DenseMatrix::column(w),
            inv_degree: DenseMatrix::column(inv_degree),
        }
    }
}

/// Forward-pass behaviour of batch norm and dropout.
#[derive(Debug, Clone)]
pub enum ForwardMode {
    /// Batch statistics; the optional mask multiplies layer-1 activations.
    Train { dropout_mask: Option<DenseMatrix> },
    /// Running statistics, no dropout.
    Eval,
}

/// Inverted-dropout mask with entries 0 or 1/(1−p).
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut StreamRng) -> Option<DenseMatrix> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let values = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Some(DenseMatrix::from_vec(rows, cols, values).expect("shape"))
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    /// Symmetrized attention per undirected edge (E×1), if enabled.
    pub attention: Option<Var>,
    pub embeddings: Var,
    pub logits: Var,
    pub probabilities: Var,
    /// Batch mean and biased variance of layer 1 (train mode only).
    pub bn_batch: Option<(Var, Var)>,
}

/// Eq.-2 style attention: sigmoid(MLP([x_i ‖ x_j])), averaged over both directions.
pub fn edge_attention(tape: &mut Tape, features: Var, gt: &GraphTensors, p: &ParamVars) -> Result<Var> {
    let a_src = tape.matmul(features, p.att_w1_src)?;
    let a_dst = tape.matmul(features, p.att_w1_dst)?;
    let from = tape.gather_rows(a_src, gt.src.clone())?;
    let to = tape.gather_rows(a_dst, gt.dst.clone())?;
    let pre = tape.add(from, to)?;
    let pre = tape.add_row(pre, p.att_b1)?;
    let hidden = tape.relu(pre);
    let out = tape.matmul(hidden, p.att_w2)?;
    let out = tape.add_row(out, p.att_b2)?;
    let directed = tape.sigmoid(out);
    let fwd = tape.gather_rows(directed, gt.forward_half.clone())?;
    let rev = tape.gather_rows(directed, gt.reverse_half.clone())?;
    let sum = tape.add(fwd, rev)?;
    Ok(tape.scale(sum, 0.5))
}

/// Effective directed weights a_ij·w_ij (2E×1).
fn effective_weights(tape: &mut Tape, gt: &GraphTensors, attention: Option<Var>) -> Result<Var> {
    let w = tape.constant(gt.static_w.clone());
    match attention {
        Some(a) => {
            let directed = tape.gather_rows(a, gt.both_halves.clone())?;
            tape.mul(directed, w)
        }
        None => Ok(w),
    }
}

/// Weighted symmetric-normalized propagation with unit self-loops (GCN branch).
fn gcn_propagate(tape: &mut Tape, hw: Var, gt: &GraphTensors, eff: Var) -> Result<Var> {
    let deg = tape.scatter_add_rows(eff, gt.src.clone(), gt.n_nodes)?;
    let deg = tape.add_scalar(deg, 1.0);
    let inv_sqrt = tape.powf(deg, -0.5)?;
    let inv_self = tape.powf(deg, -1.0)?;
    let s_i = tape.gather_rows(inv_sqrt, gt.src.clone())?;
    let s_j = tape.gather_rows(inv_sqrt, gt.dst.clone())?;
    let norm = tape.mul(eff, s_i)?;
    let norm = tape.mul(norm, s_j)?;
    let msgs = tape.gather_rows(hw, gt.dst.clone())?;
    let msgs = tape.mul_col(msgs, norm)?;
    let agg = tape.scatter_add_rows(msgs, gt.src.clone(), gt.n_nodes)?;
    let own = tape.mul_col(hw, inv_self)?;
    tape.add(agg, own)
}

/// Unweighted neighbor mean; isolated nodes get zeros.
fn neighbor_mean(tape: &mut Tape, h: Var, gt: &GraphTensors) -> Result<Var> {
    let msgs = tape.gather_rows(h, gt.dst.clone())?;
    let sum = tape.scatter_add_rows(msgs, gt.src.clone(), gt.n_nodes)?;
    let inv = tape.constant(gt.inv_degree.clone());
    tape.mul_col(sum, inv)
}

fn fusion_alpha(tape: &mut Tape, p: &ParamVars, cfg: &ModelConfig) -> Var {
    match cfg.fusion {
        Fusion::Learned => tape.sigmoid(p.alpha_logit),
        Fusion::Fixed(a) => tape.constant(DenseMatrix::scalar(a)),
    }
}

/// α·GCN(H) + (1−α)·SAGE(H) for layer 1 or 2, before any normalization.
pub fn hybrid_layer(
    tape: &mut Tape,
    h_in: Var,
    gt: &GraphTensors,
    eff: Var,
    p: &ParamVars,
    cfg: &ModelConfig,
    layer_index: usize,
) -> Result<Var> {
    let (w_gcn, w_self, w_neigh) = match layer_index {
        1 => (p.l1_gcn, p.l1_self, p.l1_neigh),
        2 => (p.l2_gcn, p.l2_self, p.l2_neigh),
        other => return Err(Error::Parameter(format!("no encoder layer {other}"))),
    };
    let alpha = fusion_alpha(tape, p, cfg);
    let one_minus = tape.scale(alpha, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let exact = |x: f64| matches!(cfg.fusion, Fusion::Fixed(a) if a == x);

    let gcn = if exact(0.0) {
        None
    } else {
        let hw = tape.matmul(h_in, w_gcn)?;
        Some(gcn_propagate(tape, hw, gt, eff)?)
    };
    let sage = if exact(1.0) {
        None
    } else {
        let own = tape.matmul(h_in, w_self)?;
        let mean = neighbor_mean(tape, h_in, gt)?;
        let neigh = tape.matmul(mean, w_neigh)?;
        Some(tape.add(own, neigh)?)
    };
    match (gcn, sage) {
        (Some(g), None) => Ok(g),
        (None, Some(s)) => Ok(s),
        (Some(g), Some(s)) => {
            let g = tape.scale_by(g, alpha)?;
            let s = tape.scale_by(s, one_minus)?;
            tape.add(g, s)
        }
        (None, None) => unreachable!("α cannot be both 0 and 1"),
    }
}

fn batch_norm(tape: &mut Tape, z: Var, p: &ParamVars, cfg: &ModelConfig, mode: &ForwardMode) -> Result<(Var, Option<(Var, Var)>)> {
    let (mean, var, batch) = match mode {
        ForwardMode::Train { .. } => {
            let mean = tape.mean_rows(z);
            let neg = tape.scale(mean, -1.0);
            let centered = tape.add_row(z, neg)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.mean_rows(sq);
            (mean, var, Some((mean, var)))
        }
        ForwardMode::Eval => (p.bn_mean, p.bn_var, None),
    };
    let neg = tape.scale(mean, -1.0);
    let centered = tape.add_row(z, neg)?;
    let var_eps = tape.add_scalar(var, cfg.bn_eps);
    let inv_std = tape.powf(var_eps, -0.5)?;
    let normed = tape.mul_row(centered, inv_std)?;
    let scaled = tape.mul_row(normed, p.bn_gamma)?;
    Ok((tape.add_row(scaled, p.bn_beta)?, batch))
}

/// Full encoder on the tape.
pub fn forward_on_tape(
    tape: &mut Tape,
    features: Var,
    gt: &GraphTensors,
    p: &ParamVars,
    cfg: &ModelConfig,
    mode: &ForwardMode,
) -> Result<EncoderVars> {
    let attention = if cfg.edge_attention && gt.n_edges > 0 {
        Some(edge_attention(tape, features, gt, p)?)
    } else {
        None
    };
    let eff = effective_weights(tape, gt, attention)?;

    let z1 = hybrid_layer(tape, features, gt, eff, p, cfg, 1)?;
    let (normed, bn_batch) = batch_norm(tape, z1, p, cfg, mode)?;
    let mut h1 = tape.relu(normed);
    if let ForwardMode::Train { dropout_mask: Some(mask) } = mode {
        let m = tape.constant(mask.clone());
        h1 = tape.mul(h1, m)?;
    }
    let embeddings = hybrid_layer(tape, h1, gt, eff, p, cfg, 2)?;

    let raw = tape.matmul(embeddings, p.cls_w)?;
    let inv_t = tape.powf(p.temperature, -1.0)?;
    let scaled = tape.scale_by(raw, inv_t)?;
    let logits = tape.add_row(scaled, p.cls_b)?;
    let probabilities = tape.softmax_rows(logits);
    Ok(EncoderVars {
        attention,
        embeddings,
        logits,
        probabilities,
        bn_batch,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub embeddings: DenseMatrix,
    pub logits: DenseMatrix,
    pub probabilities: DenseMatrix,
}

/// Convenience forward pass outside of training.
pub fn forward(features: &DenseMatrix, graph: &PatientGraph, params: &ModelParams, cfg: &ModelConfig, mode: &ForwardMode) -> Result<EncoderOutput> {
    if features.rows() != graph.n_nodes() {
        return Err(Error::dim(
            "forward",
            format!("{} feature rows for a {}-node graph", features.rows(), graph.n_nodes()),
        ));
    }
    let gt = GraphTensors::new(graph);
    forward_with(features, &gt, params, cfg, mode)
}

pub fn forward_with(features: &DenseMatrix, gt: &GraphTensors, params: &ModelParams, cfg: &ModelConfig, mode: &ForwardMode) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.constant(features.clone());
    let out = forward_on_tape(&mut tape, x, gt, &vars, cfg, mode)?;
    Ok(EncoderOutput {
        embeddings: tape.value(out.embeddings).clone(),
        logits: tape.value(out.logits).clone(),
        probabilities: tape.value(out.probabilities).clone(),
    })
}

/// Symmetrized attention per undirected edge, in `graph.edges()` order.
pub fn attention_values(features: &DenseMatrix, graph: &PatientGraph, params: &ModelParams) -> Result<Vec<f64>> {
    let gt = GraphTensors::new(graph);
    if gt.n_edges == 0 {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.constant(features.clone());
    let a = edge_attention(&mut tape, x, &gt, &vars)?;
    Ok(tape.value(a).as_slice().to_vec())
}
