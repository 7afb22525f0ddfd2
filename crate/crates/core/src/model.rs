//! The full model (MHGT stack + both heads), its checkpoint container and
//! the batched training objective.

use std::fs;
use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, FeatureCorpus};
use crate::heads::{bce_term, erc_term, CeeHead, ErcHead, LossConfig};
use crate::hetgraph::{build_bhg, BHGraph, GraphConfig, NodeDims};
use crate::linalg::{axpy, Matrix};
use crate::mhgt::{init_params, stack_backward, stack_forward, MhgtStack, Mode, StackOutput};
use crate::params::{ParamMut, ParamRef, Parameters};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Erc,
    Cee,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erc" => Ok(Task::Erc),
            "cee" => Ok(Task::Cee),
            other => Err(Error::InvalidConfig(format!("unknown task `{other}`"))),
        }
    }
}

/// Architecture hyperparameters. Aggregation widths default to `D_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub heads: usize,
    pub layers: usize,
    pub d_f: Option<usize>,
    pub d_b: Option<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            layers: 3,
            d_f: None,
            d_b: None,
            dropout: crate::mhgt::DEFAULT_DROPOUT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub stack: MhgtStack,
    pub erc: ErcHead,
    pub cee: CeeHead,
    /// Seeds this model descends from (init seed first).
    pub seed_lineage: Vec<u64>,
}

impl Model {
    pub fn init(dims: NodeDims, n_classes: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut stack = init_params(dims, cfg.heads, cfg.layers, seed)?;
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", cfg.dropout)));
        }
        stack.dropout = cfg.dropout;
        Ok(Self {
            stack,
            erc: ErcHead::init(dims.d_h, n_classes, seed)?,
            cee: CeeHead::init(dims.d_h, seed),
            seed_lineage: vec![seed],
        })
    }

    pub fn for_corpus(corpus: &FeatureCorpus, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let dims = NodeDims {
            d_h: corpus.dims.d_h,
            d_k: corpus.dims.d_k,
            d_f: cfg.d_f.unwrap_or(corpus.dims.d_k),
            d_b: cfg.d_b.unwrap_or(corpus.dims.d_k),
        };
        Self::init(dims, corpus.n_classes(), cfg, seed)
    }

    pub fn dims(&self) -> NodeDims {
        self.stack.dims
    }

    pub fn n_classes(&self) -> usize {
        self.erc.n_classes()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stack: self.stack.zeros_like(),
            erc: ErcHead::zeros(self.erc.weight.rows, self.erc.weight.cols),
            cee: CeeHead::zeros(self.cee.weight.len() / 2),
            seed_lineage: self.seed_lineage.clone(),
        }
    }

    /// Reject corpora whose widths or label set differ from the model's.
    pub fn check_compatible(&self, corpus: &FeatureCorpus) -> Result<()> {
        let dims = self.dims();
        if corpus.dims.d_h != dims.d_h {
            return Err(Error::dims("corpus d_h vs model", dims.d_h, corpus.dims.d_h));
        }
        if corpus.dims.d_k != dims.d_k {
            return Err(Error::dims("corpus d_k vs model", dims.d_k, corpus.dims.d_k));
        }
        if corpus.n_classes() != self.n_classes() {
            return Err(Error::dims("emotion classes vs model", self.n_classes(), corpus.n_classes()));
        }
        Ok(())
    }

    pub fn graph(&self, conversation: &Conversation, cfg: &GraphConfig) -> Result<BHGraph> {
        build_bhg(conversation, self.dims().d_k, cfg, &self.stack.f_embed, &self.stack.b_embed)
    }

    pub fn forward(&self, conversation: &Conversation, cfg: &GraphConfig, mode: Mode) -> Result<(BHGraph, StackOutput)> {
        let graph = self.graph(conversation, cfg)?;
        let out = stack_forward(&self.stack, &graph, mode)?;
        Ok((graph, out))
    }

    pub fn predict_erc(&self, conversation: &Conversation, cfg: &GraphConfig) -> Result<Vec<usize>> {
        let (_, out) = self.forward(conversation, cfg, Mode::Eval)?;
        (0..out.h_final.rows)
            .map(|r| {
                let z = self.erc.logits(out.h_final.row(r))?;
                Ok(argmax(&z))
            })
            .collect()
    }

    /// `ẑ_ji` for each requested `(candidate, target)` pair (1-based).
    pub fn predict_cee(
        &self,
        conversation: &Conversation,
        cfg: &GraphConfig,
        pairs: &[(usize, usize)],
    ) -> Result<Vec<f64>> {
        let (_, out) = self.forward(conversation, cfg, Mode::Eval)?;
        pairs
            .iter()
            .map(|&(j, i)| crate::heads::cee_forward(&self.cee, out.h_final.row(j - 1), out.h_final.row(i - 1)))
            .collect()
    }
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = k;
        }
    }
    best
}

impl Parameters for Model {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.stack.collect_params(&crate::params::join(prefix, "mhgt"), out);
        self.erc.collect_params(&crate::params::join(prefix, "erc"), out);
        self.cee.collect_params(&crate::params::join(prefix, "cee"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.stack.collect_params_mut(&crate::params::join(prefix, "mhgt"), out);
        self.erc.collect_params_mut(&crate::params::join(prefix, "erc"), out);
        self.cee.collect_params_mut(&crate::params::join(prefix, "cee"), out);
    }
}

/// Which `(j, i)` pairs the CEE head scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSelection {
    /// Only targets whose gold emotion is not the neutral class.
    #[default]
    NonNeutral,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub task: Task,
    pub loss: LossConfig,
    pub graph: GraphConfig,
    pub pairs: PairSelection,
    pub neutral: Option<usize>,
}

impl Objective {
    pub fn erc(graph: GraphConfig) -> Self {
        Self {
            task: Task::Erc,
            loss: LossConfig::default(),
            graph,
            pairs: PairSelection::default(),
            neutral: None,
        }
    }

    pub fn cee(graph: GraphConfig, alpha: f64) -> Self {
        Self {
            task: Task::Cee,
            loss: LossConfig { alpha },
            ..Self::erc(graph)
        }
    }

    fn erc_weight(&self) -> f64 {
        match self.task {
            Task::Erc => 1.0,
            Task::Cee => self.loss.alpha,
        }
    }
}

/// Candidate `(j, i, z_ji)` triples with `1 <= j <= i`. Labels come from the
/// stored cause pairs; unlisted pairs are negatives.
pub fn candidate_pairs(conv: &Conversation, selection: PairSelection, neutral: Option<usize>) -> Vec<(usize, usize, bool)> {
    let positives: std::collections::HashSet<(usize, usize)> = conv
        .cause_pairs
        .iter()
        .flatten()
        .filter(|p| p.label)
        .map(|p| (p.candidate, p.target))
        .collect();
    let mut out = Vec::new();
    for u in &conv.utterances {
        let i = u.index;
        if selection == PairSelection::NonNeutral && neutral.is_some() && u.emotion == neutral {
            continue;
        }
        for j in 1..=i {
            out.push((j, i, positives.contains(&(j, i))));
        }
    }
    out
}

/// Check that every conversation carries the labels the task needs.
pub fn check_task_labels(conversations: &[&Conversation], task: Task) -> Result<()> {
    let any_emotion = conversations
        .iter()
        .any(|c| c.utterances.iter().any(|u| u.emotion.is_some()));
    match task {
        Task::Erc if !any_emotion => Err(Error::TaskLabels("ERC needs emotion labels".into())),
        Task::Cee => {
            if let Some(c) = conversations.iter().find(|c| c.cause_pairs.is_none()) {
                return Err(Error::TaskLabels(format!(
                    "CEE needs cause pairs; conversation `{}` has none",
                    c.id
                )));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

#[derive(Clone, Debug)]
pub struct BatchEval {
    /// Total objective (ERC loss, or BCE + α·ERC).
    pub loss: f64,
    pub erc_loss: f64,
    pub bce_loss: f64,
    pub erc_items: usize,
    pub pair_items: usize,
    pub grads: Option<Model>,
}

struct ConvPart {
    erc_sum: f64,
    bce_sum: f64,
    grads: Option<Model>,
}

/// Loss (and optionally gradients) of `objective` over a batch.
///
/// `dropout_seed = None` evaluates in eval mode. Conversations are evaluated
/// in parallel and reduced in conversation-id order.
pub fn evaluate_batch(
    model: &Model,
    conversations: &[&Conversation],
    objective: &Objective,
    dropout_seed: Option<u64>,
    want_grads: bool,
) -> Result<BatchEval> {
    let mut order: Vec<&Conversation> = conversations.to_vec();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let erc_items: usize = order
        .iter()
        .map(|c| c.utterances.iter().filter(|u| u.emotion.is_some()).count())
        .sum();
    let pairs: Vec<Vec<(usize, usize, bool)>> = match objective.task {
        Task::Cee => order
            .iter()
            .map(|c| candidate_pairs(c, objective.pairs, objective.neutral))
            .collect(),
        Task::Erc => vec![Vec::new(); order.len()],
    };
    let pair_items: usize = pairs.iter().map(Vec::len).sum();
    let erc_scale = if erc_items > 0 { objective.erc_weight() / erc_items as f64 } else { 0.0 };
    let bce_scale = if pair_items > 0 { 1.0 / pair_items as f64 } else { 0.0 };

    let parts: Vec<Result<ConvPart>> = order
        .par_iter()
        .enumerate()
        .map(|(pos, conv)| {
            let mode = match dropout_seed {
                Some(seed) => Mode::Train {
                    dropout_seed: substream(seed, Stream::Dropout, pos as u64).next_u64(),
                },
                None => Mode::Eval,
            };
            conversation_part(model, conv, &pairs[pos], objective, mode, erc_scale, bce_scale, want_grads)
        })
        .collect();

    let mut erc_sum = 0.0;
    let mut bce_sum = 0.0;
    let mut grads = want_grads.then(|| model.zeros_like());
    for part in parts {
        let part = part?;
        erc_sum += part.erc_sum;
        bce_sum += part.bce_sum;
        if let (Some(total), Some(g)) = (grads.as_mut(), part.grads.as_ref()) {
            total.add_scaled(g, 1.0);
        }
    }
    let erc_loss = if erc_items > 0 { erc_sum / erc_items as f64 } else { 0.0 };
    let bce_loss = if pair_items > 0 { bce_sum / pair_items as f64 } else { 0.0 };
    let loss = match objective.task {
        Task::Erc => erc_loss,
        Task::Cee => crate::heads::joint_loss(bce_loss, erc_loss, &objective.loss),
    };
    Ok(BatchEval {
        loss,
        erc_loss,
        bce_loss,
        erc_items,
        pair_items,
        grads,
    })
}

#[allow(clippy::too_many_arguments)]
fn conversation_part(
    model: &Model,
    conv: &Conversation,
    pairs: &[(usize, usize, bool)],
    objective: &Objective,
    mode: Mode,
    erc_scale: f64,
    bce_scale: f64,
    want_grads: bool,
) -> Result<ConvPart> {
    let (graph, out) = model.forward(conv, &objective.graph, mode)?;
    let d_h = model.dims().d_h;
    let mut upstream = Matrix::zeros(out.h_final.rows, d_h);
    let mut grads = want_grads.then(|| model.zeros_like());

    let mut erc_sum = 0.0;
    for (r, u) in conv.utterances.iter().enumerate() {
        let Some(label) = u.emotion else { continue };
        let h = out.h_final.row(r);
        let z = model.erc.logits(h)?;
        let (term, dz) = erc_term(&z, label);
        erc_sum += term;
        if let Some(g) = grads.as_mut() {
            if erc_scale == 0.0 {
                continue;
            }
            let dz: Vec<f64> = dz.iter().map(|x| x * erc_scale).collect();
            g.erc.weight.add_outer(h, &dz, 1.0);
            axpy(1.0, &dz, &mut g.erc.bias);
            model.erc.weight.mul_vec_acc(&dz, upstream.row_mut(r));
        }
    }

    let mut bce_sum = 0.0;
    for &(j, i, label) in pairs {
        let (hj, hi) = (out.h_final.row(j - 1), out.h_final.row(i - 1));
        let logit = model.cee.logit(hj, hi)?;
        let (term, dlogit) = bce_term(logit, label);
        bce_sum += term;
        if let Some(g) = grads.as_mut() {
            let dx = dlogit * bce_scale;
            if dx == 0.0 {
                continue;
            }
            axpy(dx, hj, &mut g.cee.weight[..d_h]);
            axpy(dx, hi, &mut g.cee.weight[d_h..]);
            g.cee.bias[0] += dx;
            axpy(dx, &model.cee.weight[..d_h], upstream.row_mut(j - 1));
            axpy(dx, &model.cee.weight[d_h..], upstream.row_mut(i - 1));
        }
    }

    if let Some(g) = grads.as_mut() {
        g.stack = stack_backward(&model.stack, &graph, &out, &upstream)?.params;
    }
    Ok(ConvPart {
        erc_sum,
        bce_sum,
        grads,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint container

const CHECKPOINT_MAGIC: &[u8; 4] = b"BHGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    dims: NodeDims,
    heads: usize,
    layers: usize,
    n_classes: usize,
    dropout: f64,
    seed_lineage: Vec<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the tensor section.
    offset: usize,
    dtype: String,
}

/// Layout: `BHGC`, `u32` version, `u64` header length, JSON header, then
/// the named `f32` tensors at their declared offsets.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for p in model.params() {
        tensors.push(TensorEntry {
            name: p.name,
            shape: p.shape,
            offset: blob.len(),
            dtype: "f32".into(),
        });
        for &x in p.data {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        dims: model.dims(),
        heads: model.stack.heads,
        layers: model.stack.num_layers(),
        n_classes: model.n_classes(),
        dropout: model.stack.dropout,
        seed_lineage: model.seed_lineage.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + json.len() + blob.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&blob);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |message: String| Error::Malformed {
        what: path.display().to_string(),
        message,
    };
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| malformed("header length exceeds file".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| malformed(e.to_string()))?;
    let blob = &bytes[header_end..];

    let cfg = ModelConfig {
        heads: header.heads,
        layers: header.layers,
        d_f: Some(header.dims.d_f),
        d_b: Some(header.dims.d_b),
        dropout: header.dropout,
    };
    let mut model = Model::init(header.dims, header.n_classes, &cfg, 0)?.zeros_like();
    model.stack.dropout = header.dropout;
    model.seed_lineage = header.seed_lineage;

    let mut slots = model.params_mut();
    if slots.len() != header.tensors.len() {
        return Err(malformed(format!(
            "expected {} tensors, header lists {}",
            slots.len(),
            header.tensors.len()
        )));
    }
    for (slot, entry) in slots.iter_mut().zip(&header.tensors) {
        if slot.name != entry.name || slot.shape != entry.shape {
            return Err(malformed(format!(
                "tensor `{}` {:?} does not match expected `{}` {:?}",
                entry.name, entry.shape, slot.name, slot.shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::UnknownDtype(entry.dtype.clone()));
        }
        let end = entry.offset + 4 * slot.data.len();
        if end > blob.len() {
            return Err(Error::dims(format!("tensor `{}` bytes", entry.name), end, blob.len()));
        }
        for (x, b) in slot.data.iter_mut().zip(blob[entry.offset..end].chunks_exact(4)) {
            *x = f32::from_le_bytes(b.try_into().unwrap()) as f64;
        }
    }
    drop(slots);
    Ok(model)
}
