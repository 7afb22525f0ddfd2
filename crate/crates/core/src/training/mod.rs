//! Optimization loop, evaluation and the gradient checker.
//!
//! All randomness derives from `TrainConfig::seed`: initialization, the
//! train/validation split, per-epoch shuffles and per-step dropout each use
//! their own substream, and batch gradients are reduced in conversation-id
//! order, so a run is bitwise reproducible regardless of worker count.

mod gradcheck;
mod optimizer;
mod schedule;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gradcheck::{gradcheck, relative_error, GradcheckConfig, GradcheckReport};
pub use optimizer::{AdamW, OptimizerConfig};
pub use schedule::{LinearWarmup, ScheduleConfig};

use crate::analysis::{f1_metrics, F1Scheme};
use crate::corpus::{Conversation, FeatureCorpus};
use crate::heads::LossConfig;
use crate::hetgraph::GraphConfig;
use crate::model::{argmax, candidate_pairs, check_task_labels, evaluate_batch, Model, ModelConfig, Objective, PairSelection, Task};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub task: Task,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the ERC term in the CEE objective.
    pub alpha: f64,
    pub pairs: PairSelection,
    /// Share of conversations held out for model selection.
    pub val_fraction: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Erc,
            model: ModelConfig::default(),
            graph: GraphConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: 16,
            epochs: 30,
            alpha: LossConfig::default().alpha,
            pairs: PairSelection::default(),
            val_fraction: 0.1,
            patience: Some(10),
        }
    }
}

impl TrainConfig {
    /// Small-model settings for synthetic fixtures.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.heads = 4;
        cfg.model.layers = 3;
        cfg.batch_size = 8;
        cfg.optimizer.lr_peak = DESK_LR;
        cfg
    }

    pub fn objective(&self, corpus: &FeatureCorpus) -> Objective {
        Objective {
            task: self.task,
            loss: LossConfig { alpha: self.alpha },
            graph: self.graph,
            pairs: self.pairs,
            neutral: corpus.neutral_id(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.schedule.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1]", self.schedule.warmup_ratio));
        }
        if !(self.optimizer.lr_peak.is_finite() && self.optimizer.lr_peak >= 0.0) {
            return bad(format!("lr_peak {} must be finite and non-negative", self.optimizer.lr_peak));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha {} must be finite and non-negative", self.alpha));
        }
        Ok(())
    }
}

/// Peak learning rate of the desk preset.
pub const DESK_LR: f64 = 3e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Mean training objective over the epoch's batches.
    pub loss: f64,
    pub train_accuracy: f64,
    pub train_metric: f64,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best selection metric.
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochRecord>,
    pub split: Split,
}

/// Deterministic train/validation partition of conversation ids.
pub fn split_corpus(corpus: &FeatureCorpus, val_fraction: f64, seed: u64) -> Split {
    let mut ids: Vec<String> = corpus.conversations.iter().map(|c| c.id.clone()).collect();
    ids.sort();
    let n = ids.len();
    let n_val = if n >= 2 && val_fraction > 0.0 {
        ((val_fraction * n as f64).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    ids.shuffle(&mut substream(seed, Stream::Split, 0));
    let mut val = ids.split_off(n - n_val);
    ids.sort();
    val.sort();
    Split { train: ids, val }
}

pub fn train(corpus: &FeatureCorpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = Model::for_corpus(corpus, &cfg.model, cfg.seed)?;
    train_model(model, corpus, cfg)
}

/// Train an existing model.
pub fn train_model(mut model: Model, corpus: &FeatureCorpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.conversations.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    model.check_compatible(corpus)?;
    let all: Vec<&Conversation> = corpus.conversations.iter().collect();
    check_task_labels(&all, cfg.task)?;
    let objective = cfg.objective(corpus);

    let split = split_corpus(corpus, cfg.val_fraction, cfg.seed);
    let lookup = |ids: &[String]| -> Result<Vec<&Conversation>> { ids.iter().map(|id| corpus.conversation(id)).collect() };
    let train_set = lookup(&split.train)?;
    let val_set = lookup(&split.val)?;

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
    let schedule = LinearWarmup::new(
        cfg.optimizer.lr_peak,
        steps_per_epoch * cfg.epochs as u64,
        cfg.schedule.warmup_ratio,
    );
    let mut opt = AdamW::new(&model, cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_metric = f64::NEG_INFINITY;
    let mut step = 0u64;
    let mut lr = 0.0;

    for epoch in 1..=cfg.epochs {
        let mut order = train_set.clone();
        order.shuffle(&mut substream(cfg.seed, Stream::Shuffle, epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let dropout_seed = substream(cfg.seed, Stream::Dropout, step).next_u64();
            let eval = evaluate_batch(&model, batch, &objective, Some(dropout_seed), true)?;
            if !eval.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    loss: eval.loss,
                });
            }
            lr = schedule.lr(step);
            opt.step(&mut model, eval.grads.as_ref().expect("gradients requested"), lr);
            loss_sum += eval.loss;
            batches += 1;
        }

        let train_report = evaluate(&model, &train_set, &objective)?;
        let val_metric = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, &val_set, &objective)?.primary())
        };
        history.push(EpochRecord {
            epoch,
            step,
            lr,
            loss: loss_sum / batches as f64,
            train_accuracy: train_report.accuracy,
            train_metric: train_report.primary(),
            val_metric,
        });

        let selection = val_metric.unwrap_or(train_report.primary());
        if selection > best_metric {
            best_metric = selection;
            best_epoch = epoch;
            best = model.clone();
        } else if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }
    if history.is_empty() {
        best_metric = f64::NAN;
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        best_metric,
        history,
        split,
    })
}

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,step,lr,loss,train_accuracy,train_metric,val_metric\n");
    for r in history {
        let val = r.val_metric.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.step, r.lr, r.loss, r.train_accuracy, r.train_metric, val
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Evaluation metrics of one task. ERC fills the emotion fields, CEE the
/// pair fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub n_items: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighted_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_f1_excl_neutral: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neg_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pos_f1: Option<f64>,
}

impl MetricReport {
    /// The task's headline metric: weighted F1 for ERC, macro F1 for CEE.
    pub fn primary(&self) -> f64 {
        match self.task {
            Task::Erc => self.weighted_f1.unwrap_or(self.macro_f1),
            Task::Cee => self.macro_f1,
        }
    }
}

/// Predictions and gold labels of `objective.task` over `conversations`.
pub fn predictions(model: &Model, conversations: &[&Conversation], objective: &Objective) -> Result<(Vec<usize>, Vec<usize>)> {
    let parts: Vec<Result<(Vec<usize>, Vec<usize>)>> = conversations
        .par_iter()
        .map(|conv| {
            let (_, out) = model.forward(conv, &objective.graph, crate::mhgt::Mode::Eval)?;
            let mut preds = Vec::new();
            let mut gold = Vec::new();
            match objective.task {
                Task::Erc => {
                    for (r, u) in conv.utterances.iter().enumerate() {
                        if let Some(label) = u.emotion {
                            preds.push(argmax(&model.erc.logits(out.h_final.row(r))?));
                            gold.push(label);
                        }
                    }
                }
                Task::Cee => {
                    for (j, i, z) in candidate_pairs(conv, objective.pairs, objective.neutral) {
                        let logit = model.cee.logit(out.h_final.row(j - 1), out.h_final.row(i - 1))?;
                        preds.push(usize::from(logit >= 0.0));
                        gold.push(usize::from(z));
                    }
                }
            }
            Ok((preds, gold))
        })
        .collect();
    let mut preds = Vec::new();
    let mut gold = Vec::new();
    for part in parts {
        let (p, g) = part?;
        preds.extend(p);
        gold.extend(g);
    }
    Ok((preds, gold))
}

pub fn evaluate(model: &Model, conversations: &[&Conversation], objective: &Objective) -> Result<MetricReport> {
    if conversations.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_task_labels(conversations, objective.task)?;
    let (preds, gold) = predictions(model, conversations, objective)?;
    if gold.is_empty() {
        return Err(Error::TaskLabels("no scored items".into()));
    }
    let correct = preds.iter().zip(&gold).filter(|(p, g)| p == g).count();
    let accuracy = correct as f64 / gold.len() as f64;
    let metric = |scheme| f1_metrics(&preds, &gold, scheme, objective.neutral);
    let report = match objective.task {
        Task::Erc => MetricReport {
            task: Task::Erc,
            n_items: gold.len(),
            accuracy,
            macro_f1: metric(F1Scheme::Macro)?.value,
            weighted_f1: Some(metric(F1Scheme::Weighted)?.value),
            micro_f1_excl_neutral: match objective.neutral {
                Some(_) => Some(metric(F1Scheme::MicroExclNeutral)?.value),
                None => None,
            },
            neg_f1: None,
            pos_f1: None,
        },
        Task::Cee => {
            let binary = metric(F1Scheme::BinaryPosNeg)?;
            MetricReport {
                task: Task::Cee,
                n_items: gold.len(),
                accuracy,
                macro_f1: binary.value,
                weighted_f1: None,
                micro_f1_excl_neutral: None,
                neg_f1: binary.neg_f1,
                pos_f1: binary.pos_f1,
            }
        }
    };
    Ok(report)
}

/// Evaluate against a whole corpus.
pub fn evaluate_corpus(model: &Model, corpus: &FeatureCorpus, cfg: &TrainConfig) -> Result<MetricReport> {
    model.check_compatible(corpus)?;
    let all: Vec<&Conversation> = corpus.conversations.iter().collect();
    evaluate(model, &all, &cfg.objective(corpus))
}
