//! ERC and CEE prediction heads with their losses.
//!
//! Log arguments are floored at [`LOG_FLOOR`]; past the floor a loss term is
//! constant and contributes no gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, log_sum_exp, softmax, Matrix};
use crate::params::{join, ParamMut, ParamRef, Parameters};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-12;

/// Softmax classifier over emotion categories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErcHead {
    /// `D_h × |E|`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Logistic scorer of `[h_j ; h_i]` (candidate first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeeHead {
    /// `2·D_h` entries (a `2·D_h × 1` column).
    pub weight: Vec<f64>,
    /// One entry.
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the ERC loss inside the CEE objective.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.8 }
    }
}

impl ErcHead {
    pub fn zeros(d_h: usize, n_classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_h, n_classes),
            bias: vec![0.0; n_classes],
        }
    }

    pub fn init(d_h: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidConfig("ERC needs at least two classes".into()));
        }
        let mut rng = substream(seed, Stream::Init, 1);
        let bound = 1.0 / (d_h as f64).sqrt();
        let mut head = Self::zeros(d_h, n_classes);
        for w in &mut head.weight.data {
            *w = rng.random_range(-bound..bound);
        }
        Ok(head)
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.weight.rows {
            return Err(Error::dims("ERC input", self.weight.rows, h.len()));
        }
        let mut z = self.weight.vec_mul(h);
        crate::linalg::add_assign(&mut z, &self.bias);
        Ok(z)
    }
}

impl CeeHead {
    pub fn zeros(d_h: usize) -> Self {
        Self {
            weight: vec![0.0; 2 * d_h],
            bias: vec![0.0],
        }
    }

    pub fn init(d_h: usize, seed: u64) -> Self {
        let mut rng = substream(seed, Stream::Init, 2);
        let bound = 1.0 / ((2 * d_h) as f64).sqrt();
        Self {
            weight: (0..2 * d_h).map(|_| rng.random_range(-bound..bound)).collect(),
            bias: vec![0.0],
        }
    }

    pub fn logit(&self, h_j: &[f64], h_i: &[f64]) -> Result<f64> {
        let d = self.weight.len() / 2;
        if h_j.len() != d || h_i.len() != d {
            return Err(Error::dims("CEE input", d, h_j.len().max(h_i.len())));
        }
        Ok(dot(&self.weight[..d], h_j) + dot(&self.weight[d..], h_i) + self.bias[0])
    }
}

/// Per-utterance class distributions for rows of `h_final`.
pub fn erc_forward(head: &ErcHead, h_final: &Matrix) -> Result<Vec<Vec<f64>>> {
    (0..h_final.rows)
        .map(|r| head.logits(h_final.row(r)).map(|z| softmax(&z)))
        .collect()
}

/// Mean cross-entropy; `n` is the number of scored items in the batch.
pub fn erc_loss(probs: &[Vec<f64>], labels: &[usize], n: usize) -> Result<f64> {
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let py = *p.get(y).ok_or(Error::LabelOutOfRange {
            conversation: String::new(),
            utterance: 0,
            label: y,
            n_classes: p.len(),
        })?;
        total -= py.max(LOG_FLOOR).ln();
    }
    Ok(total / n as f64)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn cee_forward(head: &CeeHead, h_j: &[f64], h_i: &[f64]) -> Result<f64> {
    head.logit(h_j, h_i).map(sigmoid)
}

/// Two-sided binary cross-entropy over probabilities.
pub fn cee_loss(probs: &[f64], labels: &[bool], n: usize) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &z)| {
            let q = if z { p } else { 1.0 - p };
            -q.max(LOG_FLOOR).ln()
        })
        .sum();
    total / n as f64
}

pub fn joint_loss(bce: f64, erc: f64, cfg: &LossConfig) -> f64 {
    bce + cfg.alpha * erc
}

/// Unnormalized cross-entropy term from logits and its logit gradient.
pub(crate) fn erc_term(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let log_p = logits[label] - lse;
    if log_p < LOG_FLOOR.ln() {
        return (-LOG_FLOOR.ln(), vec![0.0; logits.len()]);
    }
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    (-log_p, grad)
}

/// Unnormalized two-sided BCE term from a logit and its derivative.
pub(crate) fn bce_term(logit: f64, label: bool) -> (f64, f64) {
    // -log σ(x) = softplus(-x); -log(1 - σ(x)) = softplus(x)
    let signed = if label { -logit } else { logit };
    let loss = signed.max(0.0) + (-signed.abs()).exp().ln_1p();
    if loss > -LOG_FLOOR.ln() {
        return (-LOG_FLOOR.ln(), 0.0);
    }
    (loss, sigmoid(logit) - if label { 1.0 } else { 0.0 })
}

impl Parameters for ErcHead {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: join(prefix, "W"),
            shape: vec![self.weight.rows, self.weight.cols],
            data: &self.weight.data,
            decay: true,
        });
        out.push(ParamRef {
            name: join(prefix, "b"),
            shape: vec![self.bias.len()],
            data: &self.bias,
            decay: false,
        });
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push(ParamMut {
            name: join(prefix, "W"),
            shape: vec![self.weight.rows, self.weight.cols],
            data: &mut self.weight.data,
            decay: true,
        });
        out.push(ParamMut {
            name: join(prefix, "b"),
            shape: vec![self.bias.len()],
            data: &mut self.bias,
            decay: false,
        });
    }
}

impl Parameters for CeeHead {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: join(prefix, "W"),
            shape: vec![self.weight.len(), 1],
            data: &self.weight,
            decay: true,
        });
        out.push(ParamRef {
            name: join(prefix, "b"),
            shape: vec![1],
            data: &self.bias,
            decay: false,
        });
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push(ParamMut {
            name: join(prefix, "W"),
            shape: vec![self.weight.len(), 1],
            data: &mut self.weight,
            decay: true,
        });
        out.push(ParamMut {
            name: join(prefix, "b"),
            shape: vec![1],
            data: &mut self.bias,
            decay: false,
        });
    }
}
