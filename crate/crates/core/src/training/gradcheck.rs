//! Central-difference check of the analytic gradient of the total loss.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::Conversation;
use crate::model::{evaluate_batch, Model, Objective};
use crate::params::Parameters;
use crate::rng::{substream, Stream};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Above this many scalars, a seeded subsample of this size is checked.
    pub max_coords: usize,
    /// Use training-mode dropout with fixed masks instead of eval mode.
    pub dropout: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-5,
            max_coords: 400,
            dropout: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub total: usize,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic and numeric gradients of `objective` on `conversations`.
/// `seed` drives the coordinate subsample and, if enabled, dropout.
pub fn gradcheck(
    model: &Model,
    conversations: &[&Conversation],
    objective: &Objective,
    seed: u64,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let dropout = cfg.dropout.then_some(seed);
    let analytic = evaluate_batch(model, conversations, objective, dropout, true)?
        .grads
        .expect("gradients requested");
    let analytic = analytic.flatten();

    // (tensor, offset within tensor, flat index)
    let mut coords = Vec::new();
    let mut flat = 0;
    for (t, p) in model.params().iter().enumerate() {
        for i in 0..p.data.len() {
            coords.push((t, i, flat + i));
        }
        flat += p.data.len();
    }
    let total = coords.len();
    if total > cfg.max_coords {
        let mut rng = substream(seed, Stream::Gradcheck, 0);
        let mut picked = sample(&mut rng, total, cfg.max_coords).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|k| coords[k]).collect();
    }

    let names: Vec<String> = model.params().into_iter().map(|p| p.name).collect();
    let mut probe = model.clone();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
        total,
        tolerance: cfg.tolerance,
        pass: true,
    };
    for (t, i, flat) in coords {
        let original = probe.params()[t].data[i];
        let mut loss_at = |x: f64| -> Result<f64> {
            probe.params_mut()[t].data[i] = x;
            Ok(evaluate_batch(&probe, conversations, objective, dropout, false)?.loss)
        };
        let plus = loss_at(original + cfg.step)?;
        let minus = loss_at(original - cfg.step)?;
        probe.params_mut()[t].data[i] = original;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let err = relative_error(analytic[flat], numeric, cfg.floor);
        if err > report.max_rel_err || report.worst_parameter.is_empty() {
            report.max_rel_err = err;
            report.worst_parameter = names[t].clone();
            report.worst_index = i;
            report.analytic = analytic[flat];
            report.numeric = numeric;
        }
    }
    report.pass = report.max_rel_err < cfg.tolerance;
    Ok(report)
}
