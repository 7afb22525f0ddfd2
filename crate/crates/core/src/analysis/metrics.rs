//! F1 family over integer class predictions.

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Scheme {
    /// Per-class F1 averaged with gold support as weights.
    Weighted,
    /// Micro F1 after dropping gold-neutral items; a neutral prediction on
    /// a remaining item is a miss.
    MicroExclNeutral,
    /// Unweighted mean over classes seen in gold or predictions.
    Macro,
    /// Class 1 is positive, class 0 negative; the value is their mean.
    BinaryPosNeg,
}

impl FromStr for F1Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "micro_excl_neutral" => Ok(Self::MicroExclNeutral),
            "macro" => Ok(Self::Macro),
            "binary_posneg" => Ok(Self::BinaryPosNeg),
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub scheme: F1Scheme,
    pub value: f64,
    pub per_class: Vec<ClassScore>,
    pub pos_f1: Option<f64>,
    pub neg_f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn class_score(preds: &[usize], labels: &[usize], class: usize) -> ClassScore {
    let mut tp = 0;
    let mut predicted = 0;
    let mut support = 0;
    for (&p, &g) in preds.iter().zip(labels) {
        tp += usize::from(p == class && g == class);
        predicted += usize::from(p == class);
        support += usize::from(g == class);
    }
    let precision = ratio(tp, predicted);
    let recall = ratio(tp, support);
    ClassScore {
        class,
        precision,
        recall,
        f1: harmonic(precision, recall),
        support,
    }
}

pub fn f1_metrics(preds: &[usize], labels: &[usize], scheme: F1Scheme, neutral_id: Option<usize>) -> Result<F1Report> {
    if preds.len() != labels.len() {
        return Err(Error::dims("predictions vs labels", labels.len(), preds.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let classes: BTreeSet<usize> = preds.iter().chain(labels).copied().collect();
    let per_class: Vec<ClassScore> = classes.iter().map(|&c| class_score(preds, labels, c)).collect();
    let mut report = F1Report {
        scheme,
        value: 0.0,
        per_class,
        pos_f1: None,
        neg_f1: None,
    };
    match scheme {
        F1Scheme::Macro => {
            report.value = report.per_class.iter().map(|c| c.f1).sum::<f64>() / report.per_class.len() as f64;
        }
        F1Scheme::Weighted => {
            let total: usize = report.per_class.iter().map(|c| c.support).sum();
            report.value = report.per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total as f64;
        }
        F1Scheme::BinaryPosNeg => {
            if let Some(bad) = classes.iter().find(|&&c| c > 1) {
                return Err(Error::InvalidConfig(format!("binary F1 needs classes 0 and 1, found {bad}")));
            }
            let pos = class_score(preds, labels, 1).f1;
            let neg = class_score(preds, labels, 0).f1;
            report.pos_f1 = Some(pos);
            report.neg_f1 = Some(neg);
            report.value = (pos + neg) / 2.0;
        }
        F1Scheme::MicroExclNeutral => {
            let neutral = neutral_id.ok_or_else(|| Error::MissingNeutral("micro_excl_neutral".into()))?;
            let mut tp = 0;
            let mut predicted = 0;
            let mut remaining = 0;
            for (&p, &g) in preds.iter().zip(labels) {
                if g == neutral {
                    continue;
                }
                remaining += 1;
                predicted += usize::from(p != neutral);
                tp += usize::from(p == g);
            }
            report.value = harmonic(ratio(tp, predicted), ratio(tp, remaining));
        }
    }
    Ok(report)
}
