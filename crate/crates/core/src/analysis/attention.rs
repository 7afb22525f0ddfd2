//! Knowledge-filtering attention records and their box statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureCorpus;
use crate::hetgraph::{GraphConfig, NodeType, RelationType};
use crate::mhgt::Mode;
use crate::model::Model;
use crate::{Error, Result};

/// Aspect label given to `uf`/`ub` records.
pub const UTTERANCE_ASPECT: &str = "utterance";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    F,
    B,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::F => "F",
            Side::B => "B",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnRecord {
    pub conversation: String,
    /// 1-based utterance of the aggregation node.
    pub utterance: usize,
    pub aspect: String,
    pub side: Side,
    /// 1-based layer.
    pub layer: usize,
    /// Mean over heads.
    pub weight: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnOptions {
    /// 1-based; defaults to [`default_layer`].
    pub layer: Option<usize>,
    pub per_head: bool,
    /// Also emit the `uf`/`ub` edges that compete in the same softmax.
    pub include_utterance_edges: bool,
    pub graph: GraphConfig,
}

/// The deepest layer whose knowledge attention can influence the output.
///
/// Aggregation nodes only reach the utterance nodes one layer later, so the
/// `kf`/`kb` attention of the final layer never affects a prediction.
pub fn default_layer(layers: usize) -> usize {
    layers.saturating_sub(1).max(1)
}

pub fn collect_attention(model: &Model, corpus: &FeatureCorpus, opts: &AttnOptions) -> Result<Vec<AttnRecord>> {
    model.check_compatible(corpus)?;
    let layers = model.stack.num_layers();
    let layer = opts.layer.unwrap_or_else(|| default_layer(layers));
    if layer == 0 || layer > layers {
        return Err(Error::LayerOutOfRange { layer, layers });
    }
    let heads = model.stack.heads;
    let per_conv: Vec<Result<Vec<AttnRecord>>> = corpus
        .conversations
        .par_iter()
        .map(|conv| {
            let (graph, out) = model.forward(conv, &opts.graph, Mode::Eval)?;
            let trace = &out.traces[layer - 1];
            let mut records = Vec::new();
            for (e, edge) in graph.edges.iter().enumerate() {
                let (side, aspect) = match edge.relation {
                    RelationType::Kf => (Side::F, graph.knowledge[edge.src.index].aspect.clone()),
                    RelationType::Kb => (Side::B, graph.knowledge[edge.src.index].aspect.clone()),
                    RelationType::Uf if opts.include_utterance_edges => (Side::F, UTTERANCE_ASPECT.to_string()),
                    RelationType::Ub if opts.include_utterance_edges => (Side::B, UTTERANCE_ASPECT.to_string()),
                    _ => continue,
                };
                debug_assert!(matches!(edge.dst.kind, NodeType::F | NodeType::B));
                let w: Vec<f64> = (0..heads).map(|i| trace.weight(e, i)).collect();
                records.push(AttnRecord {
                    conversation: conv.id.clone(),
                    utterance: graph.utterance_of(edge.dst),
                    aspect,
                    side,
                    layer,
                    weight: w.iter().sum::<f64>() / heads as f64,
                    head_weights: opts.per_head.then_some(w),
                });
            }
            Ok(records)
        })
        .collect();
    let mut out = Vec::new();
    for part in per_conv {
        out.extend(part?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub aspect: String,
    pub side: Side,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Five-number summary plus 1.5·IQR whiskers of one sample.
pub fn summarize(values: &[f64]) -> Option<[f64; 7]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (fence_lo, fence_hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    // A whisker never reaches inside the box.
    let whisker_low = v.iter().copied().find(|&x| x >= fence_lo).unwrap_or(v[0]).min(q1);
    let whisker_high = v.iter().rev().copied().find(|&x| x <= fence_hi).unwrap_or(v[v.len() - 1]).max(q3);
    Some([v[0], q1, median, q3, v[v.len() - 1], whisker_low, whisker_high])
}

/// One row per `(aspect, side)` group, ordered by aspect then side.
pub fn box_stats(records: &[AttnRecord]) -> Vec<BoxStats> {
    let mut groups: BTreeMap<(&str, Side), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((r.aspect.as_str(), r.side)).or_default().push(r.weight);
    }
    groups
        .into_iter()
        .filter_map(|((aspect, side), values)| {
            let [min, q1, median, q3, max, whisker_low, whisker_high] = summarize(&values)?;
            Some(BoxStats {
                aspect: aspect.to_string(),
                side,
                n: values.len(),
                min,
                q1,
                median,
                q3,
                max,
                whisker_low,
                whisker_high,
            })
        })
        .collect()
}

pub fn attn_stats_csv(stats: &[BoxStats]) -> String {
    let mut out = String::from("aspect,side,n,min,q1,median,q3,max,whisker_low,whisker_high\n");
    for s in stats {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.aspect,
            s.side.name(),
            s.n,
            s.min,
            s.q1,
            s.median,
            s.q3,
            s.max,
            s.whisker_low,
            s.whisker_high
        )
        .unwrap();
    }
    out
}

pub fn write_attn_stats(stats: &[BoxStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, attn_stats_csv(stats)).map_err(|e| Error::io(path, e))
}

/// Per-record export, one column per head when recorded.
pub fn write_attn_records(records: &[AttnRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let heads = records
        .first()
        .and_then(|r| r.head_weights.as_ref())
        .map_or(0, Vec::len);
    let mut out = String::from("conversation,utterance,aspect,side,layer,weight");
    for i in 0..heads {
        write!(out, ",head{}", i + 1).unwrap();
    }
    out.push('\n');
    for r in records {
        write!(out, "{},{},{},{},{},{}", r.conversation, r.utterance, r.aspect, r.side.name(), r.layer, r.weight).unwrap();
        for w in r.head_weights.iter().flatten() {
            write!(out, ",{w}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Aspect whose median tops every other aspect's median on `side`, if any.
pub fn top_aspect(stats: &[BoxStats], side: Side) -> Option<&str> {
    let rows: Vec<&BoxStats> = stats
        .iter()
        .filter(|s| s.side == side && s.aspect != UTTERANCE_ASPECT)
        .collect();
    let best = rows.iter().max_by(|a, b| a.median.total_cmp(&b.median))?;
    let strictly = rows.iter().filter(|s| s.median == best.median).count() == 1;
    strictly.then_some(best.aspect.as_str())
}
