//! Evaluation metrics and the knowledge-filtering attention analysis.

mod attention;
mod metrics;

pub use attention::{
    attn_stats_csv, box_stats, collect_attention, default_layer, quantile, summarize, top_aspect, write_attn_records,
    write_attn_stats, AttnOptions, AttnRecord, BoxStats, Side, UTTERANCE_ASPECT,
};
pub use metrics::{f1_metrics, ClassScore, F1Report, F1Scheme};
