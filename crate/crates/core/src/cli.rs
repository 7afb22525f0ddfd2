//! The `bhg` command line.
//!
//! Every subcommand resolves its configuration (defaults, then `--config`
//! JSON, then `--set key.path=value` overrides, then explicit flags), writes
//! it to `resolved_config.json` in the output directory and emits only
//! deterministic result files.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{box_stats, collect_attention, top_aspect, write_attn_records, write_attn_stats, AttnOptions, Side};
use crate::corpus::{load_corpus, save_corpus, synth_corpus, Conversation, SynthSpec};
use crate::hetgraph::{edge_count_oracle, NodeType, RelationType, Variant};
use crate::model::{load_checkpoint, save_checkpoint, Model, Task};
use crate::training::{evaluate_corpus, gradcheck, train, write_history_csv, GradcheckConfig, MetricReport, TrainConfig};
use crate::{Error, Result};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_GRADCHECK: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "bhg", version, about = "Knowledge-infused graph transformer for conversational emotion reasoning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Small model for synthetic fixtures.
    Desk,
    /// Full-scale hyperparameters.
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthKind {
    Default,
    Separable,
    Planted,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON file with (partial) configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `optimizer.lr_peak=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "bhg-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainDefaults {
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub task: Option<Task>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic feature corpus.
    Synth {
        #[arg(long, value_enum, default_value = "default")]
        kind: SynthKind,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build one conversation's graph and report its node and edge counts.
    BuildGraph {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        conv: String,
        #[arg(long, default_value_t = 5)]
        wf: usize,
        #[arg(long, default_value_t = 5)]
        wb: usize,
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
        #[arg(long)]
        dump_graph: Option<PathBuf>,
        #[arg(long, default_value = "bhg-out")]
        out: PathBuf,
    },
    /// Train one model per seed and aggregate their validation metrics.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Additional corpus evaluated with each run's selected model.
        #[arg(long)]
        eval_corpus: Option<PathBuf>,
        #[command(flatten)]
        defaults: TrainDefaults,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        defaults: TrainDefaults,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Defaults to a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to a small synthetic conversation.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Conversation to check; defaults to the first one.
        #[arg(long)]
        conv: Option<String>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[command(flatten)]
        defaults: TrainDefaults,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Knowledge-attention box statistics per aspect and side.
    AttnStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// 1-based layer; defaults to the last layer that feeds the output.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        per_head: bool,
        #[arg(long)]
        include_utterance_edges: bool,
        #[command(flatten)]
        defaults: TrainDefaults,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Full,
    #[value(alias = "no_forward")]
    NoForward,
    #[value(alias = "no_backward")]
    NoBackward,
    #[value(alias = "no_knowledge")]
    NoKnowledge,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoForward => Variant::NoForward,
            VariantArg::NoBackward => Variant::NoBackward,
            VariantArg::NoKnowledge => Variant::NoKnowledge,
        }
    }
}

impl clap::ValueEnum for Task {
    fn value_variants<'a>() -> &'a [Self] {
        &[Task::Erc, Task::Cee]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Task::Erc => "erc",
            Task::Cee => "cee",
        }))
    }
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_io() {
        EXIT_IO
    } else {
        EXIT_VALIDATION
    }
}

/// Set `path` (dot-separated) inside `root` to `raw`, parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("`{}` is not a table", parts[..depth].join("."))))?;
        if depth + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
        if node.is_null() {
            *node = json!({});
        }
    }
    Err(Error::InvalidConfig("empty override key".into()))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Defaults, then the config file, then dotted overrides.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(defaults).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            what: path.display().to_string(),
            message: e.to_string(),
        })?;
        merge(&mut value, patch);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train_config(defaults: &TrainDefaults, cfg: &ConfigArgs) -> Result<TrainConfig> {
    let base = match defaults.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::default(),
    };
    let mut resolved = resolve(base, cfg.config.as_deref(), &cfg.overrides)?;
    if let Some(seed) = cfg.seed {
        resolved.seed = seed;
    }
    if let Some(task) = defaults.task {
        resolved.task = task;
    }
    resolved.validate()?;
    Ok(resolved)
}

/// Run a parsed command and return its exit code.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Synth { kind, cfg } => cmd_synth(kind, &cfg),
        Command::BuildGraph {
            corpus,
            conv,
            wf,
            wb,
            variant,
            dump_graph,
            out,
        } => cmd_build_graph(&corpus, &conv, wf, wb, variant.into(), dump_graph.as_deref(), &out),
        Command::Train {
            corpus,
            seeds,
            eval_corpus,
            defaults,
            cfg,
        } => cmd_train(&corpus, &seeds, eval_corpus.as_deref(), &defaults, &cfg),
        Command::Eval {
            checkpoint,
            corpus,
            defaults,
            cfg,
        } => cmd_eval(&checkpoint, &corpus, &defaults, &cfg),
        Command::Gradcheck {
            checkpoint,
            corpus,
            conv,
            tolerance,
            defaults,
            cfg,
        } => cmd_gradcheck(checkpoint.as_deref(), corpus.as_deref(), conv.as_deref(), tolerance, &defaults, &cfg),
        Command::AttnStats {
            checkpoint,
            corpus,
            layer,
            per_head,
            include_utterance_edges,
            defaults,
            cfg,
        } => cmd_attn_stats(&checkpoint, &corpus, layer, per_head, include_utterance_edges, &defaults, &cfg),
    }
}

fn cmd_synth(kind: SynthKind, cfg: &ConfigArgs) -> Result<u8> {
    let seed = cfg.seed.unwrap_or(0);
    let base = match kind {
        SynthKind::Default => SynthSpec { seed, ..SynthSpec::default() },
        SynthKind::Separable => SynthSpec::separable(seed),
        SynthKind::Planted => SynthSpec::planted(seed),
    };
    let mut spec = resolve(base, cfg.config.as_deref(), &cfg.overrides)?;
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    let corpus = synth_corpus(&spec)?;
    save_corpus(&corpus, &cfg.out)?;
    write_json(&cfg.out.join("resolved_config.json"), &spec)?;
    println!(
        "wrote {} conversations (d_h={}, d_k={}) to {}",
        corpus.conversations.len(),
        corpus.dims.d_h,
        corpus.dims.d_k,
        cfg.out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_build_graph(
    corpus_dir: &Path,
    conv_id: &str,
    wf: usize,
    wb: usize,
    variant: Variant,
    dump: Option<&Path>,
    out: &Path,
) -> Result<u8> {
    let corpus = load_corpus(corpus_dir)?;
    let conv = corpus.conversation(conv_id)?;
    let graph_cfg = crate::hetgraph::GraphConfig {
        forward_window: wf,
        backward_window: wb,
        variant,
    };
    let zeros_f = vec![0.0; corpus.dims.d_k];
    let graph = crate::hetgraph::build_bhg(conv, corpus.dims.d_k, &graph_cfg, &zeros_f, &zeros_f)?;

    prepare_out(out)?;
    write_json(
        &out.join("resolved_config.json"),
        &json!({ "corpus": corpus_dir, "conversation": conv_id, "graph": graph_cfg }),
    )?;
    println!("conversation {conv_id}: {} utterances", conv.len());
    for t in NodeType::ALL {
        println!("nodes {:>3}: {}", t.name(), graph.nodes.count(t));
    }
    let counts = graph.relation_counts();
    for r in RelationType::ALL {
        println!("edges {:>3}: {}", r.name(), counts[r.index()]);
    }
    println!("edges total: {}", graph.edges.len());
    if variant == Variant::Full {
        let oracle = edge_count_oracle(conv.len(), &conv.knowledge_counts(), wf, wb);
        println!("edges expected: {oracle}");
    }
    if let Some(path) = dump {
        write_json(path, &graph.dump())?;
    }
    Ok(EXIT_OK)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_train(
    corpus_dir: &Path,
    seeds: &[u64],
    eval_dir: Option<&Path>,
    defaults: &TrainDefaults,
    cfg: &ConfigArgs,
) -> Result<u8> {
    let base = train_config(defaults, cfg)?;
    let corpus = load_corpus(corpus_dir)?;
    let eval_corpus = eval_dir.map(load_corpus).transpose()?;
    let seeds: Vec<u64> = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };

    prepare_out(&cfg.out)?;
    write_json(
        &cfg.out.join("resolved_config.json"),
        &json!({ "corpus": corpus_dir, "eval_corpus": eval_dir, "seeds": seeds, "train": base }),
    )?;

    let mut val_metrics = Vec::new();
    let mut eval_metrics = Vec::new();
    for &seed in &seeds {
        let run_cfg = TrainConfig { seed, ..base.clone() };
        let outcome = train(&corpus, &run_cfg)?;
        let dir = cfg.out.join(format!("seed{seed}"));
        prepare_out(&dir)?;
        write_json(&dir.join("train.json"), &run_cfg)?;
        write_history_csv(&outcome.history, dir.join("history.csv"))?;
        save_checkpoint(&outcome.best, dir.join("model.bhgc"))?;
        write_json(&dir.join("split.json"), &outcome.split)?;
        let eval_report = eval_corpus
            .as_ref()
            .map(|c| evaluate_corpus(&outcome.best, c, &run_cfg))
            .transpose()?;
        write_json(
            &dir.join("metrics.json"),
            &json!({
                "seed": seed,
                "best_epoch": outcome.best_epoch,
                "selection_metric": outcome.best_metric,
                "epochs_run": outcome.history.len(),
                "eval": eval_report,
            }),
        )?;
        println!(
            "seed {seed}: best epoch {} selection metric {:.4}{}",
            outcome.best_epoch,
            outcome.best_metric,
            eval_report
                .as_ref()
                .map(|r| format!(" eval {:.4}", r.primary()))
                .unwrap_or_default()
        );
        val_metrics.push(outcome.best_metric);
        if let Some(r) = eval_report {
            eval_metrics.push(r.primary());
        }
    }

    let (mean, std) = mean_std(&val_metrics);
    let mut aggregate = json!({
        "task": base.task,
        "seeds": seeds,
        "selection_metric": { "values": val_metrics, "mean": mean, "std": std },
    });
    if !eval_metrics.is_empty() {
        let (m, s) = mean_std(&eval_metrics);
        aggregate["eval_metric"] = json!({ "values": eval_metrics, "mean": m, "std": s });
    }
    write_json(&cfg.out.join("aggregate.json"), &aggregate)?;
    println!("selection metric over {} seed(s): {mean:.4} ± {std:.4}", seeds.len());
    Ok(EXIT_OK)
}

fn cmd_eval(checkpoint: &Path, corpus_dir: &Path, defaults: &TrainDefaults, cfg: &ConfigArgs) -> Result<u8> {
    let run_cfg = train_config(defaults, cfg)?;
    let model = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus_dir)?;
    let report: MetricReport = evaluate_corpus(&model, &corpus, &run_cfg)?;
    prepare_out(&cfg.out)?;
    write_json(
        &cfg.out.join("resolved_config.json"),
        &json!({ "checkpoint": checkpoint, "corpus": corpus_dir, "train": run_cfg }),
    )?;
    write_json(&cfg.out.join("metrics.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(EXIT_OK)
}

/// A single four-utterance conversation with two knowledge items each: a
/// 20-node graph.
pub fn gradcheck_fixture(seed: u64) -> SynthSpec {
    SynthSpec {
        n_conversations: 1,
        utterances_per_conv: 4,
        knowledge_per_utterance: 2,
        seed,
        ..SynthSpec::default()
    }
}

fn cmd_gradcheck(
    checkpoint: Option<&Path>,
    corpus_dir: Option<&Path>,
    conv_id: Option<&str>,
    tolerance: Option<f64>,
    defaults: &TrainDefaults,
    cfg: &ConfigArgs,
) -> Result<u8> {
    let run_cfg = train_config(defaults, cfg)?;
    let corpus = match corpus_dir {
        Some(dir) => load_corpus(dir)?,
        None => synth_corpus(&gradcheck_fixture(run_cfg.seed))?,
    };
    let model = match checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => Model::for_corpus(&corpus, &run_cfg.model, run_cfg.seed)?,
    };
    model.check_compatible(&corpus)?;
    let conv: &Conversation = match conv_id {
        Some(id) => corpus.conversation(id)?,
        None => corpus.conversations.first().ok_or(Error::EmptyCorpus)?,
    };
    let mut gc = GradcheckConfig::default();
    if let Some(t) = tolerance {
        gc.tolerance = t;
    }
    let report = gradcheck(&model, &[conv], &run_cfg.objective(&corpus), run_cfg.seed, &gc)?;

    prepare_out(&cfg.out)?;
    write_json(
        &cfg.out.join("resolved_config.json"),
        &json!({
            "checkpoint": checkpoint,
            "corpus": corpus_dir,
            "conversation": conv.id,
            "gradcheck": gc,
            "train": run_cfg,
        }),
    )?;
    write_json(&cfg.out.join("gradcheck.json"), &report)?;
    println!(
        "max_rel_err {:.3e} at {}[{}] over {} of {} coordinates: {}",
        report.max_rel_err,
        report.worst_parameter,
        report.worst_index,
        report.checked,
        report.total,
        if report.pass { "pass" } else { "FAIL" }
    );
    Ok(if report.pass { EXIT_OK } else { EXIT_GRADCHECK })
}

fn cmd_attn_stats(
    checkpoint: &Path,
    corpus_dir: &Path,
    layer: Option<usize>,
    per_head: bool,
    include_utterance_edges: bool,
    defaults: &TrainDefaults,
    cfg: &ConfigArgs,
) -> Result<u8> {
    let run_cfg = train_config(defaults, cfg)?;
    let model = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus_dir)?;
    let opts = AttnOptions {
        layer,
        per_head,
        include_utterance_edges,
        graph: run_cfg.graph,
    };
    let records = collect_attention(&model, &corpus, &opts)?;
    let stats = box_stats(&records);

    prepare_out(&cfg.out)?;
    write_json(
        &cfg.out.join("resolved_config.json"),
        &json!({
            "checkpoint": checkpoint,
            "corpus": corpus_dir,
            "layer": layer.unwrap_or_else(|| crate::analysis::default_layer(model.stack.num_layers())),
            "per_head": per_head,
            "include_utterance_edges": include_utterance_edges,
            "graph": run_cfg.graph,
        }),
    )?;
    write_attn_stats(&stats, cfg.out.join("attn_stats.csv"))?;
    write_attn_records(&records, cfg.out.join("attn_records.csv"))?;
    for side in [Side::F, Side::B] {
        println!("top aspect ({}): {}", side.name(), top_aspect(&stats, side).unwrap_or("none (tie)"));
    }
    Ok(EXIT_OK)
}
