use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LayerParams, MhgtStack};
use crate::hetgraph::{BHGraph, NodeFeatures, NodeId, NodeType};
use crate::linalg::{add_assign, dot, gelu, Matrix};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks are drawn from `dropout_seed` and recorded.
    Train { dropout_seed: u64 },
}

/// Everything one layer computed, enough to run the backward pass and the
/// attention analysis.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub heads: usize,
    pub input: NodeFeatures,
    pub key: NodeFeatures,
    /// Empty (0 rows) for `k`, which is never a target.
    pub query: NodeFeatures,
    pub value: NodeFeatures,
    /// Pre-softmax scores, `edge * heads + head`.
    pub scores: Vec<f64>,
    /// Softmax weights before dropout, same layout as `scores`.
    pub weights: Vec<f64>,
    /// Dropout scale (0 or `1/(1-p)`) per attention weight.
    pub attn_keep: Option<Vec<f64>>,
    /// Per edge, the concatenated per-head messages (width `D_target`).
    pub messages: Vec<Vec<f64>>,
    /// Aggregated `v̂` per node; zero rows for nodes without incoming edges.
    pub aggregated: NodeFeatures,
    /// Dropout scale per element of the `T` projection output.
    pub out_keep: Option<NodeFeatures>,
    pub output: NodeFeatures,
}

impl LayerTrace {
    pub fn weight(&self, edge: usize, head: usize) -> f64 {
        self.weights[edge * self.heads + head]
    }
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    /// Final utterance representations `h^L`.
    pub h_final: Matrix,
    pub features: NodeFeatures,
    pub traces: Vec<LayerTrace>,
}

fn check_features(layer: &LayerParams, graph: &BHGraph, features: &NodeFeatures) -> Result<()> {
    for t in NodeType::ALL {
        let f = &features[t.index()];
        let d = layer.node[t.index()].key.weight.rows;
        if f.cols != d {
            return Err(Error::dims(format!("{} feature width", t.name()), d, f.cols));
        }
        if f.rows != graph.nodes.count(t) {
            return Err(Error::dims(
                format!("{} node count", t.name()),
                graph.nodes.count(t),
                f.rows,
            ));
        }
    }
    Ok(())
}

struct Projected {
    key: NodeFeatures,
    query: NodeFeatures,
    value: NodeFeatures,
}

fn project(layer: &LayerParams, features: &NodeFeatures) -> Projected {
    let key = NodeType::ALL.map(|t| layer.node[t.index()].key.apply_rows(&features[t.index()]));
    let value = NodeType::ALL.map(|t| layer.node[t.index()].value.apply_rows(&features[t.index()]));
    let query = NodeType::ALL.map(|t| {
        if t == NodeType::K {
            Matrix::zeros(0, features[t.index()].cols)
        } else {
            layer.node[t.index()].query.apply_rows(&features[t.index()])
        }
    });
    Projected { key, query, value }
}

fn head_slice(row: &[f64], heads: usize, head: usize) -> &[f64] {
    let w = row.len() / heads;
    &row[head * w..(head + 1) * w]
}

fn scores_from(layer: &LayerParams, graph: &BHGraph, p: &Projected) -> Vec<f64> {
    let h = layer.heads;
    let mut scores = Vec::with_capacity(graph.edges.len() * h);
    for edge in &graph.edges {
        let maps = &layer.relation[edge.relation.index()];
        let k_row = p.key[edge.src.kind.index()].row(edge.src.index);
        let q_row = p.query[edge.dst.kind.index()].row(edge.dst.index);
        let scale = (q_row.len() as f64).sqrt();
        for i in 0..h {
            let u = maps.attn[i].vec_mul(head_slice(k_row, h, i));
            scores.push(dot(&u, head_slice(q_row, h, i)) / scale);
        }
    }
    scores
}

/// Per-edge, per-head scores (`edge * heads + head`). The divisor is the
/// square root of the target type's full width.
pub fn attention_scores(layer: &LayerParams, graph: &BHGraph, features: &NodeFeatures) -> Result<Vec<f64>> {
    check_features(layer, graph, features)?;
    Ok(scores_from(layer, graph, &project(layer, features)))
}

pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn keep(&mut self) -> f64 {
        if self.rng.random::<f64>() < self.rate {
            0.0
        } else {
            1.0 / (1.0 - self.rate)
        }
    }
}

pub fn layer_forward(
    layer: &LayerParams,
    graph: &BHGraph,
    features: &NodeFeatures,
    mut dropout: Option<Dropout<'_>>,
) -> Result<(NodeFeatures, LayerTrace)> {
    check_features(layer, graph, features)?;
    let h = layer.heads;
    let p = project(layer, features);
    let scores = scores_from(layer, graph, &p);

    // Softmax per (target, head) over every incoming edge, whatever its relation.
    let mut weights = vec![0.0; scores.len()];
    for t in NodeType::ALL {
        for v in 0..graph.nodes.count(t) {
            let incoming = graph.incoming(NodeId::new(t, v));
            if incoming.is_empty() {
                continue;
            }
            for i in 0..h {
                let max = incoming
                    .iter()
                    .map(|&e| scores[e * h + i])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for &e in incoming {
                    let w = (scores[e * h + i] - max).exp();
                    weights[e * h + i] = w;
                    sum += w;
                }
                for &e in incoming {
                    weights[e * h + i] /= sum;
                }
            }
        }
    }

    let attn_keep = dropout
        .as_mut()
        .map(|d| (0..weights.len()).map(|_| d.keep()).collect::<Vec<_>>());

    let messages: Vec<Vec<f64>> = graph
        .edges
        .iter()
        .map(|edge| {
            let maps = &layer.relation[edge.relation.index()];
            let v_row = p.value[edge.src.kind.index()].row(edge.src.index);
            let mut m = Vec::with_capacity(features[edge.dst.kind.index()].cols);
            for i in 0..h {
                m.extend(maps.msg[i].vec_mul(head_slice(v_row, h, i)));
            }
            m
        })
        .collect();

    let mut aggregated = NodeType::ALL.map(|t| features[t.index()].zeros_like());
    let mut output = features.clone();
    let mut out_keep = dropout.as_ref().map(|_| NodeType::ALL.map(|t| features[t.index()].zeros_like()));
    for t in NodeType::ALL {
        let d = features[t.index()].cols;
        let w = d / h;
        for v in 0..graph.nodes.count(t) {
            let incoming = graph.incoming(NodeId::new(t, v));
            if incoming.is_empty() {
                continue;
            }
            let agg = aggregated[t.index()].row_mut(v);
            for &e in incoming {
                for i in 0..h {
                    let mut a = weights[e * h + i];
                    if let Some(keep) = &attn_keep {
                        a *= keep[e * h + i];
                    }
                    for (o, m) in agg[i * w..(i + 1) * w].iter_mut().zip(&messages[e][i * w..(i + 1) * w]) {
                        *o += a * m;
                    }
                }
            }
            let activated: Vec<f64> = agg.iter().map(|&x| gelu(x)).collect();
            let mut update = layer.node[t.index()].out.apply(&activated);
            if let (Some(d), Some(keep)) = (dropout.as_mut(), out_keep.as_mut()) {
                let keep_row = keep[t.index()].row_mut(v);
                for (u, k) in update.iter_mut().zip(keep_row.iter_mut()) {
                    *k = d.keep();
                    *u *= *k;
                }
            }
            add_assign(output[t.index()].row_mut(v), &update);
        }
    }

    let trace = LayerTrace {
        heads: h,
        input: features.clone(),
        key: p.key,
        query: p.query,
        value: p.value,
        scores,
        weights,
        attn_keep,
        messages,
        aggregated,
        out_keep,
        output: output.clone(),
    };
    Ok((output, trace))
}

/// Run all layers on the graph's stored node features. The graph must have
/// been built with the stack's `f_embed`/`b_embed` as aggregation-node init.
pub fn stack_forward(stack: &MhgtStack, graph: &BHGraph, mode: Mode) -> Result<StackOutput> {
    if graph.nodes.dims != stack.dims {
        for t in NodeType::ALL {
            let (want, got) = (stack.dims.get(t), graph.nodes.dims.get(t));
            if want != got && graph.nodes.count(t) > 0 {
                return Err(Error::dims(format!("graph {} width", t.name()), want, got));
            }
        }
    }
    let mut features = graph.nodes.features.clone();
    // Empty node sets may carry a placeholder width; align them with the stack.
    for t in NodeType::ALL {
        if features[t.index()].rows == 0 {
            features[t.index()] = Matrix::zeros(0, stack.dims.get(t));
        }
    }
    let mut traces = Vec::with_capacity(stack.layers.len());
    for (l, layer) in stack.layers.iter().enumerate() {
        let (next, trace) = match mode {
            Mode::Train { dropout_seed } if stack.dropout > 0.0 => {
                let mut rng = substream(dropout_seed, Stream::Dropout, l as u64);
                let d = Dropout {
                    rate: stack.dropout,
                    rng: &mut rng,
                };
                layer_forward(layer, graph, &features, Some(d))?
            }
            _ => layer_forward(layer, graph, &features, None)?,
        };
        features = next;
        traces.push(trace);
    }
    Ok(StackOutput {
        h_final: features[NodeType::H.index()].clone(),
        features,
        traces,
    })
}
