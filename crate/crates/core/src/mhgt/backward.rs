//! Reverse-mode differentiation of a traced stack evaluation.
//!
//! Gradients are accumulated in edge-list order, so results are bitwise
//! reproducible.

use super::{LayerParams, LayerTrace, MhgtStack, StackOutput};
use crate::hetgraph::{BHGraph, NodeFeatures, NodeId, NodeType};
use crate::linalg::{dot, gelu, gelu_grad, Matrix};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct StackGrads {
    /// Same shape as the stack; `f_embed`/`b_embed` hold the gradient summed
    /// over every aggregation node instance.
    pub params: MhgtStack,
    /// Gradient with respect to the layer-0 node features.
    pub inputs: NodeFeatures,
}

/// Back-propagate `upstream_h` (one row per utterance, `∂loss/∂h^L`).
pub fn stack_backward(
    stack: &MhgtStack,
    graph: &BHGraph,
    output: &StackOutput,
    upstream_h: &Matrix,
) -> Result<StackGrads> {
    if output.traces.len() != stack.layers.len() {
        return Err(Error::dims("trace layers", stack.layers.len(), output.traces.len()));
    }
    let n = graph.n_utterances();
    if upstream_h.rows != n || upstream_h.cols != stack.dims.d_h {
        return Err(Error::dims("upstream gradient rows", n, upstream_h.rows));
    }
    let mut grads = stack.zeros_like();
    let mut d_features: NodeFeatures = NodeType::ALL.map(|t| output.features[t.index()].zeros_like());
    d_features[NodeType::H.index()] = upstream_h.clone();

    for l in (0..stack.layers.len()).rev() {
        d_features = layer_backward(
            &stack.layers[l],
            graph,
            &output.traces[l],
            &d_features,
            &mut grads.layers[l],
        );
    }

    for (t, embed) in [(NodeType::F, &mut grads.f_embed), (NodeType::B, &mut grads.b_embed)] {
        let d = &d_features[t.index()];
        for r in 0..d.rows {
            crate::linalg::add_assign(embed, d.row(r));
        }
    }
    Ok(StackGrads {
        params: grads,
        inputs: d_features,
    })
}

fn layer_backward(
    layer: &LayerParams,
    graph: &BHGraph,
    trace: &LayerTrace,
    d_out: &NodeFeatures,
    grad: &mut LayerParams,
) -> NodeFeatures {
    let h = layer.heads;
    // Residual path; nodes without incoming edges are the identity.
    let mut d_in = d_out.clone();
    let mut d_key = NodeType::ALL.map(|t| trace.key[t.index()].zeros_like());
    let mut d_query = NodeType::ALL.map(|t| trace.query[t.index()].zeros_like());
    let mut d_value = NodeType::ALL.map(|t| trace.value[t.index()].zeros_like());

    for t in NodeType::ALL {
        let ti = t.index();
        let d = trace.input[ti].cols;
        let w = d / h;
        let scale = (d as f64).sqrt();
        for v in 0..graph.nodes.count(t) {
            let incoming = graph.incoming(NodeId::new(t, v));
            if incoming.is_empty() {
                continue;
            }
            // update = T(gelu(agg)) ⊙ keep
            let mut d_update = d_out[ti].row(v).to_vec();
            if let Some(keep) = &trace.out_keep {
                for (g, k) in d_update.iter_mut().zip(keep[ti].row(v)) {
                    *g *= k;
                }
            }
            let agg = trace.aggregated[ti].row(v);
            let activated: Vec<f64> = agg.iter().map(|&x| gelu(x)).collect();
            let mut d_act = vec![0.0; d];
            layer.node[ti].out.backward_row(&activated, &d_update, &mut grad.node[ti].out, &mut d_act);
            let d_agg: Vec<f64> = d_act.iter().zip(agg).map(|(g, &x)| g * gelu_grad(x)).collect();

            let q_row = trace.query[ti].row(v);
            for i in 0..h {
                let d_agg_i = &d_agg[i * w..(i + 1) * w];
                // ∂/∂α for each incoming edge, through dropout.
                let d_alpha: Vec<f64> = incoming
                    .iter()
                    .map(|&e| {
                        let keep = trace.attn_keep.as_ref().map_or(1.0, |k| k[e * h + i]);
                        keep * dot(d_agg_i, &trace.messages[e][i * w..(i + 1) * w])
                    })
                    .collect();
                let weighted: f64 = incoming
                    .iter()
                    .zip(&d_alpha)
                    .map(|(&e, g)| trace.weights[e * h + i] * g)
                    .sum();
                let q_i = &q_row[i * w..(i + 1) * w];
                for (&e, &g_alpha) in incoming.iter().zip(&d_alpha) {
                    let edge = &graph.edges[e];
                    let si = edge.src.kind.index();
                    let ri = edge.relation.index();
                    let alpha = trace.weights[e * h + i];
                    let keep = trace.attn_keep.as_ref().map_or(1.0, |k| k[e * h + i]);
                    let ws = trace.input[si].cols / h;

                    // message = V_i(src) · W_mes
                    let d_msg: Vec<f64> = d_agg_i.iter().map(|g| g * alpha * keep).collect();
                    let v_i = &trace.value[si].row(edge.src.index)[i * ws..(i + 1) * ws];
                    grad.relation[ri].msg[i].add_outer(v_i, &d_msg, 1.0);
                    layer.relation[ri].msg[i]
                        .mul_vec_acc(&d_msg, &mut d_value[si].row_mut(edge.src.index)[i * ws..(i + 1) * ws]);

                    // score = K_i(src) · W_att · Q_i(tgt) / sqrt(D_tgt)
                    let d_score = alpha * (g_alpha - weighted);
                    if d_score == 0.0 {
                        continue;
                    }
                    let k_i = &trace.key[si].row(edge.src.index)[i * ws..(i + 1) * ws];
                    let attn = &layer.relation[ri].attn[i];
                    let u = attn.vec_mul(k_i);
                    let c = d_score / scale;
                    for (dq, uj) in d_query[ti].row_mut(v)[i * w..(i + 1) * w].iter_mut().zip(&u) {
                        *dq += c * uj;
                    }
                    let d_u: Vec<f64> = q_i.iter().map(|q| c * q).collect();
                    grad.relation[ri].attn[i].add_outer(k_i, &d_u, 1.0);
                    attn.mul_vec_acc(&d_u, &mut d_key[si].row_mut(edge.src.index)[i * ws..(i + 1) * ws]);
                }
            }
        }
    }

    for t in NodeType::ALL {
        let ti = t.index();
        let x = &trace.input[ti];
        let p = &layer.node[ti];
        let g = &mut grad.node[ti];
        for r in 0..x.rows {
            let dx = d_in[ti].row_mut(r);
            p.key.backward_row(x.row(r), d_key[ti].row(r), &mut g.key, dx);
            p.value.backward_row(x.row(r), d_value[ti].row(r), &mut g.value, dx);
            if t != NodeType::K {
                p.query.backward_row(x.row(r), d_query[ti].row(r), &mut g.query, dx);
            }
        }
    }
    d_in
}
