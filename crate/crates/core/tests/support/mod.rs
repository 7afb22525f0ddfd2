//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls into graph construction or the layer code: edge
//! membership is decided from the four connection criteria, and the layer
//! equations are evaluated with plain loops over dense node sets.

#![allow(dead_code)]

use bhg_core::corpus::{CausePair, Conversation, KnowledgeItem, Utterance};
use bhg_core::hetgraph::{NodeDims, NodeType, RelationType, Variant};
use bhg_core::mhgt::{init_params, MhgtStack};
use bhg_core::params::Parameters;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Conversation with `m[i]` knowledge items on utterance `i`, Gaussian-ish
/// features, alternating labels and every pair labelled by adjacency.
pub fn random_conversation(r: &mut impl Rng, id: &str, m: &[usize], d_h: usize, d_k: usize, n_classes: usize) -> Conversation {
    let n = m.len();
    let utterances = (0..n)
        .map(|i| Utterance {
            index: i + 1,
            speaker: format!("s{}", i % 2),
            feature: (0..d_h).map(|_| r.random_range(-1.0..1.0)).collect(),
            emotion: Some(r.random_range(0..n_classes)),
            knowledge: (0..m[i])
                .map(|j| KnowledgeItem {
                    aspect: format!("a{j}"),
                    vector: (0..d_k).map(|_| r.random_range(-1.0..1.0)).collect(),
                    source_utterance: i + 1,
                })
                .collect(),
        })
        .collect();
    let cause_pairs = (1..=n)
        .flat_map(|i| (1..=i).map(move |j| (j, i)))
        .map(|(j, i)| CausePair {
            candidate: j,
            target: i,
            label: r.random_bool(0.4),
        })
        .collect();
    Conversation {
        id: id.to_string(),
        utterances,
        cause_pairs: Some(cause_pairs),
    }
}

/// Stack with every parameter redrawn uniformly, so no map is close to the
/// identity and no bias is zero.
pub fn scrambled_stack(dims: NodeDims, heads: usize, layers: usize, seed: u64, scale: f64) -> MhgtStack {
    let mut stack = init_params(dims, heads, layers, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for p in stack.params_mut() {
        for x in p.data.iter_mut() {
            *x = r.random_range(-scale..scale);
        }
    }
    stack
}

/// Topology facts the oracle needs: utterance count, owner (0-based) of
/// each knowledge item, windows and ablation variant.
#[derive(Clone, Debug)]
pub struct Topology {
    pub n: usize,
    pub k_owner: Vec<usize>,
    pub wf: usize,
    pub wb: usize,
    pub variant: Variant,
}

impl Topology {
    pub fn new(m: &[usize], wf: usize, wb: usize) -> Self {
        let k_owner = m.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect();
        Self {
            n: m.len(),
            k_owner,
            wf,
            wb,
            variant: Variant::Full,
        }
    }

    pub fn count(&self, t: NodeType) -> usize {
        match t {
            NodeType::K => self.k_owner.len(),
            _ => self.n,
        }
    }

    /// Edge membership straight from the connection criteria (0-based).
    pub fn has_edge(&self, rel: RelationType, src: usize, dst: usize) -> bool {
        let forward_side = matches!(rel, RelationType::Kf | RelationType::Uf | RelationType::Fwd);
        let kept = match self.variant {
            Variant::Full => true,
            Variant::NoForward => !forward_side,
            Variant::NoBackward => forward_side,
            Variant::NoKnowledge => false,
        };
        if !kept {
            return false;
        }
        match rel {
            RelationType::Kf | RelationType::Kb => self.k_owner[src] == dst,
            RelationType::Uf | RelationType::Ub => src == dst,
            RelationType::Fwd => src <= dst && dst <= (src + self.wf).min(self.n - 1),
            RelationType::Bwd => src.saturating_sub(self.wb) <= dst && dst <= src,
        }
    }

    pub fn edge_count(&self) -> usize {
        let mut total = 0;
        for rel in RelationType::ALL {
            for s in 0..self.count(rel.source()) {
                for d in 0..self.count(rel.target()) {
                    total += usize::from(self.has_edge(rel, s, d));
                }
            }
        }
        total
    }
}

pub type Dense = [Vec<Vec<f64>>; 4];

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `x W[:, cols] + b[cols]` for the column range of one head.
fn affine_cols(x: &[f64], w: &bhg_core::linalg::Matrix, b: &[f64], cols: std::ops::Range<usize>) -> Vec<f64> {
    cols.map(|c| b[c] + (0..x.len()).map(|r| x[r] * w.data[r * w.cols + c]).sum::<f64>())
        .collect()
}

fn vec_mat(x: &[f64], w: &bhg_core::linalg::Matrix) -> Vec<f64> {
    (0..w.cols)
        .map(|c| (0..w.rows).map(|r| x[r] * w.data[r * w.cols + c]).sum())
        .collect()
}

/// One layer of the update equations evaluated densely. Returns the new
/// features and, per target type/node/head, the attention weights keyed
/// by `(relation, source)`.
pub fn dense_layer(
    stack: &MhgtStack,
    layer: usize,
    topo: &Topology,
    x: &Dense,
) -> (Dense, Vec<((NodeType, usize, usize), Vec<(RelationType, usize, f64)>)>) {
    let p = &stack.layers[layer];
    let h = stack.heads;
    let mut out = x.clone();
    let mut weights = Vec::new();
    for t in NodeType::ALL {
        let d_t = x[t.index()].first().map_or(0, Vec::len);
        if d_t == 0 {
            continue;
        }
        let w_t = d_t / h;
        let proj_t = &p.node[t.index()];
        for v in 0..topo.count(t) {
            let mut agg = vec![0.0; d_t];
            let mut any = false;
            for head in 0..h {
                let q = affine_cols(&x[t.index()][v], &proj_t.query.weight, &proj_t.query.bias, head * w_t..(head + 1) * w_t);
                let mut terms = Vec::new();
                for rel in RelationType::ALL.into_iter().filter(|r| r.target() == t) {
                    let s_type = rel.source();
                    let proj_s = &p.node[s_type.index()];
                    let d_s = stack.dims.get(s_type);
                    let w_s = d_s / h;
                    for s in 0..topo.count(s_type) {
                        if !topo.has_edge(rel, s, v) {
                            continue;
                        }
                        let xs = &x[s_type.index()][s];
                        let k = affine_cols(xs, &proj_s.key.weight, &proj_s.key.bias, head * w_s..(head + 1) * w_s);
                        let kw = vec_mat(&k, &p.relation[rel.index()].attn[head]);
                        let score = kw.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (d_t as f64).sqrt();
                        let val = affine_cols(xs, &proj_s.value.weight, &proj_s.value.bias, head * w_s..(head + 1) * w_s);
                        let msg = vec_mat(&val, &p.relation[rel.index()].msg[head]);
                        terms.push((rel, s, score, msg));
                    }
                }
                if terms.is_empty() {
                    continue;
                }
                any = true;
                let z: f64 = terms.iter().map(|t| t.2.exp()).sum();
                let mut ws = Vec::new();
                for (rel, s, score, msg) in &terms {
                    let a = score.exp() / z;
                    ws.push((*rel, *s, a));
                    for c in 0..w_t {
                        agg[head * w_t + c] += a * msg[c];
                    }
                }
                weights.push(((t, v, head), ws));
            }
            if any {
                let act: Vec<f64> = agg.iter().map(|&a| gelu(a)).collect();
                let upd = affine_cols(&act, &proj_t.out.weight, &proj_t.out.bias, 0..d_t);
                for c in 0..d_t {
                    out[t.index()][v][c] = x[t.index()][v][c] + upd[c];
                }
            }
        }
    }
    (out, weights)
}

/// Initial dense node features of a conversation.
pub fn dense_inputs(conv: &Conversation, stack: &MhgtStack) -> Dense {
    let h: Vec<Vec<f64>> = conv.utterances.iter().map(|u| u.feature.clone()).collect();
    let k: Vec<Vec<f64>> = conv
        .utterances
        .iter()
        .flat_map(|u| u.knowledge.iter().map(|k| k.vector.clone()))
        .collect();
    let n = conv.utterances.len();
    [h, k, vec![stack.f_embed.clone(); n], vec![stack.b_embed.clone(); n]]
}

pub fn dense_stack(stack: &MhgtStack, topo: &Topology, x: &Dense) -> Dense {
    let mut cur = x.clone();
    for l in 0..stack.layers.len() {
        cur = dense_layer(stack, l, topo, &cur).0;
    }
    cur
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
