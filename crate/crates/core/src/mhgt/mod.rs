//! Multi-dimensional heterogeneous graph transformer.
//!
//! Every node type keeps its own width. Per-type projections (`K`, `Q`, `V`,
//! `T`) are square; per-relation attention and message maps are rectangular
//! per head, `D_src/h × D_tgt/h`, which is what lets a 24-wide knowledge node
//! talk to a 32-wide utterance node without a shared projection space.
//!
//! For an edge `n → t` with relation `τ` and head `i`:
//!
//! ```text
//! score   = K_i(n) · W_att[τ,i] · Q_i(t) / sqrt(D_t)
//! α       = softmax over all incoming edges of t, per head
//! message = V_i(n) · W_mes[τ,i]
//! v̂_t     = concat_i Σ_edges α · message
//! v_t'    = T(gelu(v̂_t)) + v_t          (nodes with no incoming edge: v_t' = v_t)
//! ```

mod backward;
mod forward;

pub use backward::{stack_backward, StackGrads};
pub use forward::{attention_scores, layer_forward, stack_forward, LayerTrace, Mode, StackOutput};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hetgraph::{NodeDims, NodeType, RelationType};
use crate::linalg::{Affine, Matrix};
use crate::params::{join, ParamMut, ParamRef, Parameters};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projections {
    pub key: Affine,
    pub query: Affine,
    pub value: Affine,
    pub out: Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationMaps {
    /// One `D_src/h × D_tgt/h` matrix per head.
    pub attn: Vec<Matrix>,
    pub msg: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub heads: usize,
    /// Indexed by [`NodeType::index`].
    pub node: [Projections; 4],
    /// Indexed by [`RelationType::index`].
    pub relation: [RelationMaps; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhgtStack {
    pub layers: Vec<LayerParams>,
    pub heads: usize,
    pub dims: NodeDims,
    /// Shared initial representation of every forward aggregation node.
    pub f_embed: Vec<f64>,
    /// Shared initial representation of every backward aggregation node.
    pub b_embed: Vec<f64>,
    pub dropout: f64,
}

pub fn check_heads(dims: &NodeDims, heads: usize) -> Result<()> {
    for d in dims.as_array() {
        if heads == 0 || d == 0 || d % heads != 0 {
            return Err(Error::HeadsDoNotDivide { heads, dim: d });
        }
    }
    Ok(())
}

/// Seeded initialization.
///
/// Square projections draw from `U(-1/sqrt(D), 1/sqrt(D))`; relation maps
/// start at the rectangular identity plus `U(-0.01, 0.01)` noise; biases are
/// zero; the aggregation embeddings are `N(0, 0.1²)`.
pub fn init_params(dims: NodeDims, heads: usize, layers: usize, seed: u64) -> Result<MhgtStack> {
    check_heads(&dims, heads)?;
    if layers == 0 {
        return Err(Error::InvalidConfig("the MHGT stack needs at least one layer".into()));
    }
    let mut rng = substream(seed, Stream::Init, 0);
    let layers = (0..layers).map(|_| init_layer(&dims, heads, &mut rng)).collect();
    let f_embed = (0..dims.d_f).map(|_| 0.1 * normal(&mut rng)).collect();
    let b_embed = (0..dims.d_b).map(|_| 0.1 * normal(&mut rng)).collect();
    Ok(MhgtStack {
        layers,
        heads,
        dims,
        f_embed,
        b_embed,
        dropout: DEFAULT_DROPOUT,
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

fn init_layer(dims: &NodeDims, heads: usize, rng: &mut ChaCha8Rng) -> LayerParams {
    let node = NodeType::ALL.map(|t| {
        let d = dims.get(t);
        let bound = 1.0 / (d as f64).sqrt();
        let mut affine = || Affine {
            weight: uniform_matrix(d, d, bound, rng),
            bias: vec![0.0; d],
        };
        Projections {
            key: affine(),
            query: affine(),
            value: affine(),
            out: affine(),
        }
    });
    let relation = RelationType::ALL.map(|r| {
        let ds = dims.get(r.source()) / heads;
        let dt = dims.get(r.target()) / heads;
        let mut near_identity = || {
            let mut m = Matrix::identity(ds, dt);
            let noise = uniform_matrix(ds, dt, 0.01, rng);
            m.add_assign(&noise);
            m
        };
        let attn = (0..heads).map(|_| near_identity()).collect();
        let msg = (0..heads).map(|_| near_identity()).collect();
        RelationMaps { attn, msg }
    });
    LayerParams {
        heads,
        node,
        relation,
    }
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            node: self.node.each_ref().map(|p| Projections {
                key: p.key.zeros_like(),
                query: p.query.zeros_like(),
                value: p.value.zeros_like(),
                out: p.out.zeros_like(),
            }),
            relation: self.relation.each_ref().map(|r| RelationMaps {
                attn: r.attn.iter().map(Matrix::zeros_like).collect(),
                msg: r.msg.iter().map(Matrix::zeros_like).collect(),
            }),
        }
    }
}

impl MhgtStack {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            heads: self.heads,
            dims: self.dims,
            f_embed: vec![0.0; self.f_embed.len()],
            b_embed: vec![0.0; self.b_embed.len()],
            dropout: self.dropout,
        }
    }
}

const PROJECTION_NAMES: [&str; 4] = ["key", "query", "value", "out"];

fn projections(p: &Projections) -> [&Affine; 4] {
    [&p.key, &p.query, &p.value, &p.out]
}

fn projections_mut(p: &mut Projections) -> [&mut Affine; 4] {
    [&mut p.key, &mut p.query, &mut p.value, &mut p.out]
}

impl Parameters for LayerParams {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for t in NodeType::ALL {
            for (name, a) in PROJECTION_NAMES.iter().zip(projections(&self.node[t.index()])) {
                let base = join(prefix, &format!("{}.{name}", t.name()));
                out.push(ParamRef {
                    name: format!("{base}.W"),
                    shape: vec![a.weight.rows, a.weight.cols],
                    data: &a.weight.data,
                    decay: true,
                });
                out.push(ParamRef {
                    name: format!("{base}.b"),
                    shape: vec![a.bias.len()],
                    data: &a.bias,
                    decay: false,
                });
            }
        }
        for r in RelationType::ALL {
            let maps = &self.relation[r.index()];
            for (kind, mats) in [("attn", &maps.attn), ("msg", &maps.msg)] {
                for (i, m) in mats.iter().enumerate() {
                    out.push(ParamRef {
                        name: join(prefix, &format!("{}.{kind}.head{i}", r.name())),
                        shape: vec![m.rows, m.cols],
                        data: &m.data,
                        decay: true,
                    });
                }
            }
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (t, node) in NodeType::ALL.into_iter().zip(self.node.iter_mut()) {
            for (name, a) in PROJECTION_NAMES.iter().zip(projections_mut(node)) {
                let base = join(prefix, &format!("{}.{name}", t.name()));
                out.push(ParamMut {
                    name: format!("{base}.W"),
                    shape: vec![a.weight.rows, a.weight.cols],
                    data: &mut a.weight.data,
                    decay: true,
                });
                out.push(ParamMut {
                    name: format!("{base}.b"),
                    shape: vec![a.bias.len()],
                    data: &mut a.bias,
                    decay: false,
                });
            }
        }
        for (r, maps) in RelationType::ALL.into_iter().zip(self.relation.iter_mut()) {
            for (kind, mats) in [("attn", &mut maps.attn), ("msg", &mut maps.msg)] {
                for (i, m) in mats.iter_mut().enumerate() {
                    out.push(ParamMut {
                        name: join(prefix, &format!("{}.{kind}.head{i}", r.name())),
                        shape: vec![m.rows, m.cols],
                        data: &mut m.data,
                        decay: true,
                    });
                }
            }
        }
    }
}

impl Parameters for MhgtStack {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.collect_params(&join(prefix, &format!("layer{l}")), out);
        }
        out.push(ParamRef {
            name: join(prefix, "f_embed"),
            shape: vec![self.f_embed.len()],
            data: &self.f_embed,
            decay: false,
        });
        out.push(ParamRef {
            name: join(prefix, "b_embed"),
            shape: vec![self.b_embed.len()],
            data: &self.b_embed,
            decay: false,
        });
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.collect_params_mut(&join(prefix, &format!("layer{l}")), out);
        }
        out.push(ParamMut {
            name: join(prefix, "f_embed"),
            shape: vec![self.f_embed.len()],
            data: &mut self.f_embed,
            decay: false,
        });
        out.push(ParamMut {
            name: join(prefix, "b_embed"),
            shape: vec![self.b_embed.len()],
            data: &mut self.b_embed,
            decay: false,
        });
    }
}
