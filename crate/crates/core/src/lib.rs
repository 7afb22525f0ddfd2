//! Bipartite heterogeneous graph (BHG) knowledge infusion for conversational
//! emotion reasoning.
//!
//! A conversation's utterance features and the commonsense knowledge vectors
//! attached to each utterance become typed nodes of a bipartite graph. Forward
//! and backward aggregation nodes filter the knowledge of their own utterance
//! and pass it to a window of later/earlier utterances. A stack of
//! multi-dimensional heterogeneous graph transformer (MHGT) layers encodes the
//! graph without ever projecting node types into a shared width, and task heads
//! classify utterance emotions (ERC) or candidate cause utterances (CEE).
//!
//! Module map:
//!
//! - [`corpus`]: data model, on-disk feature container, synthetic fixtures
//! - [`hetgraph`]: node/relation types and graph construction
//! - [`mhgt`]: the transformer layer stack with its exact backward pass
//! - [`heads`]: ERC/CEE prediction heads and losses
//! - [`model`]: the full model, checkpoints and the batched objective
//! - [`training`]: AdamW, warmup schedule, training loop, gradient checking
//! - [`analysis`]: F1 metrics and knowledge-filtering attention statistics
//! - [`cli`]: the `bhg` command-line workflows

pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod heads;
pub mod hetgraph;
pub mod linalg;
pub mod mhgt;
pub mod params;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
