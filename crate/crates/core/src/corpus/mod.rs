//! Conversation/knowledge data model.
//!
//! Vectors are held as `f64` in memory and stored as little-endian `f32` on
//! disk (see [`container`]). Utterance indices are 1-based everywhere.

mod container;
mod synth;

pub use container::{load_corpus, save_corpus, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use synth::{synth_corpus, SynthSpec, ATOMIC_ASPECTS};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeItem {
    /// COMET aspect (e.g. `xWant`) or ConceptNet relation (e.g. `IsA`).
    pub aspect: String,
    pub vector: Vec<f64>,
    /// 1-based index of the utterance the knowledge was extracted from.
    pub source_utterance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub feature: Vec<f64>,
    pub emotion: Option<usize>,
    pub knowledge: Vec<KnowledgeItem>,
}

/// `(candidate j, target i, z_ji)` with `1 <= j <= i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CausePair {
    pub candidate: usize,
    pub target: usize,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub cause_pairs: Option<Vec<CausePair>>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Knowledge counts `m_i` in utterance order.
    pub fn knowledge_counts(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.knowledge.len()).collect()
    }

    pub fn validate(&self, dims: CorpusDims, n_classes: usize) -> Result<()> {
        let n = self.utterances.len();
        for (pos, u) in self.utterances.iter().enumerate() {
            if u.index != pos + 1 {
                return Err(Error::NonContiguousUtterances {
                    conversation: self.id.clone(),
                    detail: format!("position {} holds index {}", pos + 1, u.index),
                });
            }
            if u.feature.len() != dims.d_h {
                return Err(Error::dims(
                    format!("conversation `{}` utterance {} feature", self.id, u.index),
                    dims.d_h,
                    u.feature.len(),
                ));
            }
            if let Some(label) = u.emotion {
                if label >= n_classes {
                    return Err(Error::LabelOutOfRange {
                        conversation: self.id.clone(),
                        utterance: u.index,
                        label,
                        n_classes,
                    });
                }
            }
            for k in &u.knowledge {
                if k.aspect.is_empty() {
                    return Err(Error::EmptyAspect {
                        conversation: self.id.clone(),
                        utterance: u.index,
                    });
                }
                if k.vector.len() != dims.d_k {
                    return Err(Error::dims(
                        format!("conversation `{}` utterance {} knowledge", self.id, u.index),
                        dims.d_k,
                        k.vector.len(),
                    ));
                }
                if k.source_utterance != u.index {
                    return Err(Error::NonContiguousUtterances {
                        conversation: self.id.clone(),
                        detail: format!(
                            "knowledge of utterance {} claims source {}",
                            u.index, k.source_utterance
                        ),
                    });
                }
            }
        }
        for p in self.cause_pairs.iter().flatten() {
            if p.candidate < 1 || p.candidate > p.target || p.target > n {
                return Err(Error::InvalidCausePair {
                    conversation: self.id.clone(),
                    candidate: p.candidate,
                    target: p.target,
                    n,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDims {
    pub d_h: usize,
    pub d_k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCorpus {
    pub conversations: Vec<Conversation>,
    pub dims: CorpusDims,
    pub emotion_set: Vec<String>,
    pub knowledge_source: String,
}

impl FeatureCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.dims.d_h == 0 || self.dims.d_k == 0 {
            return Err(Error::InvalidConfig("corpus dimensions must be positive".into()));
        }
        for c in &self.conversations {
            c.validate(self.dims, self.emotion_set.len())?;
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.emotion_set.len()
    }

    /// Index of the class named `neutral` (case-insensitive), if any.
    pub fn neutral_id(&self) -> Option<usize> {
        self.emotion_set
            .iter()
            .position(|e| e.eq_ignore_ascii_case("neutral"))
    }

    pub fn conversation(&self, id: &str) -> Result<&Conversation> {
        self.conversations
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::UnknownConversation(id.to_string()))
    }
}
