//! Deterministic synthetic corpora for tests and desk-scale experiments.
//!
//! Without a planted aspect, each utterance feature is a noisy class
//! prototype and its label is the nearest prototype, so labels are a linear
//! function of the features. Knowledge items are pure noise.
//!
//! With a planted aspect, utterance features carry only a weak class signal.
//! The planted knowledge item of utterance `i` carries the class of `i` and
//! the class of `i + 1` along two separate directions; every other aspect is
//! drawn independently of all labels. Knowledge of the current utterance can
//! therefore reach `h_i` along either aggregation side, while knowledge of
//! the previous utterance only reaches it through forward infusion.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CausePair, Conversation, CorpusDims, FeatureCorpus, KnowledgeItem, Utterance};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

/// The nine ATOMIC aspects queried from COMET.
pub const ATOMIC_ASPECTS: [&str; 9] = [
    "xIntent", "xAttr", "xNeed", "xWant", "xEffect", "xReact", "oWant", "oEffect", "oReact",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_conversations: usize,
    pub utterances_per_conv: usize,
    pub knowledge_per_utterance: usize,
    pub d_h: usize,
    pub d_k: usize,
    pub n_classes: usize,
    pub planted_aspect: Option<String>,
    pub seed: u64,
    /// Distance of an utterance feature from the origin along its class
    /// prototype; noise is standard normal per coordinate.
    pub utterance_signal: f64,
    /// Strength of each class direction inside a planted knowledge vector.
    pub knowledge_signal: f64,
    /// Length of a per-aspect offset shared by all items of that aspect.
    pub aspect_signal: f64,
    /// Index of the first generated conversation. Corpora with the same seed
    /// share prototypes; disjoint index ranges give disjoint samples.
    pub first_conversation: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_conversations: 8,
            utterances_per_conv: 6,
            knowledge_per_utterance: 3,
            d_h: 32,
            d_k: 24,
            n_classes: 2,
            planted_aspect: None,
            seed: 0,
            utterance_signal: 4.0,
            knowledge_signal: 1.2,
            aspect_signal: 0.0,
            first_conversation: 0,
        }
    }
}

impl SynthSpec {
    /// Separable 2-class ERC fixture at desk dims (32/24).
    pub fn separable(seed: u64) -> Self {
        Self {
            n_conversations: 64,
            utterances_per_conv: 6,
            knowledge_per_utterance: 3,
            seed,
            ..Self::default()
        }
    }

    /// Fixture whose `xWant` knowledge carries the label signal among the
    /// nine ATOMIC aspects. Each aspect has its own signature offset, so an
    /// attention key can tell aspects apart; the planted item of utterance
    /// `i` also encodes the label of `i + 1`.
    pub fn planted(seed: u64) -> Self {
        Self {
            n_conversations: 160,
            utterances_per_conv: 8,
            knowledge_per_utterance: 9,
            planted_aspect: Some("xWant".into()),
            utterance_signal: 0.6,
            knowledge_signal: 2.0,
            aspect_signal: 1.5,
            seed,
            ..Self::default()
        }
    }

    fn aspects(&self) -> Vec<String> {
        let mut aspects: Vec<String> = (0..self.knowledge_per_utterance)
            .map(|j| {
                ATOMIC_ASPECTS
                    .get(j)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("aspect{j}"))
            })
            .collect();
        if let (Some(p), Some(last)) = (&self.planted_aspect, aspects.last_mut()) {
            if !self.is_listed(p) {
                *last = p.clone();
            }
        }
        aspects
    }

    fn is_listed(&self, aspect: &str) -> bool {
        let listed = self.knowledge_per_utterance.min(ATOMIC_ASPECTS.len());
        ATOMIC_ASPECTS[..listed].contains(&aspect)
            || (ATOMIC_ASPECTS.len()..self.knowledge_per_utterance)
                .any(|j| format!("aspect{j}") == aspect)
    }
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<FeatureCorpus> {
    if spec.d_h == 0 || spec.d_k == 0 {
        return Err(Error::InvalidConfig("synthetic dims must be positive".into()));
    }
    if spec.n_conversations == 0 || spec.utterances_per_conv == 0 {
        return Err(Error::InvalidConfig(
            "synthetic conversation and utterance counts must be positive".into(),
        ));
    }
    if spec.n_classes < 2 {
        return Err(Error::InvalidConfig("need at least two classes".into()));
    }

    let mut proto_rng = substream(spec.seed, Stream::Data, 0);
    let utterance_protos: Vec<Vec<f64>> =
        (0..spec.n_classes).map(|_| unit(&mut proto_rng, spec.d_h)).collect();
    let current_protos: Vec<Vec<f64>> =
        (0..spec.n_classes).map(|_| unit(&mut proto_rng, spec.d_k)).collect();
    let next_protos: Vec<Vec<f64>> =
        (0..spec.n_classes).map(|_| unit(&mut proto_rng, spec.d_k)).collect();
    let aspects = spec.aspects();
    let signatures: Vec<Vec<f64>> = if spec.aspect_signal != 0.0 {
        let mut rng = substream(spec.seed, Stream::Data, u64::MAX);
        aspects.iter().map(|_| unit(&mut rng, spec.d_k)).collect()
    } else {
        vec![vec![0.0; spec.d_k]; aspects.len()]
    };
    let n = spec.utterances_per_conv;

    let mut conversations = Vec::with_capacity(spec.n_conversations);
    for c in spec.first_conversation..spec.first_conversation + spec.n_conversations {
        let mut rng = substream(spec.seed, Stream::Data, c as u64 + 1);
        let latent: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.n_classes)).collect();
        let mut utterances = Vec::with_capacity(n);
        for (pos, &y) in latent.iter().enumerate() {
            let mut feature = noise(&mut rng, spec.d_h);
            crate::linalg::axpy(spec.utterance_signal, &utterance_protos[y], &mut feature);
            quantize(&mut feature);
            let emotion = if spec.planted_aspect.is_some() {
                y
            } else {
                nearest(&feature, &utterance_protos, spec.utterance_signal)
            };
            let knowledge = aspects
                .iter()
                .zip(&signatures)
                .map(|(aspect, signature)| {
                    let mut vector = noise(&mut rng, spec.d_k);
                    crate::linalg::axpy(spec.aspect_signal, signature, &mut vector);
                    if spec.planted_aspect.as_deref() == Some(aspect.as_str()) {
                        crate::linalg::axpy(spec.knowledge_signal, &current_protos[y], &mut vector);
                        if let Some(&next) = latent.get(pos + 1) {
                            crate::linalg::axpy(
                                spec.knowledge_signal,
                                &next_protos[next],
                                &mut vector,
                            );
                        }
                    }
                    quantize(&mut vector);
                    KnowledgeItem {
                        aspect: aspect.clone(),
                        vector,
                        source_utterance: pos + 1,
                    }
                })
                .collect();
            utterances.push(Utterance {
                index: pos + 1,
                speaker: if pos % 2 == 0 { "A" } else { "B" }.to_string(),
                feature,
                emotion: Some(emotion),
                knowledge,
            });
        }
        let labels: Vec<usize> = utterances.iter().map(|u| u.emotion.unwrap()).collect();
        let cause_pairs = (1..=n)
            .flat_map(|i| (1..=i).map(move |j| (j, i)))
            .map(|(j, i)| CausePair {
                candidate: j,
                target: i,
                label: labels[j - 1] == labels[i - 1] && i - j <= 1,
            })
            .collect();
        conversations.push(Conversation {
            id: format!("conv{c:04}"),
            utterances,
            cause_pairs: Some(cause_pairs),
        });
    }

    Ok(FeatureCorpus {
        conversations,
        dims: CorpusDims {
            d_h: spec.d_h,
            d_k: spec.d_k,
        },
        emotion_set: (0..spec.n_classes).map(|c| format!("class{c}")).collect(),
        knowledge_source: "synthetic".into(),
    })
}

fn noise(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v = noise(rng, d);
    let norm = crate::linalg::dot(&v, &v).sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Round to f32 so that the on-disk round trip is the identity.
fn quantize(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

/// Nearest scaled prototype; a linear decision rule in the feature.
fn nearest(feature: &[f64], protos: &[Vec<f64>], scale: f64) -> usize {
    let score = |p: &Vec<f64>| {
        scale * crate::linalg::dot(feature, p) - 0.5 * scale * scale * crate::linalg::dot(p, p)
    };
    (0..protos.len())
        .max_by(|&a, &b| score(&protos[a]).total_cmp(&score(&protos[b])).then(b.cmp(&a)))
        .unwrap()
}
