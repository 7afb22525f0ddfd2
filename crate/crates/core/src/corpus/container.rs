//! Directory container: `manifest.json` + `tensors.bin`.
//!
//! `tensors.bin` starts with the magic `BHGF` and a little-endian `u32`
//! version, followed by row-major little-endian `f32` blocks. Manifest offsets
//! are absolute byte offsets into `tensors.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CausePair, Conversation, CorpusDims, FeatureCorpus, KnowledgeItem, Utterance};
use crate::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"BHGF";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 8;
const MANIFEST_FILE: &str = "manifest.json";
const TENSOR_FILE: &str = "tensors.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dims: ManifestDims,
    emotion_set: Vec<String>,
    knowledge_source: String,
    conversations: Vec<ManifestConversation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDims {
    d_h: usize,
    d_k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestConversation {
    id: String,
    n_utterances: usize,
    speakers: Vec<String>,
    emotion_labels: Option<Vec<Option<usize>>>,
    cause_pairs: Option<Vec<[usize; 3]>>,
    utterance_tensor: TensorRef,
    knowledge: Vec<ManifestKnowledge>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestKnowledge {
    utterance: usize,
    aspect: String,
    tensor: TensorRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRef {
    offset: usize,
    rows: usize,
    cols: usize,
    dtype: String,
}

pub fn save_corpus(corpus: &FeatureCorpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    corpus.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut blob = Vec::with_capacity(HEADER_LEN);
    blob.extend_from_slice(CONTAINER_MAGIC);
    blob.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());

    let mut conversations = Vec::with_capacity(corpus.conversations.len());
    for conv in &corpus.conversations {
        let utterance_tensor = TensorRef {
            offset: blob.len(),
            rows: conv.utterances.len(),
            cols: corpus.dims.d_h,
            dtype: "f32".into(),
        };
        for u in &conv.utterances {
            write_f32s(&mut blob, &u.feature);
        }
        let mut knowledge = Vec::new();
        for u in &conv.utterances {
            for k in &u.knowledge {
                knowledge.push(ManifestKnowledge {
                    utterance: u.index,
                    aspect: k.aspect.clone(),
                    tensor: TensorRef {
                        offset: blob.len(),
                        rows: 1,
                        cols: corpus.dims.d_k,
                        dtype: "f32".into(),
                    },
                });
                write_f32s(&mut blob, &k.vector);
            }
        }
        let emotion_labels = if conv.utterances.iter().any(|u| u.emotion.is_some()) {
            Some(conv.utterances.iter().map(|u| u.emotion).collect())
        } else {
            None
        };
        conversations.push(ManifestConversation {
            id: conv.id.clone(),
            n_utterances: conv.utterances.len(),
            speakers: conv.utterances.iter().map(|u| u.speaker.clone()).collect(),
            emotion_labels,
            cause_pairs: conv.cause_pairs.as_ref().map(|pairs| {
                pairs
                    .iter()
                    .map(|p| [p.candidate, p.target, p.label as usize])
                    .collect()
            }),
            utterance_tensor,
            knowledge,
        });
    }

    let manifest = Manifest {
        format_version: CONTAINER_VERSION,
        dims: ManifestDims {
            d_h: corpus.dims.d_h,
            d_k: corpus.dims.d_k,
        },
        emotion_set: corpus.emotion_set.clone(),
        knowledge_source: corpus.knowledge_source.clone(),
        conversations,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    let tensor_path = dir.join(TENSOR_FILE);
    fs::write(&tensor_path, blob).map_err(|e| Error::io(&tensor_path, e))?;
    Ok(())
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<FeatureCorpus> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::Malformed {
        what: manifest_path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.format_version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.format_version,
            expected: CONTAINER_VERSION,
        });
    }

    let tensor_path = dir.join(TENSOR_FILE);
    let blob = fs::read(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
    if blob.len() < HEADER_LEN || &blob[..4] != CONTAINER_MAGIC {
        return Err(Error::BadMagic(tensor_path));
    }
    let version = u32::from_le_bytes(blob[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CONTAINER_VERSION,
        });
    }

    let dims = CorpusDims {
        d_h: manifest.dims.d_h,
        d_k: manifest.dims.d_k,
    };
    let mut conversations = Vec::with_capacity(manifest.conversations.len());
    for mc in manifest.conversations {
        conversations.push(read_conversation(mc, dims, &blob)?);
    }
    let corpus = FeatureCorpus {
        conversations,
        dims,
        emotion_set: manifest.emotion_set,
        knowledge_source: manifest.knowledge_source,
    };
    corpus.validate()?;
    Ok(corpus)
}

fn read_conversation(mc: ManifestConversation, dims: CorpusDims, blob: &[u8]) -> Result<Conversation> {
    let n = mc.n_utterances;
    let ctx = |what: &str| format!("conversation `{}` {}", mc.id, what);
    if mc.speakers.len() != n {
        return Err(Error::dims(ctx("speakers"), n, mc.speakers.len()));
    }
    if let Some(labels) = &mc.emotion_labels {
        if labels.len() != n {
            return Err(Error::dims(ctx("emotion_labels"), n, labels.len()));
        }
    }
    let ut = &mc.utterance_tensor;
    check_tensor(ut, n, dims.d_h, &ctx("utterance_tensor"))?;
    let features = read_f32_block(blob, ut, &ctx("utterance_tensor"))?;

    let mut utterances: Vec<Utterance> = features
        .chunks_exact(dims.d_h.max(1))
        .take(n)
        .enumerate()
        .map(|(pos, row)| Utterance {
            index: pos + 1,
            speaker: mc.speakers[pos].clone(),
            feature: row.to_vec(),
            emotion: mc.emotion_labels.as_ref().and_then(|l| l[pos]),
            knowledge: Vec::new(),
        })
        .collect();

    for k in &mc.knowledge {
        if k.utterance < 1 || k.utterance > n {
            return Err(Error::NonContiguousUtterances {
                conversation: mc.id.clone(),
                detail: format!("knowledge references utterance {} of {}", k.utterance, n),
            });
        }
        let what = ctx(&format!("knowledge of utterance {}", k.utterance));
        check_tensor(&k.tensor, 1, dims.d_k, &what)?;
        let vector = read_f32_block(blob, &k.tensor, &what)?;
        utterances[k.utterance - 1].knowledge.push(KnowledgeItem {
            aspect: k.aspect.clone(),
            vector,
            source_utterance: k.utterance,
        });
    }

    let cause_pairs = match mc.cause_pairs {
        None => None,
        Some(pairs) => {
            let mut out = Vec::with_capacity(pairs.len());
            for [j, i, z] in pairs {
                if z > 1 {
                    return Err(Error::Malformed {
                        what: ctx("cause_pairs"),
                        message: format!("label {z} is not binary"),
                    });
                }
                out.push(CausePair {
                    candidate: j,
                    target: i,
                    label: z == 1,
                });
            }
            Some(out)
        }
    };

    Ok(Conversation {
        id: mc.id,
        utterances,
        cause_pairs,
    })
}

fn check_tensor(t: &TensorRef, rows: usize, cols: usize, what: &str) -> Result<()> {
    if t.dtype != "f32" {
        return Err(Error::UnknownDtype(t.dtype.clone()));
    }
    if t.rows != rows {
        return Err(Error::dims(format!("{what} rows"), rows, t.rows));
    }
    if t.cols != cols {
        return Err(Error::dims(format!("{what} cols"), cols, t.cols));
    }
    Ok(())
}

fn read_f32_block(blob: &[u8], t: &TensorRef, what: &str) -> Result<Vec<f64>> {
    let count = t.rows * t.cols;
    if t.offset < HEADER_LEN {
        return Err(Error::Malformed {
            what: what.to_string(),
            message: format!("offset {} overlaps the file header", t.offset),
        });
    }
    let available = blob.len().saturating_sub(t.offset) / 4;
    if available < count {
        return Err(Error::dims(format!("{what} floats in tensors.bin"), count, available));
    }
    Ok(blob[t.offset..t.offset + 4 * count]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

fn write_f32s(blob: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
}
