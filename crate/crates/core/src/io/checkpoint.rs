//! Binary model checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` header length, a JSON header describing the model, then every
//! tensor's values as little-endian `f64` in header order. Storing raw bits
//! makes the round trip exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DirectionPlan, Layout, LoraConfig, ModelConfig, ModelParams};
use crate::numerics::{ParamId, ParamStore, Tensor};
use crate::tokenizer::Vocabulary;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"BKDPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance of a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub steps: usize,
    pub config_hash: String,
}

/// A model with the attention plan it is meant to run under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub plan: DirectionPlan,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    layout: Layout,
    lora: Option<LoraConfig>,
    plan: DirectionPlan,
    tensors: Vec<TensorEntry>,
    metadata: TrainingMetadata,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let header = Header {
            config: self.model.config.clone(),
            vocab: self.model.vocab,
            layout: self.model.layout.clone(),
            lora: self.model.lora.clone(),
            plan: self.plan,
            tensors: store
                .iter()
                .map(|(_, name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    trainable: t.requires_grad(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * store.num_scalars());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cursor = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(corrupt(format!("file truncated in {what}")));
            }
            let (head, rest) = cursor.split_at(n);
            cursor = rest;
            Ok(head)
        };
        if take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!(
                "format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(take(8, "header length")?.try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len).map_err(|_| corrupt("header length overflows"))?;
        let header: Header =
            serde_json::from_slice(take(header_len, "header")?).map_err(|e| corrupt(format!("header: {e}")))?;

        let mut store = ParamStore::new();
        for entry in &header.tensors {
            let numel = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| corrupt(format!("shape of {} overflows", entry.name)))?;
            let raw = take(numel.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?, &entry.name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let id = store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
            store.get_mut(id).set_requires_grad(entry.trainable);
        }
        if !cursor.is_empty() {
            return Err(corrupt(format!("{} unexpected trailing bytes", cursor.len())));
        }

        header.config.validate().map_err(|e| corrupt(e.to_string()))?;
        let n = header.layout.layers.len();
        if header.config.n_layers != n {
            return Err(corrupt(format!(
                "config declares {} layers, layout has {n}",
                header.config.n_layers
            )));
        }
        let plan = DirectionPlan::new(header.plan.n_layers(), header.plan.turning_point())
            .map_err(|e| corrupt(e.to_string()))?;
        if plan.n_layers() != n {
            return Err(corrupt(format!("plan covers {} layers, model has {n}", plan.n_layers())));
        }
        check_layout(&header.layout, &header.config, header.vocab.size(), &store)?;
        Ok(Checkpoint {
            model: ModelParams {
                config: header.config,
                vocab: header.vocab,
                store,
                layout: header.layout,
                lora: header.lora,
            },
            plan,
            metadata: header.metadata,
        })
    }
}

/// Every id the layout names must exist and have the shape the forward
/// pass expects, so a damaged header cannot cause a panic later.
fn check_layout(layout: &Layout, cfg: &ModelConfig, vocab: usize, store: &ParamStore) -> Result<()> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let f = cfg.ffn_mult * d;
    let expect = |id: ParamId, shape: &[usize]| -> Result<()> {
        if id.0 >= store.len() {
            return Err(corrupt(format!("layout refers to missing tensor {}", id.0)));
        }
        let got = store.get(id).shape();
        if got != shape {
            return Err(corrupt(format!("tensor {} has shape {got:?}, expected {shape:?}", store.name(id))));
        }
        Ok(())
    };
    expect(layout.token_embedding, &[vocab, d])?;
    expect(layout.position_embedding, &[cfg.max_len, d])?;
    expect(layout.final_norm, &[d])?;
    for l in &layout.layers {
        if l.heads.len() != cfg.n_heads {
            return Err(corrupt(format!("layer has {} heads, expected {}", l.heads.len(), cfg.n_heads)));
        }
        for h in &l.heads {
            for w in [h.wq, h.wk, h.wv] {
                expect(w, &[d, dh])?;
            }
            for b in [h.bq, h.bk, h.bv] {
                expect(b, &[dh])?;
            }
            for a in [&h.lora_q, &h.lora_v].into_iter().flatten() {
                if a.a.0 >= store.len() || a.b.0 >= store.len() {
                    return Err(corrupt("adapter refers to a missing tensor"));
                }
                let r = store.get(a.a).shape().get(1).copied().unwrap_or(0);
                expect(a.a, &[d, r])?;
                expect(a.b, &[r, dh])?;
            }
        }
        expect(l.wo, &[d, d])?;
        expect(l.bo, &[d])?;
        expect(l.attn_norm, &[d])?;
        expect(l.ffn_norm, &[d])?;
        expect(l.w1, &[d, f])?;
        expect(l.b1, &[f])?;
        expect(l.w2, &[f, d])?;
        expect(l.b2, &[d])?;
    }
    Ok(())
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&super::datasets::read_bytes(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{Embedder, PromptTemplate};
    use crate::model::Strategy;

    fn sample(lora: bool) -> Checkpoint {
        let base = ModelParams::init(
            ModelConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 2,
                max_len: 64,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        let base = if lora {
            base.lora_wrap(&LoraConfig { rank: 2, ..LoraConfig::default() }, 4).unwrap()
        } else {
            base
        };
        let (mut model, plan) = base.apply_strategy(Strategy::Addition, 5).unwrap();
        // give the adapters non-zero values so they are actually exercised
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            for (i, v) in model.store.get_mut(id).data_mut().iter_mut().enumerate() {
                *v += 1e-3 * (i as f64).sin();
            }
        }
        Checkpoint {
            model,
            plan,
            metadata: TrainingMetadata {
                seed: 42,
                steps: 7,
                config_hash: "abc".into(),
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for lora in [false, true] {
            let ck = sample(lora);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ck);
            for ((_, na, a), (_, nb, b)) in ck.model.store.iter().zip(back.model.store.iter()) {
                assert_eq!(na, nb);
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
                assert_eq!(a.requires_grad(), b.requires_grad());
            }
        }
    }

    #[test]
    fn embeddings_survive_save_and_load() {
        let ck = sample(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let t = PromptTemplate::standard();
        let before = Embedder::new(&ck.model, &ck.plan, &t);
        let after = Embedder::new(&back.model, &back.plan, &t);
        for i in 0..10 {
            let s = format!("sentence number {i}");
            assert_eq!(before.embed(&s, None).unwrap(), after.embed(&s, None).unwrap());
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample(false).to_bytes().unwrap();
        for cut in [0, 5, 15, 40, bytes.len() - 1] {
            assert_eq!(Checkpoint::from_bytes(&bytes[..cut]).unwrap_err().kind(), "corrupt", "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Corrupt(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(Error::Corrupt(m)) if m.contains("version")));
        let mut wrong_magic = bytes;
        wrong_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong_magic), Err(Error::Corrupt(_))));
    }

    #[test]
    fn inconsistent_header_is_rejected() {
        let mut ck = sample(false);
        ck.model.config.n_layers = 7;
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()), Err(Error::Corrupt(_))));
        let mut ck = sample(false);
        ck.model.layout.final_norm = ck.model.layout.token_embedding;
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()), Err(Error::Corrupt(_))));
    }
}
