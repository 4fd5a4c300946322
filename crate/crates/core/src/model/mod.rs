//! Decoder transformer with a configurable bi-directional tail.
//!
//! The first `t` layers of a [`DirectionPlan`] attend causally, the
//! remaining layers attend over the whole sequence. Layer internals follow
//! the LLaMA family: RMS pre-normalisation, multi-head attention with
//! per-projection biases, a SiLU feed-forward of width `ffn_mult·d`, and
//! residual connections around both sub-blocks.

mod forward;
mod lora;
mod mask;
mod plan;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use forward::{attention_layer, ForwardCtx, ForwardTrace};
pub use lora::{LoraAdapter, LoraConfig};
pub use mask::{make_causal_mask, CausalMask};
pub use plan::{Direction, DirectionPlan, Strategy};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};
use crate::tokenizer::Vocabulary;

/// How attention logits are scaled before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreScale {
    /// `1/√d_h`
    #[default]
    HeadDim,
    /// `1/√d`
    ModelDim,
}

/// How the causal prefix and the bi-directional tail are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    /// Tail runs on the prefix output; with `skip` the prefix output is added
    /// to the tail output.
    #[default]
    Sequential,
    /// Prefix and tail both consume the input embeddings; outputs are summed.
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub norm_eps: f64,
    pub init_std: f64,
    pub score_scale: ScoreScale,
    pub composition: Composition,
    pub skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 4,
            max_len: 128,
            ffn_mult: 4,
            norm_eps: 1e-6,
            init_std: 0.02,
            score_scale: ScoreScale::HeadDim,
            composition: Composition::Sequential,
            skip: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.max_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_mult == 0 || !(self.norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("ffn_mult, norm_eps and init_std must be positive".into()));
        }
        Ok(())
    }

    /// Scalars in one transformer block, adapters excluded.
    pub fn layer_param_count(&self) -> usize {
        let d = self.d_model;
        let dh = self.head_dim();
        let f = self.ffn_mult * d;
        let heads = self.n_heads * 3 * (d * dh + dh);
        heads + d * d + d + 2 * d + d * f + f + f * d + d
    }
}

/// Weights of one attention head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub lora_q: Option<LoraAdapter>,
    pub lora_v: Option<LoraAdapter>,
}

/// Weights of one transformer block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub wo: ParamId,
    pub bo: ParamId,
    pub attn_norm: ParamId,
    pub ffn_norm: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl LayerParams {
    fn remap(&self, f: &impl Fn(ParamId) -> ParamId) -> LayerParams {
        let map_lora = |a: &Option<LoraAdapter>| {
            a.as_ref().map(|a| LoraAdapter {
                a: f(a.a),
                b: f(a.b),
            })
        };
        LayerParams {
            heads: self
                .heads
                .iter()
                .map(|h| HeadParams {
                    wq: f(h.wq),
                    bq: f(h.bq),
                    wk: f(h.wk),
                    bk: f(h.bk),
                    wv: f(h.wv),
                    bv: f(h.bv),
                    lora_q: map_lora(&h.lora_q),
                    lora_v: map_lora(&h.lora_v),
                })
                .collect(),
            wo: f(self.wo),
            bo: f(self.bo),
            attn_norm: f(self.attn_norm),
            ffn_norm: f(self.ffn_norm),
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
        }
    }
}

/// Parameter ids describing where each weight of the model lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub final_norm: ParamId,
    pub layers: Vec<LayerParams>,
}

/// A complete model: configuration, vocabulary, weights and their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub layout: Layout,
    pub lora: Option<LoraConfig>,
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    pub(crate) fn new(seed: u64, std: f64) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal,
        })
    }

    pub(crate) fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

impl ModelParams {
    /// Randomly initialised model: Gaussian projections and embeddings,
    /// zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::default();
        let mut init = Init::new(seed, config.init_std)?;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let token_embedding = store.add("token_embedding", init.gaussian(&[vocab.size(), d]));
        let position_embedding = store.add("position_embedding", init.gaussian(&[config.max_len, d]));
        let layers = (0..config.n_layers)
            .map(|l| new_layer(&mut store, &mut init, &config, &format!("layers.{l}")))
            .collect();
        let final_norm = store.add("final_norm", Tensor::vector(vec![1.0; d]));
        Ok(ModelParams {
            config,
            vocab,
            store,
            layout: Layout {
                token_embedding,
                position_embedding,
                final_norm,
                layers,
            },
            lora: None,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layout.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    /// Copy of the model that keeps only parameters whose name passes `keep`.
    fn retain(&self, keep: impl Fn(&str) -> bool, layers: &[LayerParams]) -> ModelParams {
        let mut store = ParamStore::new();
        let mut map = HashMap::new();
        for (id, name, t) in self.store.iter() {
            if keep(name) {
                let trainable = t.requires_grad();
                let new = store.add(name, t.clone());
                store.get_mut(new).set_requires_grad(trainable);
                map.insert(id, new);
            }
        }
        let f = |id: ParamId| map[&id];
        ModelParams {
            config: self.config.clone(),
            vocab: self.vocab,
            layout: Layout {
                token_embedding: f(self.layout.token_embedding),
                position_embedding: f(self.layout.position_embedding),
                final_norm: f(self.layout.final_norm),
                layers: layers.iter().map(|l| l.remap(&f)).collect(),
            },
            store,
            lora: self.lora.clone(),
        }
    }

    /// Model made of layers `1..=k` only.
    pub fn truncate_layers(&self, k: usize) -> Result<ModelParams> {
        let n = self.n_layers();
        if k == 0 || k > n {
            return Err(crate::error::contract(format!("cannot keep {k} of {n} layers")));
        }
        let kept = &self.layout.layers[..k];
        let mut out = self.retain(|name| layer_index(name).is_none_or(|l| l < k), kept);
        out.config.n_layers = k;
        Ok(out)
    }

    /// Appends a freshly initialised block.
    pub fn push_layer(&mut self, seed: u64) -> Result<()> {
        let mut init = Init::new(seed, self.config.init_std)?;
        let idx = self.n_layers();
        let layer = new_layer(&mut self.store, &mut init, &self.config, &format!("layers.{idx}"));
        self.layout.layers.push(layer);
        self.config.n_layers += 1;
        Ok(())
    }
}

fn layer_index(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

fn new_layer(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig, prefix: &str) -> LayerParams {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let f = cfg.ffn_mult * d;
    let heads = (0..cfg.n_heads)
        .map(|h| {
            let p = format!("{prefix}.heads.{h}");
            HeadParams {
                wq: store.add(format!("{p}.wq"), init.gaussian(&[d, dh])),
                bq: store.add(format!("{p}.bq"), Tensor::zeros(&[dh])),
                wk: store.add(format!("{p}.wk"), init.gaussian(&[d, dh])),
                bk: store.add(format!("{p}.bk"), Tensor::zeros(&[dh])),
                wv: store.add(format!("{p}.wv"), init.gaussian(&[d, dh])),
                bv: store.add(format!("{p}.bv"), Tensor::zeros(&[dh])),
                lora_q: None,
                lora_v: None,
            }
        })
        .collect();
    LayerParams {
        heads,
        wo: store.add(format!("{prefix}.wo"), init.gaussian(&[d, d])),
        bo: store.add(format!("{prefix}.bo"), Tensor::zeros(&[d])),
        attn_norm: store.add(format!("{prefix}.attn_norm"), Tensor::vector(vec![1.0; d])),
        ffn_norm: store.add(format!("{prefix}.ffn_norm"), Tensor::vector(vec![1.0; d])),
        w1: store.add(format!("{prefix}.w1"), init.gaussian(&[d, f])),
        b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[f])),
        w2: store.add(format!("{prefix}.w2"), init.gaussian(&[f, d])),
        b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_count_matches_store() {
        let cfg = ModelConfig {
            n_layers: 3,
            ..ModelConfig::default()
        };
        let m = ModelParams::init(cfg.clone(), 1).unwrap();
        let d = cfg.d_model;
        let fixed = m.vocab.size() * d + cfg.max_len * d + d;
        assert_eq!(m.num_params(), fixed + 3 * cfg.layer_param_count());
    }

    #[test]
    fn rejects_bad_heads() {
        let cfg = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(ModelParams::init(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn truncation_keeps_prefix_weights() {
        let m = ModelParams::init(ModelConfig::default(), 3).unwrap();
        let t = m.truncate_layers(2).unwrap();
        assert_eq!(t.n_layers(), 2);
        assert_eq!(t.config.n_layers, 2);
        let name = "layers.1.w2";
        assert_eq!(
            t.store.get(t.store.find(name).unwrap()),
            m.store.get(m.store.find(name).unwrap())
        );
        assert!(t.store.find("layers.2.w1").is_none());
        assert!(m.truncate_layers(0).is_err());
        assert!(m.truncate_layers(5).is_err());
    }
}
