use serde::{Deserialize, Serialize};

use super::{Init, ModelParams};
use crate::error::{contract, Error, Result};
use crate::numerics::{ParamId, Tensor};

/// Low-rank adapter settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 32,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Factors `A[d×r]`, `B[r×d_h]` of one adapted projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
}

impl ModelParams {
    /// Adds adapters to the query and value projections of every head and
    /// freezes all other weights. `B` starts at zero, so the wrapped model
    /// initially computes exactly what the base model does.
    pub fn lora_wrap(&self, cfg: &LoraConfig, seed: u64) -> Result<ModelParams> {
        let d = self.d_model();
        if cfg.rank == 0 || cfg.rank > d {
            return Err(contract(format!("lora rank {} must be in 1..={d}", cfg.rank)));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("lora dropout {} not in [0, 1)", cfg.dropout)));
        }
        if self.lora.is_some() {
            return Err(contract("model already carries adapters"));
        }
        let mut out = self.clone();
        out.store.set_all_trainable(false);
        let dh = self.config.head_dim();
        // A ~ N(0, 1/d), matching the fan-in scale of common LoRA setups
        let mut init = Init::new(seed, 1.0 / (d as f64).sqrt())?;
        let mut adapter = |store: &mut crate::numerics::ParamStore, name: String| LoraAdapter {
            a: store.add(format!("{name}.lora_a"), init.gaussian(&[d, cfg.rank])),
            b: store.add(format!("{name}.lora_b"), Tensor::zeros(&[cfg.rank, dh])),
        };
        for (l, layer) in out.layout.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                head.lora_q = Some(adapter(&mut out.store, format!("layers.{l}.heads.{h}.wq")));
                head.lora_v = Some(adapter(&mut out.store, format!("layers.{l}.heads.{h}.wv")));
            }
        }
        out.lora = Some(cfg.clone());
        Ok(out)
    }

    /// Trainable scalars contributed by adapters when wrapping with rank `r`.
    pub fn lora_param_count(&self, rank: usize) -> usize {
        let d = self.d_model();
        let dh = self.config.head_dim();
        self.n_layers() * self.config.n_heads * 2 * (d * rank + rank * dh)
    }
}
