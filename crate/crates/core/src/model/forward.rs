use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{make_causal_mask, Composition, Direction, DirectionPlan, LoraAdapter, ModelParams, ScoreScale};
use crate::error::{contract, Error, Result};
use crate::numerics::{Graph, ParamId, Tensor, Var};
use crate::tokenizer::TokenSeq;

/// Per-forward state. Training mode carries the RNG for adapter dropout.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }
}

/// Graph handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Final hidden states, `L×d`.
    pub hidden: Var,
    /// Output of every block in execution order.
    pub layer_outputs: Vec<Var>,
}

impl ModelParams {
    /// Token plus learned absolute position embeddings, `L×d`.
    pub fn embed_inputs<'s>(&'s self, g: &mut Graph<'s>, tokens: &TokenSeq) -> Result<Var> {
        let len = tokens.len();
        if len == 0 {
            return Err(Error::EmptyInput);
        }
        if len > self.config.max_len {
            return Err(contract(format!(
                "sequence of {len} tokens exceeds max_len {}",
                self.config.max_len
            )));
        }
        let table = g.param(self.layout.token_embedding)?;
        let tok = g.gather(table, tokens.ids())?;
        let pos_table = g.param(self.layout.position_embedding)?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather(pos_table, &positions)?;
        g.add(tok, pos)
    }

    /// One transformer block on `x` (`L×d`).
    pub fn layer_graph<'s>(
        &'s self,
        g: &mut Graph<'s>,
        layer: usize,
        x: Var,
        mode: Direction,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let lp = self
            .layout
            .layers
            .get(layer)
            .ok_or(Error::Index {
                index: layer,
                size: self.n_layers(),
            })?;
        let (len, width) = g.value(x).dims2()?;
        if width != self.d_model() {
            return Err(Error::Shape(format!("input width {width}, model width {}", self.d_model())));
        }
        let mask = match mode {
            Direction::Uni => Some(make_causal_mask(len)?),
            Direction::Bi => None,
        };
        let scale = match self.config.score_scale {
            ScoreScale::HeadDim => 1.0 / (self.config.head_dim() as f64).sqrt(),
            ScoreScale::ModelDim => 1.0 / (self.d_model() as f64).sqrt(),
        };

        let attn_gain = g.param(lp.attn_norm)?;
        let h = g.rms_norm(x, attn_gain, self.config.norm_eps)?;
        let mut heads = Vec::with_capacity(lp.heads.len());
        for head in &lp.heads {
            let q = self.project(g, h, head.wq, Some(head.bq), head.lora_q.as_ref(), ctx)?;
            // The key bias shifts every score in a query row by the same
            // q·b, which softmax cancels, so it is left out of the graph.
            // Its gradient is then exactly zero rather than rounding noise.
            let k = self.project(g, h, head.wk, None, None, ctx)?;
            let v = self.project(g, h, head.wv, Some(head.bv), head.lora_v.as_ref(), ctx)?;
            let scores = g.matmul_bt(q, k)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.softmax_rows(scores, mask.as_ref().map(|m| m.matrix()))?;
            heads.push(g.matmul(probs, v)?);
        }
        let cat = g.concat_cols(&heads)?;
        let wo = g.param(lp.wo)?;
        let bo = g.param(lp.bo)?;
        let attn = g.matmul(cat, wo)?;
        let attn = g.add_row(attn, bo)?;
        let x1 = g.add(x, attn)?;

        let ffn_gain = g.param(lp.ffn_norm)?;
        let h2 = g.rms_norm(x1, ffn_gain, self.config.norm_eps)?;
        let (w1, b1, w2, b2) = (g.param(lp.w1)?, g.param(lp.b1)?, g.param(lp.w2)?, g.param(lp.b2)?);
        let up = g.matmul(h2, w1)?;
        let up = g.add_row(up, b1)?;
        let act = g.silu(up)?;
        let down = g.matmul(act, w2)?;
        let down = g.add_row(down, b2)?;
        g.add(x1, down)
    }

    fn project<'s>(
        &'s self,
        g: &mut Graph<'s>,
        h: Var,
        w: ParamId,
        b: Option<ParamId>,
        adapter: Option<&LoraAdapter>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let wv = g.param(w)?;
        let mut base = g.matmul(h, wv)?;
        if let Some(b) = b {
            let bv = g.param(b)?;
            base = g.add_row(base, bv)?;
        }
        let (Some(adapter), Some(cfg)) = (adapter, self.lora.as_ref()) else {
            return Ok(base);
        };
        let input = match ctx.rng.as_mut() {
            Some(rng) if cfg.dropout > 0.0 => {
                let shape = g.value(h).shape().to_vec();
                let keep = 1.0 / (1.0 - cfg.dropout);
                let n: usize = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.gen::<f64>() < cfg.dropout { 0.0 } else { keep })
                    .collect();
                let mask = g.input(Tensor::new(shape, mask)?)?;
                g.mul(h, mask)?
            }
            _ => h,
        };
        let a = g.param(adapter.a)?;
        let bf = g.param(adapter.b)?;
        let xa = g.matmul(input, a)?;
        let xab = g.matmul(xa, bf)?;
        let delta = g.scale(xab, cfg.scaling())?;
        g.add(base, delta)
    }

    /// Records a full forward pass under `plan`.
    ///
    /// Sequential composition runs the causal prefix, then the bi-directional
    /// tail on the prefix output, adding the prefix output back when
    /// `config.skip` is set. Parallel composition runs both sections on the
    /// input embeddings and sums them.
    pub fn forward_graph<'s>(
        &'s self,
        g: &mut Graph<'s>,
        tokens: &TokenSeq,
        plan: &DirectionPlan,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardTrace> {
        if plan.n_layers() != self.n_layers() {
            return Err(Error::Config(format!(
                "plan covers {} layers, model has {}",
                plan.n_layers(),
                self.n_layers()
            )));
        }
        let x = self.embed_inputs(g, tokens)?;
        let t = plan.turning_point();
        let n = plan.n_layers();
        let mut layer_outputs = Vec::with_capacity(n);
        let mut prefix = x;
        for l in 0..t {
            prefix = self.layer_graph(g, l, prefix, Direction::Uni, ctx)?;
            layer_outputs.push(prefix);
        }
        if t == n {
            return Ok(ForwardTrace {
                hidden: prefix,
                layer_outputs,
            });
        }
        let (mut tail, add_back) = match self.config.composition {
            Composition::Sequential => (prefix, self.config.skip),
            Composition::Parallel => (x, true),
        };
        for l in t..n {
            tail = self.layer_graph(g, l, tail, Direction::Bi, ctx)?;
            layer_outputs.push(tail);
        }
        let hidden = if add_back { g.add(prefix, tail)? } else { tail };
        Ok(ForwardTrace {
            hidden,
            layer_outputs,
        })
    }

    /// Final hidden states (`L×d`) without recording gradients.
    pub fn forward(&self, tokens: &TokenSeq, plan: &DirectionPlan) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.store);
        let trace = self.forward_graph(&mut g, tokens, plan, &mut ForwardCtx::eval())?;
        Ok(g.value(trace.hidden).clone())
    }

    /// Next-token logits (`L×V`) from hidden states, using the final norm
    /// and the tied token-embedding table.
    pub fn lm_logits<'s>(&'s self, g: &mut Graph<'s>, hidden: Var) -> Result<Var> {
        let gain = g.param(self.layout.final_norm)?;
        let normed = g.rms_norm(hidden, gain, self.config.norm_eps)?;
        let table = g.param(self.layout.token_embedding)?;
        g.matmul_bt(normed, table)
    }
}

/// Runs block `layer` of `model` on `x` in the given direction.
pub fn attention_layer(x: &Tensor, model: &ModelParams, layer: usize, mode: Direction) -> Result<Tensor> {
    let mut g = Graph::with_params(&model.store);
    let xv = g.input(x.clone())?;
    let out = model.layer_graph(&mut g, layer, xv, mode, &mut ForwardCtx::eval())?;
    Ok(g.value(out).clone())
}
