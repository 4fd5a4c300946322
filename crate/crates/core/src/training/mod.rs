//! Contrastive fine-tuning of sentence embeddings.

mod loss;
mod optim;

pub use loss::{contrastive_loss, contrastive_loss_graph, cosine, ContrastiveBatch, LossOptions};
pub use optim::Adam;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::extraction::{build_prompt, PromptTemplate};
use crate::model::{DirectionPlan, ForwardCtx, LoraConfig, ModelParams, Strategy};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::tokenizer::TokenSeq;
use loss::rows_tensor;

/// Batch sizes searched by default.
pub const BATCH_GRID: [usize; 4] = [16, 32, 64, 128];

/// One training example: an anchor sentence, a paraphrase-like positive and
/// an optional hard negative.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: Option<String>,
}

impl Triplet {
    pub fn new(anchor: impl Into<String>, positive: impl Into<String>, negative: impl Into<String>) -> Self {
        Triplet {
            anchor: anchor.into(),
            positive: positive.into(),
            negative: Some(negative.into()),
        }
    }

    /// A pair with no hard negative; only in-batch negatives apply.
    pub fn pair(anchor: impl Into<String>, positive: impl Into<String>) -> Self {
        Triplet {
            anchor: anchor.into(),
            positive: positive.into(),
            negative: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Adapter settings; `None` trains every weight.
    pub lora: Option<LoraConfig>,
    pub strategy: Strategy,
    pub template: PromptTemplate,
    pub loss: LossOptions,
    /// Feed the triplets' negatives into the objective.
    pub use_negatives: bool,
    /// Reject batch sizes outside [`BATCH_GRID`].
    pub restrict_batch_to_grid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 16,
            steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            temperature: 0.05,
            seed: 42,
            lora: None,
            strategy: Strategy::Modification,
            template: PromptTemplate::standard(),
            loss: LossOptions::default(),
            use_negatives: true,
            restrict_batch_to_grid: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.restrict_batch_to_grid && !BATCH_GRID.contains(&self.batch_size) {
            return Err(Error::Config(format!(
                "batch_size {} is not in {BATCH_GRID:?}; set restrict_batch_to_grid = false to allow it",
                self.batch_size
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Adam::new(self.learning_rate, self.beta1, self.beta2, self.eps).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Applies the configured strategy and, if requested, wraps the result in
/// adapters. Returns the model to train and the plan to train it under.
pub fn prepare(base: &ModelParams, cfg: &TrainConfig) -> Result<(ModelParams, DirectionPlan)> {
    match &cfg.lora {
        // adapters go on the base stack; an appended layer stays fully trainable
        Some(lora) => base.lora_wrap(lora, cfg.seed)?.apply_strategy(cfg.strategy, cfg.seed),
        None => base.apply_strategy(cfg.strategy, cfg.seed),
    }
}

/// Loss value and parameter gradients for one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    /// Indexed by parameter id; `None` where no gradient reached.
    pub grads: Vec<Option<Vec<f64>>>,
}

impl BatchGradient {
    /// Gradients laid out like [`ParamStore::trainable_flat`].
    pub fn trainable_flat(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_trainable());
        for id in store.ids() {
            let t = store.get(id);
            if !t.requires_grad() {
                continue;
            }
            match &self.grads[id.0] {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(t.numel())),
            }
        }
        out
    }

    /// Overwrites the store's gradient buffers with this gradient.
    pub fn write_into(&self, store: &mut ParamStore) -> Result<()> {
        store.zero_grad();
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = &self.grads[id.0] {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn prompt_tokens(model: &ModelParams, plan: &DirectionPlan, template: &PromptTemplate, text: &str) -> Result<TokenSeq> {
    let prompt = build_prompt(text, None, template)?;
    model.pivot_tokens(plan, &prompt, template.pivot)
}

/// Forward and backward pass of the objective over `batch`.
///
/// Each sentence gets its own graph; the objective is recorded on a small
/// graph whose leaves are the sentence vectors, and its gradient with respect
/// to each vector is then pushed back through the matching sentence graph.
pub fn batch_gradient(
    model: &ModelParams,
    plan: &DirectionPlan,
    batch: &[&Triplet],
    cfg: &TrainConfig,
    ctx: &mut ForwardCtx,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let mut texts: Vec<&str> = Vec::with_capacity(batch.len() * 3);
    texts.extend(batch.iter().map(|t| t.anchor.as_str()));
    texts.extend(batch.iter().map(|t| t.positive.as_str()));
    let mut owners = Vec::new();
    if cfg.use_negatives {
        for (i, t) in batch.iter().enumerate() {
            if let Some(neg) = &t.negative {
                texts.push(neg);
                owners.push(i);
            }
        }
    }

    let d = model.d_model();
    let mut graphs = Vec::with_capacity(texts.len());
    let mut vectors = Vec::with_capacity(texts.len());
    for text in &texts {
        let tokens = prompt_tokens(model, plan, &cfg.template, text)?;
        let mut g = Graph::with_params(&model.store);
        let v = model.embedding_graph(&mut g, plan, &tokens, ctx)?;
        vectors.push(g.value(v).data().to_vec());
        graphs.push((g, v));
    }

    let n = batch.len();
    let mut lg = Graph::new();
    let a = lg.variable(rows_tensor(&vectors[..n], d)?)?;
    let p = lg.variable(rows_tensor(&vectors[n..2 * n], d)?)?;
    let neg = if owners.is_empty() {
        None
    } else {
        Some(lg.variable(rows_tensor(&vectors[2 * n..], d)?)?)
    };
    let loss = contrastive_loss_graph(&mut lg, a, p, neg.map(|v| (v, owners.as_slice())), cfg.temperature, cfg.loss)?;
    let loss_value = lg.value(loss).data()[0];
    let lgrads = lg.backward(loss)?;
    let mut seeds: Vec<f64> = lgrads.wrt(a).expect("tracked").to_vec();
    seeds.extend_from_slice(lgrads.wrt(p).expect("tracked"));
    if let Some(neg) = neg {
        seeds.extend_from_slice(lgrads.wrt(neg).expect("tracked"));
    }

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
    for ((g, v), seed) in graphs.iter().zip(seeds.chunks(d)) {
        let sg = g.backward_with_seed(*v, seed)?;
        for (id, pg) in sg.params() {
            match &mut grads[id.0] {
                Some(acc) => acc.iter_mut().zip(pg).for_each(|(a, b)| *a += b),
                slot => *slot = Some(pg.clone()),
            }
        }
    }
    Ok(BatchGradient {
        loss: loss_value,
        grads,
    })
}

/// Value of the objective over `batch` without recording gradients.
pub fn batch_loss(model: &ModelParams, plan: &DirectionPlan, batch: &[&Triplet], cfg: &TrainConfig) -> Result<f64> {
    let anchors = batch
        .iter()
        .map(|t| embed_text(model, plan, &cfg.template, &t.anchor))
        .collect::<Result<Vec<_>>>()?;
    let positives = batch
        .iter()
        .map(|t| embed_text(model, plan, &cfg.template, &t.positive))
        .collect::<Result<Vec<_>>>()?;
    let negatives = batch
        .iter()
        .map(|t| match (&t.negative, cfg.use_negatives) {
            (Some(neg), true) => embed_text(model, plan, &cfg.template, neg).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let b = ContrastiveBatch {
        anchors,
        positives,
        negatives,
        temperature: cfg.temperature,
    };
    Ok(contrastive_loss(&b, cfg.loss)?.data()[0])
}

fn embed_text(model: &ModelParams, plan: &DirectionPlan, template: &PromptTemplate, text: &str) -> Result<Vec<f64>> {
    let tokens = prompt_tokens(model, plan, template, text)?;
    let hidden: Tensor = model.forward(&tokens, plan)?;
    Ok(hidden.row(tokens.len() - 1)?.to_vec())
}

/// Trained model with its per-step loss trace.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub losses: Vec<f64>,
}

/// Mini-batch training with Adam. Batches are drawn from a seeded shuffle
/// that is redrawn every epoch. Only tensors with `requires_grad` move.
pub fn train(model: &ModelParams, plan: &DirectionPlan, data: &[Triplet], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    if plan.n_layers() != model.n_layers() {
        return Err(Error::Config(format!(
            "plan covers {} layers, model has {}",
            plan.n_layers(),
            model.n_layers()
        )));
    }
    let mut model = model.clone();
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let size = cfg.batch_size.min(data.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(size);
        while picked.len() < size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            if !picked.contains(&idx) {
                picked.push(idx);
            }
        }
        let batch: Vec<&Triplet> = picked.iter().map(|&i| &data[i]).collect();
        let mut ctx = ForwardCtx::train(cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let diverged = |message: String| Error::Diverged { step, message };
        let bg = match batch_gradient(&model, plan, &batch, cfg, &mut ctx) {
            Ok(bg) => bg,
            Err(Error::NonFinite(what)) => {
                return Err(diverged(format!("{what} on batch {picked:?}")));
            }
            Err(e) => return Err(e),
        };
        if !bg.loss.is_finite() {
            return Err(diverged(format!("loss {} on batch {picked:?}", bg.loss)));
        }
        bg.write_into(&mut model.store)?;
        opt.step(&mut model.store)?;
        model.store.zero_grad();
        log::debug!("step {step} loss {:.6}", bg.loss);
        losses.push(bg.loss);
    }
    Ok(TrainOutcome { model, losses })
}

#[cfg(test)]
mod tests;
