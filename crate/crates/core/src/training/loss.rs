//! Cosine similarity and the temperature-scaled contrastive objective.

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape, Result};
use crate::numerics::{Graph, Tensor, Var, MASK_SENTINEL};

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(contract("cosine of a zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// How the denominator and numerator of the objective are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    /// Normalise each anchor over every positive and negative in the batch.
    /// When off, only the anchor's own positive and negative are used.
    pub in_batch: bool,
    /// Debug variant whose numerator is `exp(cos)/τ` instead of `exp(cos/τ)`.
    pub literal_numerator: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            in_batch: true,
            literal_numerator: false,
        }
    }
}

/// Anchors with their positives and optional negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    /// One optional negative per anchor; absent ones drop out of every
    /// denominator.
    pub negatives: Vec<Option<Vec<f64>>>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<usize> {
        let n = self.anchors.len();
        if n == 0 {
            return Err(contract("contrastive batch needs at least one anchor"));
        }
        if self.positives.len() != n || self.negatives.len() != n {
            return Err(shape(format!(
                "{n} anchors, {} positives, {} negative slots",
                self.positives.len(),
                self.negatives.len()
            )));
        }
        check_temperature(self.temperature)?;
        let d = self.anchors[0].len();
        let all = self
            .anchors
            .iter()
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten());
        for v in all {
            if v.len() != d {
                return Err(shape(format!("embedding of length {} in a batch of width {d}", v.len())));
            }
        }
        Ok(d)
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(contract(format!("temperature must be positive, got {tau}")))
    }
}

/// Records the objective on graph nodes.
///
/// `anchors` and `positives` are `N×d`; `negatives` is `K×d` with
/// `negative_owner[k]` naming the anchor that row `k` belongs to.
pub fn contrastive_loss_graph(
    g: &mut Graph<'_>,
    anchors: Var,
    positives: Var,
    negatives: Option<(Var, &[usize])>,
    temperature: f64,
    opts: LossOptions,
) -> Result<Var> {
    check_temperature(temperature)?;
    let (n, _) = g.value(anchors).dims2()?;
    let an = g.normalize_rows(anchors)?;
    let pn = g.normalize_rows(positives)?;
    let mut cos = g.matmul_bt(an, pn)?;
    let mut owners: &[usize] = &[];
    if let Some((neg, owner)) = negatives {
        let (k, _) = g.value(neg).dims2()?;
        if owner.len() != k || owner.iter().any(|&o| o >= n) {
            return Err(contract("every negative needs a valid owning anchor"));
        }
        let nn = g.normalize_rows(neg)?;
        let cn = g.matmul_bt(an, nn)?;
        cos = g.concat_cols(&[cos, cn])?;
        owners = owner;
    }
    let mut logits = g.scale(cos, 1.0 / temperature)?;
    if !opts.in_batch {
        let cols = n + owners.len();
        let mut mask = vec![MASK_SENTINEL; n * cols];
        for i in 0..n {
            mask[i * cols + i] = 0.0;
        }
        for (k, &o) in owners.iter().enumerate() {
            mask[o * cols + n + k] = 0.0;
        }
        let mask = g.input(Tensor::new(vec![n, cols], mask)?)?;
        logits = g.add(logits, mask)?;
    }
    let lse = g.logsumexp_rows(logits)?;
    let lse = g.sum(lse)?;
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let loss = if opts.literal_numerator {
        let num = g.pick(cos, &diag)?;
        let num = g.sum(num)?;
        let shifted = g.sub(lse, num)?;
        let offset = g.input(Tensor::scalar(n as f64 * temperature.ln()))?;
        g.add(shifted, offset)?
    } else {
        let num = g.pick(logits, &diag)?;
        let num = g.sum(num)?;
        g.sub(lse, num)?
    };
    Ok(loss)
}

/// Value of the objective for a batch of plain vectors.
pub fn contrastive_loss(batch: &ContrastiveBatch, opts: LossOptions) -> Result<Tensor> {
    let d = batch.validate()?;
    let mut g = Graph::new();
    let a = g.input(rows_tensor(&batch.anchors, d)?)?;
    let p = g.input(rows_tensor(&batch.positives, d)?)?;
    let (rows, owners) = present_negatives(&batch.negatives);
    let neg = if rows.is_empty() {
        None
    } else {
        Some(g.input(rows_tensor(&rows, d)?)?)
    };
    let loss = contrastive_loss_graph(&mut g, a, p, neg.map(|v| (v, owners.as_slice())), batch.temperature, opts)?;
    Ok(g.value(loss).clone())
}

pub(crate) fn present_negatives(negatives: &[Option<Vec<f64>>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    negatives
        .iter()
        .enumerate()
        .filter_map(|(i, n)| n.as_ref().map(|v| (v.clone(), i)))
        .unzip()
}

pub(crate) fn rows_tensor(rows: &[Vec<f64>], d: usize) -> Result<Tensor> {
    Tensor::new(vec![rows.len(), d], rows.concat())
}
