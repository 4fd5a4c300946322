//! Rank correlation, similarity benchmarks, retrieval and linear probes.

mod probe;
mod retrieval;

pub use probe::{transfer_probe, ProbeConfig};
pub use retrieval::{retrieve_topk, strict_accuracy, RetrievalCorpus, RetrievalItem};

use serde::{Deserialize, Serialize};

use crate::error::{at_record, contract, shape, Error, Result};
use crate::extraction::{Embedder, PromptTemplate};
use crate::model::{DirectionPlan, ModelParams};
use crate::training::cosine;

/// A sentence pair with a gold similarity and an optional condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub sentence_1: String,
    pub sentence_2: String,
    pub gold: f64,
    pub condition: Option<String>,
}

impl SimilarityRecord {
    pub fn new(a: impl Into<String>, b: impl Into<String>, gold: f64) -> Self {
        SimilarityRecord {
            sentence_1: a.into(),
            sentence_2: b.into(),
            gold,
            condition: None,
        }
    }

    pub fn with_condition(mut self, condition: impl Into<String>) -> Self {
        self.condition = Some(condition.into());
        self
    }
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && xs[idx[end]] == xs[idx[start]] {
            end += 1;
        }
        let mean = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation; a constant side makes it undefined.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(shape(format!("correlating {} values with {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(contract("correlation needs at least two observations"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("one side is constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(shape(format!("correlating {} values with {}", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Predicted similarity (cosine of the two embeddings) for every record.
/// Conditional records are embedded with the conditional template.
pub fn predict_similarities(embedder: &Embedder<'_>, records: &[SimilarityRecord]) -> Result<Vec<f64>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let cond = r.condition.as_deref();
            let a = embedder.embed(&r.sentence_1, cond)?;
            let b = embedder.embed(&r.sentence_2, cond)?;
            cosine(&a, &b)
        }
        .map_err(at_record(i)))
        .collect()
}

/// Spearman correlation between pair cosines and gold scores.
pub fn score_embedding_pairs(pairs: &[(Vec<f64>, Vec<f64>)], gold: &[f64]) -> Result<f64> {
    let predicted = pairs
        .iter()
        .enumerate()
        .map(|(i, (a, b))| cosine(a, b).map_err(at_record(i)))
        .collect::<Result<Vec<_>>>()?;
    spearman(&predicted, gold)
}

/// Spearman correlation between predicted cosines and gold scores.
pub fn evaluate_sts(
    model: &ModelParams,
    plan: &DirectionPlan,
    records: &[SimilarityRecord],
    template: &PromptTemplate,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let predicted = predict_similarities(&Embedder::new(model, plan, template), records)?;
    let gold: Vec<f64> = records.iter().map(|r| r.gold).collect();
    spearman(&predicted, &gold)
}
