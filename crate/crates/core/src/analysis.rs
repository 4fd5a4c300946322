//! Diagnostics: pivot-token dependency, layer-removal sweeps and the
//! alignment/uniformity decomposition of embedding quality.

use serde::{Deserialize, Serialize};

use crate::error::{at_record, contract, Error, Result};
use crate::evaluation::{evaluate_sts, spearman, SimilarityRecord};
use crate::extraction::PromptTemplate;
use crate::model::{DirectionPlan, ModelParams};
use crate::numerics::{logsumexp, Tensor};
use crate::tokenizer::tokenize;
use crate::training::{train, TrainConfig, Triplet};

/// Which token anchors the dependency analysis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PivotPosition {
    #[default]
    Last,
    First,
}

impl std::str::FromStr for PivotPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" | "last-token" => Ok(PivotPosition::Last),
            "first" | "first-token" => Ok(PivotPosition::First),
            other => Err(Error::Config(format!("unknown pivot position {other:?}"))),
        }
    }
}

/// Five-number summary plus the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    /// Quartiles use linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Result<Summary> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Ok(Summary {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyReport {
    /// One score per analysed sentence, in input order.
    pub scores: Vec<f64>,
    /// Indices of sentences that were too short to analyse.
    pub skipped: Vec<usize>,
    pub summary: Summary,
}

/// Mean Spearman correlation, across hidden dimensions, between the pivot
/// row of `hidden` (`L×d`) and every other row.
pub fn dependency_score(hidden: &Tensor, pivot: usize) -> Result<f64> {
    let (len, _) = hidden.dims2()?;
    if len < 2 {
        return Err(contract("dependency needs at least two tokens"));
    }
    if pivot >= len {
        return Err(Error::Index { index: pivot, size: len });
    }
    let p = hidden.row(pivot)?;
    let mut total = 0.0;
    for i in (0..len).filter(|&i| i != pivot) {
        total += spearman(p, hidden.row(i)?)?;
    }
    Ok(total / (len - 1) as f64)
}

/// Sentence-level dependency of the pivot token on the rest of the sentence
/// under `plan`. Sentences shorter than two tokens are skipped with a warning.
pub fn pivot_dependency_scores(
    model: &ModelParams,
    plan: &DirectionPlan,
    sentences: &[String],
    pivot: PivotPosition,
) -> Result<DependencyReport> {
    let mut scores = Vec::with_capacity(sentences.len());
    let mut skipped = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        let tokens = match tokenize(&model.vocab, s) {
            Ok(t) if t.len() >= 2 => t,
            _ => {
                log::warn!("sentence {i} has fewer than two tokens; skipped");
                skipped.push(i);
                continue;
            }
        };
        let hidden = model.forward(&tokens, plan).map_err(at_record(i))?;
        let row = match pivot {
            PivotPosition::Last => tokens.len() - 1,
            PivotPosition::First => 0,
        };
        scores.push(dependency_score(&hidden, row).map_err(at_record(i))?);
    }
    let summary = Summary::of(&scores)?;
    Ok(DependencyReport {
        scores,
        skipped,
        summary,
    })
}

/// Average STS ρ after keeping the first `k` layers, for each `k`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurve {
    /// `(layers kept, mean ρ)` from the full depth down to one layer.
    pub points: Vec<(usize, f64)>,
}

/// Whether each truncation is evaluated as is or fine-tuned first.
#[derive(Clone, Debug, Default)]
pub enum SweepMode<'a> {
    #[default]
    AsIs,
    Retrain {
        config: &'a TrainConfig,
        data: &'a [Triplet],
    },
}

/// Mean ρ of the all-causal model over every dataset in `suite`.
pub fn suite_score(
    model: &ModelParams,
    plan: &DirectionPlan,
    suite: &[Vec<SimilarityRecord>],
    template: &PromptTemplate,
) -> Result<f64> {
    if suite.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for records in suite {
        total += evaluate_sts(model, plan, records, template)?;
    }
    Ok(total / suite.len() as f64)
}

/// Removes layers from the top one at a time and scores every truncation
/// with all layers causal.
pub fn degradation_sweep(
    model: &ModelParams,
    suite: &[Vec<SimilarityRecord>],
    template: &PromptTemplate,
    mode: SweepMode<'_>,
) -> Result<DegradationCurve> {
    if suite.is_empty() || suite.iter().any(Vec::is_empty) {
        return Err(Error::EmptyInput);
    }
    let n = model.n_layers();
    let mut points = Vec::with_capacity(n);
    for k in (1..=n).rev() {
        let plan = DirectionPlan::all_uni(k)?;
        let mut kept = model.truncate_layers(k)?;
        if let SweepMode::Retrain { config, data } = &mode {
            kept = train(&kept, &plan, data, config)?.model;
        }
        points.push((k, suite_score(&kept, &plan, suite, template)?));
    }
    Ok(DegradationCurve { points })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurningPoint {
    /// Layer count with the best score.
    pub layers: usize,
    /// `ρ(best) − ρ(full depth)`; zero when the full depth is best.
    pub drop: f64,
}

/// The layer count maximising ρ, preferring more layers on ties.
pub fn detect_turning_point(curve: &DegradationCurve) -> Result<TurningPoint> {
    let full = curve
        .points
        .iter()
        .max_by_key(|(k, _)| *k)
        .ok_or_else(|| contract("empty degradation curve"))?;
    let best = curve
        .points
        .iter()
        .copied()
        .reduce(|best, p| {
            if p.1 > best.1 || (p.1 == best.1 && p.0 > best.0) {
                p
            } else {
                best
            }
        })
        .expect("non-empty");
    Ok(TurningPoint {
        layers: best.0,
        drop: best.1 - full.1,
    })
}

/// Embeddings of the data distribution and of positive pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnisotropyInputs {
    pub data: Vec<Vec<f64>>,
    pub positives: Vec<(Vec<f64>, Vec<f64>)>,
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(contract("cannot normalise a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `(alignment, uniformity)` on unit-normalised vectors: mean squared
/// distance of positive pairs, and the log of the mean Gaussian potential
/// `exp(−2‖x − y‖²)` over distinct data pairs.
pub fn alignment_uniformity(inputs: &AnisotropyInputs) -> Result<(f64, f64)> {
    if inputs.data.len() < 2 {
        return Err(contract("uniformity needs at least two points"));
    }
    if inputs.positives.is_empty() {
        return Err(contract("alignment needs at least one positive pair"));
    }
    let d = inputs.data[0].len();
    let bad = inputs
        .data
        .iter()
        .chain(inputs.positives.iter().flat_map(|(a, b)| [a, b]))
        .any(|v| v.len() != d);
    if bad {
        return Err(Error::Shape("anisotropy vectors differ in dimension".into()));
    }
    let mut align = 0.0;
    for (a, b) in &inputs.positives {
        align += sq_dist(&unit(a)?, &unit(b)?);
    }
    align /= inputs.positives.len() as f64;

    let units = inputs.data.iter().map(|v| unit(v)).collect::<Result<Vec<_>>>()?;
    let mut potentials = Vec::with_capacity(units.len() * (units.len() - 1) / 2);
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            potentials.push(-2.0 * sq_dist(&units[i], &units[j]));
        }
    }
    let uniform = logsumexp(&potentials) - (potentials.len() as f64).ln();
    Ok((align, uniform))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_rows_score_one_and_reversed_rows_minus_one() {
        let row = vec![0.3, -1.0, 2.0, 0.7];
        let same = Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        assert!((dependency_score(&same, 2).unwrap() - 1.0).abs() < 1e-12);
        let reversed: Vec<f64> = row.iter().map(|v| -v).collect();
        let mixed = Tensor::from_rows(&[reversed.clone(), reversed, row]).unwrap();
        assert!((dependency_score(&mixed, 2).unwrap() + 1.0).abs() < 1e-12);
        assert!(dependency_score(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), 0).is_err());
    }

    #[test]
    fn summary_quartiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max, s.mean), (1.0, 2.0, 3.0, 4.0, 5.0, 3.0));
        let s = Summary::of(&[1.0, 2.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.25, 1.5, 1.75));
        assert!(Summary::of(&[]).is_err());
    }

    #[test]
    fn short_sentences_are_skipped() {
        let model = ModelParams::init(
            ModelConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 2,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let plan = DirectionPlan::last_bi(2).unwrap();
        let sentences = vec!["a cat".to_string(), String::new(), "two dogs ran".to_string()];
        let report = pivot_dependency_scores(&model, &plan, &sentences, PivotPosition::Last).unwrap();
        assert_eq!(report.scores.len(), 2);
        assert_eq!(report.skipped, vec![1]);
        assert!(report.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
        assert_eq!(report.summary, Summary::of(&report.scores).unwrap());
    }

    #[test]
    fn turning_point_examples() {
        let curve = |pts: &[(usize, f64)]| DegradationCurve { points: pts.to_vec() };
        let tp = detect_turning_point(&curve(&[(4, 0.3), (3, 0.6), (2, 0.5), (1, 0.2)])).unwrap();
        assert_eq!(tp.layers, 3);
        assert!((tp.drop - 0.3).abs() < 1e-12);
        let mono = detect_turning_point(&curve(&[(3, 0.9), (2, 0.5), (1, 0.1)])).unwrap();
        assert_eq!((mono.layers, mono.drop), (3, 0.0));
        let tie = detect_turning_point(&curve(&[(4, 0.1), (3, 0.5), (2, 0.5), (1, 0.2)])).unwrap();
        assert_eq!(tie.layers, 3);
        let single = detect_turning_point(&curve(&[(1, 0.4)])).unwrap();
        assert_eq!((single.layers, single.drop), (1, 0.0));
        assert!(detect_turning_point(&curve(&[])).is_err());
    }

    #[test]
    fn anisotropy_examples() {
        let v = vec![0.6, 0.8];
        let (align, _) = alignment_uniformity(&AnisotropyInputs {
            data: vec![v.clone(), vec![1.0, 0.0]],
            positives: vec![(v.clone(), v.iter().map(|x| 3.0 * x).collect())],
        })
        .unwrap();
        assert!(align.abs() < 1e-15);
        let (_, uniform) = alignment_uniformity(&AnisotropyInputs {
            data: vec![vec![1.0, 0.0], vec![-2.0, 0.0]],
            positives: vec![(v.clone(), v.clone())],
        })
        .unwrap();
        assert!((uniform + 8.0).abs() < 1e-12);
        assert!(alignment_uniformity(&AnisotropyInputs {
            data: vec![v.clone()],
            positives: vec![(v.clone(), v)],
        })
        .is_err());
    }

    #[test]
    fn anisotropy_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut v = || (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let data: Vec<Vec<f64>> = (0..10).map(|_| v()).collect();
        let positives: Vec<(Vec<f64>, Vec<f64>)> = (0..10).map(|_| (v(), v())).collect();
        let (align, uniform) = alignment_uniformity(&AnisotropyInputs {
            data: data.clone(),
            positives: positives.clone(),
        })
        .unwrap();
        let norm = |x: &Vec<f64>| {
            let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            x.iter().map(|a| a / n).collect::<Vec<f64>>()
        };
        let mut a = 0.0;
        for (x, y) in &positives {
            let (x, y) = (norm(x), norm(y));
            a += x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        }
        a /= 10.0;
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                if i < j {
                    let (x, y) = (norm(&data[i]), norm(&data[j]));
                    let dist: f64 = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum();
                    total += (-2.0 * dist).exp();
                    count += 1.0;
                }
            }
        }
        assert!((align - a).abs() < 1e-12);
        assert!((uniform - (total / count).ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn dependency_is_rank_invariant(seed in any::<u64>(), len in 2usize..6, d in 3usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..len).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let h = Tensor::from_rows(&rows).unwrap();
            let cubed = Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|x| x.powi(3)).collect()).collect::<Vec<_>>()).unwrap();
            let pivot = rng.gen_range(0..len);
            prop_assert_eq!(dependency_score(&h, pivot).unwrap(), dependency_score(&cubed, pivot).unwrap());
        }

        #[test]
        fn uniformity_is_non_positive(seed in any::<u64>(), m in 2usize..12, d in 1usize..6, collapse: bool) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..1.0)).collect();
            let data: Vec<Vec<f64>> = (0..m)
                .map(|_| if collapse { let c = rng.gen_range(0.5..2.0); base.iter().map(|x| x * c).collect() } else { (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect() })
                .collect();
            let pairs = vec![(base.clone(), base.clone())];
            let (_, u) = alignment_uniformity(&AnisotropyInputs { data: data.clone(), positives: pairs }).unwrap();
            prop_assert!(u <= 1e-15);
            if collapse {
                prop_assert!(u.abs() < 1e-12);
            }
        }
    }
}
