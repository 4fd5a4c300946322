use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape, Error, Result};

/// Fixed optimisation settings of the linear probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub l2: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-4,
            steps: 1000,
            learning_rate: 0.1,
        }
    }
}

/// Fits multinomial logistic regression on `train` by full-batch gradient
/// descent and returns accuracy on `test`. Features are standardised with
/// the training mean and spread.
pub fn transfer_probe(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], cfg: &ProbeConfig) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = train[0].0.len();
    if let Some((v, _)) = train.iter().chain(test).find(|(v, _)| v.len() != d) {
        return Err(shape(format!("feature vector of length {}, expected {d}", v.len())));
    }
    let classes: BTreeMap<usize, usize> = train
        .iter()
        .map(|(_, y)| *y)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, y)| (y, i))
        .collect();
    if classes.len() < 2 {
        return Err(contract("the training set needs at least two classes"));
    }
    if let Some((_, y)) = test.iter().find(|(_, y)| !classes.contains_key(y)) {
        return Err(contract(format!("test label {y} never occurs in training")));
    }

    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|(v, _)| v[j]).sum::<f64>() / n).collect();
    let spread: Vec<f64> = (0..d)
        .map(|j| {
            let var = train.iter().map(|(v, _)| (v[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardise = |v: &[f64]| -> Vec<f64> { v.iter().zip(&mean).zip(&spread).map(|((x, m), s)| (x - m) / s).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|(v, _)| standardise(v)).collect();
    let ys: Vec<usize> = train.iter().map(|(_, y)| classes[y]).collect();

    let c = classes.len();
    let mut w = vec![0.0; c * d];
    let mut b = vec![0.0; c];
    let mut probs = vec![0.0; c];
    for _ in 0..cfg.steps {
        let mut gw: Vec<f64> = w.iter().map(|wi| cfg.l2 * wi).collect();
        let mut gb = vec![0.0; c];
        for (x, &y) in xs.iter().zip(&ys) {
            scores(&w, &b, x, &mut probs);
            softmax(&mut probs);
            probs[y] -= 1.0;
            for k in 0..c {
                let gk = probs[k] / n;
                gb[k] += gk;
                for (g, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *g += gk * xi;
                }
            }
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= cfg.learning_rate * g);
        b.iter_mut().zip(&gb).for_each(|(bi, g)| *bi -= cfg.learning_rate * g);
    }

    let correct = test
        .iter()
        .filter(|(v, y)| {
            scores(&w, &b, &standardise(v), &mut probs);
            let best = probs
                .iter()
                .enumerate()
                .fold(0, |best, (k, s)| if *s > probs[best] { k } else { best });
            best == classes[y]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn scores(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

fn softmax(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn blobs(rng: &mut ChaCha8Rng, n: usize, centres: &[[f64; 3]], noise: f64) -> Vec<(Vec<f64>, usize)> {
        (0..n)
            .map(|i| {
                let y = i % centres.len();
                let v = centres[y]
                    .iter()
                    .map(|c| c + noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (v, y)
            })
            .collect()
    }

    #[test]
    fn separable_blobs_are_classified_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centres = [[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]];
        let train = blobs(&mut rng, 90, &centres, 0.3);
        let test = blobs(&mut rng, 60, &centres, 0.3);
        let cfg = ProbeConfig::default();
        assert_eq!(transfer_probe(&train, &test, &cfg).unwrap(), 1.0);
        assert_eq!(transfer_probe(&train, &train, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sample = |n: usize| -> Vec<(Vec<f64>, usize)> {
            (0..n)
                .map(|i| ((0..4).map(|_| rng.sample(StandardNormal)).collect(), i % 2))
                .collect()
        };
        let train = sample(1000);
        let test = sample(1000);
        let acc = transfer_probe(&train, &test, &ProbeConfig::default()).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn training_accuracy_is_at_least_held_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centres = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let train = blobs(&mut rng, 80, &centres, 0.8);
        let test = blobs(&mut rng, 80, &centres, 0.8);
        let cfg = ProbeConfig::default();
        let held_out = transfer_probe(&train, &test, &cfg).unwrap();
        let seen = transfer_probe(&train, &train, &cfg).unwrap();
        assert!(seen >= held_out, "{seen} < {held_out}");
    }

    #[test]
    fn contract_errors() {
        let one_class = vec![(vec![1.0], 0), (vec![2.0], 0)];
        assert!(transfer_probe(&one_class, &one_class, &ProbeConfig::default()).is_err());
        let two = vec![(vec![1.0], 0), (vec![2.0], 1)];
        assert!(transfer_probe(&two, &[(vec![1.0], 5)], &ProbeConfig::default()).is_err());
        assert!(transfer_probe(&two, &[(vec![1.0, 2.0], 0)], &ProbeConfig::default()).is_err());
    }
}
