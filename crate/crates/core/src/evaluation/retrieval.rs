use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape, Error, Result};
use crate::training::cosine;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalItem {
    pub id: usize,
    pub text: String,
    /// Empty until the corpus has been embedded.
    pub embedding: Vec<f64>,
}

/// Items plus, for every query id, the ids it should retrieve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCorpus {
    pub items: Vec<RetrievalItem>,
    pub groups: BTreeMap<usize, BTreeSet<usize>>,
}

impl RetrievalCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: usize) -> Result<&RetrievalItem> {
        self.items.iter().find(|it| it.id == id).ok_or(Error::Index {
            index: id,
            size: self.items.len(),
        })
    }

    /// Fills every item's embedding with `embed(text)`.
    pub fn embed_with<F>(&mut self, mut embed: F) -> Result<()>
    where
        F: FnMut(&str) -> Result<Vec<f64>>,
    {
        for item in &mut self.items {
            item.embedding = embed(&item.text)?;
        }
        Ok(())
    }

    /// Runs every grouped query and returns `(query id, retrieved ids)`
    /// with `k` equal to the size of that query's reference set.
    pub fn run_queries(&self) -> Result<Vec<(usize, Vec<usize>)>> {
        self.groups
            .iter()
            .map(|(&q, refs)| {
                let query = self.item(q)?;
                Ok((q, retrieve_topk(&query.embedding, Some(q), self, refs.len())?))
            })
            .collect()
    }

    /// Strict accuracy of [`run_queries`](Self::run_queries).
    pub fn strict_accuracy(&self) -> Result<f64> {
        let results = self.run_queries()?;
        let retrieved: Vec<Vec<usize>> = results.into_iter().map(|(_, r)| r).collect();
        let refs: Vec<BTreeSet<usize>> = self.groups.values().cloned().collect();
        strict_accuracy(&retrieved, &refs)
    }
}

/// Exact cosine ranking of the corpus against `query`, highest first, ties
/// by ascending id. The item with id `exclude` is never returned.
pub fn retrieve_topk(query: &[f64], exclude: Option<usize>, corpus: &RetrievalCorpus, k: usize) -> Result<Vec<usize>> {
    let mut scored = Vec::with_capacity(corpus.len());
    for item in &corpus.items {
        if Some(item.id) == exclude {
            continue;
        }
        if item.embedding.len() != query.len() {
            return Err(shape(format!(
                "item {} has dimension {}, query has {}",
                item.id,
                item.embedding.len(),
                query.len()
            )));
        }
        // adding zero turns -0.0 into 0.0 so orthogonal items tie under total_cmp
        scored.push((cosine(query, &item.embedding)? + 0.0, item.id));
    }
    if k > scored.len() {
        return Err(contract(format!("k = {k} exceeds the {} candidates", scored.len())));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}

/// Fraction of queries whose retrieved set equals the reference set.
pub fn strict_accuracy(results: &[Vec<usize>], references: &[BTreeSet<usize>]) -> Result<f64> {
    if results.len() != references.len() {
        return Err(contract(format!(
            "{} result lists for {} reference sets",
            results.len(),
            references.len()
        )));
    }
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut hits = 0usize;
    for (i, (got, want)) in results.iter().zip(references).enumerate() {
        if got.len() != want.len() {
            return Err(contract(format!(
                "query {i} retrieved {} items for {} references",
                got.len(),
                want.len()
            )));
        }
        let got: BTreeSet<usize> = got.iter().copied().collect();
        hits += usize::from(&got == want);
    }
    Ok(hits as f64 / results.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corpus(vectors: Vec<Vec<f64>>) -> RetrievalCorpus {
        RetrievalCorpus {
            items: vectors
                .into_iter()
                .enumerate()
                .map(|(id, embedding)| RetrievalItem {
                    id,
                    text: format!("item {id}"),
                    embedding,
                })
                .collect(),
            groups: BTreeMap::new(),
        }
    }

    #[test]
    fn duplicate_ranks_first_and_full_k_is_a_permutation() {
        let c = corpus(vec![vec![1.0, 0.2], vec![0.0, 1.0], vec![1.0, 0.2], vec![-1.0, 0.3]]);
        let top = retrieve_topk(&[1.0, 0.2], Some(0), &c, 3).unwrap();
        assert_eq!(top[0], 2);
        let mut sorted = top.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 2, 3]);
        assert!(retrieve_topk(&[1.0, 0.2], Some(0), &c, 4).is_err());
    }

    #[test]
    fn ties_go_to_the_smaller_id() {
        let c = corpus(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(retrieve_topk(&[1.0, 0.0], None, &c, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn strict_accuracy_examples() {
        let refs = vec![BTreeSet::from([1, 2, 3, 4]), BTreeSet::from([6, 7, 8, 9])];
        assert_eq!(strict_accuracy(&[vec![4, 3, 2, 1], vec![9, 8, 7, 6]], &refs).unwrap(), 1.0);
        assert_eq!(strict_accuracy(&[vec![1, 2, 3, 5], vec![6, 7, 8, 0]], &refs).unwrap(), 0.0);
        assert_eq!(strict_accuracy(&[vec![1, 2, 3, 4], vec![6, 7, 8, 0]], &refs).unwrap(), 0.5);
        assert!(strict_accuracy(&[vec![1, 2, 3], vec![6, 7, 8, 9]], &refs).is_err());
    }

    proptest! {
        #[test]
        fn matches_pairwise_ranking_oracle(seed in any::<u64>(), n in 2usize..30, d in 1usize..6, exponent in -4i32..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vectors: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| f64::from(rng.gen_range(-3i32..=3))).collect())
                .map(|v: Vec<f64>| if v.iter().all(|x| *x == 0.0) { vec![1.0; d] } else { v })
                .collect();
            let c = corpus(vectors.clone());
            let q = rng.gen_range(0..n);
            let k = rng.gen_range(0..n);
            let got = retrieve_topk(&vectors[q], Some(q), &c, k).unwrap();

            // pairwise-comparison oracle: an item's position is the number of
            // items that beat it
            let cos = |v: &Vec<f64>| cosine(&vectors[q], v).unwrap();
            let mut want: Vec<(usize, usize)> = (0..n)
                .filter(|&i| i != q)
                .map(|i| {
                    let beaten_by = (0..n)
                        .filter(|&j| j != q && j != i)
                        .filter(|&j| cos(&vectors[j]) > cos(&vectors[i]) || (cos(&vectors[j]) == cos(&vectors[i]) && j < i))
                        .count();
                    (beaten_by, i)
                })
                .collect();
            want.sort_unstable();
            let want: Vec<usize> = want.into_iter().take(k).map(|(_, i)| i).collect();
            prop_assert_eq!(&got, &want);

            // power-of-two scaling is exact, so even near-ties must survive it
            let scale = 2f64.powi(exponent);
            let mut rescaled = c.clone();
            for item in &mut rescaled.items {
                item.embedding.iter_mut().for_each(|x| *x *= scale);
            }
            prop_assert_eq!(retrieve_topk(&vectors[q], Some(q), &rescaled, k).unwrap(), got);
        }
    }
}
