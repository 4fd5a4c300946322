//! Byte-level tokenizer and token-embedding lookup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Byte-level vocabulary: ids `0..256` are raw bytes, followed by specials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub pad: usize,
    pub begin: usize,
    pub end: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            pad: 256,
            begin: 257,
            end: 258,
        }
    }
}

impl Vocabulary {
    pub const BYTES: usize = 256;

    pub fn size(&self) -> usize {
        Self::BYTES + 3
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad || id == self.begin || id == self.end
    }

    pub fn token_name(&self, id: usize) -> Option<String> {
        match id {
            b if b < Self::BYTES => Some(format!("{:?}", b as u8 as char)),
            b if b == self.pad => Some("<pad>".into()),
            b if b == self.begin => Some("<s>".into()),
            b if b == self.end => Some("</s>".into()),
            _ => None,
        }
    }
}

/// Sequence of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<usize>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }
}

/// Encodes UTF-8 text byte by byte with a leading begin token.
pub fn tokenize(vocab: &Vocabulary, s: &str) -> Result<TokenSeq> {
    if s.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut ids = Vec::with_capacity(s.len() + 1);
    ids.push(vocab.begin);
    ids.extend(s.bytes().map(usize::from));
    Ok(TokenSeq(ids))
}

/// Decodes ids back to text, skipping special tokens.
pub fn detokenize(vocab: &Vocabulary, ids: &[usize]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id >= vocab.size() {
            return Err(Error::Index {
                index: id,
                size: vocab.size(),
            });
        }
        if !vocab.is_special(id) {
            bytes.push(id as u8);
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Looks up the rows of `table` named by `tokens`.
pub fn embed(tokens: &TokenSeq, table: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.input(table.clone())?;
    let out = g.gather(t, tokens.ids())?;
    Ok(g.value(out).clone())
}

/// Graph form of [`embed`], differentiable with respect to `table`.
pub fn embed_var(graph: &mut Graph<'_>, tokens: &TokenSeq, table: Var) -> Result<Var> {
    graph.gather(table, tokens.ids())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_ascii_byte() {
        let v = Vocabulary::default();
        assert_eq!(tokenize(&v, "A").unwrap().0, vec![v.begin, 65]);
        assert!(matches!(tokenize(&v, ""), Err(Error::EmptyInput)));
    }

    #[test]
    fn prefix_stable() {
        let v = Vocabulary::default();
        let ab = tokenize(&v, "ab").unwrap();
        let abc = tokenize(&v, "abc").unwrap();
        assert_eq!(ab.0[..], abc.0[..3]);
    }

    #[test]
    fn decode_skips_specials() {
        let v = Vocabulary::default();
        assert_eq!(detokenize(&v, &[v.begin, 72, 105]).unwrap(), "Hi");
        assert_eq!(detokenize(&v, &[]).unwrap(), "");
        assert!(detokenize(&v, &[999]).is_err());
    }

    #[test]
    fn specials_are_distinct_from_bytes() {
        let v = Vocabulary::default();
        let all: Vec<usize> = (0..=255u8).map(usize::from).collect();
        assert!(all.iter().all(|&b| !v.is_special(b)));
        assert_eq!(v.size(), 259);
    }

    #[test]
    fn identity_table_gives_one_hot_rows() {
        let v = Vocabulary::default();
        let table = Tensor::identity(v.size());
        let seq = TokenSeq(vec![3, 3, 258]);
        let out = embed(&seq, &table).unwrap();
        for (i, &id) in seq.ids().iter().enumerate() {
            let row = out.row(i).unwrap();
            assert_eq!(row[id], 1.0);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
        assert_eq!(out.row(0).unwrap(), out.row(1).unwrap());
        assert!(embed(&TokenSeq(vec![259]), &table).is_err());
    }

    #[test]
    fn embedding_gradient_counts_occurrences() {
        let table = Tensor::new(vec![5, 2], (0..10).map(f64::from).collect()).unwrap();
        let seq = TokenSeq(vec![1, 3, 1, 1, 4]);
        let mut g = Graph::new();
        let t = g.variable(table).unwrap();
        let e = embed_var(&mut g, &seq, t).unwrap();
        let s = g.sum(e).unwrap();
        let grads = g.backward(s).unwrap();
        let gt = grads.wrt(t).unwrap();
        for row in 0..5 {
            let count = seq.ids().iter().filter(|&&id| id == row).count() as f64;
            assert_eq!(gt[row * 2], count);
            assert_eq!(gt[row * 2 + 1], count);
        }
    }

    #[test]
    fn permuting_tokens_permutes_rows() {
        let table = Tensor::new(vec![4, 3], (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
        let a = embed(&TokenSeq(vec![0, 2, 3]), &table).unwrap();
        let b = embed(&TokenSeq(vec![3, 0, 2]), &table).unwrap();
        assert_eq!(a.row(0).unwrap(), b.row(1).unwrap());
        assert_eq!(a.row(2).unwrap(), b.row(0).unwrap());
    }

    proptest! {
        #[test]
        fn printable_round_trip(s in "[ -~]{1,40}") {
            let v = Vocabulary::default();
            let ids = tokenize(&v, &s).unwrap();
            prop_assert_eq!(detokenize(&v, ids.ids()).unwrap(), s.clone());
            let again = tokenize(&v, &detokenize(&v, ids.ids()).unwrap()).unwrap();
            prop_assert_eq!(again, ids);
        }
    }
}
