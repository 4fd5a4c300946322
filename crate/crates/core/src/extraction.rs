//! Representative-word prompting and sentence-embedding extraction.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{Direction, DirectionPlan, ForwardCtx, ModelParams};
use crate::numerics::{Graph, Tensor, Var};
use crate::tokenizer::{detokenize, tokenize, TokenSeq};

const SENTENCE: &str = "{sentence}";
const CONDITION: &str = "{condition}";

/// Which hidden state stands for the sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PivotRule {
    /// The last prompt position, i.e. the state that predicts the word.
    #[default]
    LastPromptToken,
    /// Greedily decode one token and take the state at that position.
    GeneratedToken,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
    #[serde(default)]
    pub pivot: PivotRule,
}

impl PromptTemplate {
    pub fn standard() -> Self {
        PromptTemplate {
            text: "The representative word for {sentence} is:\"".into(),
            pivot: PivotRule::LastPromptToken,
        }
    }

    pub fn conditional() -> Self {
        PromptTemplate {
            text: "Given the context {condition}, summarize the sentence {sentence} in one word:\"".into(),
            pivot: PivotRule::LastPromptToken,
        }
    }

    pub fn with_pivot(mut self, pivot: PivotRule) -> Self {
        self.pivot = pivot;
        self
    }

    pub fn is_conditional(&self) -> bool {
        self.text.contains(CONDITION)
    }
}

/// Substitutes the sentence (and condition, for conditional templates).
pub fn build_prompt(sentence: &str, condition: Option<&str>, template: &PromptTemplate) -> Result<String> {
    if sentence.is_empty() {
        return Err(contract("sentence must be non-empty"));
    }
    let text = &template.text;
    if text.matches(SENTENCE).count() != 1 {
        return Err(contract("template must contain {sentence} exactly once"));
    }
    let conditional = match text.matches(CONDITION).count() {
        0 => false,
        1 => true,
        _ => return Err(contract("template repeats {condition}")),
    };
    match (conditional, condition) {
        (true, None) => return Err(contract("conditional template needs a condition")),
        (false, Some(_)) => return Err(contract("template has no {condition} placeholder")),
        _ => {}
    }
    // substitute the condition last so a sentence containing "{condition}"
    // is not rewritten
    let (head, tail) = text.split_once(SENTENCE).expect("checked above");
    let fill = |part: &str| match condition {
        Some(c) => part.replacen(CONDITION, c, 1),
        None => part.to_string(),
    };
    Ok(format!("{}{sentence}{}", fill(head), fill(tail)))
}

/// A sentence vector together with how it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub prompt: String,
    pub pivot: PivotRule,
}

/// Greedy decode result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedWord {
    pub text: String,
    pub ids: Vec<usize>,
}

impl ModelParams {
    /// Next-token logits at the last position using only the causal layers
    /// `1..=t` of `plan`.
    fn next_token_logits(&self, tokens: &TokenSeq, plan: &DirectionPlan) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let mut ctx = ForwardCtx::eval();
        let mut h = self.embed_inputs(&mut g, tokens)?;
        for l in 0..plan.turning_point() {
            h = self.layer_graph(&mut g, l, h, Direction::Uni, &mut ctx)?;
        }
        let last = g.select_rows(h, &[tokens.len() - 1])?;
        let logits = self.lm_logits(&mut g, last)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Greedy decoding through the causal section only. The first token is
    /// drawn from non-whitespace bytes; decoding then stops at whitespace,
    /// the end token, or `max_tokens`.
    pub fn generate_representative_word(
        &self,
        plan: &DirectionPlan,
        prompt: &str,
        max_tokens: usize,
    ) -> Result<GeneratedWord> {
        if max_tokens == 0 {
            return Err(contract("max_tokens must be at least 1"));
        }
        let mut tokens = tokenize(&self.vocab, prompt)?;
        let mut ids = Vec::new();
        while ids.len() < max_tokens && tokens.len() < self.config.max_len {
            let logits = self.next_token_logits(&tokens, plan)?;
            let first = ids.is_empty();
            let pick = logits
                .iter()
                .enumerate()
                .filter(|&(id, _)| {
                    if first {
                        id < 256 && !(id as u8).is_ascii_whitespace()
                    } else {
                        id < 256 || id == self.vocab.end
                    }
                })
                .fold((0usize, f64::NEG_INFINITY), |best, (id, &v)| if v > best.1 { (id, v) } else { best })
                .0;
            if !first && (pick == self.vocab.end || (pick < 256 && (pick as u8).is_ascii_whitespace())) {
                break;
            }
            ids.push(pick);
            tokens.0.push(pick);
        }
        Ok(GeneratedWord {
            text: detokenize(&self.vocab, &ids)?,
            ids,
        })
    }

    /// Tokens whose final position carries the sentence embedding.
    pub fn pivot_tokens(&self, plan: &DirectionPlan, prompt: &str, pivot: PivotRule) -> Result<TokenSeq> {
        let mut tokens = tokenize(&self.vocab, prompt)?;
        if pivot == PivotRule::GeneratedToken {
            let word = self.generate_representative_word(plan, prompt, 1)?;
            tokens.0.extend(word.ids);
        }
        Ok(tokens)
    }

    /// Records the embedding (`1×d`) of already-prepared pivot tokens.
    pub fn embedding_graph<'s>(
        &'s self,
        g: &mut Graph<'s>,
        plan: &DirectionPlan,
        tokens: &TokenSeq,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let trace = self.forward_graph(g, tokens, plan, ctx)?;
        g.select_rows(trace.hidden, &[tokens.len() - 1])
    }

    pub fn sentence_embedding(&self, plan: &DirectionPlan, prompt: &str, pivot: PivotRule) -> Result<SentenceEmbedding> {
        let tokens = self.pivot_tokens(plan, prompt, pivot)?;
        let mut g = Graph::with_params(&self.store);
        let v = self.embedding_graph(&mut g, plan, &tokens, &mut ForwardCtx::eval())?;
        Ok(SentenceEmbedding {
            vector: g.value(v).data().to_vec(),
            prompt: prompt.to_string(),
            pivot,
        })
    }
}

/// Embeds sentences with a fixed model, plan and template.
#[derive(Clone, Copy, Debug)]
pub struct Embedder<'m> {
    pub model: &'m ModelParams,
    pub plan: &'m DirectionPlan,
    pub template: &'m PromptTemplate,
}

impl<'m> Embedder<'m> {
    pub fn new(model: &'m ModelParams, plan: &'m DirectionPlan, template: &'m PromptTemplate) -> Self {
        Embedder { model, plan, template }
    }

    /// Embeds `sentence`; a condition switches to the conditional template.
    pub fn embed(&self, sentence: &str, condition: Option<&str>) -> Result<Vec<f64>> {
        let conditional;
        let template = match condition {
            Some(_) if !self.template.is_conditional() => {
                conditional = PromptTemplate::conditional().with_pivot(self.template.pivot);
                &conditional
            }
            _ => self.template,
        };
        let prompt = build_prompt(sentence, condition, template)?;
        Ok(self.model.sentence_embedding(self.plan, &prompt, template.pivot)?.vector)
    }

    pub fn embed_all(&self, sentences: &[String]) -> Result<Vec<Vec<f64>>> {
        sentences.iter().map(|s| self.embed(s, None)).collect()
    }

    pub fn embed_matrix(&self, sentences: &[String]) -> Result<Tensor> {
        Tensor::from_rows(&self.embed_all(sentences)?)
    }
}
