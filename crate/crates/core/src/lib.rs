//! Decoder transformers whose final attention layers see the whole sequence,
//! trained contrastively to produce sentence embeddings, plus the analysis
//! and evaluation tooling around them.

pub mod analysis;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod io;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use extraction::{build_prompt, Embedder, PivotRule, PromptTemplate};
pub use model::{Direction, DirectionPlan, LoraConfig, ModelConfig, ModelParams, Strategy};
pub use numerics::{Graph, ParamStore, Tensor};
pub use tokenizer::{detokenize, tokenize, TokenSeq, Vocabulary};
