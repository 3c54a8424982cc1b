//! Black-box lexical optimization of LLM task descriptions.
//!
//! A prompt's task description is improved one word at a time: words are
//! ranked by how much deleting them moves the error rate on a small proxy
//! batch, and the most influential ones are replaced by masked-LM
//! suggestions whenever that strictly lowers the proxy error rate.
//!
//! The language model and the masked LM are black boxes behind
//! [`CompletionOracle`] and [`FillMaskProvider`]; deterministic doubles in
//! [`oracle::mock`] make every part of the pipeline testable offline.

pub mod cache;
pub mod data;
pub mod harness;
pub mod influence;
pub mod lexical;
pub mod optimizer;
pub mod oracle;
pub mod prompt;
pub mod ratio;
pub mod template_file;

pub use cache::ResponseCache;
pub use data::{load_pool, sample_reference, PoolFormat, ReferenceBatch, TaskInstance, TaskPool};
pub use harness::{cache_key, evaluate_batch, match_response, BatchResult, MatchPolicy, Objective};
pub use influence::{compute_influence, select_targets, InfluenceScore};
pub use lexical::{build_candidates, neighborhood, Candidate, CandidateKind, CandidateSet};
pub use optimizer::{
    optimize, optimize_on_batch, replay, OptimizationParams, OptimizationTrace, OrderMode, Outcome,
};
pub use oracle::{CompletionOracle, DecodingParams, FillMaskProvider, MaskFill};
pub use prompt::{render_prompt, DemoExample, PromptTemplate, TaskDescription, Verbalizer};
pub use ratio::Ratio;
pub use template_file::{load_template, parse_template};
