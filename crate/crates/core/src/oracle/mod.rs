//! Completion oracles and fill-mask providers: the two black boxes the
//! optimizer queries.

mod fill_mask;
mod http;
pub mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fill_mask::{HttpFillMask, StaticFillMask};
pub use http::{OpenAiClient, OracleConfig, RetryPolicy};

/// Decoding settings that affect what an oracle returns. Part of every cache key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_output_units: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_units: 16,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("api key environment variable {0} is not set")]
    AuthMissing(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no scripted response for prompt {0}")]
    Unscripted(String),
}

impl OracleError {
    /// Whether retrying the same request may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            Self::Status { status, .. } => *status == 429 || *status >= 500,
            Self::Transport(_) => true,
            _ => false,
        }
    }
}

/// A language model seen only through its text completions.
pub trait CompletionOracle: Send + Sync {
    /// Stable name for the model behind this oracle; part of the cache key.
    fn identity(&self) -> &str;

    fn decoding(&self) -> DecodingParams;

    /// Upper bound on concurrent `complete` calls.
    fn parallelism(&self) -> usize {
        1
    }

    fn complete(&self, prompt: &str) -> Result<String, OracleError>;
}

impl<T: CompletionOracle + ?Sized> CompletionOracle for &T {
    fn identity(&self) -> &str {
        (**self).identity()
    }
    fn decoding(&self) -> DecodingParams {
        (**self).decoding()
    }
    fn parallelism(&self) -> usize {
        (**self).parallelism()
    }
    fn complete(&self, prompt: &str) -> Result<String, OracleError> {
        (**self).complete(prompt)
    }
}

/// One fill-mask answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFill {
    pub word: String,
    pub probability: f64,
}

impl MaskFill {
    pub fn new(word: impl Into<String>, probability: f64) -> Self {
        Self {
            word: word.into(),
            probability,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("masked text must contain exactly one [MASK], found {0}")]
    BadMaskCount(usize),
    #[error("fill-mask provider failed: {0}")]
    Failure(String),
}

/// A masked language model returning whole-word completions for a single
/// `[MASK]` marker, most probable first.
pub trait FillMaskProvider: Send + Sync {
    fn fill_mask(&self, masked_text: &str, k: usize) -> Result<Vec<MaskFill>, ProviderError>;
}

impl<T: FillMaskProvider + ?Sized> FillMaskProvider for &T {
    fn fill_mask(&self, masked_text: &str, k: usize) -> Result<Vec<MaskFill>, ProviderError> {
        (**self).fill_mask(masked_text, k)
    }
}

pub(crate) fn check_mask_count(masked_text: &str) -> Result<(), ProviderError> {
    match masked_text.matches(crate::prompt::MASK_MARKER).count() {
        1 => Ok(()),
        n => Err(ProviderError::BadMaskCount(n)),
    }
}

/// Stable sort by probability, highest first, and truncate to `k`.
pub(crate) fn normalize_fills(mut fills: Vec<MaskFill>, k: usize) -> Result<Vec<MaskFill>, ProviderError> {
    if let Some(bad) = fills
        .iter()
        .find(|f| !(0.0..=1.0).contains(&f.probability))
    {
        return Err(ProviderError::Failure(format!(
            "probability {} for {:?} outside [0, 1]",
            bad.probability, bad.word
        )));
    }
    fills.sort_by(|a, b| b.probability.total_cmp(&a.probability));
    fills.truncate(k);
    Ok(fills)
}
