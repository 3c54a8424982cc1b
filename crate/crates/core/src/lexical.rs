//! Per-position substitution candidates from a fill-mask provider, and the
//! one-word neighborhood of a description.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{FillMaskProvider, ProviderError};
use crate::prompt::{PromptError, TaskDescription};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LexicalError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("position {position} out of range for a {len}-word description")]
    PositionOutOfRange { position: usize, len: usize },
}

impl From<PromptError> for LexicalError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::PositionOutOfRange { position, len } => {
                LexicalError::PositionOutOfRange { position, len }
            }
            other => LexicalError::Provider(ProviderError::Failure(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Word(String),
    Delete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub kind: CandidateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

impl Candidate {
    pub fn word(surface: impl Into<String>, probability: f64) -> Self {
        Self {
            kind: CandidateKind::Word(surface.into()),
            probability: Some(probability),
        }
    }

    pub fn delete() -> Self {
        Self {
            kind: CandidateKind::Delete,
            probability: None,
        }
    }

    pub fn is_delete(&self) -> bool {
        self.kind == CandidateKind::Delete
    }

    /// Apply at `position`. `Ok(None)` when deleting the only word.
    pub fn apply(&self, d: &TaskDescription, position: usize) -> Result<Option<TaskDescription>, PromptError> {
        match &self.kind {
            CandidateKind::Word(w) => d.with_word(position, w).map(Some),
            CandidateKind::Delete => d.without(position),
        }
    }

    pub fn label(&self) -> &str {
        match &self.kind {
            CandidateKind::Word(w) => w,
            CandidateKind::Delete => "<delete>",
        }
    }
}

/// Substitutions for one position, most probable first, delete last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub position: usize,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| !c.is_delete())
    }
}

/// Query `provider` with `d` masked at `position` and keep up to `k` usable
/// whole words, followed by the delete candidate.
///
/// The provider is asked for `k + 1` answers since its top answer is often
/// the original word, which is dropped. Empty or whitespace-bearing answers
/// and repeats are dropped too.
pub fn build_candidates(
    provider: &dyn FillMaskProvider,
    d: &TaskDescription,
    position: usize,
    k: usize,
) -> Result<CandidateSet, LexicalError> {
    let masked = d.masked(position)?;
    let original = d.word(position).expect("position checked by masked()");
    let fills = provider.fill_mask(&masked, k + 1)?;

    let mut candidates: Vec<Candidate> = Vec::with_capacity(k + 1);
    for fill in fills {
        if candidates.len() == k {
            break;
        }
        let w = fill.word.as_str();
        if w.is_empty() || w.chars().any(char::is_whitespace) || w == original {
            continue;
        }
        if candidates
            .iter()
            .any(|c| matches!(&c.kind, CandidateKind::Word(x) if x == w))
        {
            continue;
        }
        candidates.push(Candidate::word(w, fill.probability));
    }
    candidates.push(Candidate::delete());
    Ok(CandidateSet {
        position,
        candidates,
    })
}

/// A description one word away from the original.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub description: TaskDescription,
    pub position: usize,
    pub candidate: String,
    pub probability: Option<f64>,
}

/// Up to `k` single-word substitutions per position, ordered by position
/// then provider rank. Deletions are not part of the neighborhood.
pub fn neighborhood(
    provider: &dyn FillMaskProvider,
    d: &TaskDescription,
    k: usize,
) -> Result<Vec<Neighbor>, LexicalError> {
    let mut out = Vec::new();
    for position in 0..d.len() {
        let set = build_candidates(provider, d, position, k)?;
        for c in set.words() {
            let description = c
                .apply(d, position)?
                .expect("word substitution keeps length");
            out.push(Neighbor {
                description,
                position,
                candidate: c.label().to_owned(),
                probability: c.probability,
            });
        }
    }
    Ok(out)
}
