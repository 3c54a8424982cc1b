//! Deletion influence of description words and target selection.
//!
//! The influence of word `i` is `|L(D) - L(D without word i)|` on the proxy
//! batch. It is measured once, on the initial description.

use serde::{Deserialize, Serialize};

use crate::data::seeded_prefix;
use crate::harness::{EvalError, Objective};
use crate::prompt::TaskDescription;
use crate::ratio::Ratio;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub word_index: usize,
    pub word: String,
    pub base_loss: Ratio,
    pub deleted_loss: Ratio,
    pub influence: Ratio,
}

/// One score per word, in word order. The base loss is evaluated once; a
/// single-word description skips its deletion and scores influence 0.
pub fn compute_influence(
    objective: &Objective<'_>,
    description: &TaskDescription,
) -> Result<Vec<InfluenceScore>, EvalError> {
    let base_loss = objective.loss(description)?;
    influence_from_base(objective, description, base_loss)
}

/// As [`compute_influence`] with an already-known base loss.
pub fn influence_from_base(
    objective: &Objective<'_>,
    description: &TaskDescription,
    base_loss: Ratio,
) -> Result<Vec<InfluenceScore>, EvalError> {
    description
        .tokens()
        .map(|tok| {
            let deleted = description
                .without(tok.index)
                .expect("token index is in range");
            let deleted_loss = match deleted {
                Some(d) => objective.loss(&d)?,
                None => base_loss,
            };
            Ok(InfluenceScore {
                word_index: tok.index,
                word: tok.surface.to_owned(),
                base_loss,
                deleted_loss,
                influence: base_loss.abs_diff(deleted_loss),
            })
        })
        .collect()
}

/// Number of targets for `n` words: `ceil(fraction * n)`, at least one.
///
/// A small tolerance absorbs binary rounding so that `0.7 * 10` gives 7.
pub fn target_count(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    ((raw - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// The `ceil(fraction * n)` most influential word indices, most influential
/// first; equal influence goes to the earlier word.
pub fn select_targets(scores: &[InfluenceScore], fraction: f64) -> Vec<usize> {
    assert!(
        fraction > 0.0 && fraction <= 1.0,
        "target fraction must be in (0, 1], got {fraction}"
    );
    let mut ranked: Vec<&InfluenceScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.influence
            .cmp(&a.influence)
            .then(a.word_index.cmp(&b.word_index))
    });
    ranked
        .into_iter()
        .take(target_count(scores.len(), fraction))
        .map(|s| s.word_index)
        .collect()
}

/// Same target count as [`select_targets`], order and membership from a
/// seeded shuffle of all positions.
pub fn random_targets(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    seeded_prefix(n, target_count(n, fraction), seed)
}
