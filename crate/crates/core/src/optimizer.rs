//! Greedy single-pass lexical optimization of a task description.
//!
//! 1. Sample a proxy batch once from the proxy pool.
//! 2. Score deletion influence on the initial description and keep the
//!    `ceil(fraction * n)` most influential positions.
//! 3. Visit each target once, most influential first. Mask the word in the
//!    *current* description, evaluate every candidate on the proxy batch,
//!    and take the lowest-loss candidate only if it strictly beats the
//!    current loss. Ties go to the earlier candidate.
//!
//! Positions in the trace always refer to the initial description. After an
//! accepted deletion later positions shift left in the current description;
//! `current_index` in each iteration record gives the shifted index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::ResponseCache;
use crate::data::{sample_reference, DataError, ReferenceBatch, TaskPool, SAMPLER_ID};
use crate::harness::{EvalError, Objective};
use crate::influence::{influence_from_base, random_targets, select_targets, InfluenceScore};
use crate::lexical::{build_candidates, Candidate, CandidateKind, LexicalError};
use crate::oracle::{CompletionOracle, FillMaskProvider};
use crate::prompt::{PromptTemplate, TaskDescription, Verbalizer};
use crate::ratio::Ratio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    /// Descending deletion influence.
    #[default]
    Influence,
    /// Seeded shuffle of positions; no influence is measured.
    Random,
}

impl std::str::FromStr for OrderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "influence" => Ok(Self::Influence),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown order mode {other:?} (expected influence or random)")),
        }
    }
}

fn default_reference_size() -> usize {
    100
}
fn default_candidate_k() -> usize {
    30
}
fn default_target_fraction() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationParams {
    /// Proxy batch size.
    #[serde(default = "default_reference_size")]
    pub reference_size: usize,
    /// Fill-mask answers kept per position (delete comes on top).
    #[serde(default = "default_candidate_k")]
    pub candidate_k: usize,
    /// Share of words, by influence, that get optimized.
    #[serde(default = "default_target_fraction")]
    pub target_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub order_mode: OrderMode,
}

impl Default for OptimizationParams {
    fn default() -> Self {
        Self {
            reference_size: default_reference_size(),
            candidate_k: default_candidate_k(),
            target_fraction: default_target_fraction(),
            seed: 0,
            order_mode: OrderMode::Influence,
        }
    }
}

impl OptimizationParams {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        if self.reference_size == 0 {
            return Err(OptimizeError::InvalidParams("reference_size must be >= 1".into()));
        }
        if self.candidate_k == 0 {
            return Err(OptimizeError::InvalidParams("candidate_k must be >= 1".into()));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return Err(OptimizeError::InvalidParams(format!(
                "target_fraction must be in (0, 1], got {}",
                self.target_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub step: usize,
    /// Word index in the initial description.
    pub position: usize,
    /// Word index in the description as it stood at this step.
    pub current_index: usize,
    pub original_word: String,
    /// Size of the candidate set, delete included.
    pub candidate_set_size: usize,
    /// Candidates actually evaluated; deleting the last word is skipped.
    pub candidates_tried: usize,
    pub best_candidate: Option<Candidate>,
    pub best_loss: Option<Ratio>,
    pub loss_before: Ratio,
    pub loss_after: Ratio,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Aborted { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub initial_description: TaskDescription,
    pub params: OptimizationParams,
    pub sampler: String,
    pub reference_ids: Vec<String>,
    /// Empty in random order mode.
    pub influence_ranking: Vec<InfluenceScore>,
    pub targets: Vec<usize>,
    pub iterations: Vec<IterationRecord>,
    pub final_description: TaskDescription,
    pub initial_loss: Ratio,
    pub final_loss: Ratio,
    pub status: RunStatus,
}

impl OptimizationTrace {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn accepted(&self) -> impl Iterator<Item = &IterationRecord> {
        self.iterations.iter().filter(|r| r.accepted)
    }
}

/// Why a run stopped after the proxy batch was already scored.
#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Lexical(#[from] LexicalError),
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid optimization parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("initial evaluation failed: {0}")]
    Initial(#[source] EvalError),
    /// The trace holds every iteration completed before the failure.
    #[error("run aborted after {} iterations: {source}", trace.iterations.len())]
    Aborted {
        #[source]
        source: StepError,
        trace: Box<OptimizationTrace>,
    },
}

/// Counters for one run. Not part of the trace, so warm and cold runs
/// produce identical traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub batch_evaluations: usize,
    pub oracle_calls: usize,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub template: PromptTemplate,
    pub trace: OptimizationTrace,
    pub stats: RunStats,
}

/// Sample the proxy batch from `proxy_pool` and optimize on it.
pub fn optimize(
    oracle: &dyn CompletionOracle,
    provider: &dyn FillMaskProvider,
    template: &PromptTemplate,
    proxy_pool: &TaskPool,
    params: &OptimizationParams,
    cache: &ResponseCache,
) -> Result<Outcome, OptimizeError> {
    params.validate()?;
    let batch = sample_reference(proxy_pool, params.reference_size, params.seed)?;
    optimize_on_batch(oracle, provider, template, &batch, proxy_pool.verbalizer(), params, cache)
}

/// Description under optimization, addressed by initial word index.
struct Slots(Vec<Option<String>>);

impl Slots {
    fn new(d: &TaskDescription) -> Self {
        Self(d.words().iter().cloned().map(Some).collect())
    }

    fn current(&self) -> TaskDescription {
        TaskDescription::from_words(self.0.iter().flatten().cloned())
            .expect("slots never all empty")
    }

    fn current_index(&self, position: usize) -> usize {
        self.0[..position].iter().filter(|s| s.is_some()).count()
    }

    fn apply(&mut self, position: usize, candidate: &Candidate) {
        self.0[position] = match &candidate.kind {
            CandidateKind::Word(w) => Some(w.clone()),
            CandidateKind::Delete => None,
        };
    }
}

/// Run on an already-sampled proxy batch. `params.reference_size` is not
/// consulted.
pub fn optimize_on_batch(
    oracle: &dyn CompletionOracle,
    provider: &dyn FillMaskProvider,
    template: &PromptTemplate,
    batch: &ReferenceBatch,
    verbalizer: &Verbalizer,
    params: &OptimizationParams,
    cache: &ResponseCache,
) -> Result<Outcome, OptimizeError> {
    params.validate()?;
    let objective = Objective::new(oracle, template, &batch.instances, verbalizer, cache);
    let initial = template.description.clone();
    let initial_loss = objective.loss(&initial).map_err(OptimizeError::Initial)?;

    let mut trace = OptimizationTrace {
        initial_description: initial.clone(),
        params: params.clone(),
        sampler: SAMPLER_ID.to_owned(),
        reference_ids: batch.ids().into_iter().map(str::to_owned).collect(),
        influence_ranking: Vec::new(),
        targets: Vec::new(),
        iterations: Vec::new(),
        final_description: initial.clone(),
        initial_loss,
        final_loss: initial_loss,
        status: RunStatus::Complete,
    };

    let mut slots = Slots::new(&initial);
    let result = run_steps(&objective, provider, params, &mut slots, &mut trace);

    let stats = RunStats {
        batch_evaluations: objective.batch_evaluations(),
        oracle_calls: objective.oracle_calls(),
    };
    trace.final_description = slots.current();
    trace.final_loss = trace
        .iterations
        .last()
        .map_or(initial_loss, |r| r.loss_after);

    match result {
        Ok(()) => Ok(Outcome {
            template: template.with_description(trace.final_description.clone()),
            trace,
            stats,
        }),
        Err(source) => {
            trace.status = RunStatus::Aborted {
                error: source.to_string(),
            };
            Err(OptimizeError::Aborted {
                source,
                trace: Box::new(trace),
            })
        }
    }
}

fn run_steps(
    objective: &Objective<'_>,
    provider: &dyn FillMaskProvider,
    params: &OptimizationParams,
    slots: &mut Slots,
    trace: &mut OptimizationTrace,
) -> Result<(), StepError> {
    let initial = trace.initial_description.clone();
    trace.targets = match params.order_mode {
        OrderMode::Influence => {
            trace.influence_ranking = influence_from_base(objective, &initial, trace.initial_loss)?;
            select_targets(&trace.influence_ranking, params.target_fraction)
        }
        OrderMode::Random => random_targets(initial.len(), params.target_fraction, params.seed),
    };

    let mut current_loss = trace.initial_loss;
    let targets = trace.targets.clone();
    for (step, position) in targets.into_iter().enumerate() {
        let current = slots.current();
        let index = slots.current_index(position);
        let set = build_candidates(provider, &current, index, params.candidate_k)?;

        let mut best: Option<(Candidate, Ratio)> = None;
        let mut tried = 0;
        for candidate in &set.candidates {
            let Some(next) = candidate
                .apply(&current, index)
                .map_err(LexicalError::from)?
            else {
                // deleting the only remaining word
                continue;
            };
            tried += 1;
            let loss = objective.loss(&next)?;
            if best.as_ref().is_none_or(|(_, b)| loss < *b) {
                best = Some((candidate.clone(), loss));
            }
        }

        let accepted = best.as_ref().is_some_and(|(_, l)| *l < current_loss);
        let loss_before = current_loss;
        if accepted {
            let (c, l) = best.as_ref().expect("accepted implies a best candidate");
            slots.apply(position, c);
            current_loss = *l;
        }
        tracing::debug!(step, position, tried, accepted, loss = %current_loss, "optimization step");
        trace.iterations.push(IterationRecord {
            step,
            position,
            current_index: index,
            original_word: initial.words()[position].clone(),
            candidate_set_size: set.len(),
            candidates_tried: tried,
            best_loss: best.as_ref().map(|(_, l)| *l),
            best_candidate: best.map(|(c, _)| c),
            loss_before,
            loss_after: current_loss,
            accepted,
        });
    }
    Ok(())
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("corrupt trace: {0}")]
pub struct CorruptTrace(pub String);

/// Re-apply the accepted substitutions of `trace` to its initial
/// description, checking the trace's internal consistency on the way.
pub fn replay(trace: &OptimizationTrace) -> Result<TaskDescription, CorruptTrace> {
    let corrupt = |msg: String| Err(CorruptTrace(msg));
    let n = trace.initial_description.len();
    if !trace.initial_loss.is_valid() || !trace.final_loss.is_valid() {
        return corrupt("loss with invalid ratio".into());
    }
    let mut slots = Slots::new(&trace.initial_description);
    let mut loss = trace.initial_loss;
    let mut seen = std::collections::HashSet::new();
    for r in &trace.iterations {
        if r.position >= n {
            return corrupt(format!("step {}: position {} out of range", r.step, r.position));
        }
        if !seen.insert(r.position) {
            return corrupt(format!("step {}: position {} visited twice", r.step, r.position));
        }
        if !r.loss_before.is_valid() || !r.loss_after.is_valid() {
            return corrupt(format!("step {}: invalid loss ratio", r.step));
        }
        if r.loss_before != loss {
            return corrupt(format!("step {}: loss_before does not chain from previous step", r.step));
        }
        if r.accepted {
            if r.loss_after >= r.loss_before {
                return corrupt(format!("step {}: accepted without strict improvement", r.step));
            }
            let Some(c) = &r.best_candidate else {
                return corrupt(format!("step {}: accepted without a candidate", r.step));
            };
            if r.best_loss != Some(r.loss_after) {
                return corrupt(format!("step {}: loss_after differs from best_loss", r.step));
            }
            if let CandidateKind::Word(w) = &c.kind {
                if w.is_empty() || w.chars().any(char::is_whitespace) {
                    return corrupt(format!("step {}: invalid word {w:?}", r.step));
                }
            }
            slots.apply(r.position, c);
            if slots.0.iter().all(Option::is_none) {
                return corrupt(format!("step {}: description emptied", r.step));
            }
        } else if r.loss_after != r.loss_before {
            return corrupt(format!("step {}: rejected step changed the loss", r.step));
        }
        loss = r.loss_after;
    }
    if trace.final_loss != loss {
        return corrupt("final_loss does not match the last step".into());
    }
    if trace.final_loss > trace.initial_loss {
        return corrupt("final_loss exceeds initial_loss".into());
    }
    let replayed = slots.current();
    if replayed != trace.final_description {
        return corrupt(format!(
            "replayed description {:?} differs from final {:?}",
            replayed.render(),
            trace.final_description.render()
        ));
    }
    Ok(replayed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskInstance;
    use crate::harness::MatchPolicy;
    use crate::oracle::mock::{LossRule, Predicate, RuleOracle, RuleSpec};
    use crate::oracle::{MaskFill, ProviderError, StaticFillMask};
    use std::collections::BTreeMap;

    fn template(desc: &str) -> PromptTemplate {
        PromptTemplate {
            description: TaskDescription::parse(desc).unwrap(),
            verbalizer_text: "Answer Yes or No.".into(),
            pre_verbalizer: None,
            post_verbalizer: None,
            demos: vec![],
            layout: "Q: {content}\n".into(),
            answer_cue: "A:".into(),
            statics: BTreeMap::new(),
        }
    }

    fn pool(n: usize) -> TaskPool {
        let tasks = (0..n)
            .map(|i| TaskInstance {
                id: format!("t{i}"),
                slots: BTreeMap::from([("content".to_owned(), format!("s{i}"))]),
                gold: "Yes".into(),
            })
            .collect();
        TaskPool::new("p", tasks, Verbalizer::new(["Yes", "No"], MatchPolicy::FirstToken).unwrap()).unwrap()
    }

    fn params(n: usize) -> OptimizationParams {
        OptimizationParams {
            reference_size: n,
            ..Default::default()
        }
    }

    fn rule_oracle(spec: RuleSpec, t: &PromptTemplate, p: &TaskPool, params: &OptimizationParams) -> RuleOracle {
        let batch = sample_reference(p, params.reference_size, params.seed).unwrap();
        RuleOracle::new(spec, t)
            .with_group(t, &batch.instances, p.verbalizer())
            .unwrap()
    }

    #[test]
    fn defaults() {
        let p = OptimizationParams::default();
        assert_eq!(p.reference_size, 100);
        assert_eq!(p.candidate_k, 30);
        assert_eq!(p.target_fraction, 0.7);
        assert_eq!(p.order_mode, OrderMode::Influence);
        let parsed: OptimizationParams = toml::from_str("seed = 3").unwrap();
        assert_eq!(parsed.reference_size, 100);
        assert_eq!(parsed.seed, 3);
    }

    #[test]
    fn invalid_params_rejected() {
        for bad in [
            OptimizationParams { reference_size: 0, ..Default::default() },
            OptimizationParams { candidate_k: 0, ..Default::default() },
            OptimizationParams { target_fraction: 0.0, ..Default::default() },
            OptimizationParams { target_fraction: 1.5, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(OptimizeError::InvalidParams(_))));
        }
    }

    #[test]
    fn no_candidates_is_a_no_op() {
        let t = template("Does this sentence make sense?");
        let p = pool(10);
        let prm = params(10);
        let spec = RuleSpec {
            base_loss: 0.5,
            rules: vec![],
        };
        let oracle = rule_oracle(spec, &t, &p, &prm);
        let out = optimize(&oracle, &StaticFillMask::new(), &t, &p, &prm, &ResponseCache::in_memory()).unwrap();
        assert_eq!(out.trace.accepted().count(), 0);
        assert_eq!(out.trace.final_description, t.description);
        assert_eq!(out.trace.final_loss, out.trace.initial_loss);
        assert_eq!(out.template, t);
        assert_eq!(replay(&out.trace).unwrap(), t.description);
    }

    #[test]
    fn planted_substitution_is_found() {
        let t = template("Please identify whether the sentences have the same meaning.");
        let p = pool(10);
        let prm = OptimizationParams { target_fraction: 1.0, ..params(10) };
        let spec = RuleSpec {
            base_loss: 0.8,
            rules: vec![LossRule {
                when: Predicate::ContainsWord("repeat".into()),
                delta: -0.5,
            }],
        };
        let oracle = rule_oracle(spec, &t, &p, &prm);
        let provider = StaticFillMask::new().with_entry(
            "Please identify whether the sentences [MASK] the same meaning.",
            [("share", 0.4), ("repeat", 0.2)],
        );
        let out = optimize(&oracle, &provider, &t, &p, &prm, &ResponseCache::in_memory()).unwrap();
        assert_eq!(out.trace.final_loss, Ratio::new(3, 10));
        assert_eq!(
            out.trace.final_description.render(),
            "Please identify whether the sentences repeat the same meaning."
        );
        assert_eq!(out.trace.accepted().count(), 1);
        assert_eq!(replay(&out.trace).unwrap(), out.trace.final_description);
    }

    #[test]
    fn candidates_come_from_current_description() {
        // Accepting "Kindly" at position 0 changes the masked text seen at
        // position 1; the table only answers for the updated text.
        let t = template("Please identify whether");
        let p = pool(10);
        let prm = OptimizationParams { target_fraction: 1.0, ..params(10) };
        let spec = RuleSpec {
            base_loss: 0.9,
            rules: vec![
                LossRule { when: Predicate::WordAt { position: 0, word: "Please".into() }, delta: 0.1 },
                LossRule { when: Predicate::ContainsWord("Kindly".into()), delta: -0.3 },
                LossRule { when: Predicate::ContainsWord("check".into()), delta: -0.3 },
            ],
        };
        let oracle = rule_oracle(spec, &t, &p, &prm);
        let provider = StaticFillMask::new()
            .with_entry("[MASK] identify whether", [("Kindly", 0.5)])
            .with_entry("Kindly [MASK] whether", [("check", 0.5)])
            .with_entry("Please [MASK] whether", [("zzz", 0.5)]);
        let out = optimize(&oracle, &provider, &t, &p, &prm, &ResponseCache::in_memory()).unwrap();
        assert_eq!(out.trace.targets[0], 0);
        assert_eq!(out.trace.final_description.render(), "Kindly check whether");
    }

    #[test]
    fn accepted_deletion_shifts_later_positions() {
        let t = template("a b c");
        let p = pool(10);
        let prm = OptimizationParams { target_fraction: 1.0, ..params(10) };
        let spec = RuleSpec {
            base_loss: 0.5,
            rules: vec![
                LossRule { when: Predicate::ContainsWord("a".into()), delta: 0.3 },
                LossRule { when: Predicate::ContainsWord("z".into()), delta: -0.2 },
            ],
        };
        let oracle = rule_oracle(spec, &t, &p, &prm);
        let provider = StaticFillMask::new().with_entry("b [MASK]", [("z", 0.9)]);
        let out = optimize(&oracle, &provider, &t, &p, &prm, &ResponseCache::in_memory()).unwrap();
        // deleting "a" is the only influential move; then "c" sits at index 1
        assert_eq!(out.trace.targets[0], 0);
        let step_c = out.trace.iterations.iter().find(|r| r.position == 2).unwrap();
        assert_eq!(step_c.current_index, 1);
        assert_eq!(out.trace.final_description.render(), "b z");
        assert_eq!(out.trace.final_loss, Ratio::new(3, 10));
        assert_eq!(replay(&out.trace).unwrap().render(), "b z");
    }

    #[test]
    fn single_word_never_deleted() {
        let t = template("Classify");
        let p = pool(10);
        let prm = OptimizationParams { target_fraction: 1.0, ..params(10) };
        let oracle = rule_oracle(RuleSpec { base_loss: 0.5, rules: vec![] }, &t, &p, &prm);
        let out = optimize(&oracle, &StaticFillMask::new(), &t, &p, &prm, &ResponseCache::in_memory()).unwrap();
        assert_eq!(out.trace.iterations.len(), 1);
        assert_eq!(out.trace.iterations[0].candidates_tried, 0);
        assert_eq!(out.trace.influence_ranking[0].influence, Ratio::zero(10));
    }

    struct Failing;
    impl FillMaskProvider for Failing {
        fn fill_mask(&self, _: &str, _: usize) -> Result<Vec<MaskFill>, ProviderError> {
            Err(ProviderError::Failure("down".into()))
        }
    }

    #[test]
    fn provider_failure_keeps_partial_trace() {
        let t = template("a b c");
        let p = pool(10);
        let prm = params(10);
        let oracle = rule_oracle(RuleSpec { base_loss: 0.5, rules: vec![] }, &t, &p, &prm);
        let err = optimize(&oracle, &Failing, &t, &p, &prm, &ResponseCache::in_memory()).unwrap_err();
        match err {
            OptimizeError::Aborted { trace, .. } => {
                assert!(matches!(trace.status, RunStatus::Aborted { .. }));
                assert_eq!(trace.influence_ranking.len(), 3);
                assert!(trace.iterations.is_empty());
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn replay_rejects_corruption() {
        let t = template("Please identify whether the sentences have the same meaning.");
        let p = pool(10);
        let prm = OptimizationParams { target_fraction: 1.0, ..params(10) };
        let spec = RuleSpec {
            base_loss: 0.8,
            rules: vec![LossRule { when: Predicate::ContainsWord("repeat".into()), delta: -0.5 }],
        };
        let oracle = rule_oracle(spec, &t, &p, &prm);
        let provider = StaticFillMask::new().with_entry(
            "Please identify whether the sentences [MASK] the same meaning.",
            [("repeat", 0.2)],
        );
        let out = optimize(&oracle, &provider, &t, &p, &prm, &ResponseCache::in_memory()).unwrap();

        let mut bad = out.trace.clone();
        let step = bad.iterations.iter_mut().find(|r| r.accepted).unwrap();
        step.loss_after = Ratio::new(9, 10);
        assert!(replay(&bad).is_err());

        let mut bad = out.trace.clone();
        bad.final_description = t.description.clone();
        assert!(replay(&bad).is_err());

        let text = out.trace.to_json();
        assert_eq!(OptimizationTrace::from_json(&text).unwrap(), out.trace);
    }

    #[test]
    fn random_order_skips_influence() {
        let t = template("a b c d e f g h i j");
        let p = pool(10);
        let prm = OptimizationParams {
            order_mode: OrderMode::Random,
            seed: 11,
            ..params(10)
        };
        let oracle = rule_oracle(RuleSpec { base_loss: 0.5, rules: vec![] }, &t, &p, &prm);
        let out = optimize(&oracle, &StaticFillMask::new(), &t, &p, &prm, &ResponseCache::in_memory()).unwrap();
        assert!(out.trace.influence_ranking.is_empty());
        assert_eq!(out.trace.targets.len(), 7);
        assert_eq!(out.trace.targets, random_targets(10, 0.7, 11));
    }
}
