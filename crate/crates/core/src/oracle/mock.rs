//! Deterministic in-process oracles for tests and offline runs.
//!
//! * [`TableOracle`] answers from a `prompt_hash -> response` table; loaded
//!   from a transcript file it replays a recorded run.
//! * [`RuleOracle`] answers so that the batch error rate equals a declared
//!   function of the task description, with no language model involved.
//! * [`CountingOracle`] wraps another oracle and counts calls.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{CompletionOracle, DecodingParams, OracleError};
use crate::data::TaskInstance;
use crate::harness::prompt_hash;
use crate::prompt::{PromptTemplate, TaskDescription, Verbalizer};

#[derive(Debug, Clone)]
pub struct TableOracle {
    id: String,
    table: HashMap<String, String>,
    decoding: DecodingParams,
    parallelism: usize,
}

#[derive(Deserialize)]
struct TranscriptLine {
    prompt_hash: String,
    raw_response: String,
}

impl TableOracle {
    pub fn new(id: impl Into<String>, table: HashMap<String, String>) -> Self {
        Self {
            id: id.into(),
            table,
            decoding: DecodingParams::default(),
            parallelism: 1,
        }
    }

    /// Load a transcript: one `{"prompt_hash", "raw_response"}` object per line.
    pub fn from_transcript(path: &Path) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OracleError::Transport(format!("{}: {e}", path.display())))?;
        let mut table = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TranscriptLine = serde_json::from_str(line).map_err(|e| {
                OracleError::Malformed(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            table.insert(rec.prompt_hash, rec.raw_response);
        }
        Ok(Self::new(format!("replay:{}", path.display()), table))
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl CompletionOracle for TableOracle {
    fn identity(&self) -> &str {
        &self.id
    }

    fn decoding(&self) -> DecodingParams {
        self.decoding
    }

    fn parallelism(&self) -> usize {
        self.parallelism
    }

    fn complete(&self, prompt: &str) -> Result<String, OracleError> {
        let h = prompt_hash(prompt);
        self.table
            .get(&h)
            .cloned()
            .ok_or(OracleError::Unscripted(h))
    }
}

/// A condition on the task description as it appears in the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    ContainsWord(String),
    WordAt { position: usize, word: String },
}

impl Predicate {
    pub fn holds(&self, d: &TaskDescription) -> bool {
        match self {
            Predicate::ContainsWord(w) => d.contains_word(w),
            Predicate::WordAt { position, word } => d.word(*position) == Some(word.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRule {
    pub when: Predicate,
    pub delta: f64,
}

/// Loss as a function of the description:
/// `clamp(base_loss + sum of deltas of rules that hold, 0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub base_loss: f64,
    #[serde(default)]
    pub rules: Vec<LossRule>,
}

impl RuleSpec {
    pub fn loss(&self, d: &TaskDescription) -> f64 {
        let raw = self.base_loss
            + self
                .rules
                .iter()
                .filter(|r| r.when.holds(d))
                .map(|r| r.delta)
                .sum::<f64>();
        raw.clamp(0.0, 1.0)
    }

    /// Multiply every term by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base_loss: self.base_loss * factor,
            rules: self
                .rules
                .iter()
                .map(|r| LossRule {
                    when: r.when.clone(),
                    delta: r.delta * factor,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct RuleTask {
    rank: usize,
    group_size: usize,
    gold: String,
    wrong: String,
}

/// Oracle whose accuracy on a registered task group is exactly
/// `round((1 - loss(description)) * group_size) / group_size`: the task of
/// rank `r` within its group is answered correctly iff `r` is below that
/// count. Tasks are recognized by the question block the prompt ends with.
#[derive(Debug, Clone)]
pub struct RuleOracle {
    id: String,
    spec: RuleSpec,
    after_description: String,
    tasks: Vec<(String, RuleTask)>,
}

impl RuleOracle {
    pub fn new(spec: RuleSpec, template: &PromptTemplate) -> Self {
        let digest = prompt_hash(&serde_json::to_string(&spec).expect("rule spec serializes"));
        Self {
            id: format!("rule:{}", &digest[..16]),
            spec,
            after_description: format!(" {}", template.text_after_description()),
            tasks: Vec::new(),
        }
    }

    /// Register a task group (typically a reference batch), ranked in order.
    pub fn add_group(
        &mut self,
        template: &PromptTemplate,
        tasks: &[TaskInstance],
        verbalizer: &Verbalizer,
    ) -> Result<(), crate::prompt::PromptError> {
        for (rank, task) in tasks.iter().enumerate() {
            let mut suffix = template.render_block(&task.slots)?;
            suffix.push_str(&template.answer_cue);
            let wrong = verbalizer
                .labels()
                .iter()
                .find(|l| l.to_lowercase() != task.gold.to_lowercase())
                .cloned()
                .expect("verbalizer has at least two labels");
            self.tasks.push((
                suffix,
                RuleTask {
                    rank,
                    group_size: tasks.len(),
                    gold: task.gold.clone(),
                    wrong,
                },
            ));
        }
        Ok(())
    }

    pub fn with_group(
        mut self,
        template: &PromptTemplate,
        tasks: &[TaskInstance],
        verbalizer: &Verbalizer,
    ) -> Result<Self, crate::prompt::PromptError> {
        self.add_group(template, tasks, verbalizer)?;
        Ok(self)
    }

    pub fn spec(&self) -> &RuleSpec {
        &self.spec
    }

    fn description_of(&self, prompt: &str) -> Option<TaskDescription> {
        let end = prompt.find(&self.after_description)?;
        TaskDescription::parse(&prompt[..end]).ok()
    }
}

impl CompletionOracle for RuleOracle {
    fn identity(&self) -> &str {
        &self.id
    }

    fn decoding(&self) -> DecodingParams {
        DecodingParams::default()
    }

    fn complete(&self, prompt: &str) -> Result<String, OracleError> {
        let unscripted = || OracleError::Unscripted(prompt_hash(prompt));
        let description = self.description_of(prompt).ok_or_else(unscripted)?;
        let (_, task) = self
            .tasks
            .iter()
            .find(|(suffix, _)| prompt.ends_with(suffix.as_str()))
            .ok_or_else(unscripted)?;
        let accuracy = 1.0 - self.spec.loss(&description);
        let correct_count = (accuracy * task.group_size as f64).round() as usize;
        Ok(if task.rank < correct_count {
            task.gold.clone()
        } else {
            task.wrong.clone()
        })
    }
}

/// Passes calls through and counts them.
#[derive(Debug)]
pub struct CountingOracle<O> {
    inner: O,
    calls: AtomicUsize,
}

impl<O: CompletionOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<O: CompletionOracle> CompletionOracle for CountingOracle<O> {
    fn identity(&self) -> &str {
        self.inner.identity()
    }

    fn decoding(&self) -> DecodingParams {
        self.inner.decoding()
    }

    fn parallelism(&self) -> usize {
        self.inner.parallelism()
    }

    fn complete(&self, prompt: &str) -> Result<String, OracleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt)
    }
}
