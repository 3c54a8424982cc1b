//! Exact-label scoring of a prompt template over a task batch.
//!
//! This is the objective the optimizer minimizes: the error rate of the
//! oracle's raw responses against the gold labels, with every oracle call
//! routed through a [`ResponseCache`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::ResponseCache;
use crate::data::TaskInstance;
use crate::oracle::{CompletionOracle, DecodingParams, OracleError};
use crate::prompt::{render_prompt, PromptError, PromptTemplate, TaskDescription, Verbalizer};
use crate::ratio::Ratio;

/// How a raw completion is mapped onto a verbalizer label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    /// The first whitespace-delimited token, stripped of surrounding
    /// punctuation, must equal a label (case-insensitive).
    #[default]
    FirstToken,
    /// Exactly one label occurrence anywhere in the response.
    ContainsUnique,
    /// The text between the last `<label>` and `</label>` markers.
    LabelTag,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty batch")]
    EmptyBatch,
    #[error("oracle failed on task {task_id}: {source}")]
    OracleFailure {
        task_id: String,
        #[source]
        source: OracleError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

fn strip_edges(s: &str) -> &str {
    s.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Map a raw response onto a label under the verbalizer's policy.
pub fn match_response(raw: &str, verbalizer: &Verbalizer) -> Option<String> {
    let found = match verbalizer.match_policy() {
        MatchPolicy::FirstToken => raw
            .split_whitespace()
            .next()
            .and_then(|tok| verbalizer.canonical(strip_edges(tok))),
        MatchPolicy::ContainsUnique => {
            let mut hits = raw
                .split_whitespace()
                .filter_map(|tok| verbalizer.canonical(strip_edges(tok)));
            match (hits.next(), hits.next()) {
                (Some(label), None) => Some(label),
                _ => None,
            }
        }
        MatchPolicy::LabelTag => {
            let start = raw.rfind("<label>")? + "<label>".len();
            let end = raw[start..].find("</label>")? + start;
            verbalizer.canonical(strip_edges(&raw[start..end]))
        }
    };
    found.map(str::to_owned)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a rendered prompt, as used in replay transcripts.
pub fn prompt_hash(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    prompt: &'a str,
    oracle: &'a str,
    decoding: &'a DecodingParams,
}

/// Stable content key for one oracle call. Identical across processes.
pub fn cache_key(prompt: &str, oracle_id: &str, decoding: &DecodingParams) -> String {
    let material = KeyMaterial {
        prompt,
        oracle: oracle_id,
        decoding,
    };
    // serde_json output for a fixed struct is field-ordered and stable.
    let json = serde_json::to_string(&material).expect("key material serializes");
    sha256_hex(json.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub prompt_hash: String,
    pub task_id: String,
    pub raw_response: String,
    pub matched_label: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchResult {
    pub correct: u64,
    pub records: Vec<EvaluationRecord>,
    pub oracle_calls: usize,
    pub cache_hits: usize,
}

impl BatchResult {
    pub fn total(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn accuracy(&self) -> Ratio {
        Ratio::new(self.correct, self.total())
    }

    /// Error rate, `1 - accuracy`.
    pub fn loss(&self) -> Ratio {
        self.accuracy().complement()
    }
}

/// Score `template` on `tasks`, one record per task in batch order.
///
/// Uncached prompts are sent to the oracle with at most
/// `oracle.parallelism()` calls in flight; responses are written to the
/// cache in batch order so the cache file is deterministic too.
pub fn evaluate_batch(
    oracle: &dyn CompletionOracle,
    template: &PromptTemplate,
    tasks: &[TaskInstance],
    verbalizer: &Verbalizer,
    cache: &ResponseCache,
) -> Result<BatchResult, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    let oracle_id = oracle.identity().to_owned();
    let decoding = oracle.decoding();

    let prompts = tasks
        .iter()
        .map(|t| render_prompt(template, t))
        .collect::<Result<Vec<_>, _>>()?;
    let keys: Vec<String> = prompts
        .iter()
        .map(|p| cache_key(p, &oracle_id, &decoding))
        .collect();

    let mut responses: HashMap<&str, String> = HashMap::new();
    let mut misses: Vec<usize> = Vec::new();
    let mut cache_hits = 0;
    for (i, key) in keys.iter().enumerate() {
        if responses.contains_key(key.as_str()) {
            cache_hits += 1;
            continue;
        }
        match cache.get(key) {
            Some(r) => {
                responses.insert(key, r);
                cache_hits += 1;
            }
            None => {
                if !misses.iter().any(|&m| keys[m] == *key) {
                    misses.push(i);
                } else {
                    cache_hits += 1;
                }
            }
        }
    }

    let fetched = call_oracle(oracle, tasks, &prompts, &misses)?;
    for (&i, raw) in misses.iter().zip(fetched) {
        cache.insert(&keys[i], &raw, &oracle_id, decoding)?;
        responses.insert(&keys[i], raw);
    }

    let mut correct = 0;
    let records = tasks
        .iter()
        .zip(&prompts)
        .zip(&keys)
        .map(|((task, prompt), key)| {
            let raw_response = responses[key.as_str()].clone();
            let matched_label = match_response(&raw_response, verbalizer);
            let is_correct = matched_label
                .as_deref()
                .is_some_and(|l| l.to_lowercase() == task.gold.to_lowercase());
            correct += u64::from(is_correct);
            EvaluationRecord {
                prompt_hash: prompt_hash(prompt),
                task_id: task.id.clone(),
                raw_response,
                matched_label,
                correct: is_correct,
            }
        })
        .collect();

    Ok(BatchResult {
        correct,
        records,
        oracle_calls: misses.len(),
        cache_hits,
    })
}

/// The proxy objective: loss of a description on a fixed task batch.
///
/// Wraps the template, batch and cache so that callers only vary the
/// description, and counts how many batch evaluations and oracle calls it
/// has caused.
pub struct Objective<'a> {
    oracle: &'a dyn CompletionOracle,
    template: &'a PromptTemplate,
    tasks: &'a [TaskInstance],
    verbalizer: &'a Verbalizer,
    cache: &'a ResponseCache,
    batch_evaluations: AtomicUsize,
    oracle_calls: AtomicUsize,
}

impl<'a> Objective<'a> {
    pub fn new(
        oracle: &'a dyn CompletionOracle,
        template: &'a PromptTemplate,
        tasks: &'a [TaskInstance],
        verbalizer: &'a Verbalizer,
        cache: &'a ResponseCache,
    ) -> Self {
        Self {
            oracle,
            template,
            tasks,
            verbalizer,
            cache,
            batch_evaluations: AtomicUsize::new(0),
            oracle_calls: AtomicUsize::new(0),
        }
    }

    pub fn template(&self) -> &PromptTemplate {
        self.template
    }

    pub fn evaluate(&self, description: &TaskDescription) -> Result<BatchResult, EvalError> {
        let t = self.template.with_description(description.clone());
        let r = evaluate_batch(self.oracle, &t, self.tasks, self.verbalizer, self.cache)?;
        self.batch_evaluations.fetch_add(1, Ordering::Relaxed);
        self.oracle_calls.fetch_add(r.oracle_calls, Ordering::Relaxed);
        Ok(r)
    }

    pub fn loss(&self, description: &TaskDescription) -> Result<Ratio, EvalError> {
        self.evaluate(description).map(|r| r.loss())
    }

    /// Batch evaluations performed so far, cached or not.
    pub fn batch_evaluations(&self) -> usize {
        self.batch_evaluations.load(Ordering::Relaxed)
    }

    /// Oracle calls that missed the cache so far.
    pub fn oracle_calls(&self) -> usize {
        self.oracle_calls.load(Ordering::Relaxed)
    }
}

fn call_oracle(
    oracle: &dyn CompletionOracle,
    tasks: &[TaskInstance],
    prompts: &[String],
    misses: &[usize],
) -> Result<Vec<String>, EvalError> {
    let workers = oracle.parallelism().max(1).min(misses.len());
    let fail = |i: usize, source| EvalError::OracleFailure {
        task_id: tasks[i].id.clone(),
        source,
    };
    if workers <= 1 {
        return misses
            .iter()
            .map(|&i| oracle.complete(&prompts[i]).map_err(|e| fail(i, e)))
            .collect();
    }

    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<String, OracleError>>> = vec![None; misses.len()];
    let results: Vec<Vec<(usize, Result<String, OracleError>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let j = next.fetch_add(1, Ordering::Relaxed);
                        if j >= misses.len() {
                            break done;
                        }
                        done.push((j, oracle.complete(&prompts[misses[j]])));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("oracle worker panicked"))
            .collect()
    });
    for (j, r) in results.into_iter().flatten() {
        slots[j] = Some(r);
    }
    slots
        .into_iter()
        .zip(misses)
        .map(|(r, &i)| r.expect("every miss is processed").map_err(|e| fail(i, e)))
        .collect()
}
