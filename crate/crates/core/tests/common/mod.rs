//! Builders shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use promptlex::oracle::mock::{LossRule, Predicate, RuleOracle, RuleSpec};
use promptlex::oracle::{MaskFill, ProviderError};
use promptlex::{
    FillMaskProvider, MatchPolicy, PromptTemplate, TaskDescription, TaskInstance, TaskPool,
    Verbalizer,
};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn template(desc: &str) -> PromptTemplate {
    PromptTemplate {
        description: TaskDescription::parse(desc).unwrap(),
        verbalizer_text: "Respond with 'Yes' or 'No' only.".into(),
        pre_verbalizer: None,
        post_verbalizer: None,
        demos: vec![],
        layout: "Question: {content}\n".into(),
        answer_cue: "Answer:".into(),
        statics: BTreeMap::new(),
    }
}

pub fn verbalizer() -> Verbalizer {
    Verbalizer::new(["Yes", "No"], MatchPolicy::FirstToken).unwrap()
}

pub fn pool(n: usize) -> TaskPool {
    let tasks = (0..n)
        .map(|i| TaskInstance {
            id: format!("task-{i:03}"),
            slots: BTreeMap::from([("content".to_owned(), format!("Sentence number {i}."))]),
            gold: if i % 3 == 0 { "No" } else { "Yes" }.into(),
        })
        .collect();
    TaskPool::new("synthetic", tasks, verbalizer()).unwrap()
}

/// Rule oracle answering for the whole pool as one group, so that with a
/// full-pool reference batch the batch loss is exactly `spec.loss`.
pub fn rule_oracle(spec: RuleSpec, t: &PromptTemplate, p: &TaskPool, seed: u64) -> RuleOracle {
    let batch = promptlex::sample_reference(p, p.len(), seed).unwrap();
    RuleOracle::new(spec, t)
        .with_group(t, &batch.instances, p.verbalizer())
        .unwrap()
}

/// SplitMix64; enough randomness for generating test cases.
pub struct Gen(u64);

impl Gen {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `lo..=hi`.
    pub fn range(&mut self, lo: i64, hi: i64) -> i64 {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as i64
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.range(0, items.len() as i64 - 1) as usize]
    }
}

/// Loss rule set with every term in tenths.
#[derive(Debug, Clone)]
pub struct TenthsRules {
    pub base: i64,
    pub rules: Vec<(Predicate, i64)>,
}

impl TenthsRules {
    pub fn random(g: &mut Gen, vocab: &[&str], max_position: usize, count: usize) -> Self {
        let base = g.range(1, 9);
        let rules = (0..count)
            .map(|_| {
                let word = g.pick(vocab).to_string();
                let p = if g.range(0, 1) == 0 {
                    Predicate::ContainsWord(word)
                } else {
                    Predicate::WordAt {
                        position: g.range(0, max_position as i64 - 1) as usize,
                        word,
                    }
                };
                let mut delta = g.range(-3, 3);
                if delta == 0 {
                    delta = -1;
                }
                (p, delta)
            })
            .collect();
        Self { base, rules }
    }

    pub fn spec(&self) -> RuleSpec {
        RuleSpec {
            base_loss: self.base as f64 / 10.0,
            rules: self
                .rules
                .iter()
                .map(|(p, d)| LossRule {
                    when: p.clone(),
                    delta: *d as f64 / 10.0,
                })
                .collect(),
        }
    }

    /// Loss in tenths, evaluated directly on a word list.
    pub fn units(&self, words: &[String]) -> i64 {
        let mut total = self.base;
        for (p, d) in &self.rules {
            let holds = match p {
                Predicate::ContainsWord(w) => words.iter().any(|x| x == w),
                Predicate::WordAt { position, word } => words.get(*position) == Some(word),
            };
            if holds {
                total += d;
            }
        }
        total.clamp(0, 10)
    }
}

/// Provider whose answers are a fixed pseudo-random function of the masked
/// text, drawn from `vocab`.
pub struct HashProvider {
    pub vocab: Vec<String>,
    pub salt: u64,
}

impl FillMaskProvider for HashProvider {
    fn fill_mask(&self, masked_text: &str, k: usize) -> Result<Vec<MaskFill>, ProviderError> {
        let mut h = self.salt ^ 0xcbf2_9ce4_8422_2325;
        for b in masked_text.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
        }
        let mut g = Gen::new(h);
        let mut out: Vec<MaskFill> = (0..k)
            .map(|i| MaskFill::new(g.pick(&self.vocab).clone(), 1.0 / (i as f64 + 2.0)))
            .collect();
        out.sort_by(|a, b| b.probability.total_cmp(&a.probability));
        Ok(out)
    }
}

/// Owned table form of a fill-mask answer set, for building static providers.
pub type FillTable = HashMap<String, Vec<(String, f64)>>;
