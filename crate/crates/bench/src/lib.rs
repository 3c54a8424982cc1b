//! Synthetic workloads shared by the benchmarks.

use std::collections::BTreeMap;

use promptlex::oracle::mock::{LossRule, Predicate, RuleOracle, RuleSpec};
use promptlex::oracle::{MaskFill, ProviderError};
use promptlex::{
    sample_reference, FillMaskProvider, MatchPolicy, PromptTemplate, TaskDescription,
    TaskInstance, TaskPool, Verbalizer,
};

pub const WORDS: [&str; 12] = [
    "carefully", "decide", "whether", "the", "two", "questions", "ask", "for", "the", "same",
    "information", "here.",
];

pub fn template(words: usize) -> PromptTemplate {
    PromptTemplate {
        description: TaskDescription::from_words(WORDS.iter().cycle().take(words).copied()).unwrap(),
        verbalizer_text: "Respond with 'equivalent' or 'not_equivalent' only.".into(),
        pre_verbalizer: None,
        post_verbalizer: None,
        demos: vec![],
        layout: "Question 1: {q1}\nQuestion 2: {q2}\n".into(),
        answer_cue: "Answer:".into(),
        statics: BTreeMap::new(),
    }
}

pub fn pool(n: usize) -> TaskPool {
    let tasks = (0..n)
        .map(|i| TaskInstance {
            id: format!("q-{i}"),
            slots: BTreeMap::from([
                ("q1".to_owned(), format!("How do I do thing number {i}?")),
                ("q2".to_owned(), format!("What is the way to do thing {i}?")),
            ]),
            gold: if i % 2 == 0 { "equivalent" } else { "not_equivalent" }.into(),
        })
        .collect();
    let v = Verbalizer::new(["equivalent", "not_equivalent"], MatchPolicy::FirstToken).unwrap();
    TaskPool::new("bench", tasks, v).unwrap()
}

/// Rule oracle rewarding a few specific words, answering for the
/// `reference_size` batch drawn with `seed`.
pub fn oracle(t: &PromptTemplate, p: &TaskPool, reference_size: usize, seed: u64) -> RuleOracle {
    let spec = RuleSpec {
        base_loss: 0.7,
        rules: vec![
            LossRule { when: Predicate::ContainsWord("repeat".into()), delta: -0.3 },
            LossRule { when: Predicate::ContainsWord("same".into()), delta: -0.1 },
            LossRule {
                when: Predicate::WordAt { position: 0, word: "Please".into() },
                delta: -0.1,
            },
        ],
    };
    let batch = sample_reference(p, reference_size, seed).unwrap();
    RuleOracle::new(spec, t)
        .with_group(t, &batch.instances, p.verbalizer())
        .unwrap()
}

/// Answers every masked text with the same ranked list.
pub struct FixedFills(pub Vec<MaskFill>);

impl FixedFills {
    pub fn new(k: usize) -> Self {
        let mut words = vec!["repeat".to_owned(), "Please".to_owned(), "same".to_owned()];
        words.extend((0..k).map(|i| format!("filler{i}")));
        Self(
            words
                .into_iter()
                .take(k)
                .enumerate()
                .map(|(i, w)| MaskFill::new(w, 1.0 / (i as f64 + 2.0)))
                .collect(),
        )
    }
}

impl FillMaskProvider for FixedFills {
    fn fill_mask(&self, _: &str, k: usize) -> Result<Vec<MaskFill>, ProviderError> {
        Ok(self.0.iter().take(k).cloned().collect())
    }
}
