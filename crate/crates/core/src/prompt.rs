//! Word-addressable prompt structures and their rendering into the exact
//! strings sent to a completion oracle.
//!
//! A prompt is assembled from a header line (task description, optional
//! static text, verbalizer instruction, optional static suffix), zero or
//! more demonstration blocks, and the question block of the task being
//! asked, closed by an answer cue:
//!
//! ```text
//! <description> [<pre_verbalizer>] <verbalizer_text> [<post_verbalizer>]
//!
//! <demo input><answer_cue> <demo answer>
//!
//! <layout filled from the task><answer_cue>
//! ```
//!
//! Only the description is ever mutated by the optimizer.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::data::TaskInstance;
use crate::harness::MatchPolicy;

/// Marker substituted for the masked word when querying a fill-mask provider.
pub const MASK_MARKER: &str = "[MASK]";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("task description is empty")]
    EmptyDescription,
    #[error("invalid word {0:?}: words must be nonempty and contain no whitespace")]
    InvalidWord(String),
    #[error("word position {position} out of range for a {len}-word description")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("no value for placeholder {{{0}}}")]
    MissingPlaceholder(String),
    #[error("verbalizer needs at least two labels, got {0}")]
    TooFewLabels(usize),
    #[error("verbalizer labels collide after case folding: {0:?}")]
    DuplicateLabel(String),
    #[error("demo example has an empty {0}")]
    EmptyDemo(&'static str),
}

/// A single word of a description, borrowed together with its position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordToken<'a> {
    pub surface: &'a str,
    pub index: usize,
}

fn valid_surface(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

/// The ordered word sequence at the head of a prompt.
///
/// Words are maximal non-whitespace runs; punctuation stays attached
/// (`"sense?"` is one word). Inter-word spacing is normalized to a single
/// space on rendering.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskDescription {
    words: Vec<String>,
}

impl TaskDescription {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let words: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        if words.is_empty() {
            return Err(PromptError::EmptyDescription);
        }
        Ok(Self { words })
    }

    pub fn from_words<I, S>(words: I) -> Result<Self, PromptError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        if words.is_empty() {
            return Err(PromptError::EmptyDescription);
        }
        if let Some(bad) = words.iter().find(|w| !valid_surface(w)) {
            return Err(PromptError::InvalidWord(bad.clone()));
        }
        Ok(Self { words })
    }

    pub fn render(&self) -> String {
        self.words.join(" ")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> impl Iterator<Item = WordToken<'_>> {
        self.words
            .iter()
            .enumerate()
            .map(|(index, surface)| WordToken { surface, index })
    }

    pub fn contains_word(&self, surface: &str) -> bool {
        self.words.iter().any(|w| w == surface)
    }

    fn check_position(&self, position: usize) -> Result<(), PromptError> {
        if position >= self.words.len() {
            return Err(PromptError::PositionOutOfRange {
                position,
                len: self.words.len(),
            });
        }
        Ok(())
    }

    /// The description with the word at `position` removed. `Ok(None)` when
    /// removing it would leave no words.
    pub fn without(&self, position: usize) -> Result<Option<Self>, PromptError> {
        self.check_position(position)?;
        if self.words.len() == 1 {
            return Ok(None);
        }
        let mut words = self.words.clone();
        words.remove(position);
        Ok(Some(Self { words }))
    }

    /// The description with the word at `position` replaced by `surface`.
    pub fn with_word(&self, position: usize, surface: &str) -> Result<Self, PromptError> {
        self.check_position(position)?;
        if !valid_surface(surface) {
            return Err(PromptError::InvalidWord(surface.to_owned()));
        }
        let mut words = self.words.clone();
        words[position] = surface.to_owned();
        Ok(Self { words })
    }

    /// Rendered text with the word at `position` replaced by [`MASK_MARKER`].
    pub fn masked(&self, position: usize) -> Result<String, PromptError> {
        self.check_position(position)?;
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(if i == position { MASK_MARKER } else { w });
        }
        Ok(out)
    }
}

impl fmt::Display for TaskDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl Serialize for TaskDescription {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for TaskDescription {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Self::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// The allowed answer labels and how raw responses are matched to them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VerbalizerRepr")]
pub struct Verbalizer {
    labels: Vec<String>,
    #[serde(default)]
    match_policy: MatchPolicy,
}

#[derive(Deserialize)]
struct VerbalizerRepr {
    labels: Vec<String>,
    #[serde(default)]
    match_policy: MatchPolicy,
}

impl TryFrom<VerbalizerRepr> for Verbalizer {
    type Error = PromptError;

    fn try_from(r: VerbalizerRepr) -> Result<Self, Self::Error> {
        Verbalizer::new(r.labels, r.match_policy)
    }
}

impl Verbalizer {
    pub fn new<I, S>(labels: I, match_policy: MatchPolicy) -> Result<Self, PromptError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(PromptError::TooFewLabels(labels.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for label in &labels {
            if label.trim().is_empty() || !seen.insert(label.to_lowercase()) {
                return Err(PromptError::DuplicateLabel(label.clone()));
            }
        }
        Ok(Self {
            labels,
            match_policy,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn match_policy(&self) -> MatchPolicy {
        self.match_policy
    }

    pub fn with_policy(mut self, match_policy: MatchPolicy) -> Self {
        self.match_policy = match_policy;
        self
    }

    /// The canonical label equal to `text` under case folding.
    pub fn canonical(&self, text: &str) -> Option<&str> {
        let folded = text.to_lowercase();
        self.labels
            .iter()
            .find(|l| l.to_lowercase() == folded)
            .map(String::as_str)
    }
}

/// A worked example placed between the instruction header and the question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoExample {
    /// Already-rendered question block, in the same shape as the template layout.
    pub input_text: String,
    pub answer_text: String,
}

impl DemoExample {
    pub fn new(input_text: impl Into<String>, answer_text: impl Into<String>) -> Result<Self, PromptError> {
        let demo = Self {
            input_text: input_text.into(),
            answer_text: answer_text.into(),
        };
        if demo.input_text.trim().is_empty() {
            return Err(PromptError::EmptyDemo("input_text"));
        }
        if demo.answer_text.trim().is_empty() {
            return Err(PromptError::EmptyDemo("answer_text"));
        }
        Ok(demo)
    }
}

/// A task-specific prompt: description, demos, question slot, verbalizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub description: TaskDescription,
    pub verbalizer_text: String,
    /// Static text between description and verbalizer (for example a
    /// chain-of-thought trigger). Never optimized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_verbalizer: Option<String>,
    /// Static text after the verbalizer (for example an emotional stimulus).
    /// Never optimized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_verbalizer: Option<String>,
    #[serde(default)]
    pub demos: Vec<DemoExample>,
    /// Question block skeleton, e.g. `"Question: {content}\n"`.
    pub layout: String,
    pub answer_cue: String,
    /// Placeholder values that do not come from the task instance, e.g. `{task}`.
    #[serde(default)]
    pub statics: BTreeMap<String, String>,
}

impl PromptTemplate {
    pub fn with_description(&self, description: TaskDescription) -> Self {
        Self {
            description,
            ..self.clone()
        }
    }

    /// The static header text that immediately follows the description.
    pub fn text_after_description(&self) -> &str {
        self.pre_verbalizer
            .as_deref()
            .unwrap_or(self.verbalizer_text.as_str())
    }

    pub fn render(&self, task: &TaskInstance) -> Result<String, PromptError> {
        render_prompt(self, task)
    }

    /// Render the question block of `slots` through the layout, as used for
    /// demo inputs defined by slots rather than literal text.
    pub fn render_block(&self, slots: &BTreeMap<String, String>) -> Result<String, PromptError> {
        fill_placeholders(&self.layout, |name| lookup(slots, &self.statics, name))
    }
}

fn lookup<'a>(
    slots: &'a BTreeMap<String, String>,
    statics: &'a BTreeMap<String, String>,
    name: &str,
) -> Option<&'a str> {
    slots
        .get(name)
        .or_else(|| statics.get(name))
        .map(String::as_str)
        .filter(|v| !v.is_empty())
}

/// Names of all `{identifier}` placeholders in `text`, in order of appearance.
pub fn placeholders(text: &str) -> Vec<String> {
    let mut names = Vec::new();
    let _ = fill_placeholders(text, |name| {
        names.push(name.to_owned());
        Some("")
    });
    names
}

/// Substitute every `{identifier}` in `text`. Braces not enclosing an
/// identifier (`[A-Za-z0-9_]+`) are copied verbatim.
fn fill_placeholders<'a, F>(text: &str, mut value: F) -> Result<String, PromptError>
where
    F: FnMut(&str) -> Option<&'a str>,
{
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            let name = &after[..ident_len];
            let v = value(name).ok_or_else(|| PromptError::MissingPlaceholder(name.to_owned()))?;
            out.push_str(v);
            rest = &after[ident_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Render `template` for `task`. Pure: identical inputs give identical bytes.
pub fn render_prompt(template: &PromptTemplate, task: &TaskInstance) -> Result<String, PromptError> {
    let fill = |text: &str| fill_placeholders(text, |name| lookup(&task.slots, &template.statics, name));

    let mut header = vec![fill(&template.description.render())?];
    if let Some(pre) = &template.pre_verbalizer {
        header.push(fill(pre)?);
    }
    header.push(fill(&template.verbalizer_text)?);
    if let Some(post) = &template.post_verbalizer {
        header.push(fill(post)?);
    }

    let mut out = header.join(" ");
    out.push_str("\n\n");
    for demo in &template.demos {
        out.push_str(&demo.input_text);
        out.push_str(&template.answer_cue);
        out.push(' ');
        out.push_str(&demo.answer_text);
        out.push_str("\n\n");
    }
    out.push_str(&fill(&template.layout)?);
    out.push_str(&template.answer_cue);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const COLA_VERBALIZER: &str =
        "Do not respond with anything other than the labels 'Yes' or 'No'.";

    fn cola_template() -> PromptTemplate {
        PromptTemplate {
            description: TaskDescription::parse("Does this sentence make sense?").unwrap(),
            verbalizer_text: COLA_VERBALIZER.into(),
            pre_verbalizer: None,
            post_verbalizer: None,
            demos: vec![],
            layout: "Question: {content}\n".into(),
            answer_cue: "Answer:".into(),
            statics: BTreeMap::new(),
        }
    }

    fn task(content: &str) -> TaskInstance {
        TaskInstance {
            id: "t0".into(),
            slots: BTreeMap::from([("content".to_owned(), content.to_owned())]),
            gold: "Yes".into(),
        }
    }

    #[test]
    fn parse_counts_words_with_attached_punctuation() {
        let d = TaskDescription::parse("Does this sentence make sense?").unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.word(4), Some("sense?"));

        let d = TaskDescription::parse("  a  ").unwrap();
        assert_eq!(d.words(), ["a"]);

        let d = TaskDescription::parse("Please identify whether the sentences have the same meaning.").unwrap();
        assert_eq!(d.len(), 9);
    }

    #[test]
    fn parse_rejects_blank() {
        assert_eq!(TaskDescription::parse(" \t\n "), Err(PromptError::EmptyDescription));
        assert_eq!(TaskDescription::parse(""), Err(PromptError::EmptyDescription));
    }

    #[test]
    fn render_round_trip_and_deletion() {
        let text = "Does this sentence make sense?";
        let d = TaskDescription::parse(text).unwrap();
        assert_eq!(d.render(), text);
        assert_eq!(TaskDescription::parse("Yes").unwrap().render(), "Yes");
        let deleted = d.without(1).unwrap().unwrap();
        assert_eq!(deleted.render(), "Does sentence make sense?");
        assert_eq!(TaskDescription::parse("Yes").unwrap().without(0).unwrap(), None);
    }

    #[test]
    fn substitution_touches_one_word() {
        let d = TaskDescription::parse("Does this sentence make sense?").unwrap();
        let s = d.with_word(3, "have").unwrap();
        assert_eq!(s.render(), "Does this sentence have sense?");
        assert!(d.with_word(5, "x").is_err());
        assert_eq!(d.with_word(0, "two words"), Err(PromptError::InvalidWord("two words".into())));
        assert_eq!(d.masked(2).unwrap(), "Does this [MASK] make sense?");
    }

    #[test]
    fn word_tokens_are_contiguous() {
        let d = TaskDescription::parse("a b c").unwrap();
        let idx: Vec<usize> = d.tokens().map(|t| t.index).collect();
        assert_eq!(idx, [0, 1, 2]);
    }

    #[test]
    fn renders_cola_original_row() {
        let p = render_prompt(&cola_template(), &task("He walk.")).unwrap();
        assert_eq!(
            p,
            "Does this sentence make sense? Do not respond with anything other than the labels 'Yes' or 'No'.\n\nQuestion: He walk.\nAnswer:"
        );
    }

    #[test]
    fn one_shot_demo_sits_between_verbalizer_and_question() {
        let mut t = cola_template();
        t.demos.push(DemoExample::new("Question: The cat sat.\n", "Yes").unwrap());
        let p = render_prompt(&t, &task("He walk.")).unwrap();
        assert_eq!(
            p,
            format!("Does this sentence make sense? {COLA_VERBALIZER}\n\nQuestion: The cat sat.\nAnswer: Yes\n\nQuestion: He walk.\nAnswer:")
        );
    }

    #[test]
    fn static_suffix_and_cot_trigger_positions() {
        let mut t = cola_template();
        t.post_verbalizer = Some("You'd better be sure.".into());
        let p = render_prompt(&t, &task("x")).unwrap();
        assert!(p.starts_with(&format!("Does this sentence make sense? {COLA_VERBALIZER} You'd better be sure.\n\n")));

        let mut t = cola_template();
        t.pre_verbalizer = Some("Let's think step by step.".into());
        let p = render_prompt(&t, &task("x")).unwrap();
        assert!(p.starts_with("Does this sentence make sense? Let's think step by step. Do not"));
        assert_eq!(t.text_after_description(), "Let's think step by step.");
    }

    #[test]
    fn empty_content_is_missing_placeholder() {
        let err = render_prompt(&cola_template(), &task("")).unwrap_err();
        assert_eq!(err, PromptError::MissingPlaceholder("content".into()));
    }

    #[test]
    fn mmlu_layout_fills_task_and_options() {
        let t = PromptTemplate {
            description: TaskDescription::parse(
                "The following are multiple choice questions (with answers) about {task}.",
            )
            .unwrap(),
            verbalizer_text: "Do not respond with anything other than the answer labels 'A', 'B', 'C', or 'D'.".into(),
            pre_verbalizer: None,
            post_verbalizer: None,
            demos: vec![],
            layout: "Question: {question}\nA. {option_A}\nB. {option_B}\nC. {option_C}\nD. {option_D}\n\n".into(),
            answer_cue: "Answer:".into(),
            statics: BTreeMap::from([("task".to_owned(), "abstract algebra".to_owned())]),
        };
        let slots = [
            ("question", "1+1?"),
            ("option_A", "1"),
            ("option_B", "2"),
            ("option_C", "3"),
            ("option_D", "4"),
        ];
        let inst = TaskInstance {
            id: "m0".into(),
            slots: slots.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            gold: "B".into(),
        };
        let p = render_prompt(&t, &inst).unwrap();
        assert_eq!(
            p,
            "The following are multiple choice questions (with answers) about abstract algebra. Do not respond with anything other than the answer labels 'A', 'B', 'C', or 'D'.\n\nQuestion: 1+1?\nA. 1\nB. 2\nC. 3\nD. 4\n\nAnswer:"
        );
    }

    #[test]
    fn non_identifier_braces_are_literal() {
        assert_eq!(fill_placeholders("a {b c} {} {", |_| Some("X")).unwrap(), "a {b c} {} {");
        assert_eq!(placeholders("Q: {question} {option_A}"), ["question", "option_A"]);
    }

    #[test]
    fn verbalizer_validation() {
        assert!(Verbalizer::new(["Yes"], MatchPolicy::FirstToken).is_err());
        assert!(Verbalizer::new(["Yes", "yes"], MatchPolicy::FirstToken).is_err());
        let v = Verbalizer::new(["Yes", "No"], MatchPolicy::FirstToken).unwrap();
        assert_eq!(v.canonical("YES"), Some("Yes"));
        let parsed: Result<Verbalizer, _> = serde_json::from_str(r#"{"labels":["A","a"]}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn demo_requires_both_fields() {
        assert_eq!(DemoExample::new("Question: x\n", " "), Err(PromptError::EmptyDemo("answer_text")));
    }

    proptest! {
        #[test]
        fn parse_render_identity(words in prop::collection::vec("[A-Za-z?.,'()]{1,8}", 1..12)) {
            let d = TaskDescription::from_words(words.clone()).unwrap();
            let again = TaskDescription::parse(&d.render()).unwrap();
            prop_assert_eq!(&again, &d);
            prop_assert_eq!(again.words(), words.as_slice());
        }

        #[test]
        fn render_parse_normalizes_spacing(words in prop::collection::vec("[a-z]{1,6}", 1..8), gaps in prop::collection::vec("[ \t\n]{1,3}", 8)) {
            let mut text = String::new();
            for (i, w) in words.iter().enumerate() {
                text.push_str(&gaps[i]);
                text.push_str(w);
            }
            let d = TaskDescription::parse(&text).unwrap();
            prop_assert_eq!(d.render(), words.join(" "));
        }

        #[test]
        fn rendering_is_deterministic(content in "[ -~]{1,40}") {
            let t = cola_template();
            let x = task(&content);
            prop_assert_eq!(render_prompt(&t, &x), render_prompt(&t, &x));
        }
    }
}
