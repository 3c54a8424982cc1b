//! TOML template definition files.
//!
//! ```toml
//! description = "Does this sentence make sense?"
//! verbalizer_text = "Do not respond with anything other than the labels 'Yes' or 'No'."
//! layout = "Question: {content}\n"
//! answer_cue = "Answer:"
//!
//! [statics]          # optional, e.g. task = "abstract algebra"
//!
//! [[demos]]          # optional; either input_text or slots
//! slots = { content = "The cat sat." }
//! answer_text = "Yes"
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::prompt::{DemoExample, PromptError, PromptTemplate, TaskDescription};

#[derive(Debug, Error)]
pub enum TemplateFileError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("template file: {0}")]
    Syntax(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    description: String,
    verbalizer_text: String,
    #[serde(default)]
    pre_verbalizer: Option<String>,
    #[serde(default)]
    post_verbalizer: Option<String>,
    layout: String,
    answer_cue: String,
    #[serde(default)]
    statics: BTreeMap<String, String>,
    #[serde(default)]
    demos: Vec<DemoSpec>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DemoSpec {
    Rendered {
        input_text: String,
        answer_text: String,
    },
    Slots {
        slots: BTreeMap<String, String>,
        answer_text: String,
    },
}

pub fn parse_template(text: &str) -> Result<PromptTemplate, TemplateFileError> {
    let file: TemplateFile =
        toml::from_str(text).map_err(|e| TemplateFileError::Syntax(e.to_string()))?;
    let mut template = PromptTemplate {
        description: TaskDescription::parse(&file.description)?,
        verbalizer_text: file.verbalizer_text,
        pre_verbalizer: file.pre_verbalizer,
        post_verbalizer: file.post_verbalizer,
        demos: Vec::new(),
        layout: file.layout,
        answer_cue: file.answer_cue,
        statics: file.statics,
    };
    for demo in file.demos {
        let demo = match demo {
            DemoSpec::Rendered {
                input_text,
                answer_text,
            } => DemoExample::new(input_text, answer_text)?,
            DemoSpec::Slots { slots, answer_text } => {
                DemoExample::new(template.render_block(&slots)?, answer_text)?
            }
        };
        template.demos.push(demo);
    }
    Ok(template)
}

pub fn load_template(path: &Path) -> Result<PromptTemplate, TemplateFileError> {
    let text = std::fs::read_to_string(path)?;
    parse_template(&text)
}

/// Rewrite only the `description` field of a template file, leaving every
/// other field as written.
pub fn replace_description(text: &str, description: &TaskDescription) -> Result<String, TemplateFileError> {
    let mut doc: toml::Table =
        toml::from_str(text).map_err(|e| TemplateFileError::Syntax(e.to_string()))?;
    doc.insert("description".into(), toml::Value::String(description.render()));
    toml::to_string(&doc).map_err(|e| TemplateFileError::Syntax(e.to_string()))
}
