//! Prompt templates for the five model calls, and their output schemas.
//!
//! Templates live in `assets/prompts/<stage>.{system,user}.txt` and use
//! `{name}` placeholders. Rendering is a single left-to-right pass, so text
//! substituted into a placeholder (a plot, a JSON schema) is never
//! re-scanned for further placeholders.

mod schema;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use schema::{NodeCount, SchemaSpec, DEFAULT_MAX_NODES};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("missing binding(s) for {stage}: {names:?}")]
    MissingBinding { stage: Stage, names: Vec<String> },
    #[error("unknown stage: {0}")]
    UnknownStage(String),
    #[error("branching node {branching_node} is outside 1..={n}")]
    OutOfRange { n: u32, branching_node: u32 },
}

/// The five model calls of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    PlotToTree,
    KeyEvents,
    MetaPrompt,
    WriteStoryline,
    Narrate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::PlotToTree,
        Stage::KeyEvents,
        Stage::MetaPrompt,
        Stage::WriteStoryline,
        Stage::Narrate,
    ];

    /// File stem of the stage's template and schema files.
    pub fn file_stem(self) -> &'static str {
        match self {
            Stage::PlotToTree => "plot_to_tree",
            Stage::KeyEvents => "key_events",
            Stage::MetaPrompt => "meta_prompt",
            Stage::WriteStoryline => "write_storyline",
            Stage::Narrate => "narrate",
        }
    }

    /// Extraction stages are run at temperature 0.
    pub fn is_extraction(self) -> bool {
        matches!(self, Stage::KeyEvents)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

impl FromStr for Stage {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.file_stem() == s)
            .ok_or_else(|| PromptError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: Stage,
    pub system_text: &'static str,
    pub user_text: &'static str,
}

fn strip_final_newline(s: &'static str) -> &'static str {
    s.strip_suffix('\n').unwrap_or(s)
}

impl PromptTemplate {
    pub fn for_stage(stage: Stage) -> PromptTemplate {
        let (system, user) = match stage {
            Stage::PlotToTree => (
                include_str!("../../assets/prompts/plot_to_tree.system.txt"),
                include_str!("../../assets/prompts/plot_to_tree.user.txt"),
            ),
            Stage::KeyEvents => (
                include_str!("../../assets/prompts/key_events.system.txt"),
                include_str!("../../assets/prompts/key_events.user.txt"),
            ),
            Stage::MetaPrompt => (
                include_str!("../../assets/prompts/meta_prompt.system.txt"),
                include_str!("../../assets/prompts/meta_prompt.user.txt"),
            ),
            Stage::WriteStoryline => (
                include_str!("../../assets/prompts/write_storyline.system.txt"),
                include_str!("../../assets/prompts/write_storyline.user.txt"),
            ),
            Stage::Narrate => (
                include_str!("../../assets/prompts/narrate.system.txt"),
                include_str!("../../assets/prompts/narrate.user.txt"),
            ),
        };
        PromptTemplate {
            stage,
            system_text: strip_final_newline(system),
            user_text: strip_final_newline(user),
        }
    }

    /// Placeholder names used by the template, in first-use order.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        for text in [self.system_text, self.user_text] {
            for cap in placeholder_re().captures_iter(text) {
                let name = cap.get(1).expect("group").as_str();
                if !names.contains(&name) {
                    names.push(name);
                }
            }
        }
        names
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"))
}

/// Values for template placeholders.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl ToString) -> Self {
        self.0.insert(name.to_string(), value.to_string());
        self
    }

    pub fn set(&mut self, name: &str, value: impl ToString) {
        self.0.insert(name.to_string(), value.to_string());
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub stage: Stage,
    pub system: String,
    pub user: String,
}

fn substitute(text: &str, bindings: &Bindings, missing: &mut Vec<String>) -> String {
    placeholder_re()
        .replace_all(text, |cap: &regex::Captures<'_>| {
            let name = &cap[1];
            match bindings.get(name) {
                Some(value) => value.to_string(),
                None => {
                    if !missing.iter().any(|m| m == name) {
                        missing.push(name.to_string());
                    }
                    String::new()
                }
            }
        })
        .into_owned()
}

/// Renders a stage's system and user messages.
pub fn render(stage: Stage, bindings: &Bindings) -> Result<RenderedPrompt, PromptError> {
    let template = PromptTemplate::for_stage(stage);
    let mut missing = Vec::new();
    let system = substitute(template.system_text, bindings, &mut missing);
    let user = substitute(template.user_text, bindings, &mut missing);
    if !missing.is_empty() {
        return Err(PromptError::MissingBinding {
            stage,
            names: missing,
        });
    }
    Ok(RenderedPrompt {
        stage,
        system,
        user,
    })
}

/// [`render`] by stage name, for callers working from configuration text.
pub fn render_named(stage: &str, bindings: &Bindings) -> Result<RenderedPrompt, PromptError> {
    render(stage.parse()?, bindings)
}

/// Length of the alternate storyline written when branching at
/// `branching_node` of an `n`-node storyline: three events for every node
/// from the branching node to the end, inclusive.
pub fn new_story_length(n: u32, branching_node: u32) -> Result<u32, PromptError> {
    if branching_node == 0 || branching_node > n {
        return Err(PromptError::OutOfRange { n, branching_node });
    }
    Ok((n - branching_node + 1) * 3)
}

/// Index (1-based) of node `t`'s decision event in its flattened storyline.
pub fn branching_event(branching_node: u32) -> u32 {
    (branching_node.max(1) - 1) * 3 + 1
}

/// Numbered event list, one event per line: `"1. ...\n2. ..."`.
pub fn format_events(events: &[String]) -> String {
    events
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. {}", i + 1, e))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Placeholder text used when the plot-to-tree node count is left open.
pub fn num_nodes_text(count: Option<u32>) -> String {
    match count {
        Some(k) => k.to_string(),
        None => format!("at most {DEFAULT_MAX_NODES}"),
    }
}
