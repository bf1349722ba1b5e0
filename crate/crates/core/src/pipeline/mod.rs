//! The generation pipeline: plot to linear tree, key events, meta-prompts,
//! alternate storylines, subtrees, and the breadth-first expansion that ties
//! them together.

mod checkpoint;
mod expand;

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::llm_gateway::{
    Completion, CompletionRequest, GatewayError, Message, ModelSettings, StructuredCompleter,
};
use crate::plot_tree::{BranchingPlotTree, StorylineNode, StorylinePath, TreeError};
use crate::prompt_kit::{
    self, branching_event, format_events, new_story_length, num_nodes_text, Bindings, NodeCount,
    PromptError, SchemaSpec, Stage, DEFAULT_MAX_NODES,
};
use crate::text;

pub use checkpoint::{config_digest, Checkpoint, FrontierItem, CHECKPOINT_VERSION};
pub use expand::{
    expand_tree, resume, Budget, ExpandConfig, NoopObserver, Observer, Progress,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("the plot is empty")]
    EmptyPlot,
    #[error("need at least 3 events to find key events, got {found}")]
    TooFewEvents { found: usize },
    #[error("key events out of order: inciting {0}, crisis {1}, climax {2}")]
    OrderingViolation(u32, u32, u32),
    #[error("{0}")]
    InvariantViolation(String),
    #[error("expected {expected} events, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("expected a {expected}-node subtree, got {got} nodes")]
    NodeCountMismatch { expected: usize, got: usize },
    #[error("{0}")]
    InvalidInput(String),
    #[error("node {0} is not on the given storyline")]
    NotOnPath(String),
    #[error("node {0} has no alternate decision")]
    MissingAlternate(String),
    #[error("expanded tree failed validation: {}", .0.join("; "))]
    Incomplete(Vec<String>),
    #[error("stopped after {completed} branch(es) as requested")]
    Stopped { completed: usize },
    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint was written with a different configuration ({found}, expected {expected})")]
    ConfigDigestMismatch { expected: String, found: String },
    #[error("I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KeyEventKind {
    IncitingIncident,
    Crisis,
    Climax,
}

impl KeyEventKind {
    pub const ALL: [KeyEventKind; 3] = [
        KeyEventKind::IncitingIncident,
        KeyEventKind::Crisis,
        KeyEventKind::Climax,
    ];

    /// Field name in the model's JSON reply.
    pub fn key(self) -> &'static str {
        match self {
            KeyEventKind::IncitingIncident => "inciting_incident",
            KeyEventKind::Crisis => "crisis",
            KeyEventKind::Climax => "climax",
        }
    }
}

impl fmt::Display for KeyEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyEventKind::IncitingIncident => "inciting incident",
            KeyEventKind::Crisis => "crisis",
            KeyEventKind::Climax => "climax",
        })
    }
}

/// One major plot point: a 1-based index into a storyline and its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub kind: KeyEventKind,
    pub event_id: u32,
    pub event: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEvents {
    pub inciting_incident: PlotPoint,
    pub crisis: PlotPoint,
    pub climax: PlotPoint,
}

impl KeyEvents {
    pub fn points(&self) -> [&PlotPoint; 3] {
        [&self.inciting_incident, &self.crisis, &self.climax]
    }

    fn ids(&self) -> (u32, u32, u32) {
        (self.inciting_incident.event_id, self.crisis.event_id, self.climax.event_id)
    }

    fn is_ordered(&self) -> bool {
        let (a, b, c) = self.ids();
        a < b && b < c
    }
}

/// Keeps the plot points that have not happened yet at `branching_event`.
pub fn filter_key_events(key_events: &KeyEvents, branching_event: u32) -> Vec<PlotPoint> {
    key_events
        .points()
        .into_iter()
        .filter(|p| p.event_id >= branching_event)
        .cloned()
        .collect()
}

/// Text for the `{mpp}` placeholder.
pub fn describe_plot_points(points: &[PlotPoint]) -> String {
    let items: Vec<String> = points
        .iter()
        .map(|p| format!("the {} \"{}\" (event {})", p.kind, p.event, p.event_id))
        .collect();
    match items.as_slice() {
        [] => "the remaining events of the original storyline".to_string(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// A generated prompt for writing the alternate storyline of one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaPrompt {
    pub node_id: String,
    /// Depth of the node, i.e. its 1-based position along the storyline.
    pub branching_node: u32,
    pub branching_event: u32,
    pub original_decision: String,
    pub alternate_decision: String,
    pub new_story_length: u32,
    pub major_plot_points: Vec<PlotPoint>,
    pub prompt_text: String,
}

/// Problems with a generated prompt: it needs exactly five numbered
/// guiding questions and must mention the alternate action.
pub fn meta_prompt_problems(prompt: &str, alternate_decision: &str, char_name: &str) -> Vec<String> {
    static MARKER: OnceLock<Regex> = OnceLock::new();
    let marker = MARKER.get_or_init(|| Regex::new(r"(?m)^\s*(\d+)[.)]\s").expect("valid regex"));
    let numbers: Vec<u32> = marker
        .captures_iter(prompt)
        .filter_map(|c| c[1].parse().ok())
        .collect();
    let mut problems = Vec::new();
    if numbers != [1, 2, 3, 4, 5] {
        problems.push(format!(
            "the prompt must contain exactly five guiding questions numbered 1. to 5. at line starts (found {numbers:?})"
        ));
    }
    let action = text::decision_action(alternate_decision, char_name).to_lowercase();
    if !text::normalize(prompt).to_lowercase().contains(&action) {
        problems.push(format!("the prompt must mention the alternate decision \"{action}\""));
    }
    problems
}

/// Runs the individual pipeline stages against a completer.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    completer: &'a dyn StructuredCompleter,
    settings: &'a ModelSettings,
}

fn with_schema(bindings: Bindings, schema: &SchemaSpec) -> Bindings {
    bindings.with("JSON_SCHEMA", schema.prompt_text())
}

fn retry_request(request: &CompletionRequest, previous: &Value, problems: &[String]) -> CompletionRequest {
    let mut text = format!("Your previous response was:\n{previous}\nIt was rejected because:\n");
    for p in problems {
        text.push_str("- ");
        text.push_str(p);
        text.push('\n');
    }
    text.push_str("Respond again with a corrected JSON document.");
    let mut next = request.clone();
    next.messages.push(Message::user(text));
    next
}

/// Storyline nodes from a plot-to-tree document, in `node_1, node_2, ...` order.
fn storyline_nodes(document: &Value, char_name: &str) -> Result<Vec<StorylineNode>, PipelineError> {
    let map = document
        .as_object()
        .ok_or_else(|| PipelineError::InvariantViolation("plot tree is not an object".into()))?;
    let mut nodes = Vec::new();
    while let Some(node) = map.get(&format!("node_{}", nodes.len() + 1)) {
        let field = |name: &str| node[name].as_str().unwrap_or_default().trim().to_string();
        let events = node["edgeEvents"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_str).map(|s| s.trim().to_string()).collect())
            .unwrap_or_default();
        nodes.push(StorylineNode {
            state: field("state"),
            goal: field("goal"),
            key_decision: field("decision"),
            alternate_decision: field("alternate_decision"),
            events,
        });
    }
    if nodes.len() != map.len() {
        return Err(PipelineError::InvariantViolation(format!(
            "plot tree nodes are not numbered node_1 to node_{}",
            map.len()
        )));
    }
    for (i, n) in nodes.iter().enumerate() {
        if text::same(&n.key_decision, &n.alternate_decision) {
            return Err(PipelineError::InvariantViolation(format!(
                "node_{} of {char_name}'s storyline has identical decisions",
                i + 1
            )));
        }
    }
    Ok(nodes)
}

fn count_nodes(document: &Value) -> usize {
    document.as_object().map_or(0, |m| m.len())
}

impl<'a> Pipeline<'a> {
    pub fn new(completer: &'a dyn StructuredCompleter, settings: &'a ModelSettings) -> Self {
        Pipeline { completer, settings }
    }

    pub fn settings(&self) -> &ModelSettings {
        self.settings
    }

    fn request(&self, stage: Stage, bindings: Bindings, schema: SchemaSpec) -> Result<CompletionRequest, PipelineError> {
        let prompt = prompt_kit::render(stage, &with_schema(bindings, &schema))?;
        Ok(CompletionRequest::new(prompt, schema, self.settings))
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, PipelineError> {
        Ok(self.completer.complete_structured(request)?)
    }

    /// Summarizes `plot` into a single storyline of `num_nodes` nodes (at
    /// most six when unspecified), each with an alternate decision.
    pub fn initialize_tree(
        &self,
        plot: &str,
        char_name: &str,
        title: &str,
        num_nodes: Option<u32>,
    ) -> Result<BranchingPlotTree, PipelineError> {
        if plot.trim().is_empty() {
            return Err(PipelineError::EmptyPlot);
        }
        if char_name.trim().is_empty() {
            return Err(PipelineError::InvalidInput("the main character's name is empty".into()));
        }
        let count = match num_nodes {
            Some(0) => return Err(PipelineError::InvalidInput("the node count must be at least 1".into())),
            Some(k) => NodeCount::Exactly(k),
            None => NodeCount::AtMost(DEFAULT_MAX_NODES),
        };
        let request = self.request(
            Stage::PlotToTree,
            Bindings::new()
                .with("plot", plot.trim())
                .with("num_nodes", num_nodes_text(num_nodes))
                .with("char_name", char_name),
            SchemaSpec::plot_to_tree(char_name, count),
        )?;
        let document = self.complete(&request)?.document;
        let nodes = storyline_nodes(&document, char_name)?;
        let tree = BranchingPlotTree::from_storyline(char_name, title, nodes)?;
        let errors: Vec<String> = tree
            .validate(false)
            .into_iter()
            .filter(|v| v.is_error())
            .map(|v| v.to_string())
            .collect();
        if !errors.is_empty() {
            return Err(PipelineError::Incomplete(errors));
        }
        Ok(tree)
    }

    /// Finds the inciting incident, crisis and climax among `events`. Out of
    /// order ids get one corrective retry.
    pub fn extract_key_events(&self, events: &[String]) -> Result<KeyEvents, PipelineError> {
        if events.len() < 3 {
            return Err(PipelineError::TooFewEvents { found: events.len() });
        }
        let request = self.request(
            Stage::KeyEvents,
            Bindings::new().with("events", format_events(events)),
            SchemaSpec::key_events(events.len() as u32),
        )?;
        let first = self.complete(&request)?.document;
        let mut key_events = parse_key_events(&first);
        if !key_events.is_ordered() {
            let (a, b, c) = key_events.ids();
            let problem = format!(
                "the event ids must satisfy inciting_incident < crisis < climax, but they were {a}, {b}, {c}"
            );
            let retry = retry_request(&request, &first, &[problem]);
            key_events = parse_key_events(&self.complete(&retry)?.document);
            if !key_events.is_ordered() {
                let (a, b, c) = key_events.ids();
                return Err(PipelineError::OrderingViolation(a, b, c));
            }
        }
        Ok(key_events)
    }

    /// Asks for a prompt that will write the alternate storyline of
    /// `node_id`, which must lie on `path`.
    pub fn generate_meta_prompt(
        &self,
        tree: &BranchingPlotTree,
        path: &StorylinePath,
        node_id: &str,
        plot_points: &[PlotPoint],
    ) -> Result<MetaPrompt, PipelineError> {
        let node = tree
            .node(node_id)
            .ok_or_else(|| TreeError::UnknownNode(node_id.to_string()))?;
        let position = path
            .node_ids
            .iter()
            .position(|id| id == node_id)
            .ok_or_else(|| PipelineError::NotOnPath(node_id.to_string()))?;
        if position as u32 + 1 != node.depth {
            return Err(PipelineError::NotOnPath(node_id.to_string()));
        }
        if node.alternate_decision.trim().is_empty() {
            return Err(PipelineError::MissingAlternate(node_id.to_string()));
        }
        let events = tree.storyline_events(path)?;
        let t = node.depth;
        let be = branching_event(t);
        let length = new_story_length(tree.n, t)?;
        let char_name = tree.char_name.as_str();
        let request = self.request(
            Stage::MetaPrompt,
            Bindings::new()
                .with("all_events", format_events(&events))
                .with("branching_event", be)
                .with("char_name", char_name)
                .with("alternate_clause", text::decision_clause(&node.alternate_decision, char_name))
                .with("original_clause", text::decision_clause(&node.key_decision, char_name))
                .with("mpp", describe_plot_points(plot_points))
                .with("new_story_length", length)
                .with("alternate_decision", text::normalize(&node.alternate_decision)),
            SchemaSpec::meta_prompt(be, length),
        )?;
        let mut document = self.complete(&request)?.document;
        let mut problems = meta_prompt_problems(prompt_of(&document), &node.alternate_decision, char_name);
        if !problems.is_empty() {
            let retry = retry_request(&request, &document, &problems);
            document = self.complete(&retry)?.document;
            problems = meta_prompt_problems(prompt_of(&document), &node.alternate_decision, char_name);
            if !problems.is_empty() {
                return Err(PipelineError::InvariantViolation(format!(
                    "meta-prompt for {node_id}: {}",
                    problems.join("; ")
                )));
            }
        }
        Ok(MetaPrompt {
            node_id: node_id.to_string(),
            branching_node: t,
            branching_event: be,
            original_decision: node.key_decision.clone(),
            alternate_decision: node.alternate_decision.clone(),
            new_story_length: length,
            major_plot_points: plot_points.to_vec(),
            prompt_text: prompt_of(&document).to_string(),
        })
    }

    /// Writes the alternate storyline; the first event must restate the
    /// alternate decision.
    pub fn write_alternate_storyline(
        &self,
        path_events: &[String],
        meta_prompt: &MetaPrompt,
    ) -> Result<Vec<String>, PipelineError> {
        let expected = meta_prompt.new_story_length as usize;
        let request = self.request(
            Stage::WriteStoryline,
            Bindings::new()
                .with("all_events", format_events(path_events))
                .with("prompt", &meta_prompt.prompt_text),
            SchemaSpec::write_storyline(meta_prompt.new_story_length),
        )?;
        let fetch = |request: &CompletionRequest| -> Result<(Value, Vec<String>), PipelineError> {
            match self.complete(request) {
                Ok(c) => {
                    let events = (1..=expected)
                        .map(|i| c.document["events"][i.to_string()].as_str().unwrap_or_default().trim().to_string())
                        .collect();
                    Ok((c.document, events))
                }
                Err(PipelineError::Gateway(GatewayError::SchemaViolation {
                    last_document: Some(doc),
                    ..
                })) if doc["events"].as_object().is_some_and(|m| m.len() != expected) => {
                    Err(PipelineError::CountMismatch {
                        expected,
                        got: doc["events"].as_object().map_or(0, |m| m.len()),
                    })
                }
                Err(e) => Err(e),
            }
        };
        let (document, events) = fetch(&request)?;
        if text::same(&events[0], &meta_prompt.alternate_decision) {
            return Ok(events);
        }
        let problem = format!(
            "event \"1\" must be exactly the alternate decision: {}",
            meta_prompt.alternate_decision
        );
        let (_, events) = fetch(&retry_request(&request, &document, &[problem]))?;
        if text::same(&events[0], &meta_prompt.alternate_decision) {
            Ok(events)
        } else {
            Err(PipelineError::InvariantViolation(format!(
                "alternate storyline for {} does not start with its alternate decision",
                meta_prompt.node_id
            )))
        }
    }

    /// Turns a list of events into a storyline tree with one node per three
    /// events.
    pub fn events_to_subtree(&self, events: &[String], char_name: &str) -> Result<BranchingPlotTree, PipelineError> {
        if events.is_empty() || !events.len().is_multiple_of(3) {
            return Err(PipelineError::InvalidInput(format!(
                "a subtree needs a positive multiple of 3 events, got {}",
                events.len()
            )));
        }
        let expected = events.len() / 3;
        let request = self.request(
            Stage::PlotToTree,
            Bindings::new()
                .with("plot", events.join("\n"))
                .with("num_nodes", expected)
                .with("char_name", char_name),
            SchemaSpec::plot_to_tree(char_name, NodeCount::Exactly(expected as u32)),
        )?;
        let document = match self.complete(&request) {
            Ok(c) => c.document,
            Err(PipelineError::Gateway(GatewayError::SchemaViolation {
                last_document: Some(doc),
                ..
            })) if count_nodes(&doc) != expected => {
                return Err(PipelineError::NodeCountMismatch {
                    expected,
                    got: count_nodes(&doc),
                })
            }
            Err(e) => return Err(e),
        };
        let nodes = storyline_nodes(&document, char_name)?;
        Ok(BranchingPlotTree::from_storyline(char_name, "", nodes)?)
    }
}

fn prompt_of(document: &Value) -> &str {
    document["prompt"].as_str().unwrap_or_default()
}

fn parse_key_events(document: &Value) -> KeyEvents {
    let point = |kind: KeyEventKind| {
        let v = &document[kind.key()];
        PlotPoint {
            kind,
            event_id: v["eventId"].as_u64().unwrap_or(0) as u32,
            event: v["event"].as_str().unwrap_or_default().trim().to_string(),
        }
    };
    KeyEvents {
        inciting_incident: point(KeyEventKind::IncitingIncident),
        crisis: point(KeyEventKind::Crisis),
        climax: point(KeyEventKind::Climax),
    }
}

/// Key events whose text differs from the storyline event at their index.
/// Models often paraphrase, so this is reported rather than rejected.
pub fn key_event_mismatches(key_events: &KeyEvents, events: &[String]) -> Vec<String> {
    key_events
        .points()
        .into_iter()
        .filter(|p| {
            let at = (p.event_id as usize)
                .checked_sub(1)
                .and_then(|i| events.get(i))
                .map_or("", String::as_str);
            !text::same(at, &p.event)
        })
        .map(|p| format!("{} (event {}) does not match the storyline text", p.kind, p.event_id))
        .collect()
}

#[cfg(test)]
mod tests;
