//! Second-person game narration for every node, with one button per
//! decision.

use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::llm_gateway::{CompletionRequest, GatewayError, Message, ModelSettings, StructuredCompleter};
use crate::plot_tree::BranchingPlotTree;
use crate::prompt_kit::{self, Bindings, PromptError, SchemaSpec, Stage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NarratorError {
    #[error("unknown node: {0}")]
    UnknownNode(String),
    #[error("narration for {node_id} has an empty {field}")]
    EmptyField { node_id: String, field: &'static str },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeNarration {
    pub node_id: String,
    /// Newline-separated paragraphs.
    pub paragraphs: String,
    pub button_original: String,
    pub button_alternate: String,
}

impl NodeNarration {
    pub fn paragraph_list(&self) -> Vec<&str> {
        self.paragraphs
            .split('\n')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .collect()
    }
}

pub type Narrations = BTreeMap<String, NodeNarration>;

/// What the model is shown for one node: the events of the edge into it,
/// the resulting state and goal, and the two decisions. The root has no
/// incoming edge, so its own state serves as the only event.
pub fn node_payload(tree: &BranchingPlotTree, node_id: &str) -> Result<Value, NarratorError> {
    let node = tree
        .node(node_id)
        .ok_or_else(|| NarratorError::UnknownNode(node_id.to_string()))?;
    let events = match tree.incoming(node_id) {
        Some(edge) => edge.events.clone(),
        None => vec![node.state.clone()],
    };
    Ok(json!({
        "events": events,
        "state": node.state,
        "goal": node.goal,
        "decisions": [node.key_decision, node.alternate_decision],
    }))
}

fn request(tree: &BranchingPlotTree, node_id: &str, settings: &ModelSettings) -> Result<CompletionRequest, NarratorError> {
    let schema = SchemaSpec::narrate();
    let payload = serde_json::to_string_pretty(&node_payload(tree, node_id)?).expect("payload serializes");
    let prompt = prompt_kit::render(
        Stage::Narrate,
        &Bindings::new()
            .with("char_name", &tree.char_name)
            .with("node", payload)
            .with("JSON_SCHEMA", schema.prompt_text()),
    )?;
    Ok(CompletionRequest::new(prompt, schema, settings))
}

fn empty_field(document: &Value) -> Option<&'static str> {
    ["paragraphs", "button_text_1", "button_text_2"]
        .into_iter()
        .find(|f| document[*f].as_str().is_none_or(|s| s.trim().is_empty()))
}

/// Narrates one node. An empty field gets one corrective retry.
pub fn narrate_node(
    completer: &dyn StructuredCompleter,
    settings: &ModelSettings,
    tree: &BranchingPlotTree,
    node_id: &str,
) -> Result<NodeNarration, NarratorError> {
    let mut request = request(tree, node_id, settings)?;
    let mut document = completer.complete_structured(&request)?.document;
    if let Some(field) = empty_field(&document) {
        request.messages.push(Message::user(format!(
            "Your previous response was:\n{document}\nThe field \"{field}\" must not be empty. Respond again with a corrected JSON document."
        )));
        document = completer.complete_structured(&request)?.document;
        if let Some(field) = empty_field(&document) {
            return Err(NarratorError::EmptyField {
                node_id: node_id.to_string(),
                field,
            });
        }
    }
    let field = |name: &str| document[name].as_str().unwrap_or_default().trim().to_string();
    Ok(NodeNarration {
        node_id: node_id.to_string(),
        paragraphs: field("paragraphs"),
        button_original: field("button_text_1"),
        button_alternate: field("button_text_2"),
    })
}

/// Narrates every node not yet in `out`. Finished narrations stay in `out`
/// even when a later node fails, so a rerun only redoes the rest.
pub fn narrate_tree(
    completer: &dyn StructuredCompleter,
    settings: &ModelSettings,
    tree: &BranchingPlotTree,
    out: &mut Narrations,
    parallel: usize,
) -> Result<(), NarratorError> {
    let todo: Vec<&String> = tree.nodes.keys().filter(|id| !out.contains_key(*id)).collect();
    for chunk in todo.chunks(parallel.max(1)) {
        let results: Vec<Result<NodeNarration, NarratorError>> = if chunk.len() == 1 {
            vec![narrate_node(completer, settings, tree, chunk[0])]
        } else {
            thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|id| s.spawn(move || narrate_node(completer, settings, tree, id)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("narration worker panicked"))
                    .collect()
            })
        };
        let mut first_error = None;
        for result in results {
            match result {
                Ok(n) => {
                    out.insert(n.node_id.clone(), n);
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }
    }
    Ok(())
}

/// Style problems that do not block export: the character named in the
/// narration, and fewer paragraphs than events plus the transition.
pub fn lint(tree: &BranchingPlotTree, narration: &NodeNarration) -> Vec<String> {
    let mut out = Vec::new();
    let mentions = narration.paragraphs.matches(tree.char_name.as_str()).count();
    if mentions > 0 {
        out.push(format!(
            "{}: narration mentions {} {mentions} time(s)",
            narration.node_id, tree.char_name
        ));
    }
    if tree.incoming(&narration.node_id).is_some() && narration.paragraph_list().len() < 3 {
        out.push(format!(
            "{}: narration has {} paragraph(s), expected at least 3",
            narration.node_id,
            narration.paragraph_list().len()
        ));
    }
    out
}
