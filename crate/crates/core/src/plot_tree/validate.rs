use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use super::{BranchingPlotTree, DecisionKind, Target};
use crate::text::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Severity {
    /// Lexical drift in model output; the tree is still usable.
    Warning,
    /// A structural invariant is broken.
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationCode {
    MissingRoot,
    UnknownNode,
    DuplicateEdge,
    EdgeEventCount,
    MultipleParents,
    RootHasParent,
    Unreachable,
    DepthMismatch,
    EarlyEnding,
    EmptyState,
    SameDecisions,
    IncompleteNode,
    LeafCount,
    PathLength,
    GoalPrefix,
    DecisionPrefix,
    EventDecisionPrefix,
    IdenticalChildren,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub severity: Severity,
    pub code: ViolationCode,
    /// Node id or `from -> to` edge the violation is about.
    pub location: String,
    pub message: String,
}

impl Violation {
    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{level}: {} ({})", self.message, self.location)
    }
}

struct Report(Vec<Violation>);

impl Report {
    fn error(&mut self, code: ViolationCode, location: impl Into<String>, message: impl Into<String>) {
        self.push(Severity::Error, code, location, message);
    }

    fn warn(&mut self, code: ViolationCode, location: impl Into<String>, message: impl Into<String>) {
        self.push(Severity::Warning, code, location, message);
    }

    fn push(
        &mut self,
        severity: Severity,
        code: ViolationCode,
        location: impl Into<String>,
        message: impl Into<String>,
    ) {
        self.0.push(Violation {
            severity,
            code,
            location: location.into(),
            message: message.into(),
        });
    }
}

pub(super) fn validate(tree: &BranchingPlotTree, expect_complete: bool) -> Vec<Violation> {
    let mut report = Report(Vec::new());
    let decides = format!("{} decides to ", normalize(&tree.char_name));
    let decides_stem = format!("{} decides", normalize(&tree.char_name));

    if !tree.nodes.contains_key(&tree.root) {
        report.error(ViolationCode::MissingRoot, &tree.root, "root node is missing");
        return report.0;
    }

    for (id, node) in &tree.nodes {
        if *id != node.id {
            report.error(
                ViolationCode::UnknownNode,
                id,
                format!("node stored under {id} carries id {}", node.id),
            );
        }
        if node.state.trim().is_empty() {
            report.error(ViolationCode::EmptyState, id, "state is empty");
        }
        if normalize(&node.key_decision) == normalize(&node.alternate_decision) {
            report.error(
                ViolationCode::SameDecisions,
                id,
                "key decision and alternate decision are identical",
            );
        }
        if !normalize(&node.goal).starts_with("To ") {
            report.warn(ViolationCode::GoalPrefix, id, "goal does not start with \"To \"");
        }
        for (label, text) in [
            ("key decision", &node.key_decision),
            ("alternate decision", &node.alternate_decision),
        ] {
            if !normalize(text).starts_with(&decides) {
                report.warn(
                    ViolationCode::DecisionPrefix,
                    id,
                    format!("{label} does not start with \"{decides}\""),
                );
            }
        }
    }

    let mut slots: HashSet<(&str, DecisionKind)> = HashSet::new();
    let mut parents: HashMap<&str, usize> = HashMap::new();
    let mut children: HashMap<&str, Vec<(DecisionKind, &Target)>> = HashMap::new();
    for edge in &tree.edges {
        let location = format!("{} -> {}", edge.from_node, edge.to_target);
        let Some(from) = tree.nodes.get(&edge.from_node) else {
            report.error(ViolationCode::UnknownNode, &location, "edge starts at an unknown node");
            continue;
        };
        if !slots.insert((edge.from_node.as_str(), edge.decision_kind)) {
            report.error(
                ViolationCode::DuplicateEdge,
                &location,
                format!("more than one {:?} edge", edge.decision_kind),
            );
        }
        if edge.events.len() != 3 {
            report.error(
                ViolationCode::EdgeEventCount,
                &location,
                format!("edge event count ≠ 3 (found {})", edge.events.len()),
            );
        } else if !normalize(&edge.events[0]).starts_with(&decides_stem) {
            report.warn(
                ViolationCode::EventDecisionPrefix,
                &location,
                format!("first edge event does not restate a decision (\"{decides_stem}\")"),
            );
        }
        children
            .entry(edge.from_node.as_str())
            .or_default()
            .push((edge.decision_kind, &edge.to_target));
        match &edge.to_target {
            Target::End => {
                if from.depth != tree.n {
                    report.error(
                        ViolationCode::EarlyEnding,
                        &location,
                        format!("story ends at depth {} instead of {}", from.depth, tree.n),
                    );
                }
            }
            Target::Node(to) => {
                *parents.entry(to.as_str()).or_default() += 1;
                match tree.nodes.get(to) {
                    None => report.error(
                        ViolationCode::UnknownNode,
                        &location,
                        "edge leads to an unknown node",
                    ),
                    Some(child) if child.depth != from.depth + 1 => report.error(
                        ViolationCode::DepthMismatch,
                        &location,
                        format!("child depth {} after parent depth {}", child.depth, from.depth),
                    ),
                    Some(_) => {}
                }
            }
        }
    }

    if parents.contains_key(tree.root.as_str()) {
        report.error(ViolationCode::RootHasParent, &tree.root, "root has an incoming edge");
    }
    if tree.nodes[&tree.root].depth != 1 {
        report.error(ViolationCode::DepthMismatch, &tree.root, "root depth is not 1");
    }
    for (id, count) in &parents {
        if *count > 1 {
            report.error(
                ViolationCode::MultipleParents,
                *id,
                format!("{count} incoming edges"),
            );
        }
    }
    for node in tree.nodes.values() {
        if node.depth > tree.n || node.depth == 0 {
            report.error(
                ViolationCode::DepthMismatch,
                &node.id,
                format!("depth {} outside 1..={}", node.depth, tree.n),
            );
        }
    }

    // reachability
    let mut seen: HashSet<&str> = HashSet::new();
    let mut stack = vec![tree.root.as_str()];
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        for (_, target) in children.get(id).into_iter().flatten() {
            if let Target::Node(next) = target {
                if tree.nodes.contains_key(next) {
                    stack.push(next);
                }
            }
        }
    }
    for id in tree.nodes.keys() {
        if !seen.contains(id.as_str()) {
            report.error(ViolationCode::Unreachable, id, "not reachable from the root");
        }
    }

    // Identical sibling states are allowed but worth a look.
    for (id, kids) in &children {
        let states: Vec<&str> = kids
            .iter()
            .filter_map(|(_, t)| t.node_id())
            .filter_map(|c| tree.nodes.get(c))
            .map(|c| c.state.as_str())
            .collect();
        if states.len() == 2 && normalize(states[0]) == normalize(states[1]) {
            report.warn(
                ViolationCode::IdenticalChildren,
                *id,
                "both children start from the same state",
            );
        }
    }

    if expect_complete {
        for id in tree.nodes.keys() {
            let count = children.get(id.as_str()).map_or(0, Vec::len);
            if count != 2 {
                report.error(
                    ViolationCode::IncompleteNode,
                    id,
                    format!("{count} outgoing edges instead of 2"),
                );
            }
        }
        let endings = tree.ending_count();
        let expected = 1usize.checked_shl(tree.n).unwrap_or(usize::MAX);
        if endings != expected {
            report.error(
                ViolationCode::LeafCount,
                &tree.root,
                format!("leaf count {endings} ≠ {expected}"),
            );
        }
        for path in tree.enumerate_storylines() {
            if path.len() != tree.n as usize {
                report.error(
                    ViolationCode::PathLength,
                    path.choice_string(),
                    format!("storyline visits {} nodes instead of {}", path.len(), tree.n),
                );
            }
        }
    }

    report.0.sort_by_key(|v| std::cmp::Reverse(v.severity));
    report.0
}
