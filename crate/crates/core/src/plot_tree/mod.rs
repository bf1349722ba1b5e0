//! Branching plot tree: story-state nodes joined by three-event edges.
//!
//! Every node holds the protagonist's state and goal, the key decision taken
//! in the storyline the node was generated in, and one alternate decision.
//! Each node has at most one outgoing edge per [`DecisionKind`]; an edge
//! either reaches the next node or the end of the story ([`Target::End`]).
//! A fully expanded tree over an `n`-node root storyline is a complete binary
//! tree with `2^n` endings, and every root-to-end walk visits `n` nodes.

mod io;
mod validate;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use io::{load, save, TreeFileError, TREE_FILE_VERSION};
pub use validate::{Severity, Violation, ViolationCode};

/// Literal used for the end-of-story target in tree files.
pub const END: &str = "END";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("unknown node: {0}")]
    UnknownNode(String),
    #[error("invalid path at hop {hop}: {reason}")]
    InvalidPath { hop: usize, reason: String },
    #[error("node {0} already has an alternate branch")]
    AlternateOccupied(String),
    #[error("subtree storyline has {found} nodes but the branch needs {expected}")]
    DepthMismatch { expected: u32, found: u32 },
    #[error("subtree is malformed: {0}")]
    MalformedSubtree(String),
    #[error("a storyline needs at least one node")]
    EmptyStoryline,
    #[error("node id collision: {0}")]
    IdCollision(String),
}

/// Which of a node's two decisions an edge follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DecisionKind {
    Original,
    Alternate,
}

impl DecisionKind {
    pub const BOTH: [DecisionKind; 2] = [DecisionKind::Original, DecisionKind::Alternate];

    /// One-letter code used in choice strings such as `"OAOA"`.
    pub fn code(self) -> char {
        match self {
            DecisionKind::Original => 'O',
            DecisionKind::Alternate => 'A',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'O' | 'o' => Some(DecisionKind::Original),
            'A' | 'a' => Some(DecisionKind::Alternate),
            _ => None,
        }
    }
}

/// Parses a choice string like `"OAO"` into decision kinds.
pub fn parse_choices(s: &str) -> Result<Vec<DecisionKind>, char> {
    s.chars()
        .map(|c| DecisionKind::from_code(c).ok_or(c))
        .collect()
}

/// Formats decision kinds as a choice string.
pub fn choice_string(choices: &[DecisionKind]) -> String {
    choices.iter().map(|k| k.code()).collect()
}

/// Where an edge leads.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Node(String),
    End,
}

impl Target {
    pub fn node_id(&self) -> Option<&str> {
        match self {
            Target::Node(id) => Some(id),
            Target::End => None,
        }
    }

    pub fn is_end(&self) -> bool {
        matches!(self, Target::End)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Node(id) => f.write_str(id),
            Target::End => f.write_str(END),
        }
    }
}

impl FromStr for Target {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(if s == END {
            Target::End
        } else {
            Target::Node(s.to_string())
        })
    }
}

impl Serialize for Target {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let Ok(target) = s.parse();
        Ok(target)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotNode {
    pub id: String,
    /// The protagonist's current circumstances.
    pub state: String,
    /// What the protagonist is trying to achieve, phrased "To ...".
    pub goal: String,
    /// Decision taken in the storyline this node was generated in.
    pub key_decision: String,
    /// Hypothetical decision under the same state and goal.
    pub alternate_decision: String,
    /// 1-based position along any storyline through this node.
    pub depth: u32,
}

impl PlotNode {
    pub fn decision(&self, kind: DecisionKind) -> &str {
        match kind {
            DecisionKind::Original => &self.key_decision,
            DecisionKind::Alternate => &self.alternate_decision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotEdge {
    pub from_node: String,
    pub to_target: Target,
    pub decision_kind: DecisionKind,
    /// `[restated decision, resulting event, next state]`.
    pub events: Vec<String>,
}

/// Content of one node of a linear storyline, before ids are assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorylineNode {
    pub state: String,
    pub goal: String,
    pub key_decision: String,
    pub alternate_decision: String,
    pub events: Vec<String>,
}

/// A root-to-node walk together with the decision taken at every node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StorylinePath {
    pub node_ids: Vec<String>,
    pub choices: Vec<DecisionKind>,
}

impl StorylinePath {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn choice_string(&self) -> String {
        choice_string(&self.choices)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchingPlotTree {
    pub char_name: String,
    pub title: String,
    /// Node count of the root storyline; every complete storyline has this length.
    pub n: u32,
    pub root: String,
    pub nodes: BTreeMap<String, PlotNode>,
    pub edges: Vec<PlotEdge>,
}

impl BranchingPlotTree {
    /// Builds a single linear storyline with ids `node_1 ..= node_k`; the last
    /// node's edge leads to the end of the story.
    pub fn from_storyline(
        char_name: impl Into<String>,
        title: impl Into<String>,
        storyline: Vec<StorylineNode>,
    ) -> Result<Self, TreeError> {
        if storyline.is_empty() {
            return Err(TreeError::EmptyStoryline);
        }
        let count = storyline.len();
        let mut nodes = BTreeMap::new();
        let mut edges = Vec::with_capacity(count);
        for (i, item) in storyline.into_iter().enumerate() {
            let id = format!("node_{}", i + 1);
            let to_target = if i + 1 == count {
                Target::End
            } else {
                Target::Node(format!("node_{}", i + 2))
            };
            edges.push(PlotEdge {
                from_node: id.clone(),
                to_target,
                decision_kind: DecisionKind::Original,
                events: item.events,
            });
            nodes.insert(
                id.clone(),
                PlotNode {
                    id,
                    state: item.state,
                    goal: item.goal,
                    key_decision: item.key_decision,
                    alternate_decision: item.alternate_decision,
                    depth: i as u32 + 1,
                },
            );
        }
        Ok(BranchingPlotTree {
            char_name: char_name.into(),
            title: title.into(),
            n: count as u32,
            root: "node_1".to_string(),
            nodes,
            edges,
        })
    }

    pub fn node(&self, id: &str) -> Option<&PlotNode> {
        self.nodes.get(id)
    }

    pub fn edge(&self, from: &str, kind: DecisionKind) -> Option<&PlotEdge> {
        self.edges
            .iter()
            .find(|e| e.from_node == from && e.decision_kind == kind)
    }

    pub fn outgoing<'a>(&'a self, from: &'a str) -> impl Iterator<Item = &'a PlotEdge> + 'a {
        self.edges.iter().filter(move |e| e.from_node == from)
    }

    pub fn incoming(&self, node_id: &str) -> Option<&PlotEdge> {
        self.edges
            .iter()
            .find(|e| e.to_target.node_id() == Some(node_id))
    }

    /// Number of edges that end the story.
    pub fn ending_count(&self) -> usize {
        self.edges.iter().filter(|e| e.to_target.is_end()).count()
    }

    fn adjacency(&self) -> HashMap<&str, [Option<&PlotEdge>; 2]> {
        let mut adj: HashMap<&str, [Option<&PlotEdge>; 2]> = HashMap::new();
        for e in &self.edges {
            let slot = &mut adj.entry(e.from_node.as_str()).or_default()[e.decision_kind as usize];
            if slot.is_none() {
                *slot = Some(e);
            }
        }
        adj
    }

    /// Concatenated edge events along `path`, three per node.
    pub fn storyline_events(&self, path: &StorylinePath) -> Result<Vec<String>, TreeError> {
        if path.node_ids.len() != path.choices.len() {
            return Err(TreeError::InvalidPath {
                hop: path.node_ids.len().min(path.choices.len()),
                reason: "node and choice counts differ".into(),
            });
        }
        if path.node_ids.first().map(String::as_str) != Some(self.root.as_str()) {
            return Err(TreeError::InvalidPath {
                hop: 0,
                reason: "path does not start at the root".into(),
            });
        }
        let mut events = Vec::with_capacity(path.len() * 3);
        for (hop, (id, kind)) in path.node_ids.iter().zip(&path.choices).enumerate() {
            let edge = self.edge(id, *kind).ok_or_else(|| TreeError::InvalidPath {
                hop,
                reason: format!("node {id} has no {kind:?} edge"),
            })?;
            if let Some(next) = path.node_ids.get(hop + 1) {
                if edge.to_target.node_id() != Some(next.as_str()) {
                    return Err(TreeError::InvalidPath {
                        hop,
                        reason: format!("{kind:?} edge of {id} does not lead to {next}"),
                    });
                }
            }
            events.extend(edge.events.iter().cloned());
        }
        Ok(events)
    }

    /// Resolves a sequence of choices starting at the root into a path.
    pub fn path_from_choices(&self, choices: &[DecisionKind]) -> Result<StorylinePath, TreeError> {
        let mut node_ids = Vec::with_capacity(choices.len());
        let mut current = Some(self.root.clone());
        for (hop, kind) in choices.iter().enumerate() {
            let id = current.ok_or_else(|| TreeError::InvalidPath {
                hop,
                reason: "the story already ended".into(),
            })?;
            let edge = self.edge(&id, *kind).ok_or_else(|| TreeError::InvalidPath {
                hop,
                reason: format!("node {id} has no {kind:?} edge"),
            })?;
            current = edge.to_target.node_id().map(str::to_string);
            node_ids.push(id);
        }
        Ok(StorylinePath {
            node_ids,
            choices: choices.to_vec(),
        })
    }

    /// Path from the root to `node_id` (exclusive) as `(node, choice)` hops.
    pub fn ancestry(&self, node_id: &str) -> Result<Vec<(String, DecisionKind)>, TreeError> {
        if !self.nodes.contains_key(node_id) {
            return Err(TreeError::UnknownNode(node_id.to_string()));
        }
        let mut hops = Vec::new();
        let mut current = node_id.to_string();
        let mut seen = HashSet::new();
        while current != self.root {
            if !seen.insert(current.clone()) {
                return Err(TreeError::MalformedSubtree(format!("cycle through {current}")));
            }
            let edge = self
                .incoming(&current)
                .ok_or_else(|| TreeError::UnknownNode(format!("{current} is unreachable")))?;
            hops.push((edge.from_node.clone(), edge.decision_kind));
            current = edge.from_node.clone();
        }
        hops.reverse();
        Ok(hops)
    }

    /// The storyline in which `node_id`'s key decision is taken: the path down
    /// to the node, then Original edges until the story ends.
    pub fn storyline_through(&self, node_id: &str) -> Result<StorylinePath, TreeError> {
        let hops = self.ancestry(node_id)?;
        let (mut node_ids, mut choices): (Vec<_>, Vec<_>) = hops.into_iter().unzip();
        let mut current = node_id.to_string();
        loop {
            let edge = self
                .edge(&current, DecisionKind::Original)
                .ok_or_else(|| TreeError::InvalidPath {
                    hop: node_ids.len(),
                    reason: format!("node {current} has no Original edge"),
                })?;
            node_ids.push(current.clone());
            choices.push(DecisionKind::Original);
            match &edge.to_target {
                Target::End => break,
                Target::Node(next) => current = next.clone(),
            }
            if node_ids.len() > self.nodes.len() {
                return Err(TreeError::MalformedSubtree("cycle along Original edges".into()));
            }
        }
        Ok(StorylinePath { node_ids, choices })
    }

    /// All root-to-end paths, Original before Alternate at every node.
    pub fn enumerate_storylines(&self) -> Vec<StorylinePath> {
        fn walk(
            adj: &HashMap<&str, [Option<&PlotEdge>; 2]>,
            id: &str,
            limit: usize,
            partial: &mut StorylinePath,
            out: &mut Vec<StorylinePath>,
        ) {
            if partial.node_ids.len() >= limit {
                return;
            }
            let Some(slots) = adj.get(id) else { return };
            partial.node_ids.push(id.to_string());
            for edge in slots.iter().flatten() {
                partial.choices.push(edge.decision_kind);
                match &edge.to_target {
                    Target::End => out.push(partial.clone()),
                    Target::Node(next) => walk(adj, next, limit, partial, out),
                }
                partial.choices.pop();
            }
            partial.node_ids.pop();
        }

        let mut out = Vec::new();
        if self.nodes.contains_key(&self.root) {
            let mut partial = StorylinePath {
                node_ids: vec![],
                choices: vec![],
            };
            walk(&self.adjacency(), &self.root, self.nodes.len(), &mut partial, &mut out);
        }
        out
    }

    /// Number of nodes along the Original chain from the root, provided the
    /// chain reaches the end of the story.
    fn original_chain_len(&self) -> Option<u32> {
        let mut count = 0u32;
        let mut current = self.root.clone();
        loop {
            let edge = self.edge(&current, DecisionKind::Original)?;
            count += 1;
            match &edge.to_target {
                Target::End => return Some(count),
                Target::Node(next) => current = next.clone(),
            }
            if count as usize > self.nodes.len() {
                return None;
            }
        }
    }

    /// Grafts `subtree` into the Alternate slot of `at_node`.
    ///
    /// The subtree's root stands for `at_node` itself: its Original edge
    /// becomes `at_node`'s Alternate edge, and everything below it is copied
    /// in with fresh ids and shifted depths. Existing nodes and edges are
    /// never modified.
    pub fn merge_branch(
        &self,
        at_node: &str,
        subtree: &BranchingPlotTree,
    ) -> Result<BranchingPlotTree, TreeError> {
        let at = self
            .node(at_node)
            .ok_or_else(|| TreeError::UnknownNode(at_node.to_string()))?;
        if self.edge(at_node, DecisionKind::Alternate).is_some() {
            return Err(TreeError::AlternateOccupied(at_node.to_string()));
        }
        if at.depth == 0 || at.depth > self.n {
            return Err(TreeError::DepthMismatch {
                expected: self.n,
                found: at.depth,
            });
        }
        let expected = self.n - at.depth + 1;
        let found = subtree.original_chain_len().ok_or_else(|| {
            TreeError::MalformedSubtree("root storyline does not reach the end".into())
        })?;
        if found != expected {
            return Err(TreeError::DepthMismatch { expected, found });
        }
        let sub_adj = subtree.adjacency();
        let root_edge = subtree
            .edge(&subtree.root, DecisionKind::Original)
            .expect("chain length checked");

        let offset = at.depth - 1;
        let mut merged = self.clone();
        let mut ids: HashMap<&str, String> = HashMap::new();
        let mut minted: HashSet<String> = HashSet::new();
        let mut queue: VecDeque<(&str, u32)> = VecDeque::new();
        if let Target::Node(first) = &root_edge.to_target {
            queue.push_back((first.as_str(), 2));
        }

        // Copy nodes breadth-first, checking stored depths as we go.
        let mut order = Vec::new();
        while let Some((sub_id, rel_depth)) = queue.pop_front() {
            let sub_node = subtree
                .node(sub_id)
                .ok_or_else(|| TreeError::MalformedSubtree(format!("missing node {sub_id}")))?;
            if ids.contains_key(sub_id) {
                return Err(TreeError::MalformedSubtree(format!("{sub_id} reached twice")));
            }
            if sub_node.depth != rel_depth {
                return Err(TreeError::DepthMismatch {
                    expected: rel_depth,
                    found: sub_node.depth,
                });
            }
            let depth = rel_depth + offset;
            if depth > self.n {
                return Err(TreeError::DepthMismatch {
                    expected: self.n,
                    found: depth,
                });
            }
            let new_id = mint_id(at_node, sub_id, depth);
            if merged.nodes.contains_key(&new_id) || !minted.insert(new_id.clone()) {
                return Err(TreeError::IdCollision(new_id));
            }
            ids.insert(sub_id, new_id);
            order.push(sub_id);
            if let Some(slots) = sub_adj.get(sub_id) {
                for edge in slots.iter().flatten() {
                    match &edge.to_target {
                        Target::Node(child) => queue.push_back((child.as_str(), rel_depth + 1)),
                        Target::End if depth != self.n => {
                            return Err(TreeError::DepthMismatch {
                                expected: self.n,
                                found: depth,
                            })
                        }
                        Target::End => {}
                    }
                }
            }
        }

        let remap = |t: &Target| -> Target {
            match t {
                Target::End => Target::End,
                Target::Node(id) => Target::Node(ids[id.as_str()].clone()),
            }
        };
        merged.edges.push(PlotEdge {
            from_node: at_node.to_string(),
            to_target: remap(&root_edge.to_target),
            decision_kind: DecisionKind::Alternate,
            events: root_edge.events.clone(),
        });
        for sub_id in order {
            let mut node = subtree.nodes[sub_id].clone();
            node.id = ids[sub_id].clone();
            node.depth += offset;
            if let Some(slots) = sub_adj.get(sub_id) {
                for edge in slots.iter().flatten() {
                    merged.edges.push(PlotEdge {
                        from_node: node.id.clone(),
                        to_target: remap(&edge.to_target),
                        decision_kind: edge.decision_kind,
                        events: edge.events.clone(),
                    });
                }
            }
            merged.nodes.insert(node.id.clone(), node);
        }
        Ok(merged)
    }

    /// Ids of the nodes grafted below `at_node`'s Alternate edge, in storyline
    /// order along Original edges.
    pub fn alternate_branch_ids(&self, at_node: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut next = self
            .edge(at_node, DecisionKind::Alternate)
            .and_then(|e| e.to_target.node_id().map(str::to_string));
        while let Some(id) = next {
            next = self
                .edge(&id, DecisionKind::Original)
                .and_then(|e| e.to_target.node_id().map(str::to_string));
            out.push(id);
            if out.len() > self.nodes.len() {
                break;
            }
        }
        out
    }

    /// Validates the structural invariants; see [`Violation`].
    pub fn validate(&self, expect_complete: bool) -> Vec<Violation> {
        validate::validate(self, expect_complete)
    }

    /// Digest of this tree's view of `past`: every node of `past` and every
    /// edge slot `past` had filled, as they appear in `self`. Equal digests
    /// for `past` and a later tree mean the later tree left the past alone.
    pub fn frozen_digest(&self, past: &BranchingPlotTree) -> String {
        let mut hasher = Sha256::new();
        for id in past.nodes.keys() {
            match self.nodes.get(id) {
                Some(node) => hasher.update(serde_json::to_vec(node).expect("node serializes")),
                None => hasher.update(format!("missing node {id}")),
            }
        }
        for edge in &past.edges {
            match self.edge(&edge.from_node, edge.decision_kind) {
                Some(e) => hasher.update(serde_json::to_vec(e).expect("edge serializes")),
                None => hasher.update(format!("missing edge {}", edge.from_node)),
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Grafted node ids: the depth plus a short digest of where the node came
/// from, so ids are stable across runs.
fn mint_id(at_node: &str, sub_id: &str, depth: u32) -> String {
    let digest = Sha256::digest(format!("{at_node}/{sub_id}").as_bytes());
    format!("node_{depth}_{}", &hex::encode(digest)[..8])
}
