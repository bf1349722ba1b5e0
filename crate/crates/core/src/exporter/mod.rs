//! Turns a narrated tree into a playable game: an Ink script and a game JSON
//! document. Both list the Original choice before the Alternate one, and an
//! ending choice closes with the last event of its edge as an epilogue.

mod game;
pub mod ink;

use std::collections::{BTreeMap, HashSet, VecDeque};

use thiserror::Error;

use crate::narrator::{NodeNarration, Narrations};
use crate::plot_tree::{BranchingPlotTree, DecisionKind, PlotEdge, PlotNode};

pub use game::{
    export_game_json, game_playthroughs, GameChoice, GameDocument, Passage, GAME_FORMAT_VERSION,
};
pub use ink::{export_ink, ink_playthroughs, InkError, InkScript};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExportError {
    #[error("no narration for node {0}")]
    MissingNarration(String),
    #[error("node ids {first} and {second} both become knot name {name}")]
    NameCollision { first: String, second: String, name: String },
    #[error("choice in {passage} leads to missing passage {target}")]
    DeadLink { passage: String, target: String },
    #[error("start passage {0} does not exist")]
    MissingStart(String),
    #[error("passage {0} is revisited; the game graph has a cycle")]
    Cycle(String),
    #[error(transparent)]
    Ink(#[from] InkError),
}

/// Label sequence of one playthrough mapped to the epilogue it ends with.
pub type Playthroughs = BTreeMap<Vec<String>, String>;

/// Nodes in breadth-first order from the root (Original before Alternate),
/// followed by any node the walk did not reach.
pub(crate) fn node_order(tree: &BranchingPlotTree) -> Vec<&PlotNode> {
    let mut seen = HashSet::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::from([tree.root.as_str()]);
    while let Some(id) = queue.pop_front() {
        let Some(node) = tree.node(id) else { continue };
        if !seen.insert(id) {
            continue;
        }
        order.push(node);
        for kind in DecisionKind::BOTH {
            if let Some(next) = tree.edge(id, kind).and_then(|e| e.to_target.node_id()) {
                queue.push_back(next);
            }
        }
    }
    order.extend(tree.nodes.values().filter(|n| !seen.contains(n.id.as_str())));
    order
}

/// A node's outgoing edges paired with their button labels.
pub(crate) fn choices<'a>(
    tree: &'a BranchingPlotTree,
    narration: &'a NodeNarration,
) -> Vec<(&'a PlotEdge, &'a str)> {
    DecisionKind::BOTH
        .into_iter()
        .filter_map(|kind| {
            let edge = tree.edge(&narration.node_id, kind)?;
            let label = match kind {
                DecisionKind::Original => narration.button_original.as_str(),
                DecisionKind::Alternate => narration.button_alternate.as_str(),
            };
            Some((edge, label))
        })
        .collect()
}

pub(crate) fn epilogue(edge: &PlotEdge) -> String {
    edge.events.last().cloned().unwrap_or_default()
}

pub(crate) fn narration_for<'a>(narrations: &'a Narrations, id: &str) -> Result<&'a NodeNarration, ExportError> {
    narrations
        .get(id)
        .ok_or_else(|| ExportError::MissingNarration(id.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{Gateway, ModelSettings, SyntheticBackend};
    use crate::narrator::narrate_tree;
    use crate::pipeline::{expand_tree, ExpandConfig, NoopObserver, Pipeline};

    pub(crate) fn narrated(n: u32, seed: u64) -> (BranchingPlotTree, Narrations) {
        let settings = ModelSettings::default();
        let gateway = Gateway::new(SyntheticBackend::new(seed));
        let tree = Pipeline::new(&gateway, &settings)
            .initialize_tree(
                "Ada finds a map. She sails north. A storm hits. She lands on an island.",
                "Ada",
                "The Map",
                Some(n),
            )
            .unwrap();
        let tree = expand_tree(&gateway, &settings, tree, &ExpandConfig::default(), &NoopObserver).unwrap();
        let mut narrations = Narrations::new();
        narrate_tree(&gateway, &settings, &tree, &mut narrations, 1).unwrap();
        (tree, narrations)
    }

    #[test]
    fn ink_and_game_agree() {
        for n in 1..=3 {
            let (tree, narrations) = narrated(n, 6);
            let ink = export_ink(&tree, &narrations).unwrap();
            let game = export_game_json(&tree, &narrations).unwrap();
            let from_ink = ink_playthroughs(&InkScript::parse(&ink).unwrap()).unwrap();
            let from_game = game_playthroughs(&game).unwrap();
            assert_eq!(from_ink.len(), 1 << n);
            assert_eq!(from_ink, from_game);
            assert!(from_game.keys().all(|k| k.len() == n as usize));
        }
    }

    #[test]
    fn playthroughs_follow_tree_storylines() {
        let (tree, narrations) = narrated(3, 1);
        let game = export_game_json(&tree, &narrations).unwrap();
        let expected: Playthroughs = tree
            .enumerate_storylines()
            .into_iter()
            .map(|path| {
                let labels = path
                    .node_ids
                    .iter()
                    .zip(&path.choices)
                    .map(|(id, kind)| {
                        let n = &narrations[id];
                        match kind {
                            DecisionKind::Original => n.button_original.clone(),
                            DecisionKind::Alternate => n.button_alternate.clone(),
                        }
                    })
                    .collect();
                let last = tree.edge(path.node_ids.last().unwrap(), *path.choices.last().unwrap()).unwrap();
                (labels, epilogue(last))
            })
            .collect();
        assert_eq!(game_playthroughs(&game).unwrap(), expected);
    }

    #[test]
    fn missing_narration() {
        let (tree, _) = narrated(1, 0);
        let empty = Narrations::new();
        assert_eq!(export_ink(&tree, &empty), Err(ExportError::MissingNarration("node_1".into())));
        assert!(matches!(
            export_game_json(&tree, &empty),
            Err(ExportError::MissingNarration(_))
        ));
    }

    #[test]
    fn export_is_deterministic() {
        let (tree, narrations) = narrated(2, 3);
        assert_eq!(export_ink(&tree, &narrations), export_ink(&tree, &narrations));
        assert_eq!(
            export_game_json(&tree, &narrations).unwrap().to_json(),
            export_game_json(&tree, &narrations).unwrap().to_json()
        );
    }
}
