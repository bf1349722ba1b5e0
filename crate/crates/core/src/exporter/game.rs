use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{choices, epilogue, narration_for, node_order, ExportError, Playthroughs};
use crate::narrator::Narrations;
use crate::plot_tree::{BranchingPlotTree, DecisionKind, Target};

pub const GAME_FORMAT_VERSION: u32 = 1;

/// The game document read by the web player.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameDocument {
    pub version: u32,
    pub title: String,
    pub char_name: String,
    pub start: String,
    pub passages: BTreeMap<String, Passage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub paragraphs: Vec<String>,
    pub choices: Vec<GameChoice>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameChoice {
    pub label: String,
    /// Passage id, or `"END"`.
    pub target: Target,
    pub kind: DecisionKind,
    /// Closing text shown when the choice ends the story.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epilogue: Option<String>,
}

impl GameDocument {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("game serializes");
        text.push('\n');
        text
    }
}

pub fn export_game_json(tree: &BranchingPlotTree, narrations: &Narrations) -> Result<GameDocument, ExportError> {
    let mut passages = BTreeMap::new();
    for node in node_order(tree) {
        let narration = narration_for(narrations, &node.id)?;
        let choices = choices(tree, narration)
            .into_iter()
            .map(|(edge, label)| GameChoice {
                label: label.to_string(),
                target: edge.to_target.clone(),
                kind: edge.decision_kind,
                epilogue: edge.to_target.is_end().then(|| epilogue(edge)),
            })
            .collect();
        passages.insert(
            node.id.clone(),
            Passage {
                paragraphs: narration.paragraph_list().into_iter().map(str::to_string).collect(),
                choices,
            },
        );
    }
    Ok(GameDocument {
        version: GAME_FORMAT_VERSION,
        title: tree.title.clone(),
        char_name: tree.char_name.clone(),
        start: tree.root.clone(),
        passages,
    })
}

/// Clicks through every choice from the start passage.
pub fn game_playthroughs(game: &GameDocument) -> Result<Playthroughs, ExportError> {
    fn walk(
        game: &GameDocument,
        id: &str,
        labels: &mut Vec<String>,
        on_path: &mut HashSet<String>,
        out: &mut Playthroughs,
    ) -> Result<(), ExportError> {
        if !on_path.insert(id.to_string()) {
            return Err(ExportError::Cycle(id.to_string()));
        }
        let passage = &game.passages[id];
        for choice in &passage.choices {
            labels.push(choice.label.clone());
            match &choice.target {
                Target::End => {
                    out.insert(labels.clone(), choice.epilogue.clone().unwrap_or_default());
                }
                Target::Node(next) => {
                    if !game.passages.contains_key(next) {
                        return Err(ExportError::DeadLink {
                            passage: id.to_string(),
                            target: next.clone(),
                        });
                    }
                    walk(game, next, labels, on_path, out)?;
                }
            }
            labels.pop();
        }
        on_path.remove(id);
        Ok(())
    }

    if !game.passages.contains_key(&game.start) {
        return Err(ExportError::MissingStart(game.start.clone()));
    }
    let mut out = Playthroughs::new();
    walk(game, &game.start, &mut Vec::new(), &mut HashSet::new(), &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::tests::narrated;
    use super::*;
    use serde_json::Value;

    #[test]
    fn wire_format() {
        let (tree, narrations) = narrated(1, 0);
        let game = export_game_json(&tree, &narrations).unwrap();
        let value: Value = serde_json::from_str(&game.to_json()).unwrap();
        assert_eq!(value["version"], 1);
        assert_eq!(value["start"], "node_1");
        let choices = value["passages"]["node_1"]["choices"].as_array().unwrap();
        assert_eq!(choices.len(), 2);
        assert_eq!(choices[0]["target"], "END");
        assert_eq!(choices[0]["kind"], "Original");
        assert_eq!(choices[1]["kind"], "Alternate");
        assert!(choices[1]["epilogue"].is_string());
        let back: GameDocument = serde_json::from_value(value).unwrap();
        assert_eq!(back, game);
    }

    #[test]
    fn dead_links_are_reported() {
        let (tree, narrations) = narrated(2, 0);
        let mut game = export_game_json(&tree, &narrations).unwrap();
        let first = game.passages.get_mut("node_1").unwrap();
        first.choices[0].target = Target::Node("nowhere".into());
        assert!(matches!(game_playthroughs(&game), Err(ExportError::DeadLink { .. })));
        game.start = "gone".into();
        assert_eq!(game_playthroughs(&game), Err(ExportError::MissingStart("gone".into())));
    }
}
