use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::Stage;

/// Node cap used when the caller leaves the plot-to-tree node count open.
pub const DEFAULT_MAX_NODES: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeCount {
    Exactly(u32),
    AtMost(u32),
}

/// Output schema for one model call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub stage: Stage,
    pub schema_document: Value,
}

fn base(stage: Stage) -> Value {
    let text = match stage {
        Stage::PlotToTree => include_str!("../../assets/schemas/plot_to_tree.json"),
        Stage::KeyEvents => include_str!("../../assets/schemas/key_events.json"),
        Stage::MetaPrompt => include_str!("../../assets/schemas/meta_prompt.json"),
        Stage::WriteStoryline => include_str!("../../assets/schemas/write_storyline.json"),
        Stage::Narrate => include_str!("../../assets/schemas/narrate.json"),
    };
    serde_json::from_str(text).expect("bundled schema is valid JSON")
}

fn fill_names(value: &mut Value, char_name: &str) {
    match value {
        Value::String(s) => {
            if s.contains("{char_name}") {
                *s = s.replace("{char_name}", char_name);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| fill_names(v, char_name)),
        Value::Object(map) => map.values_mut().for_each(|v| fill_names(v, char_name)),
        _ => {}
    }
}

impl SchemaSpec {
    /// Plot-to-tree: objects `node_1 ..= node_k`.
    pub fn plot_to_tree(char_name: &str, count: NodeCount) -> SchemaSpec {
        let mut doc = base(Stage::PlotToTree);
        let mut node = doc
            .as_object_mut()
            .and_then(|m| m.remove("$defs"))
            .and_then(|mut defs| defs.get_mut("node").map(Value::take))
            .expect("node definition");
        fill_names(&mut node, char_name);
        let (listed, required) = match count {
            NodeCount::Exactly(k) => (k, k),
            NodeCount::AtMost(k) => (k, 1),
        };
        let mut properties = Map::new();
        for i in 1..=listed.max(1) {
            properties.insert(format!("node_{i}"), node.clone());
        }
        doc["properties"] = Value::Object(properties);
        doc["required"] = (1..=required.max(1))
            .map(|i| Value::String(format!("node_{i}")))
            .collect();
        SchemaSpec {
            stage: Stage::PlotToTree,
            schema_document: doc,
        }
    }

    /// Key events over a storyline of `event_count` events.
    pub fn key_events(event_count: u32) -> SchemaSpec {
        let mut doc = base(Stage::KeyEvents);
        for key in ["inciting_incident", "crisis", "climax"] {
            doc["properties"][key]["properties"]["eventId"]["maximum"] = json!(event_count);
        }
        SchemaSpec {
            stage: Stage::KeyEvents,
            schema_document: doc,
        }
    }

    /// Meta-prompt; the two numbers are pinned to the values we computed.
    pub fn meta_prompt(branching_event: u32, new_story_length: u32) -> SchemaSpec {
        let mut doc = base(Stage::MetaPrompt);
        doc["properties"]["branching_event_number"]["const"] = json!(branching_event);
        doc["properties"]["new_story_length"]["const"] = json!(new_story_length);
        SchemaSpec {
            stage: Stage::MetaPrompt,
            schema_document: doc,
        }
    }

    /// New storyline with exactly `count` events keyed `"1" ..= "count"`.
    pub fn write_storyline(count: u32) -> SchemaSpec {
        let mut doc = base(Stage::WriteStoryline);
        let events = &mut doc["properties"]["events"];
        let mut properties = Map::new();
        for i in 1..=count {
            properties.insert(i.to_string(), json!({ "type": "string", "minLength": 1 }));
        }
        events["properties"] = Value::Object(properties);
        events["required"] = (1..=count).map(|i| Value::String(i.to_string())).collect();
        SchemaSpec {
            stage: Stage::WriteStoryline,
            schema_document: doc,
        }
    }

    pub fn narrate() -> SchemaSpec {
        SchemaSpec {
            stage: Stage::Narrate,
            schema_document: base(Stage::Narrate),
        }
    }

    /// Pretty JSON for the `{JSON_SCHEMA}` placeholder.
    pub fn prompt_text(&self) -> String {
        serde_json::to_string_pretty(&self.schema_document).expect("schema serializes")
    }

    /// Number of required top-level (or `events`) entries, used by
    /// backends that synthesize documents.
    pub fn required_count(&self) -> usize {
        let doc = match self.stage {
            Stage::WriteStoryline => &self.schema_document["properties"]["events"],
            _ => &self.schema_document,
        };
        doc["required"].as_array().map_or(0, Vec::len)
    }

    /// Number of listed top-level (or `events`) properties.
    pub fn listed_count(&self) -> usize {
        let doc = match self.stage {
            Stage::WriteStoryline => &self.schema_document["properties"]["events"],
            _ => &self.schema_document,
        };
        doc["properties"].as_object().map_or(0, Map::len)
    }
}
