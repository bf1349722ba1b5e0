//! Offline backend that reads the rendered prompts and writes a small,
//! deterministic story in reply. The prose is generic; what matters is that
//! every reply has the shape the pipeline expects (counts, restated
//! decisions, ordered key events), so full expansions run without a model.

use std::sync::OnceLock;

use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use regex::Regex;
use serde_json::{json, Map, Value};

use super::{fingerprint, Backend, CompletionRequest, GatewayError};
use crate::prompt_kit::Stage;
use crate::text;

const VERBS: &[&str] = &[
    "confront",
    "trust",
    "investigate",
    "abandon",
    "protect",
    "expose",
    "negotiate with",
    "sabotage",
    "follow",
    "hide from",
    "warn",
    "seek help from",
    "challenge",
    "rebuild",
    "escape from",
    "ally with",
    "question",
    "spy on",
    "rescue",
    "bargain with",
];

const OBJECTS: &[&str] = &[
    "the old mentor",
    "the rival faction",
    "the city council",
    "a mysterious stranger",
    "the hidden laboratory",
    "the family estate",
    "the missing heir",
    "the secret archive",
    "the border patrol",
    "the corrupt official",
    "the abandoned fortress",
    "a trusted friend",
    "the underground network",
    "the stolen prototype",
    "the coastal village",
];

const STATES: &[&str] = &[
    "is cornered and short on allies",
    "is wounded but determined",
    "has just uncovered a dangerous secret",
    "is torn between loyalty and ambition",
    "is hunted by powerful enemies",
    "has won a fragile victory",
    "is isolated after a betrayal",
    "is racing against a deadline",
];

const GOALS: &[&str] = &[
    "To keep {o} safe",
    "To uncover the truth about {o}",
    "To win the trust of {o}",
    "To stop {o} before it is too late",
    "To reach {o} unseen",
];

const CONSEQUENCES: &[&str] = &[
    "The choice sets off a chain of unexpected events.",
    "Word spreads quickly and old alliances shift.",
    "A new danger emerges from the shadows.",
    "The cost of the choice becomes clear.",
    "An unlikely helper steps forward.",
    "The plan works, but not as intended.",
];

/// Deterministic stand-in for a chat model; the reply depends only on the
/// seed and the request fingerprint.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticBackend {
    seed: u64,
}

impl SyntheticBackend {
    pub fn new(seed: u64) -> Self {
        SyntheticBackend { seed }
    }

    fn rng(&self, request: &CompletionRequest) -> StdRng {
        let fp = fingerprint(request);
        let salt = u64::from_str_radix(&fp[..16], 16).expect("hex fingerprint");
        StdRng::seed_from_u64(self.seed ^ salt)
    }
}

impl Backend for SyntheticBackend {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut rng = self.rng(request);
        let user = request.user_text();
        let doc = match request.stage() {
            Stage::PlotToTree => plot_to_tree(&mut rng, request, user),
            Stage::KeyEvents => key_events(&mut rng, user),
            Stage::MetaPrompt => meta_prompt(&mut rng, user),
            Stage::WriteStoryline => write_storyline(&mut rng, request, user),
            Stage::Narrate => narrate(request.system_text(), user),
        };
        Ok(doc.to_string())
    }
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("valid regex"))
}

fn capture(cell: &'static OnceLock<Regex>, pattern: &str, hay: &str) -> Option<String> {
    re(cell, pattern)
        .captures(hay)
        .and_then(|c| c.get(1))
        .map(|m| m.as_str().trim().to_string())
}

fn action(rng: &mut StdRng) -> String {
    format!(
        "{} {}",
        VERBS.choose(rng).expect("non-empty"),
        OBJECTS.choose(rng).expect("non-empty")
    )
}

fn decision(char_name: &str, action: &str) -> String {
    format!("{char_name} decides to {action}.")
}

fn state(rng: &mut StdRng, char_name: &str) -> String {
    format!("{char_name} {}.", STATES.choose(rng).expect("non-empty"))
}

fn goal(rng: &mut StdRng) -> String {
    let template = GOALS.choose(rng).expect("non-empty");
    format!("{}.", template.replace("{o}", OBJECTS.choose(rng).expect("non-empty")))
}

fn consequence(rng: &mut StdRng) -> String {
    CONSEQUENCES.choose(rng).expect("non-empty").to_string()
}

/// An action that differs from the one in `existing`.
fn other_action(rng: &mut StdRng, char_name: &str, existing: &str) -> String {
    let taken = text::decision_action(existing, char_name);
    loop {
        let a = action(rng);
        if !text::same(&a, &taken) {
            return a;
        }
    }
}

/// Drops a leading `"12. "` list marker.
fn strip_marker(line: &str) -> &str {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = re(&RE, r"^\s*\d+[.)]\s+");
    match re.find(line) {
        Some(m) => &line[m.end()..],
        None => line,
    }
}

fn sentences(plot: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = plot.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let s = current.trim().to_string();
            if !s.is_empty() {
                out.push(s);
            }
            current.clear();
        }
    }
    let s = current.trim().to_string();
    if !s.is_empty() {
        out.push(s);
    }
    out
}

fn plot_to_tree(rng: &mut StdRng, request: &CompletionRequest, user: &str) -> Value {
    static CHAR: OnceLock<Regex> = OnceLock::new();
    let plot = user.split("\nSummarize the plot above").next().unwrap_or("");
    let char_name = capture(&CHAR, r"the state and goal of (.+?), and the key decision", user)
        .unwrap_or_else(|| "The hero".to_string());
    let lines: Vec<String> = plot
        .lines()
        .map(|l| strip_marker(l).trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let required = request.schema.required_count().max(1);
    let listed = request.schema.listed_count().max(required);
    let count = if required == listed {
        required
    } else {
        (lines.len() / 3).clamp(required, listed)
    };

    let groups: Vec<Vec<String>> = if lines.len() == count * 3 {
        lines.chunks(3).map(<[String]>::to_vec).collect()
    } else {
        let pool = sentences(plot);
        let per = pool.len().div_ceil(count.max(1)).max(1);
        (0..count)
            .map(|i| {
                let part: Vec<&String> = pool.iter().skip(i * per).take(per).collect();
                let kd = decision(&char_name, &action(rng));
                let middle = part.first().map_or_else(|| consequence(rng), |s| s.to_string());
                let last = if part.len() >= 2 {
                    part[part.len() - 1].to_string()
                } else {
                    state(rng, &char_name)
                };
                vec![kd, middle, last]
            })
            .collect()
    };

    let prefix = format!("{char_name} decides");
    let mut doc = Map::new();
    for (i, events) in groups.into_iter().enumerate() {
        let kd = if text::normalize(&events[0]).starts_with(&prefix) {
            events[0].clone()
        } else {
            decision(&char_name, &action(rng))
        };
        let ad = decision(&char_name, &other_action(rng, &char_name, &kd));
        doc.insert(
            format!("node_{}", i + 1),
            json!({
                "state": state(rng, &char_name),
                "goal": goal(rng),
                "decision": kd,
                "edgeEvents": events,
                "alternate_decision": ad,
            }),
        );
    }
    Value::Object(doc)
}

fn numbered_lines(text: &str) -> Vec<(u32, String)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = re(&RE, r"^\s*(\d+)\.\s+(.*)$");
    text.lines()
        .filter_map(|l| {
            let c = re.captures(l)?;
            Some((c[1].parse().ok()?, c[2].trim().to_string()))
        })
        .collect()
}

fn key_events(rng: &mut StdRng, user: &str) -> Value {
    let events = numbered_lines(user);
    let m = events.len().max(3) as u32;
    let a = rng.random_range(1..=(m / 3).max(1));
    let b = rng.random_range(a + 1..=(2 * m / 3).max(a + 1).min(m - 1));
    let c = rng.random_range(b + 1..=m);
    let text_of = |id: u32| {
        events
            .iter()
            .find(|(i, _)| *i == id)
            .map_or_else(|| format!("event {id}"), |(_, t)| t.clone())
    };
    json!({
        "inciting_incident": {"eventId": a, "event": text_of(a)},
        "crisis": {"eventId": b, "event": text_of(b)},
        "climax": {"eventId": c, "event": text_of(c)},
    })
}

fn meta_prompt(rng: &mut StdRng, user: &str) -> Value {
    static EVENT: OnceLock<Regex> = OnceLock::new();
    static CLAUSES: OnceLock<Regex> = OnceLock::new();
    static LENGTH: OnceLock<Regex> = OnceLock::new();
    static FIRST: OnceLock<Regex> = OnceLock::new();
    static MPP: OnceLock<Regex> = OnceLock::new();
    static CHAR: OnceLock<Regex> = OnceLock::new();
    let branching_event: u32 = capture(&EVENT, r"branches out at event (\d+) if", user)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let length: u32 = capture(&LENGTH, r"as a list of (\d+) events", user)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let alternate = capture(&FIRST, r"events that has (.+) as the first event\.", user).unwrap_or_default();
    let char_name = capture(&CHAR, r"b\. How would (.+?) make key decisions", user)
        .unwrap_or_else(|| "The hero".to_string());
    let (alt_clause, orig_clause) = re(&CLAUSES, r"(?s)branches out at event \d+ if (.+?) instead of (.+?)\.\n2\.")
        .captures(user)
        .map(|c| {
            let alt = c[1].trim();
            let alt = alt.strip_prefix(&format!("{char_name} ")).unwrap_or(alt);
            (alt.to_string(), c[2].trim().to_string())
        })
        .unwrap_or_default();
    let mpp = capture(&MPP, r"change or replace (.+?)\?\n", user)
        .unwrap_or_else(|| "the remaining events".to_string());
    let twist = consequence(rng);
    let prompt = format!(
        "Using the original storyline as a reference, write an alternate storyline that branches out at event {branching_event} if {char_name} {alt_clause} instead of {orig_clause}.\n\
         Explore these guiding questions:\n\
         1. How would the decision to {alt_action} change or replace {mpp}?\n\
         2. Who stands to gain or lose when {char_name} {alt_clause}?\n\
         3. What new obstacle forces {char_name} to adapt the plan? {twist}\n\
         4. Which events of the original storyline still happen, and how do they feel different now?\n\
         5. How does {char_name} make a key decision that resolves the new conflict?\n\
         An ideal alternate storyline keeps the unaffected events, raises the tension toward a new climax and resolves the consequences of the choice.\n\
         Output the alternate storyline as a list of {length} events starting with: {alternate}",
        alt_action = alt_clause.strip_prefix("decides to ").unwrap_or(&alt_clause),
    );
    json!({
        "branching_event_number": branching_event,
        "original_decision": format!("{char_name} {orig_clause}."),
        "alternate_decision": alternate,
        "new_story_length": length,
        "major_plot_points": [],
        "prompt": prompt,
    })
}

fn write_storyline(rng: &mut StdRng, request: &CompletionRequest, user: &str) -> Value {
    static FIRST: OnceLock<Regex> = OnceLock::new();
    static CHAR: OnceLock<Regex> = OnceLock::new();
    let count = request.schema.required_count().max(1);
    let first = re(&FIRST, r"(?m)starting with: (.+)$")
        .captures_iter(user)
        .last()
        .map(|c| c[1].trim().to_string());
    let char_name = first
        .as_deref()
        .and_then(|f| capture(&CHAR, r"^(.+?) decides\b", f))
        .unwrap_or_else(|| "The hero".to_string());
    let first = first.unwrap_or_else(|| decision(&char_name, &action(rng)));
    let mut events = Map::new();
    for i in 0..count {
        let event = match i % 3 {
            _ if i == 0 => first.clone(),
            0 => decision(&char_name, &action(rng)),
            1 => consequence(rng),
            _ => state(rng, &char_name),
        };
        events.insert((i + 1).to_string(), Value::String(event));
    }
    json!({ "events": events })
}

/// Rough second-person rewrite of a third-person event.
fn second_person(event: &str, char_name: &str) -> String {
    let Some(rest) = event.strip_prefix(char_name) else {
        return event.replace(char_name, "you");
    };
    let rest = rest.trim_start();
    let (verb, tail) = rest.split_once(' ').unwrap_or((rest, ""));
    let verb = match verb {
        "is" => "are".to_string(),
        "has" => "have".to_string(),
        "was" => "were".to_string(),
        v if v.ends_with("ies") => format!("{}y", &v[..v.len() - 3]),
        v if v.ends_with("es") && (v.ends_with("shes") || v.ends_with("ches")) => v[..v.len() - 2].to_string(),
        v if v.ends_with('s') && !v.ends_with("ss") => v[..v.len() - 1].to_string(),
        v => v.to_string(),
    };
    format!("You {verb} {tail}").trim_end().replace(char_name, "you")
}

fn button(decision: &str, char_name: &str) -> String {
    let action = text::decision_action(decision, char_name);
    let words: Vec<&str> = action.split_whitespace().take(6).collect();
    let label = words.join(" ");
    let mut chars = label.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => "Continue".to_string(),
    }
}

fn narrate(system: &str, user: &str) -> Value {
    static CHAR: OnceLock<Regex> = OnceLock::new();
    let char_name =
        capture(&CHAR, r"in which the player is (.+?)\.\n", system).unwrap_or_else(|| "The hero".to_string());
    let payload: Value = serde_json::from_str(user).unwrap_or(Value::Null);
    let strings = |v: &Value| -> Vec<String> {
        v.as_array()
            .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
            .unwrap_or_default()
    };
    let events = strings(&payload["events"]);
    let decisions = strings(&payload["decisions"]);
    let mut paragraphs: Vec<String> = events.iter().map(|e| second_person(e, &char_name)).collect();
    let state = payload["state"].as_str().unwrap_or("");
    let goal = payload["goal"].as_str().unwrap_or("");
    let goal = goal.strip_prefix("To ").unwrap_or(goal);
    paragraphs.push(format!(
        "{} Now you need {}",
        second_person(state, &char_name),
        if goal.is_empty() { "to choose.".to_string() } else { format!("to {goal}") }
    ));
    let b1 = decisions.first().map_or_else(|| "Go on".to_string(), |d| button(d, &char_name));
    let mut b2 = decisions.get(1).map_or_else(|| "Turn back".to_string(), |d| button(d, &char_name));
    if text::same(&b1, &b2) {
        b2.push_str(" instead");
    }
    json!({
        "paragraphs": paragraphs.join("\n"),
        "button_text_1": b1,
        "button_text_2": b2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{Gateway, ModelSettings, StructuredCompleter};
    use crate::prompt_kit::{render, Bindings, NodeCount, SchemaSpec};

    fn complete(prompt_stage: Stage, bindings: Bindings, schema: SchemaSpec) -> Value {
        let prompt = render(prompt_stage, &bindings.with("JSON_SCHEMA", schema.prompt_text())).unwrap();
        let request = CompletionRequest::new(prompt, schema, &ModelSettings::default());
        Gateway::new(SyntheticBackend::new(7))
            .with_retry_limit(1)
            .complete_structured(&request)
            .unwrap()
            .document
    }

    #[test]
    fn plot_to_tree_is_schema_valid_for_free_text() {
        let doc = complete(
            Stage::PlotToTree,
            Bindings::new()
                .with("plot", "Ada finds a map. She sails north. A storm hits. She lands on an island.")
                .with("char_name", "Ada")
                .with("num_nodes", 3),
            SchemaSpec::plot_to_tree("Ada", NodeCount::Exactly(3)),
        );
        assert_eq!(doc.as_object().unwrap().len(), 3);
        assert!(doc["node_1"]["decision"].as_str().unwrap().starts_with("Ada decides to "));
        assert_eq!(doc["node_2"]["edgeEvents"][1], "A storm hits.");
    }

    #[test]
    fn plot_to_tree_groups_event_lists() {
        let events = ["Ada decides to run.", "b", "c", "Ada decides to hide.", "e", "f"];
        let doc = complete(
            Stage::PlotToTree,
            Bindings::new()
                .with("plot", events.join("\n"))
                .with("char_name", "Ada")
                .with("num_nodes", 2),
            SchemaSpec::plot_to_tree("Ada", NodeCount::Exactly(2)),
        );
        assert_eq!(doc["node_2"]["decision"], "Ada decides to hide.");
        assert_eq!(doc["node_2"]["edgeEvents"], json!(["Ada decides to hide.", "e", "f"]));
        assert_ne!(doc["node_2"]["alternate_decision"], doc["node_2"]["decision"]);
    }

    #[test]
    fn key_events_are_ordered() {
        for m in 3..=30usize {
            let events: Vec<String> = (1..=m).map(|i| format!("e{i}")).collect();
            let doc = complete(
                Stage::KeyEvents,
                Bindings::new().with("events", crate::prompt_kit::format_events(&events)),
                SchemaSpec::key_events(m as u32),
            );
            let id = |k: &str| doc[k]["eventId"].as_u64().unwrap();
            assert!(id("inciting_incident") < id("crisis") && id("crisis") < id("climax"), "{doc}");
            assert_eq!(doc["crisis"]["event"], format!("e{}", id("crisis")));
        }
    }

    #[test]
    fn storyline_starts_with_requested_decision() {
        let prompt = "Do it.\nOutput the alternate storyline as a list of 6 events starting with: Ada decides to stay home.";
        let doc = complete(
            Stage::WriteStoryline,
            Bindings::new().with("all_events", "1. x").with("prompt", prompt),
            SchemaSpec::write_storyline(6),
        );
        assert_eq!(doc["events"]["1"], "Ada decides to stay home.");
        assert!(doc["events"]["4"].as_str().unwrap().starts_with("Ada decides to "));
    }

    #[test]
    fn second_person_rewrites() {
        assert_eq!(second_person("Ada decides to go.", "Ada"), "You decide to go.");
        assert_eq!(second_person("Ada is trapped.", "Ada"), "You are trapped.");
        assert_eq!(second_person("Ada carries the box.", "Ada"), "You carry the box.");
        assert_eq!(second_person("A storm hits Ada.", "Ada"), "A storm hits you.");
    }
}
