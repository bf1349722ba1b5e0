//! Rebuilds `fixtures/ironman/cassette.json`.
//!
//! The cassette is assembled, not captured from a live model: requests whose
//! answers are known from `reference.json` (the six-node Iron Man tree, its
//! key events, the node_2 meta-prompt, alternate storyline and narration) get
//! those answers, and every other request is answered by the synthetic
//! backend. The run then replays the fresh cassette to check that it is
//! complete.
//!
//! ```text
//! cargo run -p whatif-core --example record_ironman
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use whatif_core::llm_gateway::{
    Backend, CompletionRequest, FnBackend, Gateway, ModelSettings, RecordingBackend, ReplayBackend,
    SyntheticBackend,
};
use whatif_core::narrator::{narrate_tree, Narrations};
use whatif_core::pipeline::{expand_tree, ExpandConfig, NoopObserver, Pipeline};
use whatif_core::prompt_kit::Stage;
use whatif_core::BranchingPlotTree;

const SYNTHETIC_SEED: u64 = 1;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/ironman")
}

fn strings(value: &Value) -> Vec<&str> {
    value.as_array().into_iter().flatten().filter_map(Value::as_str).collect()
}

/// The reference answer for `request`, if there is one.
fn reference_answer(reference: &Value, plot: &str, request: &CompletionRequest) -> Option<Value> {
    let user = request.user_text();
    let storyline = strings(&reference["storyline"]);
    let original: Vec<&str> = (1..=6)
        .flat_map(|i| strings(&reference["tree"][format!("node_{i}")]["edgeEvents"]))
        .collect();
    let mentions_all = |events: &[&str]| events.iter().all(|e| user.contains(e));
    let alternate = &storyline[3..];
    let node_2 = &reference["tree"]["node_2"];
    match request.stage() {
        Stage::PlotToTree if mentions_all(alternate) => Some(reference["subtree"].clone()),
        Stage::PlotToTree if user.starts_with(plot.trim()) => Some(reference["tree"].clone()),
        Stage::KeyEvents if mentions_all(&original) => Some(reference["key_events"].clone()),
        Stage::MetaPrompt
            if mentions_all(&original)
                && request.schema.schema_document["properties"]["branching_event_number"]["const"] == json!(4) =>
        {
            Some(reference["meta_prompt"]["document"].clone())
        }
        Stage::WriteStoryline => {
            let prompt = reference["meta_prompt"]["document"]["prompt"].as_str()?;
            user.contains(prompt).then(|| {
                let events: serde_json::Map<String, Value> = alternate
                    .iter()
                    .enumerate()
                    .map(|(i, e)| ((i + 1).to_string(), json!(e)))
                    .collect();
                json!({ "events": events })
            })
        }
        Stage::Narrate => {
            let decision = node_2["decision"].as_str()?;
            (user.contains(decision) && user.contains(original[1]))
                .then(|| reference["narration"]["document"].clone())
        }
        _ => None,
    }
}

fn generate(gateway: &Gateway, plot: &str, char_name: &str, title: &str) -> (BranchingPlotTree, Narrations) {
    let settings = ModelSettings::default();
    let tree = Pipeline::new(gateway, &settings)
        .initialize_tree(plot, char_name, title, None)
        .expect("initialize");
    let tree = expand_tree(gateway, &settings, tree, &ExpandConfig::default(), &NoopObserver).expect("expand");
    let mut narrations = Narrations::new();
    narrate_tree(gateway, &settings, &tree, &mut narrations, 1).expect("narrate");
    (tree, narrations)
}

fn main() {
    let dir = fixture_dir();
    let plot = fs::read_to_string(dir.join("plot.txt")).expect("plot.txt");
    let reference: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("reference.json")).expect("reference.json"))
            .expect("reference.json parses");
    let char_name = reference["char_name"].as_str().expect("char_name").to_string();
    let title = reference["title"].as_str().expect("title").to_string();
    let cassette_path = dir.join("cassette.json");
    if cassette_path.exists() {
        fs::remove_file(&cassette_path).expect("remove old cassette");
    }

    let synthetic = SyntheticBackend::new(SYNTHETIC_SEED);
    let overlay_plot = plot.clone();
    let overlay = FnBackend::new(move |request| match reference_answer(&reference, &overlay_plot, request) {
        Some(document) => Ok(document.to_string()),
        None => synthetic.send(request),
    });
    let recorder = RecordingBackend::open(overlay, cassette_path.clone()).expect("open cassette");
    let recorded = generate(&Gateway::new(recorder), &plot, &char_name, &title);

    let replay = Gateway::new(ReplayBackend::open(&cassette_path).expect("reopen cassette"));
    let replayed = generate(&replay, &plot, &char_name, &title);
    assert_eq!(recorded, replayed, "replay differs from the recording");
    println!(
        "wrote {} ({} nodes, {} endings, {} narrations)",
        cassette_path.display(),
        recorded.0.nodes.len(),
        recorded.0.ending_count(),
        recorded.1.len()
    );
}
