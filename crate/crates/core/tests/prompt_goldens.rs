//! Rendered prompts for the Iron Man fixture, compared against checked-in
//! goldens. Run with `UPDATE_GOLDENS=1` to rewrite them.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde_json::Value;
use whatif_core::llm_gateway::{
    Backend, CompletionRequest, Gateway, GatewayError, ModelSettings, ReplayBackend,
};
use whatif_core::narrator::{narrate_tree, Narrations};
use whatif_core::pipeline::{expand_tree, ExpandConfig, NoopObserver, Pipeline};
use whatif_core::prompt_kit::Stage;

struct Capture {
    inner: ReplayBackend,
    seen: Mutex<Vec<CompletionRequest>>,
}

impl Backend for Capture {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.seen.lock().unwrap().push(request.clone());
        self.inner.send(request)
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/ironman")
}

fn reference() -> Value {
    serde_json::from_str(&fs::read_to_string(fixtures().join("reference.json")).unwrap()).unwrap()
}

fn ironman_requests() -> Vec<CompletionRequest> {
    let capture = std::sync::Arc::new(Capture {
        inner: ReplayBackend::open(&fixtures().join("cassette.json")).unwrap(),
        seen: Mutex::new(Vec::new()),
    });
    let gateway = Gateway::new(capture.clone());
    let settings = ModelSettings::default();
    let plot = fs::read_to_string(fixtures().join("plot.txt")).unwrap();
    let tree = Pipeline::new(&gateway, &settings)
        .initialize_tree(&plot, "Tony Stark", "Iron Man", None)
        .unwrap();
    let tree = expand_tree(&gateway, &settings, tree, &ExpandConfig::default(), &NoopObserver).unwrap();
    let mut narrations = Narrations::new();
    narrate_tree(&gateway, &settings, &tree, &mut narrations, 1).unwrap();
    let seen = capture.seen.lock().unwrap().clone();
    seen
}

fn render(request: &CompletionRequest) -> String {
    format!("[system]\n{}\n\n[user]\n{}\n", request.system_text(), request.user_text())
}

fn check_golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/goldens").join(name);
    if std::env::var_os("UPDATE_GOLDENS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path)
        .unwrap_or_else(|_| panic!("missing golden {}; run with UPDATE_GOLDENS=1", path.display()));
    assert_eq!(actual, expected, "golden {name} differs");
}

#[test]
fn ironman_prompts_match_goldens() {
    let requests = ironman_requests();
    let reference = reference();
    let first = |stage: Stage, pick: &dyn Fn(&CompletionRequest) -> bool| {
        requests
            .iter()
            .find(|r| r.stage() == stage && pick(r))
            .unwrap_or_else(|| panic!("no {stage} request"))
    };
    let node_2 = &reference["tree"]["node_2"];
    let table_prompt = reference["meta_prompt"]["document"]["prompt"].as_str().unwrap();

    let plot_to_tree = first(Stage::PlotToTree, &|_| true);
    assert!(plot_to_tree
        .user_text()
        .contains("into a plot tree of at most 6 nodes with each node containing the state and goal of Tony Stark"));
    check_golden("plot_to_tree.txt", &render(plot_to_tree));

    let key_events = first(Stage::KeyEvents, &|_| true);
    assert!(key_events.user_text().contains("18. Stark adjusts to his new role as a publicly known superhero."));
    assert_eq!(key_events.temperature, 0.0);
    check_golden("key_events.txt", &render(key_events));

    let meta = first(Stage::MetaPrompt, &|r| r.user_text().contains("branches out at event 4 "));
    assert!(meta.user_text().contains(
        "if Tony Stark decides to build the missile as requested, planning to escape afterward instead of decides to build an armored suit instead of the missile"
    ));
    assert!(meta.user_text().contains("a list of 15 events"));
    assert!(meta.user_text().contains("the crisis \"Stane steals Stark's arc reactor, leaving him to die.\" (event 12)"));
    assert!(!meta.user_text().contains("inciting incident"));
    check_golden("meta_prompt.txt", &render(meta));

    let write = first(Stage::WriteStoryline, &|r| r.user_text().contains(table_prompt));
    assert!(write.user_text().starts_with("Original storyline:\n1. Tony Stark decides to go to Afghanistan"));
    check_golden("write_storyline.txt", &render(write));

    let decision = node_2["decision"].as_str().unwrap();
    let narrate = first(Stage::Narrate, &|r| r.user_text().contains(decision) && r.user_text().contains("Afghanistan"));
    check_golden("narrate.txt", &render(narrate));
}
