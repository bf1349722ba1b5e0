use std::cell::RefCell;

use proptest::prelude::*;
use serde_json::json;

use super::*;
use crate::llm_gateway::{Gateway, ScriptedBackend, SyntheticBackend};
use crate::plot_tree::{DecisionKind, Target};

fn mock(seed: u64) -> Gateway {
    Gateway::new(SyntheticBackend::new(seed))
}

fn settings() -> ModelSettings {
    ModelSettings::default()
}

fn three_node_doc() -> Value {
    let node = |i: usize| {
        json!({
            "state": format!("Ada is at step {i}."),
            "goal": format!("To finish step {i}."),
            "decision": format!("Ada decides to take step {i}."),
            "edgeEvents": [format!("Ada decides to take step {i}."), "Something happens.", format!("Ada reaches step {}.", i + 1)],
            "alternate_decision": format!("Ada decides to skip step {i}."),
        })
    };
    json!({"node_1": node(1), "node_2": node(2), "node_3": node(3)})
}

fn initial(gateway: &Gateway, n: u32) -> BranchingPlotTree {
    let s = settings();
    Pipeline::new(gateway, &s)
        .initialize_tree(
            "Ada finds a map. She sails north. A storm wrecks her boat. She washes up on an island. \
             She meets the islanders. They ask her to stay.",
            "Ada",
            "The Map",
            Some(n),
        )
        .unwrap()
}

#[test]
fn initialize_from_fixed_document() {
    let gateway = Gateway::new(ScriptedBackend::new([three_node_doc().to_string()]));
    let s = settings();
    let tree = Pipeline::new(&gateway, &s)
        .initialize_tree("A plot.", "Ada", "T", Some(3))
        .unwrap();
    assert_eq!(tree.nodes.len(), 3);
    assert_eq!(tree.edges.len(), 3);
    assert!(tree.edges.iter().all(|e| e.decision_kind == DecisionKind::Original));
    let path = tree.storyline_through(&tree.root).unwrap();
    assert_eq!(tree.storyline_events(&path).unwrap().len(), 9);
    assert!(tree.validate(false).iter().all(|v| !v.is_error()));
}

#[test]
fn empty_plot_is_rejected() {
    let gateway = mock(0);
    let s = settings();
    let p = Pipeline::new(&gateway, &s);
    assert_eq!(p.initialize_tree("  \n", "Ada", "T", None), Err(PipelineError::EmptyPlot));
}

#[test]
fn open_node_count_caps_at_six() {
    let gateway = mock(3);
    let s = settings();
    let plot = (1..=40).map(|i| format!("Event {i} happens.")).collect::<Vec<_>>().join(" ");
    let tree = Pipeline::new(&gateway, &s).initialize_tree(&plot, "Ada", "T", None).unwrap();
    assert!((1..=6).contains(&tree.n), "{}", tree.n);
}

fn key_doc(a: u32, b: u32, c: u32) -> String {
    json!({
        "inciting_incident": {"eventId": a, "event": "x"},
        "crisis": {"eventId": b, "event": "y"},
        "climax": {"eventId": c, "event": "z"},
    })
    .to_string()
}

fn events(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("Event {i}.")).collect()
}

#[test]
fn key_events_need_three_events() {
    let gateway = mock(0);
    let s = settings();
    assert_eq!(
        Pipeline::new(&gateway, &s).extract_key_events(&events(2)),
        Err(PipelineError::TooFewEvents { found: 2 })
    );
}

#[test]
fn key_event_ordering_gets_one_retry() {
    let s = settings();
    let backend = ScriptedBackend::new([key_doc(5, 2, 9), key_doc(5, 2, 9)]);
    let gateway = Gateway::new(backend.clone());
    assert_eq!(
        Pipeline::new(&gateway, &s).extract_key_events(&events(10)),
        Err(PipelineError::OrderingViolation(5, 2, 9))
    );
    assert_eq!(backend.sends(), 2);
    let retry = &backend.requests()[1];
    assert!(retry.messages.last().unwrap().content.contains("inciting_incident < crisis < climax"));

    let gateway = Gateway::new(ScriptedBackend::new([key_doc(5, 2, 9), key_doc(2, 5, 9)]));
    let ke = Pipeline::new(&gateway, &s).extract_key_events(&events(10)).unwrap();
    assert_eq!(ke.crisis.event_id, 5);
}

#[test]
fn extraction_runs_at_temperature_zero() {
    let s = settings();
    let backend = ScriptedBackend::new([key_doc(1, 2, 3)]);
    let gateway = Gateway::new(backend.clone());
    Pipeline::new(&gateway, &s).extract_key_events(&events(3)).unwrap();
    assert_eq!(backend.requests()[0].temperature, 0.0);
}

fn point(kind: KeyEventKind, id: u32) -> PlotPoint {
    PlotPoint {
        kind,
        event_id: id,
        event: format!("e{id}"),
    }
}

fn key_events(a: u32, b: u32, c: u32) -> KeyEvents {
    KeyEvents {
        inciting_incident: point(KeyEventKind::IncitingIncident, a),
        crisis: point(KeyEventKind::Crisis, b),
        climax: point(KeyEventKind::Climax, c),
    }
}

#[test]
fn filter_drops_past_events() {
    let ke = key_events(2, 12, 14);
    let kept: Vec<_> = filter_key_events(&ke, 4).into_iter().map(|p| p.kind).collect();
    assert_eq!(kept, [KeyEventKind::Crisis, KeyEventKind::Climax]);
    assert_eq!(filter_key_events(&ke, 1).len(), 3);
    assert!(filter_key_events(&ke, 15).is_empty());
}

proptest! {
    #[test]
    fn filter_matches_brute_force(a in 1u32..30, b in 1u32..30, c in 1u32..30, cut in 1u32..32) {
        let ke = key_events(a, b, c);
        let mut expected = Vec::new();
        for (kind, id) in [(KeyEventKind::IncitingIncident, a), (KeyEventKind::Crisis, b), (KeyEventKind::Climax, c)] {
            if id >= cut {
                expected.push(point(kind, id));
            }
        }
        prop_assert_eq!(filter_key_events(&ke, cut), expected);
    }
}

#[test]
fn plot_point_descriptions() {
    assert_eq!(describe_plot_points(&[]), "the remaining events of the original storyline");
    let two = describe_plot_points(&[point(KeyEventKind::Crisis, 12), point(KeyEventKind::Climax, 14)]);
    assert_eq!(two, "the crisis \"e12\" (event 12) and the climax \"e14\" (event 14)");
}

#[test]
fn prompt_problem_detection() {
    let ad = "Ada decides to stay home.";
    let good = "Write it.\n1. a?\n2. b?\n3. c?\n4. d?\n5. e?\nStart with Ada deciding to stay home.";
    assert!(meta_prompt_problems(good, ad, "Ada").is_empty());
    let four = "1. a?\n2. b?\n3. c?\n4. d?\nstay home";
    assert_eq!(meta_prompt_problems(four, ad, "Ada").len(), 1);
    let silent = "1. a?\n2. b?\n3. c?\n4. d?\n5. e?";
    assert_eq!(meta_prompt_problems(silent, ad, "Ada").len(), 1);
}

#[test]
fn meta_prompt_lengths_follow_formula() {
    let gateway = mock(1);
    let s = settings();
    let p = Pipeline::new(&gateway, &s);
    for n in 1..=4 {
        let tree = initial(&gateway, n);
        let path = tree.storyline_through(&tree.root).unwrap();
        for id in &path.node_ids {
            let mp = p.generate_meta_prompt(&tree, &path, id, &[]).unwrap();
            let t = tree.nodes[id].depth;
            assert_eq!(mp.new_story_length, new_story_length(n, t).unwrap());
            assert_eq!(mp.branching_event, (t - 1) * 3 + 1);
            assert!(meta_prompt_problems(&mp.prompt_text, &mp.alternate_decision, "Ada").is_empty());
        }
    }
}

#[test]
fn meta_prompt_preconditions() {
    let gateway = mock(1);
    let s = settings();
    let p = Pipeline::new(&gateway, &s);
    let mut tree = initial(&gateway, 2);
    let path = tree.storyline_through(&tree.root).unwrap();
    tree.nodes.get_mut("node_2").unwrap().alternate_decision.clear();
    assert_eq!(
        p.generate_meta_prompt(&tree, &path, "node_2", &[]),
        Err(PipelineError::MissingAlternate("node_2".into()))
    );
    let short = StorylinePath {
        node_ids: vec!["node_1".into()],
        choices: vec![DecisionKind::Original],
    };
    assert_eq!(
        p.generate_meta_prompt(&tree, &short, "node_2", &[]),
        Err(PipelineError::NotOnPath("node_2".into()))
    );
}

#[test]
fn meta_prompt_without_questions_fails_after_retry() {
    let s = settings();
    let tree = initial(&mock(1), 2);
    let path = tree.storyline_through(&tree.root).unwrap();
    let doc = json!({
        "branching_event_number": 4,
        "original_decision": "x",
        "alternate_decision": "y",
        "new_story_length": 3,
        "major_plot_points": [],
        "prompt": "Write something."
    })
    .to_string();
    let backend = ScriptedBackend::new([doc.clone(), doc]);
    let gateway = Gateway::new(backend.clone());
    let err = Pipeline::new(&gateway, &s)
        .generate_meta_prompt(&tree, &path, "node_2", &[])
        .unwrap_err();
    assert!(matches!(err, PipelineError::InvariantViolation(_)), "{err:?}");
    assert_eq!(backend.sends(), 2);
}

fn meta(length: u32, ad: &str) -> MetaPrompt {
    MetaPrompt {
        node_id: "node_2".into(),
        branching_node: 2,
        branching_event: 4,
        original_decision: "Ada decides to go.".into(),
        alternate_decision: ad.into(),
        new_story_length: length,
        major_plot_points: vec![],
        prompt_text: format!("Output {length} events starting with: {ad}"),
    }
}

fn storyline_doc(events: &[String]) -> String {
    let map: serde_json::Map<String, Value> = events
        .iter()
        .enumerate()
        .map(|(i, e)| ((i + 1).to_string(), Value::String(e.clone())))
        .collect();
    json!({ "events": map }).to_string()
}

#[test]
fn short_storyline_is_a_count_mismatch() {
    let s = settings();
    let mut fourteen = events(14);
    fourteen[0] = "Ada decides to stay.".into();
    let doc = storyline_doc(&fourteen);
    let gateway = Gateway::new(ScriptedBackend::new([doc.clone(), doc.clone(), doc]));
    assert_eq!(
        Pipeline::new(&gateway, &s).write_alternate_storyline(&events(18), &meta(15, "Ada decides to stay.")),
        Err(PipelineError::CountMismatch { expected: 15, got: 14 })
    );
}

#[test]
fn storyline_must_open_with_the_alternate_decision() {
    let s = settings();
    let wrong = storyline_doc(&events(3));
    let mut right_events = events(3);
    right_events[0] = "Ada  decides to \u{201C}stay\u{201D}.".into();
    let right = storyline_doc(&right_events);

    let gateway = Gateway::new(ScriptedBackend::new([wrong.clone(), right]));
    let out = Pipeline::new(&gateway, &s)
        .write_alternate_storyline(&events(3), &meta(3, "Ada decides to \"stay\"."))
        .unwrap();
    assert_eq!(out.len(), 3);

    let gateway = Gateway::new(ScriptedBackend::new([wrong.clone(), wrong]));
    assert!(matches!(
        Pipeline::new(&gateway, &s).write_alternate_storyline(&events(3), &meta(3, "Ada decides to stay.")),
        Err(PipelineError::InvariantViolation(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn storyline_length_matches_meta_prompt(units in 1u32..8, seed in 0u64..1000) {
        let s = settings();
        let gateway = mock(seed);
        let ad = "Ada decides to stay.";
        let out = Pipeline::new(&gateway, &s)
            .write_alternate_storyline(&events(6), &meta(units * 3, ad))
            .unwrap();
        prop_assert_eq!(out.len() as u32, units * 3);
        prop_assert_eq!(out[0].as_str(), ad);
    }

    #[test]
    fn subtree_round_trips_event_count(units in 1usize..7, seed in 0u64..1000) {
        let s = settings();
        let gateway = mock(seed);
        let mut input = events(units * 3);
        for (i, e) in input.iter_mut().enumerate() {
            if i % 3 == 0 {
                *e = format!("Ada decides to do thing {i}.");
            }
        }
        let sub = Pipeline::new(&gateway, &s).events_to_subtree(&input, "Ada").unwrap();
        prop_assert_eq!(sub.nodes.len(), units);
        let path = sub.storyline_through(&sub.root).unwrap();
        prop_assert_eq!(sub.storyline_events(&path).unwrap(), input);
    }
}

#[test]
fn subtree_sizes() {
    let s = settings();
    let gateway = mock(0);
    let p = Pipeline::new(&gateway, &s);
    assert_eq!(p.events_to_subtree(&events(3), "Ada").unwrap().nodes.len(), 1);
    assert!(matches!(p.events_to_subtree(&events(4), "Ada"), Err(PipelineError::InvalidInput(_))));

    let gateway = Gateway::new(ScriptedBackend::new(vec![three_node_doc().to_string(); 3]));
    assert_eq!(
        Pipeline::new(&gateway, &s).events_to_subtree(&events(6), "Ada"),
        Err(PipelineError::NodeCountMismatch { expected: 2, got: 3 })
    );
}

/// Records everything the expansion reports.
#[derive(Default)]
struct Recorder {
    merges: RefCell<Vec<(BranchingPlotTree, Progress)>>,
    prompts: RefCell<Vec<MetaPrompt>>,
    key_event_paths: RefCell<Vec<StorylinePath>>,
}

impl Observer for Recorder {
    fn key_events(&self, storyline: &StorylinePath, _key_events: &KeyEvents) {
        self.key_event_paths.borrow_mut().push(storyline.clone());
    }
    fn meta_prompt(&self, meta_prompt: &MetaPrompt) {
        self.prompts.borrow_mut().push(meta_prompt.clone());
    }
    fn merged(&self, before: &BranchingPlotTree, after: &BranchingPlotTree, progress: &Progress) {
        assert_eq!(after.frozen_digest(before), before.frozen_digest(before));
        self.merges.borrow_mut().push((before.clone(), progress.clone()));
    }
}

fn expand(n: u32, seed: u64, config: &ExpandConfig, observer: &dyn Observer) -> Result<BranchingPlotTree, PipelineError> {
    let gateway = mock(seed);
    let tree = initial(&gateway, n);
    expand_tree(&gateway, &settings(), tree, config, observer)
}

#[test]
fn full_expansion_has_two_to_the_n_endings() {
    for n in 1..=4u32 {
        let recorder = Recorder::default();
        let tree = expand(n, 9, &ExpandConfig::default(), &recorder).unwrap();
        let paths = tree.enumerate_storylines();
        assert_eq!(paths.len(), 1 << n);
        assert!(paths.iter().all(|p| p.len() == n as usize));
        assert_eq!(recorder.merges.borrow().len(), (1 << n) - 1);
        assert!(tree.validate(true).iter().all(|v| !v.is_error()));
        for prompt in recorder.prompts.borrow().iter() {
            assert!(prompt.major_plot_points.iter().all(|p| p.event_id >= prompt.branching_event));
        }
        // one extraction for the root storyline, one per branch with grafted nodes
        assert_eq!(recorder.key_event_paths.borrow().len(), 1 + (1 << n) - 1 - (1 << (n - 1)));
    }
}

#[test]
fn earlier_snapshots_survive_to_the_end() {
    let recorder = Recorder::default();
    let tree = expand(3, 4, &ExpandConfig::default(), &recorder).unwrap();
    for (before, _) in recorder.merges.borrow().iter() {
        assert_eq!(tree.frozen_digest(before), before.frozen_digest(before));
    }
}

#[test]
fn parallel_matches_sequential() {
    let sequential = expand(3, 5, &ExpandConfig::default(), &NoopObserver).unwrap();
    let parallel = expand(
        3,
        5,
        &ExpandConfig {
            parallel: 4,
            ..Default::default()
        },
        &NoopObserver,
    )
    .unwrap();
    assert_eq!(sequential.to_json(), parallel.to_json());
}

#[test]
fn budget_stops_the_run_and_leaves_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    let config = ExpandConfig {
        budget: Some(6),
        checkpoint: Some(path.clone()),
        ..Default::default()
    };
    let err = expand(3, 2, &config, &NoopObserver).unwrap_err();
    assert_eq!(err, PipelineError::Gateway(GatewayError::BudgetExceeded { limit: 6 }));
    let checkpoint = Checkpoint::load(&path).unwrap();
    assert!(!checkpoint.frontier.is_empty());
}

#[test]
fn default_budget_covers_a_full_run() {
    for n in 1..=5u32 {
        let gateway = mock(11);
        let tree = initial(&gateway, n);
        let budget = Budget::new(&gateway, usize::MAX);
        expand_tree(&budget, &settings(), tree, &ExpandConfig::default(), &NoopObserver).unwrap();
        assert!(budget.used() < ExpandConfig::default_budget(n), "n={n} used {}", budget.used());
    }
}

#[test]
fn resume_reaches_the_same_tree() {
    let uninterrupted = expand(3, 8, &ExpandConfig::default(), &NoopObserver).unwrap();
    for stop in [0, 1, 3, 6] {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        let config = ExpandConfig {
            checkpoint: Some(path.clone()),
            stop_after: Some(stop),
            ..Default::default()
        };
        assert_eq!(
            expand(3, 8, &config, &NoopObserver).unwrap_err(),
            PipelineError::Stopped { completed: stop }
        );
        let checkpoint = Checkpoint::load(&path).unwrap();
        assert_eq!(checkpoint.completed, stop);
        let resumed = resume(
            &mock(8),
            &settings(),
            checkpoint,
            &ExpandConfig::default(),
            &NoopObserver,
        )
        .unwrap();
        assert_eq!(resumed.to_json(), uninterrupted.to_json(), "stop after {stop}");
    }
}

#[test]
fn resume_mid_group_requeues_missing_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    let config = ExpandConfig {
        checkpoint: Some(path.clone()),
        stop_after: Some(2),
        ..Default::default()
    };
    expand(3, 8, &config, &NoopObserver).unwrap_err();
    let mut checkpoint = Checkpoint::load(&path).unwrap();
    checkpoint.frontier.truncate(checkpoint.frontier.len() - 1);
    let resumed = resume(&mock(8), &settings(), checkpoint, &ExpandConfig::default(), &NoopObserver).unwrap();
    let uninterrupted = expand(3, 8, &ExpandConfig::default(), &NoopObserver).unwrap();
    assert_eq!(resumed.to_json(), uninterrupted.to_json());
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    std::fs::write(&path, "").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(PipelineError::CorruptCheckpoint(_))));

    let config = ExpandConfig {
        checkpoint: Some(path.clone()),
        stop_after: Some(1),
        ..Default::default()
    };
    expand(2, 1, &config, &NoopObserver).unwrap_err();
    let checkpoint = Checkpoint::load(&path).unwrap();
    let hotter = ModelSettings {
        generation_temperature: 1.0,
        ..settings()
    };
    assert!(matches!(
        resume(&mock(1), &hotter, checkpoint, &ExpandConfig::default(), &NoopObserver),
        Err(PipelineError::ConfigDigestMismatch { .. })
    ));
}

#[test]
fn leaves_end_the_story() {
    let tree = expand(2, 3, &ExpandConfig::default(), &NoopObserver).unwrap();
    for node in tree.nodes.values() {
        for kind in DecisionKind::BOTH {
            let edge = tree.edge(&node.id, kind).unwrap();
            assert_eq!(edge.to_target == Target::End, node.depth == 2);
            assert_eq!(edge.events.len(), 3);
        }
    }
}
