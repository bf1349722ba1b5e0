use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use whatif_core::exporter::{export_game_json, export_ink};
use whatif_core::llm_gateway::{
    BackendConfig, Gateway, Mode, ModelSettings, DEFAULT_API_KEY_ENV, DEFAULT_MAX_CONCURRENT, DEFAULT_RETRY_LIMIT,
};
use whatif_core::narrator::{lint, narrate_tree, Narrations};
use whatif_core::pipeline::{self, Checkpoint, ExpandConfig, KeyEvents, MetaPrompt, Observer, Pipeline, Progress};
use whatif_core::plot_tree::{self, parse_choices, StorylinePath, TreeError};
use whatif_core::BranchingPlotTree;

use crate::config::Settings;
use crate::error::CliError;

pub const DEFAULT_OUT_DIR: &str = "whatif-out";
pub const TREE_FILE: &str = "tree.json";
pub const NARRATIONS_FILE: &str = "narrations.json";
pub const INK_FILE: &str = "story.ink";
pub const GAME_FILE: &str = "game.json";
pub const LOG_FILE: &str = "run.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// JSON-lines log of a run; also echoes branch progress to stderr.
struct RunLog {
    file: Mutex<File>,
    start: Instant,
}

impl RunLog {
    fn create(path: &Path) -> Result<RunLog, CliError> {
        let file = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(CliError::io(path))?;
        Ok(RunLog {
            file: Mutex::new(file),
            start: Instant::now(),
        })
    }

    fn record(&self, event: &str, fields: Value) {
        let mut line = json!({"event": event, "elapsed_ms": self.start.elapsed().as_millis() as u64});
        if let (Some(line), Value::Object(fields)) = (line.as_object_mut(), fields) {
            line.extend(fields);
        }
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        // Logging must never turn a good run into a failed one.
        let _ = writeln!(file, "{line}");
    }
}

impl Observer for RunLog {
    fn key_events(&self, storyline: &StorylinePath, key_events: &KeyEvents) {
        self.record(
            "key_events",
            json!({"storyline": storyline.node_ids, "key_events": key_events}),
        );
    }

    fn meta_prompt(&self, meta_prompt: &MetaPrompt) {
        self.record("meta_prompt", json!({"meta_prompt": meta_prompt}));
    }

    fn merged(&self, _before: &BranchingPlotTree, _after: &BranchingPlotTree, progress: &Progress) {
        eprintln!(
            "[{}/{}] branched at {} ({} attempt(s), {} ms)",
            progress.completed, progress.total, progress.node_id, progress.attempts, progress.elapsed_ms
        );
        self.record("branch", json!({"progress": progress}));
    }

    fn warning(&self, message: &str) {
        self.record("warning", json!({"message": message}));
    }
}

fn model_settings(s: &Settings) -> ModelSettings {
    let mut model = ModelSettings::default();
    if let Some(id) = &s.model {
        model.model_id = id.clone();
    }
    model
}

fn retry_limit(s: &Settings) -> u32 {
    s.retry_limit.unwrap_or(DEFAULT_RETRY_LIMIT)
}

fn gateway(s: &Settings) -> Result<Gateway, CliError> {
    let mut config = BackendConfig {
        mode: s.mode.unwrap_or(Mode::Mock),
        endpoint: s.endpoint.clone(),
        api_key_env: s.api_key_env.clone().unwrap_or_else(|| DEFAULT_API_KEY_ENV.to_string()),
        retry_limit: retry_limit(s),
        cassette: s.cassette.clone(),
        max_concurrent: s.parallel.unwrap_or(1).max(DEFAULT_MAX_CONCURRENT),
        mock_seed: s.seed.unwrap_or(0),
        ..BackendConfig::default()
    };
    if let Some(secs) = s.timeout_secs {
        config.request_timeout = Duration::from_secs(secs);
    }
    Ok(config.build()?)
}

fn expand_config(s: &Settings, checkpoint: PathBuf, stop_after: Option<usize>) -> ExpandConfig {
    ExpandConfig {
        budget: s.budget,
        parallel: s.parallel.unwrap_or(1),
        checkpoint: Some(checkpoint),
        retry_limit: retry_limit(s),
        stop_after,
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(CliError::io(path))
}

/// Runs `body`, logging its failure before handing the error back.
fn logged<T>(log: &RunLog, body: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
    body().inspect_err(|e| log.record("error", json!({"message": e.to_string(), "exit_code": e.exit_code()})))
}

fn read_plot(s: &Settings) -> Result<String, CliError> {
    match (&s.plot, &s.plot_file) {
        (Some(_), Some(_)) => Err(CliError::Usage("give either a plot file or --plot, not both".into())),
        (Some(text), None) => Ok(text.clone()),
        (None, Some(path)) => fs::read_to_string(path).map_err(CliError::io(path)),
        (None, None) => Err(CliError::Usage("a plot is required: pass a plot file or --plot".into())),
    }
}

pub fn generate(s: Settings, stop_after: Option<usize>) -> Result<(), CliError> {
    let plot = read_plot(&s)?;
    let char_name = s
        .char
        .clone()
        .filter(|c| !c.trim().is_empty())
        .ok_or_else(|| CliError::Usage("the main character is required: pass --char".into()))?;
    let title = s
        .title
        .clone()
        .or_else(|| {
            s.plot_file
                .as_ref()
                .and_then(|p| p.file_stem())
                .map(|stem| stem.to_string_lossy().into_owned())
        })
        .unwrap_or_else(|| "Untitled".to_string());
    let out_dir = s.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    fs::create_dir_all(&out_dir).map_err(CliError::io(&out_dir))?;
    let log = RunLog::create(&out_dir.join(LOG_FILE))?;
    let model = model_settings(&s);
    log.record(
        "start",
        json!({
            "command": "generate",
            "mode": s.mode.unwrap_or(Mode::Mock),
            "model": model.model_id,
            "char_name": char_name,
            "title": title,
            "nodes": s.nodes,
        }),
    );
    logged(&log, || {
        let gateway = gateway(&s)?;
        let tree = Pipeline::new(&gateway, &model).initialize_tree(&plot, &char_name, &title, s.nodes)?;
        log.record("initialized", json!({"n": tree.n, "root": tree.root}));
        let config = expand_config(&s, out_dir.join(CHECKPOINT_FILE), stop_after);
        let tree = pipeline::expand_tree(&gateway, &model, tree, &config, &log)?;
        finish(&gateway, &model, &s, &out_dir, &tree, Narrations::new(), &log)
    })
}

pub fn resume(checkpoint_path: &Path, s: Settings, stop_after: Option<usize>) -> Result<(), CliError> {
    let out_dir = match &s.out_dir {
        Some(dir) => dir.clone(),
        None => checkpoint_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&out_dir).map_err(CliError::io(&out_dir))?;
    let log = RunLog::create(&out_dir.join(LOG_FILE))?;
    let model = model_settings(&s);
    log.record(
        "start",
        json!({"command": "resume", "checkpoint": checkpoint_path, "mode": s.mode.unwrap_or(Mode::Mock)}),
    );
    logged(&log, || {
        let checkpoint = Checkpoint::load(checkpoint_path)?;
        log.record(
            "resumed",
            json!({"completed": checkpoint.completed, "frontier": checkpoint.frontier.len()}),
        );
        let gateway = gateway(&s)?;
        let config = expand_config(&s, checkpoint_path.to_path_buf(), stop_after);
        let tree = pipeline::resume(&gateway, &model, checkpoint, &config, &log)?;
        // Narrations left by an earlier attempt are reused when they still
        // belong to this tree.
        let narrations_path = out_dir.join(NARRATIONS_FILE);
        let mut narrations: Narrations = fs::read_to_string(&narrations_path)
            .ok()
            .and_then(|text| serde_json::from_str(&text).ok())
            .unwrap_or_default();
        narrations.retain(|id, _| tree.nodes.contains_key(id));
        finish(&gateway, &model, &s, &out_dir, &tree, narrations, &log)
    })
}

/// Narrates and exports an expanded tree. Narrations are saved even when a
/// node fails so that `resume` can pick them up.
fn finish(
    gateway: &Gateway,
    model: &ModelSettings,
    s: &Settings,
    out_dir: &Path,
    tree: &BranchingPlotTree,
    mut narrations: Narrations,
    log: &RunLog,
) -> Result<(), CliError> {
    write(&out_dir.join(TREE_FILE), &tree.to_json())?;
    let narrated = narrate_tree(gateway, model, tree, &mut narrations, s.parallel.unwrap_or(1));
    let text = serde_json::to_string_pretty(&narrations).expect("narrations serialize") + "\n";
    write(&out_dir.join(NARRATIONS_FILE), &text)?;
    narrated?;
    for narration in narrations.values() {
        for warning in lint(tree, narration) {
            log.warning(&warning);
        }
    }
    write(&out_dir.join(INK_FILE), &export_ink(tree, &narrations)?)?;
    let game = export_game_json(tree, &narrations)?;
    write(&out_dir.join(GAME_FILE), &game.to_json())?;
    log.record(
        "done",
        json!({"nodes": tree.nodes.len(), "endings": tree.ending_count(), "out_dir": out_dir}),
    );
    eprintln!(
        "wrote {} nodes and {} endings to {}",
        tree.nodes.len(),
        tree.ending_count(),
        out_dir.display()
    );
    Ok(())
}

fn load_tree(path: &Path) -> Result<BranchingPlotTree, CliError> {
    plot_tree::load(path).map_err(|source| CliError::TreeFile {
        path: path.to_path_buf(),
        source,
    })
}

pub fn validate(path: &Path, complete: bool, strict: bool) -> Result<(), CliError> {
    let tree = load_tree(path)?;
    let violations = tree.validate(complete);
    for v in &violations {
        println!("{v}");
    }
    let failing = violations.iter().filter(|v| strict || v.is_error()).count();
    if failing > 0 {
        return Err(CliError::Invalid(failing));
    }
    println!(
        "ok: {} nodes, {} endings, {} warning(s)",
        tree.nodes.len(),
        tree.ending_count(),
        violations.len()
    );
    Ok(())
}

pub fn inspect(path: &Path, choices: &str) -> Result<(), CliError> {
    let choices = parse_choices(choices)
        .map_err(|c| CliError::Usage(format!("invalid choice `{c}` in --path: use O (original) or A (alternate)")))?;
    let tree = load_tree(path)?;
    let storyline = tree.path_from_choices(&choices).map_err(|e| match e {
        TreeError::InvalidPath { .. } => CliError::Usage(e.to_string()),
        other => CliError::Pipeline(other.into()),
    })?;
    let events = tree.storyline_events(&storyline).map_err(|e| CliError::Pipeline(e.into()))?;
    for (i, event) in events.iter().enumerate() {
        println!("{}. {event}", i + 1);
    }
    Ok(())
}
