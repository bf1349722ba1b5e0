#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub const PLOT: &str = "Ada finds a map in her attic. She sails north. A storm wrecks her boat. She lands on an island.";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/ironman")
}

pub fn reference() -> Value {
    serde_json::from_str(&fs::read_to_string(fixtures().join("reference.json")).unwrap()).unwrap()
}

/// The CLI with a clean environment apart from `PATH`.
pub fn whatif() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_whatif"));
    cmd.env_clear();
    if let Some(path) = std::env::var_os("PATH") {
        cmd.env("PATH", path);
    }
    cmd
}

pub fn run(args: &[&str]) -> Output {
    whatif().args(args).output().expect("run whatif")
}

pub fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

pub fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

pub fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

pub fn mock_generate(out_dir: &Path, nodes: u32, extra: &[&str]) -> Output {
    let nodes = nodes.to_string();
    let mut args = vec![
        "generate", "--plot", PLOT, "--char", "Ada", "--title", "The Map", "--nodes", &nodes, "--mode", "mock",
        "--out-dir", out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

pub fn ironman_replay(out_dir: &Path) -> Output {
    let plot = fixtures().join("plot.txt");
    let cassette = fixtures().join("cassette.json");
    run(&[
        "generate",
        plot.to_str().unwrap(),
        "--char",
        "Tony Stark",
        "--title",
        "Iron Man",
        "--mode",
        "replay",
        "--cassette",
        cassette.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ])
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

pub fn log_records(out_dir: &Path) -> Vec<Value> {
    fs::read_to_string(out_dir.join("run.log"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("log line is JSON"))
        .collect()
}
