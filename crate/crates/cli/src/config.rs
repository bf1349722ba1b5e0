//! Run settings gathered from flags, a JSON config file and the environment,
//! in that order of precedence.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;
use whatif_core::llm_gateway::Mode;

/// Environment variables consulted after flags and the config file.
pub const ENV_MODE: &str = "WHATIF_MODE";
pub const ENV_ENDPOINT: &str = "WHATIF_ENDPOINT";
pub const ENV_MODEL: &str = "WHATIF_MODEL";
pub const ENV_CASSETTE: &str = "WHATIF_CASSETTE";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("${var}: {message}")]
    Env { var: &'static str, message: String },
}

/// Every setting is optional so that layers can be merged field by field.
/// The config file uses the flag names as keys, e.g. `"out-dir"`.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    pub plot: Option<String>,
    pub plot_file: Option<PathBuf>,
    pub char: Option<String>,
    pub title: Option<String>,
    pub nodes: Option<u32>,
    pub mode: Option<Mode>,
    pub cassette: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub budget: Option<usize>,
    pub seed: Option<u64>,
    pub parallel: Option<usize>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub retry_limit: Option<u32>,
    pub timeout_secs: Option<u64>,
}

macro_rules! layer {
    ($high:expr, $low:expr, $($field:ident),*) => {
        Settings { $($field: $high.$field.or($low.$field)),* }
    };
}

impl Settings {
    /// Fields set here win; the rest come from `lower`.
    pub fn over(self, lower: Settings) -> Settings {
        layer!(
            self, lower, plot, plot_file, char, title, nodes, mode, cassette, out_dir, budget, seed,
            parallel, endpoint, model, api_key_env, retry_limit, timeout_secs
        )
    }

    pub fn load(path: &Path) -> Result<Settings, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> Result<Settings, ConfigError> {
        let mode = match lookup(ENV_MODE) {
            Some(m) => Some(m.parse().map_err(|message| ConfigError::Env { var: ENV_MODE, message })?),
            None => None,
        };
        Ok(Settings {
            mode,
            endpoint: lookup(ENV_ENDPOINT),
            model: lookup(ENV_MODEL),
            cassette: lookup(ENV_CASSETTE).map(PathBuf::from),
            ..Settings::default()
        })
    }

    /// Flags over the optional config file over the process environment.
    pub fn resolve(flags: Settings, config_file: Option<&Path>) -> Result<Settings, ConfigError> {
        let file = match config_file {
            Some(path) => Settings::load(path)?,
            None => Settings::default(),
        };
        let env = Settings::from_env(|name| std::env::var(name).ok().filter(|v| !v.is_empty()))?;
        Ok(flags.over(file).over(env))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let flags = Settings {
            mode: Some(Mode::Replay),
            ..Settings::default()
        };
        let file: Settings =
            serde_json::from_str(r#"{"mode": "mock", "model": "file-model", "out-dir": "o"}"#).unwrap();
        let env = Settings::from_env(|name| match name {
            ENV_MODEL => Some("env-model".into()),
            ENV_ENDPOINT => Some("http://env".into()),
            _ => None,
        })
        .unwrap();
        let merged = flags.over(file).over(env);
        assert_eq!(merged.mode, Some(Mode::Replay));
        assert_eq!(merged.model.as_deref(), Some("file-model"));
        assert_eq!(merged.endpoint.as_deref(), Some("http://env"));
        assert_eq!(merged.out_dir, Some(PathBuf::from("o")));
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        assert!(serde_json::from_str::<Settings>(r#"{"api-key": "sk-123"}"#).is_err());
    }

    #[test]
    fn bad_env_mode() {
        let err = Settings::from_env(|name| (name == ENV_MODE).then(|| "psychic".into())).unwrap_err();
        assert!(err.to_string().contains("WHATIF_MODE"));
    }
}
