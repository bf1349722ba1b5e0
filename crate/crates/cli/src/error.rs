use std::path::PathBuf;

use thiserror::Error;
use whatif_core::exporter::ExportError;
use whatif_core::llm_gateway::GatewayError;
use whatif_core::narrator::NarratorError;
use whatif_core::pipeline::PipelineError;
use whatif_core::plot_tree::TreeFileError;

use crate::config::ConfigError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_SCHEMA: u8 = 3;
pub const EXIT_BUDGET: u8 = 4;
pub const EXIT_TRANSPORT: u8 = 5;
pub const EXIT_CASSETTE_MISS: u8 = 6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    TreeFile { path: PathBuf, source: TreeFileError },
    #[error("{0} violation(s) found")]
    Invalid(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Narrator(#[from] NarratorError),
    #[error(transparent)]
    Export(#[from] ExportError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Gateway(e) => gateway_code(e),
            CliError::Pipeline(e) => pipeline_code(e),
            CliError::Narrator(NarratorError::Gateway(e)) => gateway_code(e),
            CliError::Narrator(NarratorError::EmptyField { .. }) => EXIT_SCHEMA,
            _ => EXIT_FAILURE,
        }
    }
}

fn gateway_code(e: &GatewayError) -> u8 {
    match e {
        GatewayError::SchemaViolation { .. } => EXIT_SCHEMA,
        GatewayError::BudgetExceeded { .. } => EXIT_BUDGET,
        GatewayError::Transport(_) | GatewayError::Timeout(_) => EXIT_TRANSPORT,
        GatewayError::CassetteMiss { .. } => EXIT_CASSETTE_MISS,
        GatewayError::Config(_) => EXIT_USAGE,
        GatewayError::InvalidRequest(_) | GatewayError::Cassette(_) => EXIT_FAILURE,
    }
}

fn pipeline_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Gateway(g) => gateway_code(g),
        PipelineError::EmptyPlot | PipelineError::InvalidInput(_) => EXIT_USAGE,
        PipelineError::TooFewEvents { .. }
        | PipelineError::OrderingViolation(..)
        | PipelineError::InvariantViolation(_)
        | PipelineError::CountMismatch { .. }
        | PipelineError::NodeCountMismatch { .. }
        | PipelineError::Incomplete(_)
        | PipelineError::Tree(_) => EXIT_SCHEMA,
        _ => EXIT_FAILURE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use whatif_core::prompt_kit::Stage;

    #[test]
    fn codes_are_distinct_per_failure_class() {
        let schema = GatewayError::SchemaViolation {
            stage: Stage::PlotToTree,
            attempts: 3,
            violations: vec![],
            last_document: None,
        };
        let cases = [
            (CliError::from(PipelineError::from(schema)), EXIT_SCHEMA),
            (CliError::from(GatewayError::BudgetExceeded { limit: 1 }), EXIT_BUDGET),
            (CliError::from(GatewayError::Timeout("t".into())), EXIT_TRANSPORT),
            (
                CliError::from(NarratorError::from(GatewayError::Transport("x".into()))),
                EXIT_TRANSPORT,
            ),
            (
                CliError::from(GatewayError::CassetteMiss {
                    stage: Stage::Narrate,
                    fingerprint: "f".into(),
                }),
                EXIT_CASSETTE_MISS,
            ),
            (CliError::from(PipelineError::CountMismatch { expected: 15, got: 14 }), EXIT_SCHEMA),
            (CliError::Usage("u".into()), EXIT_USAGE),
            (CliError::Invalid(2), EXIT_FAILURE),
        ];
        for (error, code) in cases {
            assert_eq!(error.exit_code(), code, "{error}");
        }
    }
}
