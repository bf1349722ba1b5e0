//! Turns a linear plot into a balanced binary tree of alternate storylines by
//! prompting a chat-completion model at every key decision, then exports the
//! tree as a playable game (Ink script plus a neutral game JSON).
//!
//! The crate is organized bottom-up:
//!
//! - [`plot_tree`]: the tree data model, traversal, merging and persistence.
//! - [`prompt_kit`]: prompt templates and structured-output schemas.
//! - [`llm_gateway`]: chat-completion client with schema validation, retry,
//!   and record/replay cassettes.
//! - [`pipeline`]: the expansion loop that grows the tree branch by branch.
//! - [`narrator`]: second-person narration and button texts per node.
//! - [`exporter`]: Ink and game JSON output, plus the Ink-subset checker.

pub mod exporter;
pub mod llm_gateway;
pub mod narrator;
pub mod pipeline;
pub mod plot_tree;
pub mod prompt_kit;
pub mod text;

pub use plot_tree::{BranchingPlotTree, DecisionKind, PlotEdge, PlotNode, StorylinePath, Target};
