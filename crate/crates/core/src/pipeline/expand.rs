use std::collections::{HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::thread;
use std::time::Instant;

use serde::Serialize;

use super::checkpoint::{config_digest, Checkpoint, FrontierItem, CHECKPOINT_VERSION};
use super::{filter_key_events, key_event_mismatches, KeyEvents, MetaPrompt, Pipeline, PipelineError};
use crate::llm_gateway::{Completion, CompletionRequest, GatewayError, ModelSettings, StructuredCompleter};
use crate::plot_tree::{BranchingPlotTree, DecisionKind, StorylinePath};
use crate::prompt_kit::branching_event;

/// Largest root storyline we agree to expand (2^16 endings).
const MAX_EXPAND_NODES: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpandConfig {
    /// Cap on gateway calls; `None` means [`ExpandConfig::default_budget`].
    pub budget: Option<usize>,
    /// Branches generated concurrently; 0 and 1 both mean sequential.
    pub parallel: usize,
    /// Where to write the checkpoint after every step.
    pub checkpoint: Option<PathBuf>,
    /// Recorded in the checkpoint's config digest.
    pub retry_limit: u32,
    /// Stop with [`PipelineError::Stopped`] after this many merges.
    pub stop_after: Option<usize>,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        ExpandConfig {
            budget: None,
            parallel: 1,
            checkpoint: None,
            retry_limit: crate::llm_gateway::DEFAULT_RETRY_LIMIT,
            stop_after: None,
        }
    }
}

impl ExpandConfig {
    /// `2^(n+3)` calls. A full expansion needs roughly `4 * 2^n`: one meta-prompt,
    /// one storyline and one subtree per branch, plus key-event extraction.
    pub fn default_budget(n: u32) -> usize {
        1usize.checked_shl(n + 3).unwrap_or(usize::MAX)
    }
}

/// Counts structured completions and refuses calls past the limit.
pub struct Budget<'a> {
    inner: &'a dyn StructuredCompleter,
    limit: usize,
    used: AtomicUsize,
}

impl<'a> Budget<'a> {
    pub fn new(inner: &'a dyn StructuredCompleter, limit: usize) -> Self {
        Budget {
            inner,
            limit,
            used: AtomicUsize::new(0),
        }
    }

    pub fn used(&self) -> usize {
        self.used.load(Ordering::SeqCst).min(self.limit)
    }
}

impl StructuredCompleter for Budget<'_> {
    fn complete_structured(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        if self.used.fetch_add(1, Ordering::SeqCst) >= self.limit {
            return Err(GatewayError::BudgetExceeded { limit: self.limit });
        }
        self.inner.complete_structured(request)
    }
}

/// Sums attempts over the calls of one branch.
struct Counting<'a> {
    inner: &'a dyn StructuredCompleter,
    attempts: AtomicU32,
}

impl StructuredCompleter for Counting<'_> {
    fn complete_structured(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        let out = self.inner.complete_structured(request)?;
        self.attempts.fetch_add(out.attempts, Ordering::SeqCst);
        Ok(out)
    }
}

/// One line of the progress stream, emitted per merged branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub node_id: String,
    /// Model attempts spent on the branch, retries included.
    pub attempts: u32,
    pub elapsed_ms: u64,
    pub completed: usize,
    pub total: usize,
}

/// Hooks into the expansion. All methods default to doing nothing.
pub trait Observer {
    fn key_events(&self, _storyline: &StorylinePath, _key_events: &KeyEvents) {}
    fn meta_prompt(&self, _meta_prompt: &MetaPrompt) {}
    fn merged(&self, _before: &BranchingPlotTree, _after: &BranchingPlotTree, _progress: &Progress) {}
    fn warning(&self, _message: &str) {}
}

pub struct NoopObserver;

impl Observer for NoopObserver {}

struct BranchOutput {
    subtree: BranchingPlotTree,
    attempts: u32,
    elapsed_ms: u64,
}

fn branch_job(pipeline: &Pipeline<'_>, tree: &BranchingPlotTree, item: &FrontierItem) -> Result<BranchOutput, PipelineError> {
    let start = Instant::now();
    let counting = Counting {
        inner: pipeline.completer,
        attempts: AtomicU32::new(0),
    };
    let p = Pipeline::new(&counting, pipeline.settings);
    let path = tree.storyline_through(&item.node_id)?;
    let events = tree.storyline_events(&path)?;
    let new_events = p.write_alternate_storyline(&events, &item.meta_prompt)?;
    let subtree = p.events_to_subtree(&new_events, &tree.char_name)?;
    Ok(BranchOutput {
        subtree,
        attempts: counting.attempts.load(Ordering::SeqCst),
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}

struct Run<'a> {
    pipeline: Pipeline<'a>,
    config: &'a ExpandConfig,
    observer: &'a dyn Observer,
    digest: String,
    tree: BranchingPlotTree,
    frontier: VecDeque<FrontierItem>,
    completed: usize,
    total: usize,
}

impl Run<'_> {
    fn save(&self) -> Result<(), PipelineError> {
        let Some(path) = &self.config.checkpoint else {
            return Ok(());
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_digest: self.digest.clone(),
            tree: self.tree.clone(),
            frontier: self.frontier.iter().cloned().collect(),
            completed: self.completed,
        }
        .save(path)
    }

    fn queued(&self) -> HashSet<&str> {
        self.frontier.iter().map(|i| i.node_id.as_str()).collect()
    }

    fn needs_prompt(&self, id: &str) -> bool {
        self.tree.edge(id, DecisionKind::Alternate).is_none() && !self.queued().contains(id)
    }

    /// Extracts key events from the storyline through `group[0]` and queues a
    /// meta-prompt for every node of `group` that still needs one.
    fn queue_group(&mut self, group: &[String]) -> Result<(), PipelineError> {
        let Some(first) = group.first() else {
            return Ok(());
        };
        let path = self.tree.storyline_through(first)?;
        let events = self.tree.storyline_events(&path)?;
        let key_events = self.pipeline.extract_key_events(&events)?;
        self.observer.key_events(&path, &key_events);
        for warning in key_event_mismatches(&key_events, &events) {
            self.observer.warning(&warning);
        }
        for id in group {
            if !self.needs_prompt(id) {
                continue;
            }
            let depth = self.tree.nodes[id].depth;
            let points = filter_key_events(&key_events, branching_event(depth));
            let meta_prompt = self.pipeline.generate_meta_prompt(&self.tree, &path, id, &points)?;
            self.observer.meta_prompt(&meta_prompt);
            self.frontier.push_back(FrontierItem {
                node_id: id.clone(),
                meta_prompt,
            });
            self.save()?;
        }
        Ok(())
    }

    /// Queues prompts for any node left without one, e.g. at the start of a
    /// run or after resuming from a checkpoint written mid-group.
    fn queue_pending(&mut self) -> Result<(), PipelineError> {
        loop {
            let mut order = VecDeque::from([self.tree.root.clone()]);
            let mut pending = None;
            while let Some(id) = order.pop_front() {
                if self.needs_prompt(&id) {
                    pending = Some(id);
                    break;
                }
                for kind in DecisionKind::BOTH {
                    if let Some(next) = self.tree.edge(&id, kind).and_then(|e| e.to_target.node_id()) {
                        order.push_back(next.to_string());
                    }
                }
            }
            let Some(id) = pending else { return Ok(()) };
            let path = self.tree.storyline_through(&id)?;
            let group: Vec<String> = path
                .node_ids
                .into_iter()
                .filter(|n| self.needs_prompt(n))
                .collect();
            self.queue_group(&group)?;
        }
    }

    fn run_batch(&self, batch: &[FrontierItem]) -> Vec<Result<BranchOutput, PipelineError>> {
        let (pipeline, tree) = (&self.pipeline, &self.tree);
        if batch.len() <= 1 {
            return batch.iter().map(|item| branch_job(pipeline, tree, item)).collect();
        }
        thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|item| s.spawn(move || branch_job(pipeline, tree, item)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("branch worker panicked"))
                .collect()
        })
    }

    fn expand(&mut self) -> Result<(), PipelineError> {
        self.queue_pending()?;
        while !self.frontier.is_empty() {
            let mut width = self.config.parallel.max(1).min(self.frontier.len());
            if let Some(stop) = self.config.stop_after {
                if self.completed >= stop {
                    return Err(PipelineError::Stopped {
                        completed: self.completed,
                    });
                }
                width = width.min(stop - self.completed);
            }
            let batch: Vec<FrontierItem> = self.frontier.iter().take(width).cloned().collect();
            let results = self.run_batch(&batch);
            for (item, result) in batch.iter().zip(results) {
                let output = result?;
                let merged = self.tree.merge_branch(&item.node_id, &output.subtree)?;
                self.frontier.pop_front();
                self.completed += 1;
                let progress = Progress {
                    node_id: item.node_id.clone(),
                    attempts: output.attempts,
                    elapsed_ms: output.elapsed_ms,
                    completed: self.completed,
                    total: self.total,
                };
                self.observer.merged(&self.tree, &merged, &progress);
                self.tree = merged;
                self.save()?;
                let grafted = self.tree.alternate_branch_ids(&item.node_id);
                self.queue_group(&grafted)?;
            }
        }
        let errors: Vec<String> = self
            .tree
            .validate(true)
            .into_iter()
            .filter(|v| v.is_error())
            .map(|v| v.to_string())
            .collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Incomplete(errors))
        }
    }
}

fn run(
    completer: &dyn StructuredCompleter,
    settings: &ModelSettings,
    checkpoint: Checkpoint,
    config: &ExpandConfig,
    observer: &dyn Observer,
) -> Result<BranchingPlotTree, PipelineError> {
    let n = checkpoint.tree.n;
    if n == 0 || n > MAX_EXPAND_NODES {
        return Err(PipelineError::InvalidInput(format!(
            "cannot expand a storyline of {n} nodes (1 to {MAX_EXPAND_NODES} supported)"
        )));
    }
    let budget = Budget::new(completer, config.budget.unwrap_or_else(|| ExpandConfig::default_budget(n)));
    let mut state = Run {
        pipeline: Pipeline::new(&budget, settings),
        config,
        observer,
        digest: checkpoint.config_digest,
        tree: checkpoint.tree,
        frontier: checkpoint.frontier.into(),
        completed: checkpoint.completed,
        total: (1usize << n) - 1,
    };
    match state.expand() {
        Ok(()) => {
            state.save()?;
            Ok(state.tree)
        }
        Err(e) => {
            // The original error matters more than a failed checkpoint write.
            let _ = state.save();
            Err(e)
        }
    }
}

/// Expands `tree` until every node has both branches.
pub fn expand_tree(
    completer: &dyn StructuredCompleter,
    settings: &ModelSettings,
    tree: BranchingPlotTree,
    config: &ExpandConfig,
    observer: &dyn Observer,
) -> Result<BranchingPlotTree, PipelineError> {
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_digest: config_digest(settings, config.retry_limit),
        tree,
        frontier: Vec::new(),
        completed: 0,
    };
    run(completer, settings, checkpoint, config, observer)
}

/// Continues an expansion from a checkpoint written with the same settings.
pub fn resume(
    completer: &dyn StructuredCompleter,
    settings: &ModelSettings,
    checkpoint: Checkpoint,
    config: &ExpandConfig,
    observer: &dyn Observer,
) -> Result<BranchingPlotTree, PipelineError> {
    checkpoint.check_digest(&config_digest(settings, config.retry_limit))?;
    run(completer, settings, checkpoint, config, observer)
}
