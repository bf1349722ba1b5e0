use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use super::{Backend, CompletionRequest, GatewayError};

#[derive(Default)]
struct Script {
    replies: VecDeque<String>,
    seen: Vec<CompletionRequest>,
}

/// Hands out a fixed sequence of replies. Clones share the same script, so a
/// test can keep a handle after moving one into a gateway.
#[derive(Clone, Default)]
pub struct ScriptedBackend {
    script: Arc<Mutex<Script>>,
}

impl ScriptedBackend {
    pub fn new(replies: impl IntoIterator<Item = String>) -> Self {
        ScriptedBackend {
            script: Arc::new(Mutex::new(Script {
                replies: replies.into_iter().collect(),
                seen: Vec::new(),
            })),
        }
    }

    pub fn push(&self, reply: impl Into<String>) {
        self.script.lock().expect("script lock").replies.push_back(reply.into());
    }

    /// Number of requests received so far.
    pub fn sends(&self) -> usize {
        self.script.lock().expect("script lock").seen.len()
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.script.lock().expect("script lock").seen.clone()
    }
}

impl Backend for ScriptedBackend {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut script = self.script.lock().expect("script lock");
        script.seen.push(request.clone());
        script
            .replies
            .pop_front()
            .ok_or_else(|| GatewayError::Transport("scripted backend has no replies left".into()))
    }
}

type ReplyFn = dyn Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync;

/// Computes each reply with a closure.
pub struct FnBackend(Box<ReplyFn>);

impl FnBackend {
    pub fn new(f: impl Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync + 'static) -> Self {
        FnBackend(Box::new(f))
    }
}

impl Backend for FnBackend {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (self.0)(request)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).send(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).send(request)
    }
}
