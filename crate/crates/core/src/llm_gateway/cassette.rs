use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{Backend, CompletionRequest, GatewayError};
use crate::prompt_kit::Stage;

pub const CASSETTE_VERSION: u32 = 1;

/// Rewrites a JSON value with object keys sorted at every level.
fn canonical(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, Value> =
                map.iter().map(|(k, v)| (k, canonical(v))).collect();
            let mut out = serde_json::Map::new();
            for (k, v) in sorted {
                out.insert(k.clone(), v);
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

fn write_sorted(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_sorted(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_sorted(v, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Hex SHA-256 of the request's messages, schema, model id and temperature,
/// serialized as compact JSON with sorted keys.
pub fn fingerprint(request: &CompletionRequest) -> String {
    let material = json!({
        "messages": request.messages,
        "schema": canonical(&request.schema.schema_document),
        "model_id": request.model_id,
        "temperature": request.temperature,
    });
    let mut text = String::new();
    write_sorted(&material, &mut text);
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub stage: Stage,
    pub response: String,
    /// Seconds since the Unix epoch.
    pub recorded_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cassette {
    pub version: u32,
    pub entries: BTreeMap<String, CassetteEntry>,
}

impl Cassette {
    pub fn new() -> Self {
        Cassette {
            version: CASSETTE_VERSION,
            entries: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Cassette(format!("{}: {e}", path.display())))?;
        let cassette: Cassette = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Cassette(format!("{}: {e}", path.display())))?;
        if cassette.version != CASSETTE_VERSION {
            return Err(GatewayError::Cassette(format!(
                "{}: version {} is not supported",
                path.display(),
                cassette.version
            )));
        }
        Ok(cassette)
    }

    pub fn save(&self, path: &Path) -> Result<(), GatewayError> {
        let mut text = serde_json::to_string_pretty(self).expect("cassette serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| GatewayError::Cassette(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, request: &CompletionRequest) -> Option<&CassetteEntry> {
        self.entries.get(&fingerprint(request))
    }

    pub fn insert(&mut self, request: &CompletionRequest, response: String) {
        let recorded_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        self.entries.insert(
            fingerprint(request),
            CassetteEntry {
                stage: request.stage(),
                response,
                recorded_at,
            },
        );
    }
}

/// Serves replies from a cassette and never touches the network.
pub struct ReplayBackend {
    cassette: Cassette,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> Self {
        ReplayBackend { cassette }
    }

    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        Ok(ReplayBackend::new(Cassette::load(path)?))
    }
}

impl Backend for ReplayBackend {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.cassette
            .get(request)
            .map(|entry| entry.response.clone())
            .ok_or_else(|| GatewayError::CassetteMiss {
                stage: request.stage(),
                fingerprint: fingerprint(request),
            })
    }
}

/// Forwards to an inner backend and writes every reply to the cassette file
/// before returning it.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    cassette: Mutex<Cassette>,
}

impl<B: Backend> RecordingBackend<B> {
    /// Appends to the cassette at `path` if it exists.
    pub fn open(inner: B, path: PathBuf) -> Result<Self, GatewayError> {
        let cassette = if path.exists() {
            Cassette::load(&path)?
        } else {
            Cassette::new()
        };
        Ok(RecordingBackend {
            inner,
            path,
            cassette: Mutex::new(cassette),
        })
    }

    pub fn cassette(&self) -> Cassette {
        self.cassette.lock().expect("cassette lock").clone()
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let response = self.inner.send(request)?;
        let mut cassette = self.cassette.lock().expect("cassette lock");
        cassette.insert(request, response.clone());
        cassette.save(&self.path)?;
        Ok(response)
    }
}
