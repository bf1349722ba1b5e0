use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::BranchingPlotTree;

pub const TREE_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TreeFileError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tree file parse error: {0}")]
    Parse(String),
    #[error("tree file version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u64, expected: u32 },
}

#[derive(Serialize)]
struct TreeFileRef<'a> {
    version: u32,
    #[serde(flatten)]
    tree: &'a BranchingPlotTree,
}

impl BranchingPlotTree {
    /// Tree file contents: pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(&TreeFileRef {
            version: TREE_FILE_VERSION,
            tree: self,
        })
        .expect("tree serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, TreeFileError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| TreeFileError::Parse(e.to_string()))?;
        let version = value
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| TreeFileError::Parse("missing integer field `version`".into()))?;
        if version != u64::from(TREE_FILE_VERSION) {
            return Err(TreeFileError::SchemaVersionMismatch {
                found: version,
                expected: TREE_FILE_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| TreeFileError::Parse(e.to_string()))
    }
}

pub fn save(tree: &BranchingPlotTree, destination: &Path) -> Result<(), TreeFileError> {
    fs::write(destination, tree.to_json())?;
    Ok(())
}

pub fn load(source: &Path) -> Result<BranchingPlotTree, TreeFileError> {
    BranchingPlotTree::from_json(&fs::read_to_string(source)?)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.json");
        let tree = expanded(2);
        save(&tree, &path).unwrap();
        assert_eq!(load(&path).unwrap(), tree);
    }

    #[test]
    fn field_layout() {
        let text = linear(1).to_json();
        let value: Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<_> = value.as_object().unwrap().keys().cloned().collect();
        for key in ["version", "char_name", "title", "n", "root", "nodes", "edges"] {
            assert!(keys.contains(&key.to_string()), "{key}");
        }
        assert_eq!(value["edges"][0]["to_target"], "END");
        assert_eq!(value["edges"][0]["decision_kind"], "Original");
        assert!(text.starts_with("{\n  \"version\": 1,"));
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.json");
        fs::write(&path, "").unwrap();
        assert!(matches!(load(&path), Err(TreeFileError::Parse(_))));
    }

    #[test]
    fn version_mismatch() {
        let text = linear(1).to_json().replacen("\"version\": 1", "\"version\": 7", 1);
        assert!(matches!(
            BranchingPlotTree::from_json(&text),
            Err(TreeFileError::SchemaVersionMismatch { found: 7, .. })
        ));
    }
}
