use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub question: String,
    /// Expert-approved answer.
    pub reference: String,
    /// Answer under evaluation.
    pub candidate: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contexts: Vec<String>,
}

/// One JSON object per line; blank lines are skipped. Line numbers in
/// errors are 1-based.
pub fn parse_records(text: &str) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Record { line: i + 1, message };
        let rec: EvalRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.id.is_empty() {
            return Err(err("empty id".into()));
        }
        for (field, value) in [("reference", &rec.reference), ("candidate", &rec.candidate)] {
            if value.trim().is_empty() {
                return Err(err(format!("empty {field} for id {:?}", rec.id)));
            }
        }
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id {:?}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_records(&text)
}
