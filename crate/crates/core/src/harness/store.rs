use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::gateway::EndpointConfig;
use crate::pipeline::template_fingerprint;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    /// The exact value that was hashed.
    pub config: Value,
    pub dataset: String,
    pub strategy: String,
    pub explorer_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesizer_model: Option<String>,
    pub n_paths: usize,
    pub runs: usize,
    pub seed: u64,
    pub started: DateTime<Utc>,
    #[serde(default)]
    pub finished: Option<DateTime<Utc>>,
    /// Per query id, one status per run index.
    pub status: BTreeMap<String, Vec<PairStatus>>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Option<Self>, HarnessError> {
        let path = dir.join(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(HarnessError::io(path, e)),
        };
        serde_json::from_str(&text).map(Some).map_err(|e| HarnessError::Corrupt {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Writes via a temporary file and rename so a crash never leaves half a manifest.
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&tmp, text).map_err(|e| HarnessError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| HarnessError::io(&path, e))
    }

    pub fn count(&self, status: PairStatus) -> usize {
        self.status.values().flatten().filter(|&&s| s == status).count()
    }

    pub fn pending(&self) -> usize {
        self.count(PairStatus::Pending)
    }

    pub fn set(&mut self, query_id: &str, run: usize, status: PairStatus) {
        if let Some(slot) = self.status.get_mut(query_id).and_then(|v| v.get_mut(run)) {
            *slot = status;
        }
    }
}

fn endpoint_identity(cfg: &EndpointConfig) -> Value {
    // transport settings (url, timeouts, retries, concurrency, script path)
    // do not change what gets sampled
    json!({
        "backend": cfg.backend,
        "model_name": cfg.model_name,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
        "send_seed": cfg.send_seed,
        "think_markers": cfg.think_markers,
    })
}

/// The configuration that identifies a run for resume purposes.
pub fn hashed_config(
    explorer: &EndpointConfig,
    synthesizer: Option<&EndpointConfig>,
    strategy: &str,
    n_paths: usize,
    seed: u64,
    dataset_sha256: &str,
    context_budget: usize,
) -> Value {
    json!({
        "explorer": endpoint_identity(explorer),
        "synthesizer": synthesizer.map(endpoint_identity),
        "strategy": strategy,
        "n_paths": n_paths,
        "seed": seed,
        "dataset_sha256": dataset_sha256,
        "template": template_fingerprint(),
        "context_budget": context_budget,
    })
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
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
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// SHA-256 over compact JSON with keys sorted at every level.
pub fn config_hash(config: &Value) -> String {
    let mut canonical = String::new();
    write_canonical(config, &mut canonical);
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

pub fn file_sha256(path: &Path) -> Result<String, HarnessError> {
    let mut file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| HarnessError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

/// Reads newline-terminated JSON records. An unterminated last line is the
/// remains of an interrupted append: with `repair` it is cut off the file,
/// otherwise it is ignored.
pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path, repair: bool) -> Result<Vec<T>, HarnessError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(HarnessError::io(path, e)),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    if complete < bytes.len() && repair {
        tracing::warn!(path = %path.display(), bytes = bytes.len() - complete, "dropping partial trailing record");
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        file.set_len(complete as u64).map_err(|e| HarnessError::io(path, e))?;
    }
    let text = std::str::from_utf8(&bytes[..complete]).map_err(|e| HarnessError::Corrupt {
        path: path.into(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| HarnessError::Corrupt {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub(crate) fn open_append(path: &Path) -> Result<File, HarnessError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn append_jsonl<T: Serialize>(file: &mut File, path: &Path, record: &T) -> Result<(), HarnessError> {
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    file.write_all(line.as_bytes())
        .and_then(|_| file.flush())
        .map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"a":1,"b":{"x":[1,2],"y":"s"}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"b":{"y":"s","x":[1,2]},"a":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c: Value = serde_json::from_str(r#"{"a":2,"b":{"x":[1,2],"y":"s"}}"#).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn hash_ignores_transport_fields() {
        let mut e1 = EndpointConfig::new("mock", "m");
        let mut e2 = e1.clone();
        e2.base_url = "http://127.0.0.1:9".into();
        e2.max_retries = 9;
        let h = |e: &EndpointConfig| config_hash(&hashed_config(e, None, "majority", 4, 0, "d", 10));
        assert_eq!(h(&e1), h(&e2));
        e1.temperature = 0.1;
        assert_ne!(h(&e1), h(&e2));
    }

    #[test]
    fn partial_tail_is_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        fs::write(&path, "{\"a\":1}\n{\"a\":2}\n{\"a\":").unwrap();
        let rows: Vec<Value> = read_jsonl(&path, false).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(fs::read_to_string(&path).unwrap().len(), 21);
        let rows: Vec<Value> = read_jsonl(&path, true).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(fs::read_to_string(&path).unwrap(), "{\"a\":1}\n{\"a\":2}\n");
    }
}
