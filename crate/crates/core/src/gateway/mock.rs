use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendFailure, BackendReply, CompletionRequest, EndpointConfig, GatewayError,
    SampleKey, Stage, TokenUsage,
};

/// One line of a mock script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    pub query_id: String,
    pub sample_index: u64,
    pub stage: Stage,
    pub text: String,
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
    /// Number of leading attempts that fail transiently before the text is served.
    #[serde(default)]
    pub fail_times: u32,
    /// Serve the text without a usage block.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub omit_usage: bool,
}

impl MockEntry {
    pub fn key(&self) -> SampleKey {
        SampleKey::new(self.query_id.clone(), self.sample_index, self.stage)
    }
}

/// Immutable table of scripted completions.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    entries: HashMap<SampleKey, MockEntry>,
}

impl MockScript {
    pub fn new(entries: impl IntoIterator<Item = MockEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.key(), e)).collect(),
        }
    }

    pub fn from_jsonl_str(text: &str) -> Result<Self, GatewayError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: MockEntry = serde_json::from_str(line).map_err(|e| GatewayError::ScriptParse {
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn from_jsonl_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        Self::from_jsonl_str(&text)
    }

    pub fn get(&self, key: &SampleKey) -> Option<&MockEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

type LatencyFn = Box<dyn Fn(&SampleKey) -> Duration + Send + Sync>;

/// Deterministic scripted backend.
///
/// Counts calls per stage and tracks the peak number of concurrent calls so
/// tests can check resume behaviour and in-flight limits.
pub struct MockBackend {
    script: Arc<MockScript>,
    attempts: Mutex<HashMap<SampleKey, u32>>,
    explorer_calls: AtomicUsize,
    synthesizer_calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    latency: Option<LatencyFn>,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend")
            .field("entries", &self.script.len())
            .field("explorer_calls", &self.explorer_calls)
            .field("synthesizer_calls", &self.synthesizer_calls)
            .finish()
    }
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script: Arc::new(script),
            attempts: Mutex::new(HashMap::new()),
            explorer_calls: AtomicUsize::new(0),
            synthesizer_calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
            latency: None,
        }
    }

    /// Delays each call by `latency(key)` to simulate slow or reordered replies.
    pub fn with_latency(
        mut self,
        latency: impl Fn(&SampleKey) -> Duration + Send + Sync + 'static,
    ) -> Self {
        self.latency = Some(Box::new(latency));
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn calls(&self, stage: Stage) -> usize {
        match stage {
            Stage::Explorer => self.explorer_calls.load(Ordering::SeqCst),
            Stage::Synthesizer => self.synthesizer_calls.load(Ordering::SeqCst),
        }
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    /// Resolves one attempt for `key` against the script.
    pub fn lookup(&self, key: &SampleKey) -> Result<MockEntry, BackendFailure> {
        match key.stage {
            Stage::Explorer => self.explorer_calls.fetch_add(1, Ordering::SeqCst),
            Stage::Synthesizer => self.synthesizer_calls.fetch_add(1, Ordering::SeqCst),
        };
        let entry = self
            .script
            .get(key)
            .ok_or_else(|| BackendFailure::Fatal(GatewayError::MockScriptMiss(key.clone())))?;
        let attempt = {
            let mut attempts = self.attempts.lock().expect("attempt table poisoned");
            let n = attempts.entry(key.clone()).or_insert(0);
            *n += 1;
            *n
        };
        if attempt <= entry.fail_times {
            return Err(BackendFailure::Transient(format!(
                "scripted failure {attempt}/{} for {key}",
                entry.fail_times
            )));
        }
        Ok(entry.clone())
    }
}

struct InFlightGuard<'a>(&'a AtomicUsize);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    async fn send(
        &self,
        _endpoint: &EndpointConfig,
        request: &CompletionRequest,
    ) -> Result<BackendReply, BackendFailure> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlightGuard(&self.in_flight);
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);

        if let Some(latency) = &self.latency {
            tokio::time::sleep(latency(&request.key)).await;
        }
        let entry = self.lookup(&request.key)?;
        let usage = (!entry.omit_usage).then(|| TokenUsage::new(entry.input_tokens, entry.output_tokens));
        Ok(BackendReply {
            text: Some(entry.text),
            usage,
        })
    }
}
