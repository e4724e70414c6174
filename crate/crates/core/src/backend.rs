//! Completion backends behind a deterministic greedy contract.
//!
//! Every request is greedy (temperature 0) and stops at `</s>` or the token
//! budget, so identical prompts must yield identical completions. The wire
//! backend speaks the plain completions shape served by common open-model
//! inference servers; the replay backend answers from a store of canned
//! responses keyed by a SHA-256 fingerprint of the exact prompt string and is
//! what tests run against.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::END_OF_SEQUENCE;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub stop: Option<String>,
}

impl CompletionRequest {
    /// Request shape for cue-model calls (64-token budget).
    pub fn cue(prompt: String) -> Self {
        CompletionRequest {
            prompt,
            max_new_tokens: 64,
            stop: Some(END_OF_SEQUENCE.to_string()),
        }
    }

    /// Request shape for role-model calls (256-token budget).
    pub fn role(prompt: String) -> Self {
        CompletionRequest {
            prompt,
            max_new_tokens: 256,
            stop: Some(END_OF_SEQUENCE.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
}

/// Generated continuation only; the prompt echo is stripped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("server error (status {status}): {message}")]
    Server { status: u16, message: String },
    #[error("malformed server response: {0}")]
    Protocol(String),
    #[error("replay miss for fingerprint {fingerprint}")]
    ReplayMiss { fingerprint: String },
    #[error("conflicting replay record for fingerprint {fingerprint}")]
    ReplayConflict { fingerprint: String },
    #[error("replay store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("replay store line {line}: {message}")]
    Store { line: usize, message: String },
}

/// A deterministic greedy-completion model.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;

    /// Stable description for run manifests, e.g. `replay:store.jsonl`.
    fn identity(&self) -> String;
}

/// SHA-256 over the exact prompt string, hex-encoded.
pub fn prompt_fingerprint(prompt: &str) -> String {
    format!("{:x}", Sha256::digest(prompt.as_bytes()))
}

fn strip_prompt_echo<'a>(prompt: &str, text: &'a str) -> &'a str {
    text.strip_prefix(prompt).unwrap_or(text)
}

// ---------------------------------------------------------------------------
// Replay backend
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ReplayRecord {
    fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt: Option<String>,
    response: String,
}

/// Canned responses keyed by prompt fingerprint. Lookups are exact.
#[derive(Debug, Default, Clone)]
pub struct ReplayStore {
    entries: HashMap<String, String>,
}

impl ReplayStore {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path)?;
        let mut entries = HashMap::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ReplayRecord =
                serde_json::from_str(line).map_err(|e| BackendError::Store {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if let Some(existing) = entries.get(&record.fingerprint) {
                if existing != &record.response {
                    return Err(BackendError::ReplayConflict {
                        fingerprint: record.fingerprint,
                    });
                }
            } else {
                entries.insert(record.fingerprint, record.response);
            }
        }
        Ok(ReplayStore { entries })
    }

    /// Seeds a response for a prompt; conflicting re-insertion is an error.
    pub fn insert(&mut self, prompt: &str, response: &str) -> Result<(), BackendError> {
        let fingerprint = prompt_fingerprint(prompt);
        match self.entries.get(&fingerprint) {
            Some(existing) if existing != response => {
                Err(BackendError::ReplayConflict { fingerprint })
            }
            _ => {
                self.entries.insert(fingerprint, response.to_string());
                Ok(())
            }
        }
    }

    pub fn get(&self, fingerprint: &str) -> Option<&str> {
        self.entries.get(fingerprint).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Appends a fingerprint/response pair to a store file. Re-recording an
/// identical pair is a no-op; a different response for a known fingerprint is
/// a conflict.
pub fn record_replay(
    store_path: impl AsRef<Path>,
    prompt: &str,
    response: &str,
) -> Result<(), BackendError> {
    let store_path = store_path.as_ref();
    let fingerprint = prompt_fingerprint(prompt);
    if store_path.exists() {
        let store = ReplayStore::load(store_path)?;
        match store.get(&fingerprint) {
            Some(existing) if existing == response => return Ok(()),
            Some(_) => return Err(BackendError::ReplayConflict { fingerprint }),
            None => {}
        }
    }
    let record = ReplayRecord {
        fingerprint,
        prompt: Some(prompt.to_string()),
        response: response.to_string(),
    };
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(store_path)?;
    writeln!(
        file,
        "{}",
        serde_json::to_string(&record).expect("record serializes")
    )?;
    Ok(())
}

/// Test double answering from a [`ReplayStore`]; a missing fingerprint is a
/// hard error.
pub struct ReplayBackend {
    store: ReplayStore,
    label: String,
}

impl ReplayBackend {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        Ok(ReplayBackend {
            store: ReplayStore::load(path)?,
            label: format!("replay:{}", path.display()),
        })
    }

    pub fn from_store(store: ReplayStore, label: impl Into<String>) -> Self {
        ReplayBackend {
            store,
            label: label.into(),
        }
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let fingerprint = prompt_fingerprint(&request.prompt);
        let Some(canned) = self.store.get(&fingerprint) else {
            return Err(BackendError::ReplayMiss { fingerprint });
        };
        let text = strip_prompt_echo(&request.prompt, canned).to_string();
        let finish_reason = match &request.stop {
            Some(stop) if text.ends_with(stop.as_str()) => FinishReason::Stop,
            _ => FinishReason::Length,
        };
        Ok(CompletionResponse {
            text,
            finish_reason,
        })
    }

    fn identity(&self) -> String {
        self.label.clone()
    }
}

// ---------------------------------------------------------------------------
// Wire backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TransportReply {
    pub status: u16,
    pub body: String,
}

/// One HTTP POST; split out so tests can spy on request bodies without a
/// server.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        auth_token: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<TransportReply, String>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        HttpTransport {
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .expect("http client builds"),
        }
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        auth_token: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<TransportReply, String> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(TransportReply { status, body })
    }
}

#[derive(Debug, Deserialize)]
struct WireCompletion {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

/// Client for a single-endpoint completions server. Greedy parameters go out
/// on every request; transport failures are retried.
pub struct WireBackend {
    transport: Box<dyn Transport>,
    endpoint: String,
    auth_token: Option<String>,
    max_attempts: u32,
    retry_delay: Duration,
}

impl WireBackend {
    pub fn new(endpoint: impl Into<String>, auth_token: Option<String>) -> Self {
        WireBackend {
            transport: Box::new(HttpTransport::new(Duration::from_secs(120))),
            endpoint: endpoint.into(),
            auth_token,
            max_attempts: 3,
            retry_delay: Duration::from_millis(250),
        }
    }

    pub fn with_transport(
        transport: Box<dyn Transport>,
        endpoint: impl Into<String>,
        auth_token: Option<String>,
    ) -> Self {
        WireBackend {
            transport,
            endpoint: endpoint.into(),
            auth_token,
            max_attempts: 3,
            retry_delay: Duration::from_millis(0),
        }
    }

    fn request_body(&self, request: &CompletionRequest) -> serde_json::Value {
        let stop: Vec<&str> = request.stop.as_deref().into_iter().collect();
        serde_json::json!({
            "prompt": request.prompt,
            "max_tokens": request.max_new_tokens,
            "temperature": 0,
            "stop": stop,
        })
    }
}

impl CompletionBackend for WireBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let body = self.request_body(request);
        let mut last_failure = String::new();
        for attempt in 1..=self.max_attempts {
            match self
                .transport
                .post_json(&self.endpoint, self.auth_token.as_deref(), &body)
            {
                Ok(reply) if reply.status == 200 => {
                    let parsed: WireCompletion = serde_json::from_str(&reply.body)
                        .map_err(|e| BackendError::Protocol(e.to_string()))?;
                    let text = strip_prompt_echo(&request.prompt, &parsed.text).to_string();
                    let finish_reason = match parsed.finish_reason.as_deref() {
                        Some("stop") => FinishReason::Stop,
                        Some("length") => FinishReason::Length,
                        // Servers differ here; fall back to inspecting the text.
                        _ => match &request.stop {
                            Some(stop) if text.ends_with(stop.as_str()) => FinishReason::Stop,
                            _ => FinishReason::Length,
                        },
                    };
                    return Ok(CompletionResponse {
                        text,
                        finish_reason,
                    });
                }
                Ok(reply) => {
                    return Err(BackendError::Server {
                        status: reply.status,
                        message: reply.body,
                    })
                }
                Err(message) => {
                    last_failure = message;
                    if attempt < self.max_attempts {
                        std::thread::sleep(self.retry_delay);
                    }
                }
            }
        }
        Err(BackendError::Transport {
            attempts: self.max_attempts,
            message: last_failure,
        })
    }

    fn identity(&self) -> String {
        format!("wire:{}", self.endpoint)
    }
}

/// Wraps a backend and collects every exchange so a run can be captured into
/// a replay store.
pub struct RecordingBackend<'a> {
    inner: &'a dyn CompletionBackend,
    log: std::sync::Mutex<HashMap<String, (String, String)>>,
}

impl<'a> RecordingBackend<'a> {
    pub fn new(inner: &'a dyn CompletionBackend) -> Self {
        RecordingBackend {
            inner,
            log: std::sync::Mutex::new(HashMap::new()),
        }
    }

    /// Recorded (prompt, response) pairs sorted by fingerprint.
    pub fn into_records(self) -> Vec<(String, String)> {
        let log = self.log.into_inner().expect("log lock");
        let mut entries: Vec<(String, (String, String))> = log.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries.into_iter().map(|(_, pair)| pair).collect()
    }

    /// Appends everything recorded so far to a store file.
    pub fn write_to(self, store_path: impl AsRef<Path>) -> Result<usize, BackendError> {
        let records = self.into_records();
        let n = records.len();
        for (prompt, response) in records {
            record_replay(&store_path, &prompt, &response)?;
        }
        Ok(n)
    }
}

impl CompletionBackend for RecordingBackend<'_> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let response = self.inner.complete(request)?;
        let fingerprint = prompt_fingerprint(&request.prompt);
        let mut log = self.log.lock().expect("log lock");
        if let Some((_, existing)) = log.get(&fingerprint) {
            if existing != &response.text {
                return Err(BackendError::ReplayConflict { fingerprint });
            }
        } else {
            log.insert(fingerprint, (request.prompt.clone(), response.text.clone()));
        }
        Ok(response)
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

/// Builds a store path's backend; shared by the CLI and tests.
pub fn open_replay(path: impl Into<PathBuf>) -> Result<ReplayBackend, BackendError> {
    ReplayBackend::open(path.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    const FIG_CUE_OUTPUT: &str = "Cues: [wissen], [Positionen]</s>";

    fn seeded_store(dir: &tempfile::TempDir, prompt: &str) -> std::path::PathBuf {
        let path = dir.path().join("store.jsonl");
        record_replay(&path, prompt, FIG_CUE_OUTPUT).unwrap();
        path
    }

    #[test]
    fn replay_returns_seeded_response_with_stop() {
        let dir = tempfile::tempdir().unwrap();
        let path = seeded_store(&dir, "PROMPT");
        let backend = ReplayBackend::open(&path).unwrap();
        let resp = backend
            .complete(&CompletionRequest::cue("PROMPT".into()))
            .unwrap();
        assert_eq!(resp.text, FIG_CUE_OUTPUT);
        assert_eq!(resp.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn replay_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = seeded_store(&dir, "PROMPT");
        let backend = ReplayBackend::open(&path).unwrap();
        let req = CompletionRequest::cue("PROMPT".into());
        assert_eq!(
            backend.complete(&req).unwrap(),
            backend.complete(&req).unwrap()
        );
    }

    #[test]
    fn replay_miss_names_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let path = seeded_store(&dir, "PROMPT");
        let backend = ReplayBackend::open(&path).unwrap();
        let err = backend
            .complete(&CompletionRequest::cue("OTHER".into()))
            .unwrap_err();
        match err {
            BackendError::ReplayMiss { fingerprint } => {
                assert_eq!(fingerprint, prompt_fingerprint("OTHER"));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn record_is_idempotent_for_identical_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        record_replay(&path, "P", "R").unwrap();
        record_replay(&path, "P", "R").unwrap();
        let store = ReplayStore::load(&path).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
    }

    #[test]
    fn conflicting_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        record_replay(&path, "P", "R1").unwrap();
        let err = record_replay(&path, "P", "R2").unwrap_err();
        assert!(matches!(err, BackendError::ReplayConflict { .. }));
    }

    #[test]
    fn prompt_echo_is_stripped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        record_replay(&path, "PROMPT", "PROMPT completion</s>").unwrap();
        let backend = ReplayBackend::open(&path).unwrap();
        let resp = backend
            .complete(&CompletionRequest::cue("PROMPT".into()))
            .unwrap();
        assert_eq!(resp.text, " completion</s>");
    }

    struct SpyTransport {
        bodies: std::sync::Arc<Mutex<Vec<serde_json::Value>>>,
        replies: Mutex<Vec<Result<TransportReply, String>>>,
    }

    impl SpyTransport {
        fn new(replies: Vec<Result<TransportReply, String>>) -> Self {
            SpyTransport {
                bodies: std::sync::Arc::new(Mutex::new(Vec::new())),
                replies: Mutex::new(replies),
            }
        }
    }

    impl Transport for SpyTransport {
        fn post_json(
            &self,
            _url: &str,
            _auth: Option<&str>,
            body: &serde_json::Value,
        ) -> Result<TransportReply, String> {
            self.bodies.lock().unwrap().push(body.clone());
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn ok_reply(text: &str) -> Result<TransportReply, String> {
        Ok(TransportReply {
            status: 200,
            body: serde_json::json!({ "text": text, "finish_reason": "stop" }).to_string(),
        })
    }

    #[test]
    fn wire_sends_greedy_parameters() {
        let spy = SpyTransport::new(vec![ok_reply("Cues: #UNK#</s>")]);
        let bodies = spy.bodies.clone();
        let backend =
            WireBackend::with_transport(Box::new(spy), "http://example/completions", None);
        let resp = backend
            .complete(&CompletionRequest::cue("PROMPT".into()))
            .unwrap();
        assert_eq!(resp.finish_reason, FinishReason::Stop);
        let bodies = bodies.lock().unwrap();
        assert_eq!(bodies.len(), 1);
        assert_eq!(bodies[0]["temperature"], 0);
        assert_eq!(bodies[0]["max_tokens"], 64);
        assert_eq!(bodies[0]["stop"], serde_json::json!(["</s>"]));
        assert_eq!(bodies[0]["prompt"], "PROMPT");
    }

    #[test]
    fn wire_retries_transport_failures_and_reports_attempts() {
        let spy = SpyTransport::new(vec![
            Err("connection refused".into()),
            Err("connection refused".into()),
            Err("connection refused".into()),
        ]);
        let backend = WireBackend::with_transport(Box::new(spy), "http://example", None);
        let err = backend
            .complete(&CompletionRequest::cue("P".into()))
            .unwrap_err();
        match err {
            BackendError::Transport { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn wire_recovers_after_transient_failure() {
        let spy = SpyTransport::new(vec![Err("reset".into()), ok_reply("Cues: #UNK#</s>")]);
        let backend = WireBackend::with_transport(Box::new(spy), "http://example", None);
        let resp = backend
            .complete(&CompletionRequest::cue("P".into()))
            .unwrap();
        assert_eq!(resp.text, "Cues: #UNK#</s>");
    }

    #[test]
    fn wire_surfaces_server_errors() {
        let spy = SpyTransport::new(vec![Ok(TransportReply {
            status: 500,
            body: "boom".into(),
        })]);
        let backend = WireBackend::with_transport(Box::new(spy), "http://example", None);
        let err = backend
            .complete(&CompletionRequest::cue("P".into()))
            .unwrap_err();
        match err {
            BackendError::Server { status, .. } => assert_eq!(status, 500),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn recording_backend_captures_exchanges() {
        let dir = tempfile::tempdir().unwrap();
        let seed = dir.path().join("seed.jsonl");
        record_replay(&seed, "P1", "R1").unwrap();
        record_replay(&seed, "P2", "R2").unwrap();
        let inner = ReplayBackend::open(&seed).unwrap();
        let recording = RecordingBackend::new(&inner);
        recording
            .complete(&CompletionRequest::cue("P1".into()))
            .unwrap();
        recording
            .complete(&CompletionRequest::cue("P2".into()))
            .unwrap();
        recording
            .complete(&CompletionRequest::cue("P1".into()))
            .unwrap();
        let out = dir.path().join("captured.jsonl");
        assert_eq!(recording.write_to(&out).unwrap(), 2);
        let store = ReplayStore::load(&out).unwrap();
        assert_eq!(store.get(&prompt_fingerprint("P1")), Some("R1"));
        assert_eq!(store.get(&prompt_fingerprint("P2")), Some("R2"));
    }
}
