//! Chat-completion client shared by every judge-driven flow.
//!
//! Requests are content-addressed: a SHA-256 digest over a canonical
//! serialization keys a disk cache, so a benchmark run at temperature 0
//! is reproducible and a re-run touches no backend at all. Backends are
//! pluggable — a live OpenAI-compatible endpoint, a replay fixture file,
//! or an in-process script with fault injection — behind one `complete`
//! call with bounded retries, single-flight coalescing, and a cap on
//! concurrent live calls.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Agent roles a request can run under; each maps to one configured
/// backend so different pipeline stages can use different models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Reasoner,
    Calibrator,
    Summarizer,
    Extractor,
    Scorer,
    SemanticJudge,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Reasoner,
        Role::Calibrator,
        Role::Summarizer,
        Role::Extractor,
        Role::Scorer,
        Role::SemanticJudge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Reasoner => "reasoner",
            Role::Calibrator => "calibrator",
            Role::Summarizer => "summarizer",
            Role::Extractor => "extractor",
            Role::Scorer => "scorer",
            Role::SemanticJudge => "semantic_judge",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One chat message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Message {
        Message { speaker: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Message {
        Message { speaker: "user".into(), content: content.into() }
    }
}

/// A completion request. Hashing covers exactly these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub role: Role,
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl JudgeRequest {
    pub fn new(role: Role, model: impl Into<String>, messages: Vec<Message>) -> JudgeRequest {
        JudgeRequest {
            role,
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: 2048,
        }
    }

    fn validate(&self) -> Result<(), JudgeError> {
        if self.messages.is_empty() {
            return Err(JudgeError::InvalidRequest { detail: "messages empty".into() });
        }
        if !(self.temperature >= 0.0) {
            return Err(JudgeError::InvalidRequest {
                detail: format!("temperature {} not a real >= 0", self.temperature),
            });
        }
        if self.max_tokens == 0 {
            return Err(JudgeError::InvalidRequest { detail: "max_tokens must be positive".into() });
        }
        Ok(())
    }
}

/// A completion result with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub text: String,
    /// Token counts as reported by the provider; empty when unknown.
    #[serde(default)]
    pub usage: BTreeMap<String, u64>,
    /// Opaque provider fields (model id, response id, ...).
    #[serde(default)]
    pub provider_meta: BTreeMap<String, String>,
    /// True when served from the content-addressed cache.
    pub cache_hit: bool,
    /// Backend attempts beyond the first for this call; 0 on cache hits.
    pub retries: u32,
}

/// Client errors. `RetriesExhausted` wraps whatever kept failing.
#[derive(Clone, Debug, PartialEq, Error)]
pub enum JudgeError {
    #[error("invalid request: {detail}")]
    InvalidRequest { detail: String },
    #[error("no backend configured for role {0}")]
    NoBackend(Role),
    #[error("backend timeout")]
    Timeout,
    #[error("backend returned HTTP status {0}")]
    HttpStatus(u16),
    #[error("malformed response body: {detail}")]
    MalformedBody { detail: String },
    #[error("replay fixture has no entry for key {key}")]
    ReplayMiss { key: String },
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("scripted backend ran out of replies")]
    ScriptExhausted,
    #[error("cache io error at {path}: {detail}")]
    CacheIo { path: String, detail: String },
    #[error("auth environment variable {0} is not set")]
    MissingAuth(String),
}

/// One step of a scripted backend: either a success (raw wire body or
/// plain text) or an injected fault.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptedReply {
    /// Plain response text, wrapped into a wire body internally.
    Text { text: String },
    /// A raw wire body, run through normal response parsing.
    Body { body: String },
    /// An HTTP error status.
    Status { status: u16 },
    /// A network timeout.
    Timeout,
}

/// Where completions come from.
#[derive(Debug)]
pub enum Backend {
    /// An OpenAI-compatible chat-completions endpoint. The bearer token is
    /// read from the named environment variable at call time — credential
    /// material never lives in config values or fixtures.
    Live { base_url: String, auth_env: String },
    /// Recorded responses keyed by cache digest. A missing key is an
    /// error, never a silent fallthrough to the network.
    Replay { fixtures: HashMap<String, String> },
    /// Canned replies consumed in order, for tests and dry runs.
    Scripted { script: Mutex<VecDeque<ScriptedReply>> },
}

impl Backend {
    pub fn scripted(replies: Vec<ScriptedReply>) -> Backend {
        Backend::Scripted { script: Mutex::new(replies.into_iter().collect()) }
    }

    /// Loads a replay backend from a JSONL file of `{key, response_text}`.
    pub fn replay_from_path(path: &Path) -> Result<Backend, JudgeError> {
        let text = fs::read_to_string(path).map_err(|e| JudgeError::CacheIo {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Backend::replay_from_jsonl(&text)
    }

    pub fn replay_from_jsonl(text: &str) -> Result<Backend, JudgeError> {
        #[derive(Deserialize)]
        struct Row {
            key: String,
            response_text: String,
        }
        let mut fixtures = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line).map_err(|e| JudgeError::MalformedBody {
                detail: format!("replay fixture line {}: {e}", idx + 1),
            })?;
            fixtures.insert(row.key, row.response_text);
        }
        Ok(Backend::Replay { fixtures })
    }
}

/// Content-addressed cache key: SHA-256 over the canonical serialization
/// of the request, as 64 hex characters.
///
/// Canonical means: fields serialized in declaration order, numbers
/// re-printed from their parsed values. Two JSON spellings of the same
/// request (permuted keys, `0` vs `0.0`) therefore collide to one digest.
pub fn cache_key(req: &JudgeRequest) -> String {
    let canonical = serde_json::to_string(req).expect("request serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(digest)
}

/// Builds the fixture line replaying a request would need.
pub fn replay_fixture_line(req: &JudgeRequest, response_text: &str) -> String {
    serde_json::json!({ "key": cache_key(req), "response_text": response_text }).to_string()
}

/// Retry tuning. Backoff doubles per attempt from `base_ms` up to
/// `cap_ms`, plus a deterministic jitter derived from the cache key so
/// two processes retrying the same request do not march in lockstep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_ms: u64,
    pub cap_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_ms: 200, cap_ms: 5_000 }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32, key: &str) -> Duration {
        let exp = self.base_ms.saturating_mul(1u64 << attempt.min(16)).min(self.cap_ms);
        let jitter_source = key.as_bytes().get(attempt as usize % key.len().max(1)).copied();
        let jitter = match (jitter_source, self.base_ms) {
            (Some(b), base) if base > 0 => u64::from(b) % base,
            _ => 0,
        };
        Duration::from_millis(exp + jitter)
    }

    fn is_retryable(err: &JudgeError) -> bool {
        match err {
            JudgeError::Timeout => true,
            JudgeError::HttpStatus(code) => *code == 429 || (500..=599).contains(code),
            _ => false,
        }
    }
}

/// Client options beyond the backends themselves.
#[derive(Clone, Debug)]
pub struct ClientOptions {
    /// Disk cache directory; `None` disables persistence.
    pub cache_dir: Option<PathBuf>,
    pub retry: RetryPolicy,
    /// Cap on concurrent live calls.
    pub parallelism: usize,
    /// Cache non-zero-temperature requests too. Off by default: sampled
    /// output is not deterministic, so caching it silently would turn one
    /// draw into the answer forever.
    pub pin_nonzero_temperature: bool,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            cache_dir: None,
            retry: RetryPolicy::default(),
            parallelism: 8,
            pin_nonzero_temperature: false,
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Semaphore {
        Semaphore { permits: Mutex::new(permits.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

/// The shared client. Cheap to share by reference across threads.
pub struct JudgeClient {
    backends: BTreeMap<Role, Backend>,
    options: ClientOptions,
    live_permits: Semaphore,
    inflight: Mutex<HashSet<String>>,
    inflight_cv: Condvar,
    backend_calls: AtomicU64,
}

impl JudgeClient {
    pub fn new(backends: BTreeMap<Role, Backend>, options: ClientOptions) -> JudgeClient {
        let permits = options.parallelism.max(1);
        JudgeClient {
            backends,
            options,
            live_permits: Semaphore::new(permits),
            inflight: Mutex::new(HashSet::new()),
            inflight_cv: Condvar::new(),
            backend_calls: AtomicU64::new(0),
        }
    }

    /// Total backend attempts made so far (cache hits excluded). One
    /// retried call counts each attempt.
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.backends.contains_key(&role)
    }

    /// True when every configured backend is a replay fixture — the
    /// requirement for `--dry-run`.
    pub fn replay_only(&self) -> bool {
        self.backends.values().all(|b| matches!(b, Backend::Replay { .. }))
    }

    /// Completes a request: cache, then backend with retries.
    ///
    /// Identical concurrent requests coalesce to a single backend call;
    /// the others block until the winner publishes to the cache. Requests
    /// with temperature > 0 skip the cache entirely (reads and writes)
    /// unless `pin_nonzero_temperature` is set.
    pub fn complete(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        req.validate()?;
        let backend = self.backends.get(&req.role).ok_or(JudgeError::NoBackend(req.role))?;
        let key = cache_key(req);
        let cacheable = req.temperature == 0.0 || self.options.pin_nonzero_temperature;

        if !cacheable {
            let (body, retries) = self.call_backend(backend, req, &key)?;
            let mut resp = parse_wire_body(&body)?;
            resp.retries = retries;
            return Ok(resp);
        }

        if let Some(hit) = self.cache_read(&key)? {
            return Ok(hit);
        }

        // Single-flight: first caller for a key does the work; the rest
        // wait, then re-read the cache the winner filled.
        let mut inflight = self.inflight.lock().unwrap();
        while inflight.contains(&key) {
            inflight = self.inflight_cv.wait(inflight).unwrap();
        }
        if let Some(hit) = self.cache_read(&key)? {
            return Ok(hit);
        }
        inflight.insert(key.clone());
        drop(inflight);

        // No early returns between here and the inflight cleanup: a `?`
        // would leave the key marked busy and strand every waiter.
        let result = self.call_backend(backend, req, &key).and_then(|(body, retries)| {
            self.cache_write(&key, &body)?;
            let mut resp = parse_wire_body(&body)?;
            resp.retries = retries;
            Ok(resp)
        });

        let mut inflight = self.inflight.lock().unwrap();
        inflight.remove(&key);
        self.inflight_cv.notify_all();
        drop(inflight);

        result
    }

    /// One backend call with retries; returns the raw wire body and how
    /// many retries it took.
    fn call_backend(
        &self,
        backend: &Backend,
        req: &JudgeRequest,
        key: &str,
    ) -> Result<(String, u32), JudgeError> {
        let budget = 1 + self.options.retry.max_retries;
        let mut last_err: Option<JudgeError> = None;
        for attempt in 0..budget {
            if attempt > 0 {
                let delay = self.options.retry.backoff(attempt - 1, key);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.dispatch(backend, req, key) {
                Ok(body) => return Ok((body, attempt)),
                Err(e) if RetryPolicy::is_retryable(&e) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        let last = last_err.expect("loop ran at least once");
        Err(JudgeError::RetriesExhausted { attempts: budget, last: last.to_string() })
    }

    fn dispatch(&self, backend: &Backend, req: &JudgeRequest, key: &str) -> Result<String, JudgeError> {
        match backend {
            Backend::Scripted { script } => {
                let reply = script
                    .lock()
                    .unwrap()
                    .pop_front()
                    .ok_or(JudgeError::ScriptExhausted)?;
                match reply {
                    ScriptedReply::Text { text } => Ok(wrap_wire_body(&text)),
                    ScriptedReply::Body { body } => Ok(body),
                    ScriptedReply::Status { status } => Err(JudgeError::HttpStatus(status)),
                    ScriptedReply::Timeout => Err(JudgeError::Timeout),
                }
            }
            Backend::Replay { fixtures } => fixtures
                .get(key)
                .map(|text| wrap_wire_body(text))
                .ok_or_else(|| JudgeError::ReplayMiss { key: key.to_owned() }),
            Backend::Live { base_url, auth_env } => {
                let _permit = self.live_permits.acquire();
                let token = std::env::var(auth_env)
                    .map_err(|_| JudgeError::MissingAuth(auth_env.clone()))?;
                live_call(base_url, &token, req)
            }
        }
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.options.cache_dir.as_ref().map(|d| d.join(key))
    }

    fn cache_read(&self, key: &str) -> Result<Option<JudgeResponse>, JudgeError> {
        let Some(path) = self.cache_path(key) else { return Ok(None) };
        match fs::read_to_string(&path) {
            Ok(body) => {
                let mut resp = parse_wire_body(&body)?;
                resp.cache_hit = true;
                Ok(Some(resp))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(JudgeError::CacheIo {
                path: path.display().to_string(),
                detail: e.to_string(),
            }),
        }
    }

    fn cache_write(&self, key: &str, body: &str) -> Result<(), JudgeError> {
        let Some(path) = self.cache_path(key) else { return Ok(()) };
        let io_err = |e: std::io::Error| JudgeError::CacheIo {
            path: path.display().to_string(),
            detail: e.to_string(),
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        // Write-then-rename so a concurrent reader never sees a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, body).map_err(io_err)?;
        fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(())
    }
}

/// Wire body for the OpenAI-compatible chat-completions format.
fn wrap_wire_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{ "message": { "content": text } }],
        "usage": {}
    })
    .to_string()
}

/// Parses a chat-completions body into a response. `cache_hit` and
/// `retries` are left at their zero values for the caller to fill.
fn parse_wire_body(body: &str) -> Result<JudgeResponse, JudgeError> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| JudgeError::MalformedBody { detail: e.to_string() })?;
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .ok_or_else(|| JudgeError::MalformedBody {
            detail: "missing choices[0].message.content".into(),
        })?;
    if text.is_empty() {
        return Err(JudgeError::MalformedBody { detail: "empty response text".into() });
    }
    let mut usage = BTreeMap::new();
    if let Some(map) = value.get("usage").and_then(|v| v.as_object()) {
        for (k, v) in map {
            if let Some(n) = v.as_u64() {
                usage.insert(k.clone(), n);
            }
        }
    }
    let mut provider_meta = BTreeMap::new();
    for field in ["model", "id"] {
        if let Some(s) = value.get(field).and_then(|v| v.as_str()) {
            provider_meta.insert(field.to_owned(), s.to_owned());
        }
    }
    Ok(JudgeResponse {
        text: text.to_owned(),
        usage,
        provider_meta,
        cache_hit: false,
        retries: 0,
    })
}

fn live_call(base_url: &str, token: &str, req: &JudgeRequest) -> Result<String, JudgeError> {
    let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));
    let payload = serde_json::json!({
        "model": req.model,
        "messages": req
            .messages
            .iter()
            .map(|m| serde_json::json!({ "role": m.speaker, "content": m.content }))
            .collect::<Vec<_>>(),
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    });
    let response = ureq::post(&url)
        .set("Authorization", &format!("Bearer {token}"))
        .set("Content-Type", "application/json")
        .send_string(&payload.to_string());
    match response {
        Ok(resp) => {
            let mut body = String::new();
            resp.into_reader()
                .take(16 * 1024 * 1024)
                .read_to_string(&mut body)
                .map_err(|e| JudgeError::MalformedBody { detail: e.to_string() })?;
            Ok(body)
        }
        Err(ureq::Error::Status(code, _)) => Err(JudgeError::HttpStatus(code)),
        Err(ureq::Error::Transport(t)) => {
            if t.kind() == ureq::ErrorKind::Io {
                Err(JudgeError::Timeout)
            } else {
                Err(JudgeError::MalformedBody { detail: t.to_string() })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn req(role: Role, content: &str) -> JudgeRequest {
        JudgeRequest::new(role, "test-model", vec![Message::user(content)])
    }

    fn scripted_client(replies: Vec<ScriptedReply>, cache: Option<PathBuf>) -> JudgeClient {
        let mut backends = BTreeMap::new();
        backends.insert(Role::Scorer, Backend::scripted(replies));
        JudgeClient::new(
            backends,
            ClientOptions {
                cache_dir: cache,
                retry: RetryPolicy { max_retries: 3, base_ms: 0, cap_ms: 0 },
                ..ClientOptions::default()
            },
        )
    }

    #[test]
    fn cache_key_is_stable_and_field_sensitive() {
        let a = req(Role::Scorer, "hello");
        let b = req(Role::Scorer, "hello");
        assert_eq!(cache_key(&a), cache_key(&b));
        assert_eq!(cache_key(&a).len(), 64);

        let mut warm = req(Role::Scorer, "hello");
        warm.temperature = 0.7;
        assert_ne!(cache_key(&a), cache_key(&warm));

        let mut other = req(Role::Scorer, "hello");
        other.model = "other-model".into();
        assert_ne!(cache_key(&a), cache_key(&other));
    }

    #[test]
    fn cache_key_ignores_json_spelling() {
        let spelled_a: JudgeRequest = serde_json::from_str(
            r#"{"role":"scorer","model":"m","messages":[{"speaker":"user","content":"x"}],"temperature":0,"max_tokens":100}"#,
        )
        .unwrap();
        let spelled_b: JudgeRequest = serde_json::from_str(
            r#"{"max_tokens":100,"temperature":0.0,"messages":[{"content":"x","speaker":"user"}],"model":"m","role":"scorer"}"#,
        )
        .unwrap();
        assert_eq!(cache_key(&spelled_a), cache_key(&spelled_b));
    }

    #[test]
    fn scripted_reply_then_cache_hit() {
        let dir = tempfile::tempdir().unwrap();
        let client = scripted_client(
            vec![ScriptedReply::Text { text: "judged".into() }],
            Some(dir.path().to_path_buf()),
        );
        let r = req(Role::Scorer, "grade this");

        let first = client.complete(&r).unwrap();
        assert_eq!(first.text, "judged");
        assert!(!first.cache_hit);
        assert_eq!(client.backend_calls(), 1);

        // Second identical call: served from cache, zero backend calls.
        let second = client.complete(&r).unwrap();
        assert_eq!(second.text, "judged");
        assert!(second.cache_hit);
        assert_eq!(client.backend_calls(), 1);
    }

    #[test]
    fn warm_cache_survives_a_new_client() {
        let dir = tempfile::tempdir().unwrap();
        let r = req(Role::Scorer, "grade this");
        {
            let client = scripted_client(
                vec![ScriptedReply::Text { text: "judged".into() }],
                Some(dir.path().to_path_buf()),
            );
            client.complete(&r).unwrap();
        }
        // Fresh client, empty script: only the cache can answer.
        let client = scripted_client(vec![], Some(dir.path().to_path_buf()));
        let resp = client.complete(&r).unwrap();
        assert!(resp.cache_hit);
        assert_eq!(resp.text, "judged");
        assert_eq!(client.backend_calls(), 0);
    }

    #[test]
    fn fault_script_recovers_with_recorded_retries() {
        let client = scripted_client(
            vec![
                ScriptedReply::Status { status: 429 },
                ScriptedReply::Status { status: 429 },
                ScriptedReply::Text { text: "ok".into() },
            ],
            None,
        );
        let resp = client.complete(&req(Role::Scorer, "x")).unwrap();
        assert_eq!(resp.text, "ok");
        assert_eq!(resp.retries, 2);
        assert_eq!(client.backend_calls(), 3);
    }

    #[test]
    fn retry_budget_is_bounded() {
        let client = scripted_client(
            vec![
                ScriptedReply::Status { status: 503 },
                ScriptedReply::Status { status: 503 },
                ScriptedReply::Status { status: 503 },
                ScriptedReply::Status { status: 503 },
                ScriptedReply::Text { text: "never reached".into() },
            ],
            None,
        );
        let err = client.complete(&req(Role::Scorer, "x")).unwrap_err();
        assert!(matches!(err, JudgeError::RetriesExhausted { attempts: 4, .. }));
        // 1 initial + 3 retries, never the fifth script entry.
        assert_eq!(client.backend_calls(), 4);
    }

    #[test]
    fn non_retryable_faults_fail_fast() {
        let client = scripted_client(vec![ScriptedReply::Status { status: 401 }], None);
        let err = client.complete(&req(Role::Scorer, "x")).unwrap_err();
        assert_eq!(err, JudgeError::HttpStatus(401));
        assert_eq!(client.backend_calls(), 1);

        let client = scripted_client(vec![ScriptedReply::Body { body: "not json".into() }], None);
        let err = client.complete(&req(Role::Scorer, "x")).unwrap_err();
        assert!(matches!(err, JudgeError::MalformedBody { .. }));
    }

    #[test]
    fn timeouts_are_retryable() {
        let client = scripted_client(
            vec![ScriptedReply::Timeout, ScriptedReply::Text { text: "late".into() }],
            None,
        );
        let resp = client.complete(&req(Role::Scorer, "x")).unwrap();
        assert_eq!(resp.text, "late");
        assert_eq!(resp.retries, 1);
    }

    #[test]
    fn replay_hits_and_misses() {
        let r = req(Role::Scorer, "known");
        let line = replay_fixture_line(&r, "replayed answer");
        let backend = Backend::replay_from_jsonl(&line).unwrap();
        let mut backends = BTreeMap::new();
        backends.insert(Role::Scorer, backend);
        let client = JudgeClient::new(backends, ClientOptions::default());

        assert_eq!(client.complete(&r).unwrap().text, "replayed answer");
        let miss = client.complete(&req(Role::Scorer, "unknown")).unwrap_err();
        assert!(matches!(miss, JudgeError::ReplayMiss { .. }));
        assert!(client.replay_only());
    }

    #[test]
    fn nonzero_temperature_bypasses_cache_unless_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let mut warm = req(Role::Scorer, "sample");
        warm.temperature = 0.9;

        let client = scripted_client(
            vec![
                ScriptedReply::Text { text: "draw one".into() },
                ScriptedReply::Text { text: "draw two".into() },
            ],
            Some(dir.path().to_path_buf()),
        );
        assert_eq!(client.complete(&warm).unwrap().text, "draw one");
        assert_eq!(client.complete(&warm).unwrap().text, "draw two");
        assert_eq!(client.backend_calls(), 2);

        // Pinned: the first draw is cached and reused.
        let mut backends = BTreeMap::new();
        backends.insert(
            Role::Scorer,
            Backend::scripted(vec![ScriptedReply::Text { text: "pinned draw".into() }]),
        );
        let client = JudgeClient::new(
            backends,
            ClientOptions {
                cache_dir: Some(dir.path().join("pinned")),
                pin_nonzero_temperature: true,
                ..ClientOptions::default()
            },
        );
        assert_eq!(client.complete(&warm).unwrap().text, "pinned draw");
        let again = client.complete(&warm).unwrap();
        assert!(again.cache_hit);
        assert_eq!(client.backend_calls(), 1);
    }

    #[test]
    fn concurrent_identical_requests_coalesce_to_one_call() {
        let dir = tempfile::tempdir().unwrap();
        let client = Arc::new(scripted_client(
            vec![ScriptedReply::Text { text: "single".into() }],
            Some(dir.path().to_path_buf()),
        ));
        let r = req(Role::Scorer, "same request");

        let handles: Vec<_> = (0..32)
            .map(|_| {
                let client = Arc::clone(&client);
                let r = r.clone();
                std::thread::spawn(move || client.complete(&r).unwrap().text)
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), "single");
        }
        assert_eq!(client.backend_calls(), 1, "single-flight must coalesce");
    }

    #[test]
    fn unconfigured_role_and_bad_requests_are_rejected() {
        let client = scripted_client(vec![], None);
        let err = client.complete(&req(Role::Reasoner, "x")).unwrap_err();
        assert_eq!(err, JudgeError::NoBackend(Role::Reasoner));

        let mut bad = req(Role::Scorer, "x");
        bad.messages.clear();
        assert!(matches!(
            client.complete(&bad).unwrap_err(),
            JudgeError::InvalidRequest { .. }
        ));
        let mut bad = req(Role::Scorer, "x");
        bad.temperature = f64::NAN;
        assert!(matches!(
            client.complete(&bad).unwrap_err(),
            JudgeError::InvalidRequest { .. }
        ));
    }
}
