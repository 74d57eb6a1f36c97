//! Prompt assembly and generation dispatch.
//!
//! Rendering fuses the classifier verdict, retrieved knowledge and the user
//! claim into one of three prompt modes, with retrieval toggleable. Wording
//! lives in versioned plain-text templates; rendering is a pure function of
//! (bundle, template set), so golden tests can pin exact bytes per version.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decision::Verdict;
use crate::error::{Error, Result};
use crate::knowledge::RetrievalResult;

pub const API_URL_ENV: &str = "VERIDEX_API_URL";
pub const API_KEY_ENV: &str = "VERIDEX_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    FewShot,
    Cot,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::ZeroShot, PromptMode::FewShot, PromptMode::Cot];

    pub fn name(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zero_shot",
            PromptMode::FewShot => "few_shot",
            PromptMode::Cot => "cot",
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt mode \"{s}\"")))
    }
}

/// A worked example for few-shot prompting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub claim: String,
    pub verdict: String,
    pub explanation: String,
}

/// Everything the renderer needs for one prompt.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub verdict: Verdict,
    pub knowledge: Vec<RetrievalResult>,
    pub query: String,
    pub mode: PromptMode,
    pub rag_enabled: bool,
    pub exemplars: Vec<Exemplar>,
}

/// The versioned template files, loaded once.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub version: String,
    zero_shot: String,
    few_shot: String,
    cot: String,
    verdict_section: String,
    knowledge_section: String,
    knowledge_item: String,
    exemplar_section: String,
    exemplar_item: String,
}

impl TemplateSet {
    /// The templates compiled into the binary.
    pub fn builtin() -> Self {
        TemplateSet {
            version: include_str!("../templates/VERSION").trim().to_string(),
            zero_shot: include_str!("../templates/zero_shot.txt").to_string(),
            few_shot: include_str!("../templates/few_shot.txt").to_string(),
            cot: include_str!("../templates/cot.txt").to_string(),
            verdict_section: include_str!("../templates/verdict_section.txt").to_string(),
            knowledge_section: include_str!("../templates/knowledge_section.txt").to_string(),
            knowledge_item: include_str!("../templates/knowledge_item.txt").to_string(),
            exemplar_section: include_str!("../templates/exemplar_section.txt").to_string(),
            exemplar_item: include_str!("../templates/exemplar_item.txt").to_string(),
        }
    }

    /// Load a template directory with the same file names as `templates/`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String> {
            std::fs::read_to_string(dir.join(name)).map_err(|e| {
                Error::Config(format!("template {} in {}: {e}", name, dir.display()))
            })
        };
        Ok(TemplateSet {
            version: read("VERSION")?.trim().to_string(),
            zero_shot: read("zero_shot.txt")?,
            few_shot: read("few_shot.txt")?,
            cot: read("cot.txt")?,
            verdict_section: read("verdict_section.txt")?,
            knowledge_section: read("knowledge_section.txt")?,
            knowledge_item: read("knowledge_item.txt")?,
            exemplar_section: read("exemplar_section.txt")?,
            exemplar_item: read("exemplar_item.txt")?,
        })
    }
}

fn substitute(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in pairs {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}

/// Render a section template and normalize its tail: empty body disappears,
/// anything else ends with exactly one blank line.
fn section(template: &str, pairs: &[(&str, &str)]) -> String {
    let rendered = substitute(template, pairs);
    let trimmed = rendered.trim_end();
    if trimmed.is_empty() {
        String::new()
    } else {
        format!("{trimmed}\n\n")
    }
}

/// Deterministic rendering of a bundle against a template set.
pub fn build_prompt(bundle: &PromptBundle, templates: &TemplateSet) -> Result<String> {
    if bundle.mode == PromptMode::FewShot && bundle.exemplars.is_empty() {
        return Err(Error::Config(
            "few-shot prompting requires at least one exemplar".into(),
        ));
    }

    let confidence_pct = format!("{:.1}", bundle.verdict.confidence * 100.0);
    let verdict_section = section(
        &templates.verdict_section,
        &[
            ("verdict_label", bundle.verdict.label_name()),
            ("confidence_pct", &confidence_pct),
        ],
    );

    let knowledge_section = if bundle.rag_enabled && !bundle.knowledge.is_empty() {
        let items: Vec<String> = bundle
            .knowledge
            .iter()
            .map(|hit| {
                substitute(
                    &templates.knowledge_item,
                    &[
                        ("source_id", hit.chunk.source_id.as_str()),
                        ("chunk_text", hit.chunk.text.as_str()),
                    ],
                )
                .trim_end()
                .to_string()
            })
            .collect();
        section(&templates.knowledge_section, &[("items", items.join("\n").as_str())])
    } else {
        String::new()
    };

    let exemplar_section = if bundle.mode == PromptMode::FewShot {
        let items: Vec<String> = bundle
            .exemplars
            .iter()
            .map(|ex| {
                substitute(
                    &templates.exemplar_item,
                    &[
                        ("exemplar_claim", ex.claim.as_str()),
                        ("exemplar_verdict", ex.verdict.as_str()),
                        ("exemplar_explanation", ex.explanation.as_str()),
                    ],
                )
                .trim_end()
                .to_string()
            })
            .collect();
        section(&templates.exemplar_section, &[("items", items.join("\n\n").as_str())])
    } else {
        String::new()
    };

    let body = match bundle.mode {
        PromptMode::ZeroShot => &templates.zero_shot,
        PromptMode::FewShot => &templates.few_shot,
        PromptMode::Cot => &templates.cot,
    };
    Ok(substitute(
        body,
        &[
            ("verdict_section", verdict_section.as_str()),
            ("knowledge_section", knowledge_section.as_str()),
            ("exemplar_section", exemplar_section.as_str()),
            ("claim", bundle.query.as_str()),
        ],
    ))
}

/// The first k exemplars in pool order.
pub fn select_exemplars(pool: &[Exemplar], k: usize) -> Result<Vec<Exemplar>> {
    if k == 0 || k > pool.len() {
        return Err(Error::Config(format!(
            "cannot select {k} exemplars from a pool of {}",
            pool.len()
        )));
    }
    Ok(pool[..k].to_vec())
}

/// Read an exemplar pool from JSONL.
pub fn load_exemplars(path: impl AsRef<Path>) -> Result<Vec<Exemplar>> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::data(format!("cannot open exemplars {}: {e}", path.as_ref().display())))?;
    let mut pool = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Exemplar = serde_json::from_str(line)
            .map_err(|e| Error::data_at(idx + 1, format!("invalid exemplar: {e}")))?;
        pool.push(ex);
    }
    Ok(pool)
}

// ---------------------------------------------------------------------------
// Generation backends
// ---------------------------------------------------------------------------

/// One request to the text-generation backend.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub model: String,
    pub max_tokens: usize,
}

impl GenerationRequest {
    pub fn new(prompt: String, model: String) -> Self {
        GenerationRequest {
            prompt,
            temperature: 0.0,
            model,
            max_tokens: 1024,
        }
    }
}

/// A completed generation.
#[derive(Debug, Clone)]
pub struct DebunkResponse {
    pub explanation: String,
    /// Verdict echoed from the bundle by the orchestration layer.
    pub verdict: Option<String>,
    pub model_id: String,
    pub latency_ms: u128,
    /// Raw reply for audit.
    pub transcript: String,
}

pub trait GenerationBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<DebunkResponse>;
    fn name(&self) -> &'static str;
}

/// Offline backend with canned responses keyed by prompt hash. Read-only
/// after construction and therefore thread-safe.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    responses: HashMap<String, String>,
}

impl MockBackend {
    pub fn new() -> Self {
        MockBackend::default()
    }

    pub fn prompt_hash(prompt: &str) -> String {
        let digest = Sha256::digest(prompt.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn register(&mut self, prompt: &str, response: impl Into<String>) {
        self.responses
            .insert(Self::prompt_hash(prompt), response.into());
    }

    pub fn register_hash(&mut self, hash: impl Into<String>, response: impl Into<String>) {
        self.responses.insert(hash.into(), response.into());
    }

    /// JSONL of `{"prompt_hash": .., "response": ..}` records.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            prompt_hash: String,
            response: String,
        }
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut backend = MockBackend::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: Entry = serde_json::from_str(line)
                .map_err(|e| Error::data_at(idx + 1, format!("invalid canned response: {e}")))?;
            backend.register_hash(entry.prompt_hash, entry.response);
        }
        Ok(backend)
    }
}

impl GenerationBackend for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<DebunkResponse> {
        let start = Instant::now();
        let hash = Self::prompt_hash(&request.prompt);
        let text = self.responses.get(&hash).ok_or_else(|| {
            Error::Backend(format!("no canned response registered for prompt hash {hash}"))
        })?;
        if text.is_empty() {
            return Err(Error::Backend("canned response is empty".into()));
        }
        Ok(DebunkResponse {
            explanation: text.clone(),
            verdict: None,
            model_id: "mock".to_string(),
            latency_ms: start.elapsed().as_millis(),
            transcript: text.clone(),
        })
    }

    fn name(&self) -> &'static str {
        "mock"
    }
}

/// Counting semaphore bounding in-flight HTTP requests.
struct InFlightLimit {
    available: Mutex<usize>,
    signal: Condvar,
}

impl InFlightLimit {
    fn new(limit: usize) -> Self {
        InFlightLimit {
            available: Mutex::new(limit.max(1)),
            signal: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut slots = self.available.lock().expect("limiter poisoned");
        while *slots == 0 {
            slots = self.signal.wait(slots).expect("limiter poisoned");
        }
        *slots -= 1;
        InFlightGuard { limit: self }
    }
}

struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut slots = self.limit.available.lock().expect("limiter poisoned");
        *slots += 1;
        self.limit.signal.notify_one();
    }
}

/// JSON chat-completion client with retry, timeout and an in-flight bound.
pub struct HttpBackend {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    limiter: InFlightLimit,
}

impl HttpBackend {
    pub fn new(
        base_url: String,
        api_key: String,
        timeout: Duration,
        max_in_flight: usize,
    ) -> Self {
        HttpBackend {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            base_url,
            api_key,
            max_attempts: 3,
            backoff_base: Duration::from_millis(100),
            limiter: InFlightLimit::new(max_in_flight),
        }
    }

    /// Credentials from `VERIDEX_API_URL` / `VERIDEX_API_KEY`.
    pub fn from_env(timeout: Duration, max_in_flight: usize) -> Result<Self> {
        let base_url = std::env::var(API_URL_ENV)
            .map_err(|_| Error::Backend(format!("missing endpoint: set {API_URL_ENV}")))?;
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::Backend(format!("missing credentials: set {API_KEY_ENV}")))?;
        Ok(HttpBackend::new(base_url, api_key, timeout, max_in_flight))
    }

    fn attempt(&self, request: &GenerationRequest) -> Result<(String, String)> {
        let payload = serde_json::json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let response = self
            .agent
            .post(&self.base_url)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .set("Content-Type", "application/json")
            .send_json(payload);

        match response {
            Ok(resp) => {
                let body = resp
                    .into_string()
                    .map_err(|e| Error::Backend(format!("unreadable response body: {e}")))?;
                let value: serde_json::Value = serde_json::from_str(&body)
                    .map_err(|e| Error::Backend(format!("non-JSON response: {e}")))?;
                let text = value["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(|| {
                        Error::Backend(format!("response missing choices[0].message.content: {body}"))
                    })?
                    .to_string();
                if text.is_empty() {
                    return Err(Error::Backend("backend returned an empty explanation".into()));
                }
                Ok((text, body))
            }
            Err(ureq::Error::Status(401, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                Err(Error::Backend(format!(
                    "credentials rejected (HTTP 401): set {API_KEY_ENV}; body: {body}"
                )))
            }
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                Err(Error::Backend(format!("HTTP {code}: {body}")))
            }
            Err(ureq::Error::Transport(t)) => Err(Error::Backend(format!("transport: {t}"))),
        }
    }
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<DebunkResponse> {
        let _slot = self.limiter.acquire();
        let start = Instant::now();
        let mut last_err = None;
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
            }
            match self.attempt(request) {
                Ok((text, transcript)) => {
                    return Ok(DebunkResponse {
                        explanation: text,
                        verdict: None,
                        model_id: request.model.clone(),
                        latency_ms: start.elapsed().as_millis(),
                        transcript,
                    });
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(Error::Backend(format!(
            "all {} attempts failed; last error: {}",
            self.max_attempts,
            last_err.expect("at least one attempt ran")
        )))
    }

    fn name(&self) -> &'static str {
        "http"
    }
}
