//! LLM-prompted PII screening: prompt construction, lenient response
//! parsing, and a bounded-concurrency client for chat-completion endpoints.
//!
//! Reports carry the model's raw flags. They are not human-verified, and
//! LLM screeners are known to flag many false positives (public figures,
//! fictional names, generic job titles), so counts are an upper bound on
//! real PII.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, InstructionRecord};
use crate::error::{Error, Result};

const SCAFFOLD: &str = "1. For the given instruction from a user (denoted by INSTRUCTION), identify the following personally identifiable information.

\ta. The full names of real individuals.
\t
\tb. Number or code that identifies entities in real word, such as phone number, email address, personal or organization website.
\t
\tc. Specific places and locations, such as: cities, areas, named infrastructures (bus stops, bridges, etc.).
\t
\td. Names of organisations, such as companies, schools, universities.
\t
\te. Occupational titles, such as job names, position names.
\t
\tf. Description of a specific time, such as October 3, 2018 or 13th June.
\t
\t
2. List the answer in the following format: [[catergory]]: personally identifiable information.

3. If a personally identifiable information is mentioned multiple times, only count it once.

4. Do not include personally identifiable information in public articles (such as news) or fiction stories.
";

const INSTRUCTION_KEY: &str = "INSTRUCTION = ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PiiCategory {
    #[serde(rename = "a")]
    FullName,
    #[serde(rename = "b")]
    Identifier,
    #[serde(rename = "c")]
    Location,
    #[serde(rename = "d")]
    Organisation,
    #[serde(rename = "e")]
    Occupation,
    #[serde(rename = "f")]
    Time,
}

impl PiiCategory {
    pub const ALL: [PiiCategory; 6] = [
        PiiCategory::FullName,
        PiiCategory::Identifier,
        PiiCategory::Location,
        PiiCategory::Organisation,
        PiiCategory::Occupation,
        PiiCategory::Time,
    ];

    pub fn letter(self) -> char {
        (b'a' + self as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.letter() == c.to_ascii_lowercase())
    }

    pub fn label(self) -> &'static str {
        match self {
            PiiCategory::FullName => "full names",
            PiiCategory::Identifier => "unique identifiers",
            PiiCategory::Location => "locations",
            PiiCategory::Organisation => "organisations",
            PiiCategory::Occupation => "occupational titles",
            PiiCategory::Time => "times",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiFinding {
    pub category: PiiCategory,
    pub span_text: String,
    pub record_id: String,
}

/// Screening prompt for one record. The record text is written as a JSON
/// string literal so it stays on one line whatever it contains;
/// [`extract_instruction`] inverts it.
pub fn build_prompt(record: &InstructionRecord, demonstrations: &str) -> String {
    let mut prompt = String::from(SCAFFOLD);
    prompt.push_str("\n\n\n");
    let demos = demonstrations.trim();
    if !demos.is_empty() {
        prompt.push_str("DEMONSTRATIONS:  ");
        prompt.push_str(demos);
        prompt.push_str("\n\n\n");
    }
    prompt.push_str(INSTRUCTION_KEY);
    prompt.push_str(&serde_json::Value::String(record.text.clone()).to_string());
    prompt.push_str("\n\nRESULT:\n");
    prompt
}

/// Recovers the record text embedded by [`build_prompt`].
pub fn extract_instruction(prompt: &str) -> Option<String> {
    let line = prompt.lines().rev().find_map(|l| l.strip_prefix(INSTRUCTION_KEY))?;
    serde_json::from_str(line).ok()
}

/// One finding per line, in the format the prompt asks for.
pub fn format_findings(findings: &[PiiFinding]) -> String {
    findings.iter().map(|f| format!("[[{}]]: {}\n", f.category.letter(), f.span_text)).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedResponse {
    pub findings: Vec<PiiFinding>,
    pub warnings: Vec<String>,
}

fn marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\[([^\]]*)\]\]\s*:").expect("static regex"))
}

/// Lenient parse: every `[[x]]: text` segment with a known category becomes
/// a finding; anything else is reported as a warning.
pub fn parse_response(text: &str, record_id: &str) -> ParsedResponse {
    let mut out = ParsedResponse::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let marks: Vec<_> = marker().captures_iter(line).collect();
        if marks.is_empty() {
            out.warnings.push(format!("unparsed line: {line}"));
            continue;
        }
        for (i, cap) in marks.iter().enumerate() {
            let whole = cap.get(0).expect("match");
            let end = marks.get(i + 1).map_or(line.len(), |next| next.get(0).expect("match").start());
            let span = line[whole.end()..end].trim();
            let tag = cap[1].trim();
            let category = tag.chars().next().filter(|_| tag.chars().count() == 1).and_then(PiiCategory::from_letter);
            match category {
                Some(category) if !span.is_empty() => out.findings.push(PiiFinding {
                    category,
                    span_text: span.to_string(),
                    record_id: record_id.to_string(),
                }),
                Some(_) => out.warnings.push(format!("empty span for [[{tag}]]")),
                None => out.warnings.push(format!("unknown category [[{tag}]]: {span}")),
            }
        }
    }
    out
}

/// Drops repeated mentions of the same span (case and whitespace
/// insensitive) under the same category, keeping the first.
pub fn dedup_findings(findings: Vec<PiiFinding>) -> Vec<PiiFinding> {
    let mut seen = HashSet::new();
    findings
        .into_iter()
        .filter(|f| {
            let key = f.span_text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
            seen.insert((f.category, key))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChatError {
    /// Worth retrying: transport errors, rate limiting, server errors.
    Transient(String),
    /// Not worth retrying: bad credentials, exhausted quota, bad request.
    Fatal(String),
}

impl std::fmt::Display for ChatError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChatError::Transient(m) => write!(f, "transient: {m}"),
            ChatError::Fatal(m) => write!(f, "fatal: {m}"),
        }
    }
}

pub trait ChatClient: Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, ChatError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Base URL of a chat-completion API; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key; unset means no auth header.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
        }
    }
}

pub struct HttpChatClient {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpChatClient {
    pub fn new(config: &EndpointConfig) -> Result<Self> {
        if config.base_url.is_empty() || config.model.is_empty() {
            return Err(Error::Config("endpoint base_url and model must be set".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = (!config.api_key_env.is_empty()).then(|| std::env::var(&config.api_key_env).ok()).flatten();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model: config.model.clone(),
            api_key,
        })
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> std::result::Result<String, ChatError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut request = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request.send(body.to_string()).map_err(|e| ChatError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| ChatError::Transient(e.to_string()))?;
        match status {
            200..=299 => {
                let value: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| ChatError::Transient(format!("malformed response: {e}")))?;
                value["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| ChatError::Fatal("response has no choices[0].message.content".into()))
            }
            401 | 403 => Err(ChatError::Fatal(format!("authentication failed (HTTP {status})"))),
            429 if text.contains("insufficient_quota") => Err(ChatError::Fatal("quota exhausted (HTTP 429)".into())),
            408 | 409 | 429 | 500..=599 => Err(ChatError::Transient(format!("HTTP {status}"))),
            _ => Err(ChatError::Fatal(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts per record, including the first.
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff_ms: 500,
            multiplier: 2.0,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(retry as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenConfig {
    pub endpoint: EndpointConfig,
    pub concurrency: usize,
    pub retry: RetryPolicy,
    /// Upper bound on request starts per minute across all workers.
    pub requests_per_minute: Option<u32>,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            endpoint: EndpointConfig::default(),
            concurrency: 4,
            retry: RetryPolicy::default(),
            requests_per_minute: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScreen {
    pub record_id: String,
    pub findings: Vec<PiiFinding>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub record_id: String,
    pub attempts: u32,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub category_counts: BTreeMap<PiiCategory, u64>,
    pub instructions_with_findings: u64,
    pub records: Vec<RecordScreen>,
    pub errors: Vec<RecordError>,
}

impl ScreenReport {
    fn from_parts(records: Vec<RecordScreen>, errors: Vec<RecordError>) -> Self {
        let mut category_counts: BTreeMap<PiiCategory, u64> = PiiCategory::ALL.iter().map(|c| (*c, 0)).collect();
        for f in records.iter().flat_map(|r| &r.findings) {
            *category_counts.entry(f.category).or_default() += 1;
        }
        let instructions_with_findings = records.iter().filter(|r| !r.findings.is_empty()).count() as u64;
        Self {
            category_counts,
            instructions_with_findings,
            records,
            errors,
        }
    }

    pub fn total_findings(&self) -> u64 {
        self.category_counts.values().sum()
    }

    pub fn is_complete(&self) -> bool {
        self.errors.is_empty()
    }

    /// Counts match the finding lists.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::from_parts(self.records.clone(), self.errors.clone());
        if rebuilt.category_counts != self.category_counts || rebuilt.instructions_with_findings != self.instructions_with_findings {
            return Err(Error::InvalidValue("screen report counts disagree with its findings".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    /// Per-category totals, one per line, followed by summary counts.
    pub fn to_text(&self) -> String {
        let mut out = String::from("category\tcount\n");
        for c in PiiCategory::ALL {
            out.push_str(&format!("{}. {}\t{}\n", c.letter(), c.label(), self.category_counts.get(&c).copied().unwrap_or(0)));
        }
        out.push_str(&format!("screened\t{}\n", self.records.len()));
        out.push_str(&format!("with_findings\t{}\n", self.instructions_with_findings));
        out.push_str(&format!("errors\t{}\n", self.errors.len()));
        out
    }
}

struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn wait(&self) {
        let start = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let start = (*next).max(Instant::now());
            *next = start + self.interval;
            start
        };
        let now = Instant::now();
        if start > now {
            thread::sleep(start - now);
        }
    }
}

fn screen_record(
    client: &dyn ChatClient,
    record: &InstructionRecord,
    demonstrations: &str,
    retry: &RetryPolicy,
    limiter: Option<&RateLimiter>,
) -> std::result::Result<RecordScreen, RecordError> {
    let prompt = build_prompt(record, demonstrations);
    let attempts = retry.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            thread::sleep(retry.backoff(attempt - 1));
        }
        if let Some(l) = limiter {
            l.wait();
        }
        match client.complete(&prompt) {
            Ok(text) => {
                let parsed = parse_response(&text, &record.id);
                return Ok(RecordScreen {
                    record_id: record.id.clone(),
                    findings: dedup_findings(parsed.findings),
                    warnings: parsed.warnings,
                });
            }
            Err(ChatError::Fatal(m)) => {
                return Err(RecordError {
                    record_id: record.id.clone(),
                    attempts: attempt + 1,
                    message: m,
                })
            }
            Err(ChatError::Transient(m)) => last = m,
        }
    }
    Err(RecordError {
        record_id: record.id.clone(),
        attempts,
        message: format!("gave up after {attempts} attempts: {last}"),
    })
}

/// Screens every record not already screened successfully in `previous`,
/// with at most `config.concurrency` requests in flight. Failed records
/// become error entries; records from `previous` that failed are retried.
/// The result lists records in corpus order.
pub fn screen_corpus(
    corpus: &Corpus,
    client: &dyn ChatClient,
    demonstrations: &str,
    config: &ScreenConfig,
    previous: Option<&ScreenReport>,
) -> Result<ScreenReport> {
    if config.concurrency == 0 {
        return Err(Error::Config("concurrency must be at least 1".into()));
    }
    let done: BTreeSet<&str> = previous.map(|p| p.records.iter().map(|r| r.record_id.as_str()).collect()).unwrap_or_default();
    let todo: Vec<&InstructionRecord> = corpus.records.iter().filter(|r| !done.contains(r.id.as_str())).collect();
    let limiter = match config.requests_per_minute {
        Some(0) => return Err(Error::Config("requests_per_minute must be positive".into())),
        Some(rpm) => Some(RateLimiter {
            interval: Duration::from_secs_f64(60.0 / rpm as f64),
            next: Mutex::new(Instant::now()),
        }),
        None => None,
    };

    let cursor = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, std::result::Result<RecordScreen, RecordError>)>> = Mutex::new(Vec::with_capacity(todo.len()));
    thread::scope(|scope| {
        for _ in 0..config.concurrency.min(todo.len()) {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                let Some(record) = todo.get(i) else { break };
                let outcome = screen_record(client, record, demonstrations, &config.retry, limiter.as_ref());
                results.lock().expect("results poisoned").push((i, outcome));
            });
        }
    });

    let mut fresh: BTreeMap<&str, RecordScreen> = BTreeMap::new();
    let mut failed: BTreeMap<&str, RecordError> = BTreeMap::new();
    for (i, outcome) in results.into_inner().expect("results poisoned") {
        let id = todo[i].id.as_str();
        match outcome {
            Ok(r) => {
                fresh.insert(id, r);
            }
            Err(e) => {
                failed.insert(id, e);
            }
        }
    }
    let old: BTreeMap<&str, &RecordScreen> =
        previous.map(|p| p.records.iter().map(|r| (r.record_id.as_str(), r)).collect()).unwrap_or_default();
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for r in &corpus.records {
        let id = r.id.as_str();
        if let Some(s) = fresh.remove(id) {
            records.push(s);
        } else if let Some(s) = old.get(id) {
            records.push((*s).clone());
        } else if let Some(e) = failed.remove(id) {
            errors.push(e);
        }
    }
    Ok(ScreenReport::from_parts(records, errors))
}
