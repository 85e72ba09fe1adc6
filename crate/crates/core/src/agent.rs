//! Administering questions to an LLM agent.
//!
//! Every question is a separate, stateless chat-completions request made of one
//! system message and one user message. Transports are pluggable: a blocking
//! HTTP client for live runs and a seeded mock for offline runs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{Answer, Question, QuestionBank, QuestionType};
use crate::judge;
use crate::sampler::Exam;
use crate::seeds;

pub const SYSTEM_PROMPT: &str = "You are taking an SAT math exam which include multiple choice and answer type questions.\n\
Determine the correct answer.\n\
Choose only ONE 'character letter' response output corresponding to the correct answer from the options provided for multiple choice type.\n\
Provide the appropriate numerical answer as required for the answer type question without any units of measurement.";

const MCQ_PREAMBLE: &str = "You are provided with an SAT question enclosed in triple backticks, followed by multiple choice options.";
const MCQ_INSTRUCTION: &str = "Please identify and return ONLY ONE letter character corresponding to the correct option.\n\
Your response output should only be ONE character letter.";
const NUMERIC_PREAMBLE: &str = "You are provided with an SAT question of numerical type, enclosed in triple backticks. Please determine and return the correct numerical value or mathematical expression.";
const NUMERIC_WARNING: &str = "WARNING: Do not provide any explanations, calculations, units of measurement, or additional outputs.";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("transport failed after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("endpoint returned status {status}: {body}")]
    Protocol { status: u16, body: String },
    #[error("endpoint returned no answer text")]
    EmptyResponse,
    #[error("environment variable {0} with the API key is not set")]
    MissingCredential(String),
    #[error("no mock accuracy configured for year {0}")]
    MissingAccuracy(u16),
    #[error("question {0} not in bank")]
    UnknownQuestion(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad accuracy file: {0}")]
    AccuracyFile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub concurrency: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4-turbo".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            temperature: 0.0,
            max_output_tokens: 5,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            concurrency: 8,
        }
    }
}

impl AgentConfig {
    /// Departures from temperature 0 and a 5-token cap, for run metadata.
    pub fn protocol_deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.temperature != 0.0 {
            out.push(format!("temperature={}", self.temperature));
        }
        if self.max_output_tokens != 5 {
            out.push(format!("max_output_tokens={}", self.max_output_tokens));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system_text: String,
    pub user_text: String,
    pub question_id: String,
}

/// Selects the multiple-choice or numeric template. Templates never vary by year.
pub fn build_prompt(question: &Question) -> PromptPair {
    let user_text = match question.qtype {
        QuestionType::Mcq => {
            let options = question
                .options
                .iter()
                .map(|o| format!("{}) {}", o.label, o.text))
                .collect::<Vec<_>>()
                .join("\n");
            format!(
                "{MCQ_PREAMBLE}\n``` {}\n{options} ```\n{MCQ_INSTRUCTION}",
                question.text
            )
        }
        QuestionType::Numeric => {
            format!("{NUMERIC_PREAMBLE}\n``` {} ```\n{NUMERIC_WARNING}", question.text)
        }
    };
    PromptPair {
        system_text: SYSTEM_PROMPT.to_string(),
        user_text,
        question_id: question.id.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Wire body of a chat-completions request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(config: &AgentConfig, prompt: &PromptPair) -> Self {
        ChatRequest {
            model: config.model_name.clone(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: prompt.system_text.clone(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: prompt.user_text.clone(),
                },
            ],
            temperature: config.temperature,
            max_tokens: config.max_output_tokens,
        }
    }
}

/// Raw agent answer, stored before any parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub exam_id: String,
    pub question_id: String,
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempts: u32,
    pub model_name: String,
    pub timestamp: String,
}

/// What a transport may look at besides the wire request.
#[derive(Debug, Clone, Copy)]
pub struct RequestContext<'a> {
    pub exam_id: &'a str,
    pub question: &'a Question,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub body: String,
}

/// Delivers one request. `Err` means the request never got an HTTP status.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest, ctx: &RequestContext<'_>) -> Result<Reply, String>;
}

impl<T: Transport + ?Sized> Transport for &T {
    fn send(&self, request: &ChatRequest, ctx: &RequestContext<'_>) -> Result<Reply, String> {
        (**self).send(request, ctx)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&self, request: &ChatRequest, ctx: &RequestContext<'_>) -> Result<Reply, String> {
        (**self).send(request, ctx)
    }
}

/// Blocking HTTP transport with a bearer token.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &AgentConfig) -> Result<Self, AgentError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .ok()
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| AgentError::MissingCredential(var.clone()))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpTransport {
            agent,
            url: config.endpoint_url.clone(),
            api_key,
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest, _ctx: &RequestContext<'_>) -> Result<Reply, String> {
        post_json(&self.agent, &self.url, self.api_key.as_deref(), request)
    }
}

pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &impl Serialize,
) -> Result<Reply, String> {
    let mut req = agent.post(url);
    if let Some(key) = api_key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
    let status = resp.status().as_u16();
    let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    Ok(Reply { status, body })
}

fn is_retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

fn extract_content(body: &str) -> Result<String, AgentError> {
    let value: serde_json::Value = serde_json::from_str(body).map_err(|_| AgentError::Protocol {
        status: 200,
        body: body.chars().take(500).collect(),
    })?;
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or(AgentError::EmptyResponse)?;
    if content.trim().is_empty() {
        return Err(AgentError::EmptyResponse);
    }
    Ok(content.to_string())
}

/// Chat-completions style response body carrying `content`.
pub fn completion_body(content: &str) -> String {
    serde_json::json!({
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
    .to_string()
}

/// An agent bound to one configuration and transport.
pub struct Agent<T> {
    pub config: AgentConfig,
    pub transport: T,
}

impl<T: Transport> Agent<T> {
    pub fn new(config: AgentConfig, transport: T) -> Self {
        Agent { config, transport }
    }

    /// One stateless request, retried on transport failures, 429 and 5xx.
    pub fn ask(&self, prompt: &PromptPair, ctx: &RequestContext<'_>) -> Result<ResponseRecord, AgentError> {
        let request = ChatRequest::new(&self.config, prompt);
        let started = Instant::now();
        let max_attempts = self.config.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let failure = match self.transport.send(&request, ctx) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let raw_text = extract_content(&reply.body)?;
                    return Ok(ResponseRecord {
                        exam_id: ctx.exam_id.to_string(),
                        question_id: prompt.question_id.clone(),
                        raw_text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempts: attempt,
                        model_name: self.config.model_name.clone(),
                        timestamp: chrono::Utc::now().to_rfc3339(),
                    });
                }
                Ok(reply) if is_retryable(reply.status) => {
                    format!("status {}: {}", reply.status, reply.body.chars().take(200).collect::<String>())
                }
                Ok(reply) => {
                    return Err(AgentError::Protocol {
                        status: reply.status,
                        body: reply.body,
                    })
                }
                Err(e) => e,
            };
            if attempt >= max_attempts {
                return Err(AgentError::Transport {
                    attempts: attempt,
                    detail: failure,
                });
            }
            log::debug!("{}: attempt {attempt} failed ({failure}), retrying", prompt.question_id);
            std::thread::sleep(self.config.retry.backoff(attempt));
        }
    }

    /// Asks every unanswered question of `exam`, persisting each record as it
    /// arrives. Previously stored answers are reused, never re-asked.
    pub fn run_exam(
        &self,
        exam: &Exam,
        bank: &QuestionBank,
        store: &ResponseStore,
    ) -> Result<Vec<ResponseRecord>, RunExamError> {
        let existing = store.load(exam.year, &exam.exam_id).map_err(|e| RunExamError {
            exam_id: exam.exam_id.clone(),
            failures: vec![(String::new(), e)],
            answered: 0,
        })?;
        let answered: HashSet<&str> = existing.iter().map(|r| r.question_id.as_str()).collect();
        let mut pending = Vec::new();
        let mut failures = Vec::new();
        for qid in &exam.question_ids {
            if answered.contains(qid.as_str()) {
                continue;
            }
            match bank.get(qid) {
                Some(q) => pending.push(q),
                None => failures.push((qid.clone(), AgentError::UnknownQuestion(qid.clone()))),
            }
        }

        let mut fresh = Vec::new();
        if !pending.is_empty() {
            let mut writer = store.appender(exam.year, &exam.exam_id).map_err(|e| RunExamError {
                exam_id: exam.exam_id.clone(),
                failures: vec![(String::new(), e)],
                answered: existing.len(),
            })?;
            let workers = self.config.concurrency.clamp(1, pending.len());
            let next = AtomicUsize::new(0);
            let (tx, rx) = mpsc::channel();
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    let tx = tx.clone();
                    let next = &next;
                    let pending = &pending;
                    scope.spawn(move || loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(question) = pending.get(i) else { break };
                        let ctx = RequestContext {
                            exam_id: &exam.exam_id,
                            question,
                        };
                        let result = self.ask(&build_prompt(question), &ctx);
                        if tx.send((question.id.clone(), result)).is_err() {
                            break;
                        }
                    });
                }
                drop(tx);
                for (qid, result) in rx {
                    match result.and_then(|rec| writer.append(&rec).map(|_| rec)) {
                        Ok(rec) => fresh.push(rec),
                        Err(e) => failures.push((qid, e)),
                    }
                }
            });
        }

        let mut by_id: HashMap<String, ResponseRecord> = HashMap::new();
        for rec in existing.into_iter().chain(fresh) {
            by_id.entry(rec.question_id.clone()).or_insert(rec);
        }
        let records: Vec<ResponseRecord> = exam
            .question_ids
            .iter()
            .filter_map(|q| by_id.remove(q))
            .collect();
        if failures.is_empty() {
            Ok(records)
        } else {
            Err(RunExamError {
                exam_id: exam.exam_id.clone(),
                answered: records.len(),
                failures,
            })
        }
    }
}

#[derive(Debug, Error)]
#[error("exam {exam_id}: {} question(s) failed, {answered} answered; first: {}", failures.len(), failures.first().map(|(q, e)| format!("{q}: {e}")).unwrap_or_default())]
pub struct RunExamError {
    pub exam_id: String,
    pub failures: Vec<(String, AgentError)>,
    pub answered: usize,
}

/// Append-only response logs under `<root>/<year>/<exam_id>.jsonl`.
#[derive(Debug, Clone)]
pub struct ResponseStore {
    root: PathBuf,
}

pub struct ResponseAppender {
    file: std::fs::File,
    path: PathBuf,
}

impl ResponseAppender {
    pub fn append(&mut self, record: &ResponseRecord) -> Result<(), AgentError> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|source| AgentError::Io {
                path: self.path.display().to_string(),
                source,
            })
    }
}

impl ResponseStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseStore { root: root.into() }
    }

    pub fn path(&self, year: u16, exam_id: &str) -> PathBuf {
        self.root.join(year.to_string()).join(format!("{exam_id}.jsonl"))
    }

    /// Reads stored records; a torn final line from an interrupted write is skipped.
    pub fn load(&self, year: u16, exam_id: &str) -> Result<Vec<ResponseRecord>, AgentError> {
        let path = self.path(year, exam_id);
        let file = match std::fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => {
                return Err(AgentError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|source| AgentError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(rec) => out.push(rec),
                Err(e) => log::warn!("{}: skipping unreadable record ({e})", path.display()),
            }
        }
        Ok(out)
    }

    pub fn appender(&self, year: u16, exam_id: &str) -> Result<ResponseAppender, AgentError> {
        let path = self.path(year, exam_id);
        let io_err = |source| AgentError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(&path)
            .map_err(io_err)?;
        // Terminate a torn final line so the next record starts cleanly.
        let len = file.metadata().map_err(io_err)?.len();
        if len > 0 {
            let text = std::fs::read(&path).map_err(io_err)?;
            if text.last() != Some(&b'\n') {
                file.write_all(b"\n").map_err(io_err)?;
            }
        }
        Ok(ResponseAppender { file, path })
    }
}

/// Offline agent. Correctness of each question is fixed up front: within each
/// stratum of (year, type, configured accuracy) the questions are ranked by a
/// seeded hash of their id and the first `round(accuracy * size)` are answered
/// correctly. Wrong answers are a seeded wrong option or a perturbed value.
pub struct MockTransport {
    correct: HashMap<String, bool>,
    seed: u64,
}

impl MockTransport {
    pub fn new(bank: &QuestionBank, seed: u64, accuracy: impl Fn(&Question) -> f64) -> Self {
        let mut strata: BTreeMap<(u16, QuestionType, u64), Vec<&Question>> = BTreeMap::new();
        for q in bank.iter() {
            let a = accuracy(q).clamp(0.0, 1.0);
            strata.entry((q.year, q.qtype, a.to_bits())).or_default().push(q);
        }
        let mut correct = HashMap::new();
        for ((_, _, bits), mut members) in strata {
            let a = f64::from_bits(bits);
            members.sort_by_key(|q| (seeds::derive(seed, &format!("mock/{}", q.id)), q.id.clone()));
            let k = (a * members.len() as f64).round() as usize;
            for (rank, q) in members.into_iter().enumerate() {
                correct.insert(q.id.clone(), rank < k);
            }
        }
        MockTransport { correct, seed }
    }

    /// Per-year accuracy; every bank year must be configured.
    pub fn with_year_accuracy(
        bank: &QuestionBank,
        seed: u64,
        accuracy: &BTreeMap<u16, f64>,
    ) -> Result<Self, AgentError> {
        if let Some(y) = bank.years().find(|y| !accuracy.contains_key(y)) {
            return Err(AgentError::MissingAccuracy(y));
        }
        Ok(Self::new(bank, seed, |q| accuracy[&q.year]))
    }

    pub fn is_correct(&self, question_id: &str) -> Option<bool> {
        self.correct.get(question_id).copied()
    }

    fn answer_text(&self, q: &Question) -> String {
        let right = self.correct.get(&q.id).copied().unwrap_or(false);
        match q.qtype {
            QuestionType::Mcq => {
                let pool: Vec<char> = q
                    .options
                    .iter()
                    .map(|o| o.label)
                    .filter(|l| q.answers.contains(&Answer::Letter(*l)) == right)
                    .collect();
                let pick = seeds::derive(self.seed, &format!("mock/pick/{}", q.id)) as usize;
                pool.get(pick % pool.len().max(1)).map(|c| c.to_string()).unwrap_or_default()
            }
            QuestionType::Numeric => {
                let base = match q.answers[0] {
                    Answer::Value(n) => n,
                    Answer::Interval(lo, _) => lo,
                    Answer::Letter(_) => return String::new(),
                };
                if right {
                    return base.to_string();
                }
                let mut v = base.value().floor() + 1.0;
                while judge::grade(q, &judge::ParsedAnswer::Number(v)) {
                    v += 1.0;
                }
                format!("{v}")
            }
        }
    }
}

impl Transport for MockTransport {
    fn send(&self, _request: &ChatRequest, ctx: &RequestContext<'_>) -> Result<Reply, String> {
        Ok(Reply {
            status: 200,
            body: completion_body(&self.answer_text(ctx.question)),
        })
    }
}

/// Wraps a transport and keeps every serialized request it sees.
pub struct RecordingTransport<T> {
    inner: T,
    captured: Mutex<Vec<String>>,
}

impl<T> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        RecordingTransport {
            inner,
            captured: Mutex::new(Vec::new()),
        }
    }

    pub fn captured(&self) -> Vec<String> {
        self.captured.lock().expect("capture lock").clone()
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&self, request: &ChatRequest, ctx: &RequestContext<'_>) -> Result<Reply, String> {
        let wire = serde_json::to_string(request).expect("request serializes");
        self.captured.lock().expect("capture lock").push(wire);
        self.inner.send(request, ctx)
    }
}

/// Reads `year,accuracy` rows.
pub fn load_accuracy_file(path: &Path) -> Result<BTreeMap<u16, f64>, AgentError> {
    #[derive(Deserialize)]
    struct Row {
        year: u16,
        accuracy: f64,
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| AgentError::AccuracyFile(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize() {
        let row: Row = row.map_err(|e| AgentError::AccuracyFile(e.to_string()))?;
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(AgentError::AccuracyFile(format!(
                "accuracy {} for {} outside [0, 1]",
                row.accuracy, row.year
            )));
        }
        out.insert(row.year, row.accuracy);
    }
    Ok(out)
}
