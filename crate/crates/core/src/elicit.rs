//! Prompt construction, endpoint driving, and the resumable record log.
//!
//! A run elicits one four-choice answer per (persona, statement) pair from a
//! chat-completions endpoint, constraining decoding to the four canonical
//! surface strings. Results append to a line-delimited log keyed by
//! (run_id, persona_id, statement_id); resume replays the log, truncates a
//! torn trailing line left by a crash, and skips every key already present.
//! Idempotency is keyed, not ordered, so the final record set is independent
//! of concurrency and of where a previous run died.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use futures::StreamExt;
use serde::{Deserialize, Serialize};

use crate::corpus::{Condition, ConditionedPersona};
use crate::error::{Error, Result};
use crate::pct::{parse_answer, AnswerChoice, AnswerSheet, Statement, STATEMENT_COUNT};

pub const CHAT_COMPLETIONS_PATH: &str = "/v1/chat/completions";
pub const EMBEDDINGS_PATH: &str = "/v1/embeddings";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const COMPLETE_FILE: &str = "complete.json";

/// Template anchors. The loopback responder parses statements and personas
/// back out of prompts by these exact substrings, so they are part of the
/// wire contract, not presentation.
pub const STATEMENT_ANCHOR: &str = "Statement: ";
pub const PERSONA_ANCHOR: &str = "Respond taking on the perspective of the following persona: ";

const PROMPT_HEADER: &str = "Your task is to evaluate a statement and provide a response based on specific conditions. Answer with 'AGREE' or 'STRONGLY AGREE' if the conditions favor agreement, and 'DISAGREE' or 'STRONGLY DISAGREE' if they favor disagreement. Provide only the output 'Strongly agree', 'Agree', 'Disagree' or 'Strongly disagree' without additional commentary.";

/// Renders the elicitation prompt. With no persona (the bare-model probe)
/// the persona sentence disappears entirely rather than being left blank.
pub fn build_prompt(statement: &Statement, persona: Option<&ConditionedPersona>) -> String {
    match persona {
        Some(p) => format!(
            "{PROMPT_HEADER}\n\n{STATEMENT_ANCHOR}{}\n\n{PERSONA_ANCHOR}{}\n\nOutput:",
            statement.text, p.rendered_text
        ),
        None => format!(
            "{PROMPT_HEADER}\n\n{STATEMENT_ANCHOR}{}\n\nOutput:",
            statement.text
        ),
    }
}

/// Wire structures for the chat-completions protocol and the embeddings
/// endpoint. The loopback responder deserializes exactly what the client
/// serializes, so both sides share these types.
pub mod wire {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ChatMessage {
        pub role: String,
        pub content: String,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ChatCompletionRequest {
        pub model: String,
        pub messages: Vec<ChatMessage>,
        #[serde(default)]
        pub temperature: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub max_tokens: Option<u32>,
        /// Constrained-decoding request: the server must answer with one of
        /// these exact strings.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub guided_choice: Option<Vec<String>>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ChatCompletionResponse {
        pub id: String,
        #[serde(default)]
        pub object: String,
        #[serde(default)]
        pub model: String,
        pub choices: Vec<ResponseChoice>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ResponseChoice {
        pub index: u32,
        pub message: ChatMessage,
        #[serde(default)]
        pub finish_reason: String,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct EmbeddingsRequest {
        pub model: String,
        pub input: Vec<String>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct EmbeddingsResponse {
        #[serde(default)]
        pub model: String,
        pub data: Vec<EmbeddingItem>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct EmbeddingItem {
        pub index: u32,
        pub embedding: Vec<f64>,
    }
}

/// Decoding parameters sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
    pub guided_choices: Vec<String>,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            max_tokens: 8,
            guided_choices: AnswerChoice::canonical_strings(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub endpoint_url: String,
    pub model_name: String,
    pub condition: Condition,
    pub decoding: Decoding,
    pub retry_limit: u32,
    pub concurrency_limit: usize,
    pub seed: u64,
    pub corpus_digest: String,
    pub matrix_digest: String,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() {
            return Err(Error::data("manifest run_id must be non-empty"));
        }
        if self.retry_limit == 0 {
            return Err(Error::data("manifest retry_limit must be at least 1"));
        }
        if self.concurrency_limit == 0 {
            return Err(Error::data("manifest concurrency_limit must be at least 1"));
        }
        if !(self.decoding.temperature >= 0.0) {
            return Err(Error::data("manifest temperature must be >= 0"));
        }
        if self.decoding.max_tokens == 0 {
            return Err(Error::data("manifest max_tokens must be at least 1"));
        }
        if self.decoding.guided_choices != AnswerChoice::canonical_strings() {
            return Err(Error::data(
                "manifest guided_choices must be the four canonical answer strings",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub run_id: String,
    pub persona_id: u32,
    pub statement_id: u8,
    pub raw_text: String,
    /// `None` records an exhausted retry budget, in which case `attempts`
    /// always equals the manifest retry_limit.
    pub parsed: Option<AnswerChoice>,
    pub attempts: u32,
    pub timestamp: DateTime<Utc>,
}

impl ResponseRecord {
    pub fn key(&self) -> (u32, u8) {
        (self.persona_id, self.statement_id)
    }
}

/// SHA-256 hex digest of arbitrary bytes; pins corpus and matrix identity in
/// manifests.
pub fn digest_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Digest of a conditioned persona set: one canonical JSON line per persona,
/// in the given order.
pub fn corpus_digest(personas: &[ConditionedPersona]) -> String {
    let mut buf = String::new();
    for p in personas {
        buf.push_str(&serde_json::to_string(p).expect("persona serialization cannot fail"));
        buf.push('\n');
    }
    digest_bytes(buf.as_bytes())
}

/// Digest of the underlying persona corpus, before condition rendering. Runs
/// of the same corpus under different conditions share this digest, which is
/// what lets analysis refuse to pair runs drawn from different corpora.
pub fn base_corpus_digest(personas: &[crate::corpus::Persona]) -> String {
    let mut buf = String::new();
    for p in personas {
        let line = serde_json::json!({"id": p.id, "text": p.text});
        buf.push_str(&line.to_string());
        buf.push('\n');
    }
    digest_bytes(buf.as_bytes())
}

/// A chat-completions endpoint plus client policy (auth, timeout, backoff).
#[derive(Clone)]
pub struct Endpoint {
    pub base_url: String,
    api_key: Option<String>,
    client: reqwest::Client,
    backoff_base: Duration,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>) -> Endpoint {
        Endpoint {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: None,
            client: reqwest::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("reqwest client construction cannot fail"),
            backoff_base: Duration::from_millis(500),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Endpoint {
        self.api_key = key;
        self
    }

    /// First-retry delay; doubles per attempt with multiplicative jitter in
    /// [0.5, 1.5). Tests shrink this to keep retry paths fast.
    pub fn with_backoff_base(mut self, base: Duration) -> Endpoint {
        self.backoff_base = base;
        self
    }

    pub fn chat_url(&self) -> String {
        format!("{}{}", self.base_url, CHAT_COMPLETIONS_PATH)
    }

    pub fn embeddings_url(&self) -> String {
        format!("{}{}", self.base_url, EMBEDDINGS_PATH)
    }

    fn request(&self, url: &str) -> reqwest::RequestBuilder {
        let mut rb = self.client.post(url);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        rb
    }

    /// Request builder for the embeddings route, auth applied.
    pub fn embed_request(&self) -> reqwest::RequestBuilder {
        self.request(&self.embeddings_url())
    }

    /// Sleeps out the backoff for a failed attempt (1-based). Shared by
    /// every client that retries against this endpoint.
    pub async fn backoff(&self, attempt: u32) {
        let factor = 2u64.saturating_pow(attempt.saturating_sub(1));
        let base = self.backoff_base.as_secs_f64() * factor as f64;
        let jitter = 0.5 + rand::random::<f64>();
        tokio::time::sleep(Duration::from_secs_f64(base * jitter)).await;
    }

    /// One cheap reachability probe before a run commits to its record log.
    /// Any HTTP response at all counts as reachable (a 404 on GET / is
    /// normal); only a connection-level failure is fatal here, so a run
    /// against a dead or mistyped URL fails fast instead of logging a full
    /// grid of exhausted retries.
    pub async fn preflight(&self) -> Result<()> {
        match self.client.get(&self.base_url).send().await {
            Ok(_) => Ok(()),
            Err(e) => Err(Error::transport(format!(
                "endpoint {} unreachable: {e}",
                self.base_url
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElicitOutcome {
    pub raw_text: String,
    pub parsed: Option<AnswerChoice>,
    pub attempts: u32,
}

enum AttemptResult {
    Answer(String),
    Retryable(String),
    Fatal(String),
}

async fn attempt_once(
    endpoint: &Endpoint,
    prompt: &str,
    manifest: &RunManifest,
) -> AttemptResult {
    let request = wire::ChatCompletionRequest {
        model: manifest.model_name.clone(),
        messages: vec![wire::ChatMessage {
            role: "user".to_string(),
            content: prompt.to_string(),
        }],
        temperature: manifest.decoding.temperature,
        max_tokens: Some(manifest.decoding.max_tokens),
        guided_choice: Some(manifest.decoding.guided_choices.clone()),
    };
    let sent = endpoint
        .request(&endpoint.chat_url())
        .json(&request)
        .send()
        .await;
    let response = match sent {
        Ok(r) => r,
        Err(e) => return AttemptResult::Retryable(format!("request failed: {e}")),
    };
    let status = response.status();
    if status.is_client_error() && status.as_u16() != 429 {
        let body = response.text().await.unwrap_or_default();
        return AttemptResult::Fatal(format!("endpoint rejected request ({status}): {body}"));
    }
    if !status.is_success() {
        return AttemptResult::Retryable(format!("endpoint returned {status}"));
    }
    match response.json::<wire::ChatCompletionResponse>().await {
        Ok(parsed) => match parsed.choices.into_iter().next() {
            Some(choice) => AttemptResult::Answer(choice.message.content),
            None => AttemptResult::Retryable("response held no choices".to_string()),
        },
        Err(e) => AttemptResult::Retryable(format!("unparseable response body: {e}")),
    }
}

/// Sends one prompt, retrying transport failures, server errors, and
/// unparseable answers with exponential backoff. 4xx statuses other than 429
/// are fatal: the run cannot succeed by retrying bad credentials. An
/// exhausted budget yields `parsed: None` with attempts pinned to the retry
/// limit, never an error.
pub async fn elicit_one(
    endpoint: &Endpoint,
    prompt: &str,
    manifest: &RunManifest,
) -> Result<ElicitOutcome> {
    let mut last_raw = String::new();
    for attempt in 1..=manifest.retry_limit {
        match attempt_once(endpoint, prompt, manifest).await {
            AttemptResult::Answer(raw) => {
                let parsed = parse_answer(&raw);
                last_raw = raw;
                if let Some(choice) = parsed {
                    return Ok(ElicitOutcome {
                        raw_text: last_raw,
                        parsed: Some(choice),
                        attempts: attempt,
                    });
                }
            }
            AttemptResult::Retryable(detail) => {
                last_raw = detail;
            }
            AttemptResult::Fatal(detail) => {
                return Err(Error::transport(detail));
            }
        }
        if attempt < manifest.retry_limit {
            endpoint.backoff(attempt).await;
        }
    }
    Ok(ElicitOutcome {
        raw_text: last_raw,
        parsed: None,
        attempts: manifest.retry_limit,
    })
}

pub fn manifest_path(run_dir: &Path) -> PathBuf {
    run_dir.join(MANIFEST_FILE)
}

pub fn records_path(run_dir: &Path) -> PathBuf {
    run_dir.join(RECORDS_FILE)
}

pub fn complete_marker_path(run_dir: &Path) -> PathBuf {
    run_dir.join(COMPLETE_FILE)
}

pub fn write_manifest(run_dir: &Path, manifest: &RunManifest) -> Result<()> {
    let raw = serde_json::to_string_pretty(manifest).map_err(|e| Error::data(e.to_string()))?;
    fs::write(manifest_path(run_dir), raw)?;
    Ok(())
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = manifest_path(run_dir);
    let raw = fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_str(&raw)
        .map_err(|e| Error::data(format!("manifest {}: {e}", path.display())))
}

/// Marker written once every key is present; analysis reads only runs that
/// have one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteMarker {
    pub manifest: RunManifest,
    pub n_records: usize,
    pub n_personas: usize,
    pub n_missing: usize,
    pub finished_at: DateTime<Utc>,
}

pub fn read_complete_marker(run_dir: &Path) -> Result<Option<CompleteMarker>> {
    let path = complete_marker_path(run_dir);
    if !path.exists() {
        return Ok(None);
    }
    let raw = fs::read_to_string(&path)?;
    let marker = serde_json::from_str(&raw)
        .map_err(|e| Error::data(format!("complete marker {}: {e}", path.display())))?;
    Ok(Some(marker))
}

fn parse_record_lines(
    raw: &[u8],
    origin: &str,
    tolerate_torn_tail: bool,
) -> Result<(Vec<ResponseRecord>, usize)> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    let mut consumed = 0usize;
    let mut line_no = 0usize;
    let mut cursor = 0usize;
    while cursor < raw.len() {
        line_no += 1;
        let end = raw[cursor..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| cursor + p);
        let (line, next, terminated) = match end {
            Some(e) => (&raw[cursor..e], e + 1, true),
            None => (&raw[cursor..], raw.len(), false),
        };
        if line.is_empty() {
            cursor = next;
            consumed = next;
            continue;
        }
        match serde_json::from_slice::<ResponseRecord>(line) {
            Ok(record) => {
                if !terminated && tolerate_torn_tail {
                    // A record without a newline may still be mid-write; a
                    // resume treats it as torn and rewrites it.
                    return Ok((records, consumed));
                }
                if !seen.insert(record.key()) {
                    return Err(Error::data(format!(
                        "record log {origin}: duplicate key (persona {}, statement {})",
                        record.persona_id, record.statement_id
                    )));
                }
                if record.parsed.is_none() && record.attempts == 0 {
                    return Err(Error::data(format!(
                        "record log {origin} line {line_no}: missing answer with zero attempts"
                    )));
                }
                records.push(record);
                cursor = next;
                consumed = next;
            }
            Err(e) => {
                let is_tail = end.is_none() || next >= raw.len();
                if tolerate_torn_tail && is_tail {
                    return Ok((records, consumed));
                }
                return Err(Error::data(format!(
                    "record log {origin} line {line_no}: {e}"
                )));
            }
        }
    }
    Ok((records, consumed))
}

/// Strict log read for analysis: every line must parse and keys must be
/// unique. Use only on runs bearing the complete marker.
pub fn read_record_log(path: &Path) -> Result<Vec<ResponseRecord>> {
    let raw = fs::read(path)
        .map_err(|e| Error::data(format!("cannot read record log {}: {e}", path.display())))?;
    let (records, _) = parse_record_lines(&raw, &path.display().to_string(), false)?;
    Ok(records)
}

/// Resume-time log read: a torn trailing line (crash mid-append) is cut off
/// and the file truncated to the last clean record boundary. Interior
/// corruption and duplicate keys still fail loudly.
pub fn recover_record_log(path: &Path) -> Result<Vec<ResponseRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let raw = fs::read(path)?;
    let (records, clean_len) = parse_record_lines(&raw, &path.display().to_string(), true)?;
    if clean_len < raw.len() {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(clean_len as u64)?;
        f.sync_all()?;
    }
    Ok(records)
}

fn append_record(out: &mut File, record: &ResponseRecord) -> Result<()> {
    let mut line = serde_json::to_string(record).map_err(|e| Error::data(e.to_string()))?;
    line.push('\n');
    out.write_all(line.as_bytes())?;
    // Flush per record: the log is always within one record of truth, which
    // more than satisfies the 1,000-record checkpoint bound.
    out.sync_data()?;
    Ok(())
}

#[derive(Clone, Default)]
pub struct RunOptions {
    /// Probe the bare model: prompts omit the persona sentence entirely.
    /// The caller still supplies one synthetic persona row to key records.
    pub base_probe: bool,
    /// Stop after this many fresh appends (crash-injection hook for tests).
    pub max_new_records: Option<usize>,
    /// Called with (records_done, records_total) after each append.
    pub progress: Option<Arc<dyn Fn(usize, usize) + Send + Sync>>,
}

impl std::fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunOptions")
            .field("base_probe", &self.base_probe)
            .field("max_new_records", &self.max_new_records)
            .field("progress", &self.progress.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub new_records: usize,
    pub total_records: usize,
    pub expected_records: usize,
    pub complete: bool,
    pub n_missing: usize,
}

/// Prepares a run directory: fresh directories get the manifest written;
/// existing ones must hold a byte-compatible manifest (same run identity and
/// input digests), otherwise the resume is refused.
pub fn prepare_run_dir(run_dir: &Path, manifest: &RunManifest) -> Result<()> {
    manifest.validate()?;
    fs::create_dir_all(run_dir)?;
    if manifest_path(run_dir).exists() {
        let existing = read_manifest(run_dir)?;
        if existing != *manifest {
            let what = if existing.corpus_digest != manifest.corpus_digest {
                "corpus digest"
            } else if existing.matrix_digest != manifest.matrix_digest {
                "matrix digest"
            } else {
                "manifest"
            };
            return Err(Error::data(format!(
                "run dir {} holds a different {what}; refusing to resume (run {} vs {})",
                run_dir.display(),
                existing.run_id,
                manifest.run_id
            )));
        }
    } else {
        write_manifest(run_dir, manifest)?;
    }
    Ok(())
}

/// Drives the full persona × statement grid against the endpoint, appending
/// to the record log as completions arrive. Safe to re-invoke: existing keys
/// are skipped, a torn tail is repaired, and a completed run is a no-op.
pub async fn run_study(
    endpoint: &Endpoint,
    manifest: &RunManifest,
    run_dir: &Path,
    personas: &[ConditionedPersona],
    statements: &[Statement],
    options: &RunOptions,
) -> Result<RunSummary> {
    if statements.len() != STATEMENT_COUNT {
        return Err(Error::data(format!(
            "run needs the full {STATEMENT_COUNT}-statement instrument, got {}",
            statements.len()
        )));
    }
    if personas.is_empty() {
        return Err(Error::data("run needs at least one persona"));
    }
    if options.base_probe && personas.len() != 1 {
        return Err(Error::data(
            "bare-model probe takes exactly one synthetic persona row",
        ));
    }
    prepare_run_dir(run_dir, manifest)?;
    let expected = personas.len() * STATEMENT_COUNT;

    let existing = recover_record_log(&records_path(run_dir))?;
    let mut done: BTreeSet<(u32, u8)> = existing.iter().map(|r| r.key()).collect();
    let mut n_missing = existing.iter().filter(|r| r.parsed.is_none()).count();

    if read_complete_marker(run_dir)?.is_some() {
        return Ok(RunSummary {
            run_id: manifest.run_id.clone(),
            new_records: 0,
            total_records: done.len(),
            expected_records: expected,
            complete: true,
            n_missing,
        });
    }

    let mut work = Vec::new();
    for persona in personas {
        for statement in statements {
            if !done.contains(&(persona.persona_id, statement.id)) {
                work.push((persona, statement));
            }
        }
    }

    let mut out = OpenOptions::new()
        .create(true)
        .append(true)
        .open(records_path(run_dir))?;

    let mut new_records = 0usize;
    let budget = options.max_new_records.unwrap_or(usize::MAX);
    {
        let mut stream = futures::stream::iter(work.into_iter().map(|(persona, statement)| {
            let prompt = build_prompt(
                statement,
                if options.base_probe { None } else { Some(persona) },
            );
            async move {
                let outcome = elicit_one(endpoint, &prompt, manifest).await?;
                Ok::<_, Error>(ResponseRecord {
                    run_id: manifest.run_id.clone(),
                    persona_id: persona.persona_id,
                    statement_id: statement.id,
                    raw_text: outcome.raw_text,
                    parsed: outcome.parsed,
                    attempts: outcome.attempts,
                    timestamp: Utc::now(),
                })
            }
        }))
        .buffer_unordered(manifest.concurrency_limit.max(1));

        while let Some(result) = stream.next().await {
            let record = result?;
            if record.parsed.is_none() {
                n_missing += 1;
            }
            done.insert(record.key());
            append_record(&mut out, &record)?;
            new_records += 1;
            if let Some(progress) = &options.progress {
                progress(done.len(), expected);
            }
            if new_records >= budget {
                break;
            }
        }
    }

    let complete = done.len() == expected;
    if complete {
        let marker = CompleteMarker {
            manifest: manifest.clone(),
            n_records: done.len(),
            n_personas: personas.len(),
            n_missing,
            finished_at: Utc::now(),
        };
        let raw =
            serde_json::to_string_pretty(&marker).map_err(|e| Error::data(e.to_string()))?;
        fs::write(complete_marker_path(run_dir), raw)?;
    }

    Ok(RunSummary {
        run_id: manifest.run_id.clone(),
        new_records,
        total_records: done.len(),
        expected_records: expected,
        complete,
        n_missing,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollatedSheets {
    pub sheets: Vec<AnswerSheet>,
    pub complete: usize,
    pub incomplete: usize,
}

/// Folds a record log into per-persona answer sheets, ordered by persona id.
/// A sheet is complete only when all 62 statements parsed.
pub fn collate_sheets(records: &[ResponseRecord], condition: Condition) -> Result<CollatedSheets> {
    let mut seen = BTreeSet::new();
    let mut by_persona: std::collections::BTreeMap<u32, AnswerSheet> =
        std::collections::BTreeMap::new();
    for record in records {
        if !seen.insert(record.key()) {
            return Err(Error::data(format!(
                "duplicate record key (persona {}, statement {})",
                record.persona_id, record.statement_id
            )));
        }
        let sheet = by_persona
            .entry(record.persona_id)
            .or_insert_with(|| AnswerSheet::new(record.persona_id, condition));
        if let Some(choice) = record.parsed {
            sheet.set(record.statement_id, choice)?;
        }
    }
    let sheets: Vec<AnswerSheet> = by_persona.into_values().collect();
    let complete = sheets.iter().filter(|s| s.is_complete()).count();
    let incomplete = sheets.len() - complete;
    Ok(CollatedSheets {
        sheets,
        complete,
        incomplete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{inject_descriptor, Persona};
    use crate::pct::builtin_statements;

    fn farmer() -> ConditionedPersona {
        ConditionedPersona {
            persona_id: 0,
            condition: Condition::Baseline,
            rendered_text: "a farmer".to_string(),
        }
    }

    fn record(persona_id: u32, statement_id: u8, parsed: Option<AnswerChoice>) -> ResponseRecord {
        ResponseRecord {
            run_id: "r1".to_string(),
            persona_id,
            statement_id,
            raw_text: parsed.map(|c| c.canonical().to_string()).unwrap_or_default(),
            parsed,
            attempts: if parsed.is_some() { 1 } else { 3 },
            timestamp: Utc::now(),
        }
    }

    #[test]
    fn prompt_contains_statement_and_persona_anchors() {
        let statements = builtin_statements();
        let prompt = build_prompt(&statements[11], Some(&farmer()));
        assert!(prompt
            .contains("Statement: The freer the market, the freer the people."));
        assert!(prompt.contains("perspective of the following persona: a farmer"));
        assert!(prompt.ends_with("Output:"));
    }

    #[test]
    fn bare_prompt_has_no_persona_line() {
        let statements = builtin_statements();
        let prompt = build_prompt(&statements[0], None);
        assert!(!prompt.contains("persona"));
        assert!(prompt.contains(STATEMENT_ANCHOR));
        assert!(prompt.ends_with("Output:"));
    }

    #[test]
    fn prompts_differ_only_in_statement_span() {
        let statements = builtin_statements();
        let a = build_prompt(&statements[0], Some(&farmer()));
        let b = build_prompt(&statements[1], Some(&farmer()));
        // Deleting the statement text must leave identical template bytes.
        let a_rest = a.replacen(&statements[0].text, "", 1);
        let b_rest = b.replacen(&statements[1].text, "", 1);
        assert_eq!(a_rest, b_rest);
        assert_ne!(a, b);
    }

    #[test]
    fn conditioned_prompt_carries_descriptor() {
        let statements = builtin_statements();
        let persona = Persona {
            id: 7,
            text: "a farmer".to_string(),
        };
        let conditioned = inject_descriptor(&persona, Condition::RightAuthoritarian);
        let prompt = build_prompt(&statements[0], Some(&conditioned));
        assert!(prompt.contains("a right leaning authoritarian farmer"));
    }

    #[test]
    fn manifest_validation_catches_bad_fields() {
        let mut m = RunManifest {
            run_id: "r1".to_string(),
            endpoint_url: "http://127.0.0.1:1".to_string(),
            model_name: "m".to_string(),
            condition: Condition::Baseline,
            decoding: Decoding::default(),
            retry_limit: 3,
            concurrency_limit: 8,
            seed: 0,
            corpus_digest: "x".to_string(),
            matrix_digest: "y".to_string(),
        };
        assert!(m.validate().is_ok());
        m.retry_limit = 0;
        assert!(m.validate().is_err());
        m.retry_limit = 3;
        m.decoding.guided_choices = vec!["Yes".to_string()];
        assert!(m.validate().is_err());
    }

    #[test]
    fn record_log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let mut out = File::create(&path).unwrap();
        let records = vec![
            record(0, 1, Some(AnswerChoice::Agree)),
            record(0, 2, None),
            record(1, 1, Some(AnswerChoice::StronglyDisagree)),
        ];
        for r in &records {
            append_record(&mut out, r).unwrap();
        }
        let loaded = read_record_log(&path).unwrap();
        assert_eq!(loaded, records);
    }

    #[test]
    fn strict_read_rejects_duplicates_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let mut out = File::create(&path).unwrap();
        append_record(&mut out, &record(0, 1, Some(AnswerChoice::Agree))).unwrap();
        append_record(&mut out, &record(0, 1, Some(AnswerChoice::Agree))).unwrap();
        let err = read_record_log(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate key"), "{err}");

        let mut out = File::create(&path).unwrap();
        out.write_all(b"not json\n").unwrap();
        append_record(&mut out, &record(0, 1, Some(AnswerChoice::Agree))).unwrap();
        assert!(read_record_log(&path).is_err());
    }

    #[test]
    fn recovery_truncates_torn_tail_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let mut out = File::create(&path).unwrap();
        append_record(&mut out, &record(0, 1, Some(AnswerChoice::Agree))).unwrap();
        append_record(&mut out, &record(0, 2, Some(AnswerChoice::Disagree))).unwrap();
        let clean_len = fs::metadata(&path).unwrap().len();
        out.write_all(b"{\"run_id\":\"r1\",\"persona").unwrap();
        out.sync_data().unwrap();
        drop(out);

        let recovered = recover_record_log(&path).unwrap();
        assert_eq!(recovered.len(), 2);
        assert_eq!(fs::metadata(&path).unwrap().len(), clean_len);

        // Interior corruption is not recoverable.
        let mut out = File::create(&path).unwrap();
        out.write_all(b"garbage\n").unwrap();
        append_record(&mut out, &record(0, 3, Some(AnswerChoice::Agree))).unwrap();
        assert!(recover_record_log(&path).is_err());
    }

    #[test]
    fn recovery_of_missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let recovered = recover_record_log(&dir.path().join("absent.jsonl")).unwrap();
        assert!(recovered.is_empty());
    }

    #[test]
    fn collate_builds_sheets_and_counts() {
        let mut records = Vec::new();
        for sid in 1..=STATEMENT_COUNT as u8 {
            records.push(record(0, sid, Some(AnswerChoice::Agree)));
        }
        for sid in 1..=STATEMENT_COUNT as u8 {
            let parsed = if sid == 44 { None } else { Some(AnswerChoice::Disagree) };
            records.push(record(1, sid, parsed));
        }
        let collated = collate_sheets(&records, Condition::Baseline).unwrap();
        assert_eq!(collated.sheets.len(), 2);
        assert_eq!(collated.complete, 1);
        assert_eq!(collated.incomplete, 1);
        assert!(collated.sheets[0].is_complete());
        assert_eq!(collated.sheets[1].missing(), vec![44]);
    }

    #[test]
    fn collate_rejects_duplicate_keys() {
        let records = vec![
            record(0, 1, Some(AnswerChoice::Agree)),
            record(0, 1, Some(AnswerChoice::Disagree)),
        ];
        assert!(collate_sheets(&records, Condition::Baseline).is_err());
    }

    #[test]
    fn digest_is_stable_and_input_sensitive() {
        let a = vec![farmer()];
        let mut b = vec![farmer()];
        assert_eq!(corpus_digest(&a), corpus_digest(&a));
        b[0].rendered_text.push('!');
        assert_ne!(corpus_digest(&a), corpus_digest(&b));
    }

    #[test]
    fn manifest_round_trips_through_run_dir() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = RunManifest {
            run_id: "r9".to_string(),
            endpoint_url: "http://127.0.0.1:9".to_string(),
            model_name: "mock".to_string(),
            condition: Condition::LeftLibertarian,
            decoding: Decoding::default(),
            retry_limit: 2,
            concurrency_limit: 4,
            seed: 17,
            corpus_digest: "c".to_string(),
            matrix_digest: "m".to_string(),
        };
        prepare_run_dir(dir.path(), &manifest).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
        // Same manifest resumes fine; a drifted digest refuses.
        prepare_run_dir(dir.path(), &manifest).unwrap();
        let mut drifted = manifest.clone();
        drifted.corpus_digest = "other".to_string();
        let err = prepare_run_dir(dir.path(), &drifted).unwrap_err();
        assert!(err.to_string().contains("corpus digest"), "{err}");
    }
}
