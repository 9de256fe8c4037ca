//! Deterministic planted-ideology responder.
//!
//! Every persona is assigned a target compass point from a weighted mixture;
//! the responder then answers statements greedily so the scored sheet walks
//! toward that target. Because assignment, noise, and tie-breaks all derive
//! from a seeded hash of the persona's canonical key, in-process calls and
//! the loopback server (which sees only the prompt text) produce identical
//! answers, and two servers with equal seeds produce identical streams.
//!
//! Prompt parsing on the server side anchors on the exact template substrings
//! and is brittle by design: it exists to test the real client, not to
//! tolerate other clients.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::corpus::{canonical_persona_key, detect_condition, Condition, ConditionedPersona};
use crate::elicit::{wire, PERSONA_ANCHOR, STATEMENT_ANCHOR};
use crate::error::{Error, Result};
use crate::pct::{AnswerChoice, CompassPoint, ScoringMatrix, Statement, STATEMENT_COUNT};

pub const MOCK_EMBED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantMode {
    /// Every persona aims at the single configured target.
    FixedPoint,
    /// Personas are hashed into the target mixture by weight.
    HashMixture,
    /// Like HashMixture, plus keyword-triggered offsets from theme_rules.
    ThemeShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedTarget {
    pub econ: f64,
    pub social: f64,
    pub weight: f64,
}

impl WeightedTarget {
    pub fn point(&self) -> CompassPoint {
        CompassPoint::new(self.econ, self.social)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub mode: PlantMode,
    pub target_points: Vec<WeightedTarget>,
    /// Per-statement probability of a hash-random answer instead of the
    /// greedy one.
    pub noise_rate: f64,
    pub seed: u64,
    /// Added to the target under RightAuthoritarian, subtracted under
    /// LeftLibertarian.
    pub condition_offset: CompassPoint,
    /// ThemeShift only: keyword (case-insensitive substring of the persona
    /// key) to target offset.
    #[serde(default)]
    pub theme_rules: BTreeMap<String, CompassPoint>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            mode: PlantMode::FixedPoint,
            target_points: vec![WeightedTarget {
                econ: 0.0,
                social: 0.0,
                weight: 1.0,
            }],
            noise_rate: 0.0,
            seed: 0,
            condition_offset: CompassPoint::new(6.0, 6.0),
            theme_rules: BTreeMap::new(),
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_points.is_empty() {
            return Err(Error::data("plant config needs at least one target point"));
        }
        if self.mode == PlantMode::FixedPoint && self.target_points.len() != 1 {
            return Err(Error::data(
                "fixed_point mode takes exactly one target point",
            ));
        }
        let mut weight_sum = 0.0;
        for t in &self.target_points {
            if !t.econ.is_finite() || !t.social.is_finite() {
                return Err(Error::data("target point coordinates must be finite"));
            }
            if !(t.weight > 0.0) {
                return Err(Error::data(format!(
                    "target weight must be positive, got {}",
                    t.weight
                )));
            }
            weight_sum += t.weight;
        }
        if (weight_sum - 1.0).abs() > 1e-12 {
            return Err(Error::data(format!(
                "target weights must sum to 1, got {weight_sum}"
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::data(format!(
                "noise_rate must lie in [0, 1), got {}",
                self.noise_rate
            )));
        }
        for kw in self.theme_rules.keys() {
            if kw.trim().is_empty() {
                return Err(Error::data("theme rule keyword must be non-empty"));
            }
        }
        Ok(())
    }
}

/// FNV-1a over length-delimited parts: stable across platforms and releases,
/// which the replay fixtures depend on.
fn fnv1a(parts: &[&[u8]]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for part in parts {
        for &b in (part.len() as u64).to_le_bytes().iter() {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

/// Uniform in [0, 1) from a hash: top 53 bits as a dyadic fraction.
fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn mix(seed: u64, domain: &str, key: &str, statement_id: u64) -> u64 {
    fnv1a(&[
        &seed.to_le_bytes(),
        domain.as_bytes(),
        key.as_bytes(),
        &statement_id.to_le_bytes(),
    ])
}

fn clamp_domain(p: CompassPoint) -> CompassPoint {
    CompassPoint::new(p.econ.clamp(-10.0, 10.0), p.social.clamp(-10.0, 10.0))
}

/// The target point a persona key walks toward under a condition.
pub fn select_target(cfg: &PlantConfig, persona_key: &str, condition: Condition) -> CompassPoint {
    let mut target = match cfg.mode {
        PlantMode::FixedPoint => cfg.target_points[0].point(),
        PlantMode::HashMixture | PlantMode::ThemeShift => {
            let u = unit_f64(mix(cfg.seed, "target", persona_key, 0));
            let mut cumulative = 0.0;
            let mut chosen = cfg.target_points[cfg.target_points.len() - 1].point();
            for t in &cfg.target_points {
                cumulative += t.weight;
                if u < cumulative {
                    chosen = t.point();
                    break;
                }
            }
            chosen
        }
    };
    if cfg.mode == PlantMode::ThemeShift {
        let key_lower = persona_key.to_lowercase();
        for (keyword, offset) in &cfg.theme_rules {
            if key_lower.contains(&keyword.to_lowercase()) {
                target.econ += offset.econ;
                target.social += offset.social;
            }
        }
    }
    match condition {
        Condition::Baseline => {}
        Condition::RightAuthoritarian => {
            target.econ += cfg.condition_offset.econ;
            target.social += cfg.condition_offset.social;
        }
        Condition::LeftLibertarian => {
            target.econ -= cfg.condition_offset.econ;
            target.social -= cfg.condition_offset.social;
        }
    }
    clamp_domain(target)
}

/// Plans the full 62-answer sheet for a persona key: per statement, in id
/// order, pick the choice whose resulting normalized score sits closest to
/// the target (ties to the earlier choice in canonical order). Noise draws
/// replace the emitted answer with a hash-uniform choice but never feed back
/// into the trajectory, so the flipped fraction stays an independent
/// per-statement Bernoulli.
pub fn plan_choices(
    cfg: &PlantConfig,
    matrix: &ScoringMatrix,
    persona_key: &str,
    condition: Condition,
) -> Vec<AnswerChoice> {
    let target = select_target(cfg, persona_key, condition);
    let mut econ_sum = 0.0;
    let mut social_sum = 0.0;
    let mut plan = Vec::with_capacity(STATEMENT_COUNT);
    for id in 1..=STATEMENT_COUNT as u8 {
        let mut best = AnswerChoice::ALL[0];
        let mut best_dist = f64::INFINITY;
        for candidate in AnswerChoice::ALL {
            let (de, ds) = matrix.delta(id, candidate);
            let e = (econ_sum + de + matrix.econ_offset) / matrix.econ_scale;
            let s = (social_sum + ds + matrix.social_offset) / matrix.social_scale;
            let dist = (e - target.econ).powi(2) + (s - target.social).powi(2);
            if dist < best_dist {
                best_dist = dist;
                best = candidate;
            }
        }
        let (de, ds) = matrix.delta(id, best);
        econ_sum += de;
        social_sum += ds;
        let noisy = cfg.noise_rate > 0.0
            && unit_f64(mix(cfg.seed, "noise", persona_key, id as u64)) < cfg.noise_rate;
        if noisy {
            let idx = (mix(cfg.seed, "pick", persona_key, id as u64) % 4) as usize;
            plan.push(AnswerChoice::ALL[idx]);
        } else {
            plan.push(best);
        }
    }
    plan
}

/// In-process responder: the answer the loopback server would give for this
/// persona and statement.
pub fn respond(
    persona: &ConditionedPersona,
    statement: &Statement,
    matrix: &ScoringMatrix,
    cfg: &PlantConfig,
) -> AnswerChoice {
    let key = canonical_persona_key(&persona.rendered_text);
    plan_choices(cfg, matrix, key, persona.condition)[statement.id as usize - 1]
}

/// Bag-of-tokens hash embedding: lowercase alphanumeric tokens counted into
/// a fixed number of hash buckets. Texts sharing vocabulary land near each
/// other, which is all the clustering stage needs from a mock.
pub fn mock_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; MOCK_EMBED_DIM];
    for token in text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let bucket = (fnv1a(&[token.as_bytes()]) % MOCK_EMBED_DIM as u64) as usize;
        v[bucket] += 1.0;
    }
    v
}

struct MockState {
    cfg: PlantConfig,
    matrix: ScoringMatrix,
    statements: Vec<Statement>,
}

fn bad_request(msg: impl Into<String>) -> Response {
    (StatusCode::BAD_REQUEST, msg.into()).into_response()
}

/// Extracts the span between `anchor` and the next blank line (or the end).
fn extract_span<'a>(haystack: &'a str, anchor: &str) -> Option<&'a str> {
    let start = haystack.find(anchor)? + anchor.len();
    let rest = &haystack[start..];
    Some(match rest.find("\n\n") {
        Some(end) => &rest[..end],
        None => rest,
    })
}

fn answer_for_prompt(state: &MockState, prompt: &str) -> std::result::Result<AnswerChoice, String> {
    let statement_text = extract_span(prompt, STATEMENT_ANCHOR)
        .ok_or_else(|| format!("prompt lacks the {STATEMENT_ANCHOR:?} anchor"))?;
    let statement = state
        .statements
        .iter()
        .find(|s| s.text == statement_text)
        .ok_or_else(|| format!("unknown statement text: {statement_text:?}"))?;
    let (key, condition) = match extract_span(prompt, PERSONA_ANCHOR) {
        Some(persona_text) => (
            canonical_persona_key(persona_text).to_string(),
            detect_condition(persona_text),
        ),
        // Bare-model probe: no persona sentence at all.
        None => (String::new(), Condition::Baseline),
    };
    Ok(plan_choices(&state.cfg, &state.matrix, &key, condition)[statement.id as usize - 1])
}

async fn chat_handler(
    State(state): State<Arc<MockState>>,
    Json(request): Json<wire::ChatCompletionRequest>,
) -> Response {
    let prompt = match request.messages.last() {
        Some(m) => m.content.as_str(),
        None => return bad_request("request carries no messages"),
    };
    let choice = match answer_for_prompt(&state, prompt) {
        Ok(c) => c,
        Err(msg) => return bad_request(msg),
    };
    if let Some(allowed) = &request.guided_choice {
        if !allowed.iter().any(|a| a == choice.canonical()) {
            return bad_request(format!(
                "guided_choice excludes the canonical answer {:?}",
                choice.canonical()
            ));
        }
    }
    let body = wire::ChatCompletionResponse {
        id: "mocknet-0".to_string(),
        object: "chat.completion".to_string(),
        model: request.model,
        choices: vec![wire::ResponseChoice {
            index: 0,
            message: wire::ChatMessage {
                role: "assistant".to_string(),
                content: choice.canonical().to_string(),
            },
            finish_reason: "stop".to_string(),
        }],
    };
    Json(body).into_response()
}

async fn embeddings_handler(
    State(_state): State<Arc<MockState>>,
    Json(request): Json<wire::EmbeddingsRequest>,
) -> Response {
    let data = request
        .input
        .iter()
        .enumerate()
        .map(|(i, text)| wire::EmbeddingItem {
            index: i as u32,
            embedding: mock_embedding(text),
        })
        .collect();
    Json(wire::EmbeddingsResponse {
        model: request.model,
        data,
    })
    .into_response()
}

/// Builds the loopback router serving the chat-completions and embeddings
/// wire protocol for this plant configuration.
pub fn router(cfg: PlantConfig, matrix: ScoringMatrix, statements: Vec<Statement>) -> Result<Router> {
    cfg.validate()?;
    if statements.len() != STATEMENT_COUNT {
        return Err(Error::data(format!(
            "mock server needs the full {STATEMENT_COUNT}-statement instrument, got {}",
            statements.len()
        )));
    }
    let state = Arc::new(MockState {
        cfg,
        matrix,
        statements,
    });
    Ok(Router::new()
        .route(crate::elicit::CHAT_COMPLETIONS_PATH, post(chat_handler))
        .route(crate::elicit::EMBEDDINGS_PATH, post(embeddings_handler))
        .with_state(state))
}

/// Binds the mock server on 127.0.0.1 (port 0 picks a free one) and returns
/// the bound address plus the serving task.
pub async fn spawn(
    cfg: PlantConfig,
    matrix: ScoringMatrix,
    statements: Vec<Statement>,
    port: u16,
) -> Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let app = router(cfg, matrix, statements)?;
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
        .await
        .map_err(|e| Error::transport(format!("cannot bind mock server port {port}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::transport(e.to_string()))?;
    let handle = tokio::spawn(async move {
        // The task lives until aborted; serve only returns on listener error.
        let _ = axum::serve(listener, app).await;
    });
    Ok((addr, handle))
}
