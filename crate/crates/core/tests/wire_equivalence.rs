//! The loopback mock and the in-process responder must be the same oracle:
//! an answer elicited over HTTP equals the answer computed directly, for
//! every statement, persona, and condition. Plus the retry ladder against
//! scripted misbehaving servers.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use compass_core::corpus::{inject_descriptor, Condition, Persona};
use compass_core::elicit::{
    build_prompt, elicit_one, wire, Decoding, Endpoint, RunManifest,
};
use compass_core::error::Error;
use compass_core::mocknet::{self, plan_choices, respond, PlantConfig, PlantMode, WeightedTarget};
use compass_core::pct::{builtin_statements, ScoringMatrix};

fn manifest(url: &str) -> RunManifest {
    RunManifest {
        run_id: "wire-test".to_string(),
        endpoint_url: url.to_string(),
        model_name: "mock-model".to_string(),
        condition: Condition::Baseline,
        decoding: Decoding::default(),
        retry_limit: 3,
        concurrency_limit: 4,
        seed: 0,
        corpus_digest: "d".to_string(),
        matrix_digest: "d".to_string(),
    }
}

fn fast_endpoint(addr: std::net::SocketAddr) -> Endpoint {
    Endpoint::new(format!("http://{addr}")).with_backoff_base(Duration::from_millis(1))
}

#[tokio::test]
async fn served_answers_equal_in_process_answers() {
    let cfg = PlantConfig {
        mode: PlantMode::HashMixture,
        target_points: vec![
            WeightedTarget {
                econ: -6.0,
                social: -5.0,
                weight: 0.5,
            },
            WeightedTarget {
                econ: 4.0,
                social: 6.0,
                weight: 0.5,
            },
        ],
        noise_rate: 0.15,
        seed: 11,
        ..PlantConfig::default()
    };
    let matrix = ScoringMatrix::builtin();
    let statements = builtin_statements();
    let (addr, server) = mocknet::spawn(cfg.clone(), matrix.clone(), statements.clone(), 0)
        .await
        .unwrap();
    let endpoint = fast_endpoint(addr);
    let m = manifest(&endpoint.base_url);

    let personas = [
        Persona {
            id: 0,
            text: "a farmer who tends goats on a hillside".to_string(),
        },
        Persona {
            id: 1,
            text: "retired software engineer volunteering at schools".to_string(),
        },
    ];
    for persona in &personas {
        for condition in Condition::ALL {
            let conditioned = inject_descriptor(persona, condition);
            for statement in statements.iter().step_by(7) {
                let prompt = build_prompt(statement, Some(&conditioned));
                let outcome = elicit_one(&endpoint, &prompt, &m).await.unwrap();
                let expected = respond(&conditioned, statement, &matrix, &cfg);
                assert_eq!(outcome.parsed, Some(expected), "{}", conditioned.rendered_text);
                assert_eq!(outcome.attempts, 1);
                assert_eq!(outcome.raw_text, expected.canonical());
            }
        }
    }
    server.abort();
}

#[tokio::test]
async fn bare_prompt_elicits_the_empty_key_baseline_plan() {
    let cfg = PlantConfig {
        noise_rate: 0.2,
        seed: 3,
        ..PlantConfig::default()
    };
    let matrix = ScoringMatrix::builtin();
    let statements = builtin_statements();
    let (addr, server) = mocknet::spawn(cfg.clone(), matrix.clone(), statements.clone(), 0)
        .await
        .unwrap();
    let endpoint = fast_endpoint(addr);
    let m = manifest(&endpoint.base_url);

    let plan = plan_choices(&cfg, &matrix, "", Condition::Baseline);
    for statement in statements.iter().step_by(13) {
        let prompt = build_prompt(statement, None);
        let outcome = elicit_one(&endpoint, &prompt, &m).await.unwrap();
        assert_eq!(outcome.parsed, Some(plan[statement.id as usize - 1]));
    }
    server.abort();
}

/// Scripted server: responses are served off a list; past the end it answers
/// "Disagree" forever.
#[derive(Clone)]
struct Script {
    hits: Arc<AtomicUsize>,
    responses: Arc<Vec<ScriptStep>>,
}

#[derive(Clone)]
enum ScriptStep {
    Text(&'static str),
    Status(u16),
    Garbage,
}

async fn scripted_chat(
    State(script): State<Script>,
    Json(_req): Json<wire::ChatCompletionRequest>,
) -> axum::response::Response {
    use axum::response::IntoResponse;
    let n = script.hits.fetch_add(1, Ordering::SeqCst);
    let step = script
        .responses
        .get(n)
        .cloned()
        .unwrap_or(ScriptStep::Text("Disagree"));
    match step {
        ScriptStep::Text(text) => Json(wire::ChatCompletionResponse {
            id: "scripted-0".to_string(),
            object: "chat.completion".to_string(),
            model: "scripted".to_string(),
            choices: vec![wire::ResponseChoice {
                index: 0,
                message: wire::ChatMessage {
                    role: "assistant".to_string(),
                    content: text.to_string(),
                },
                finish_reason: "stop".to_string(),
            }],
        })
        .into_response(),
        ScriptStep::Status(code) => (
            axum::http::StatusCode::from_u16(code).unwrap(),
            "scripted failure",
        )
            .into_response(),
        ScriptStep::Garbage => (axum::http::StatusCode::OK, "not json at all").into_response(),
    }
}

async fn spawn_scripted(steps: Vec<ScriptStep>) -> (std::net::SocketAddr, Arc<AtomicUsize>) {
    let hits = Arc::new(AtomicUsize::new(0));
    let script = Script {
        hits: hits.clone(),
        responses: Arc::new(steps),
    };
    let app = Router::new()
        .route("/v1/chat/completions", post(scripted_chat))
        .with_state(script);
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", 0)).await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    (addr, hits)
}

#[tokio::test]
async fn unparseable_answer_is_retried_then_succeeds() {
    let (addr, hits) = spawn_scripted(vec![ScriptStep::Text("I think this is nuanced")]).await;
    let endpoint = fast_endpoint(addr);
    let m = manifest(&endpoint.base_url);
    let outcome = elicit_one(&endpoint, "prompt", &m).await.unwrap();
    assert_eq!(outcome.parsed.map(|c| c.canonical()), Some("Disagree"));
    assert_eq!(outcome.attempts, 2);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[tokio::test]
async fn server_errors_and_rate_limits_are_retried() {
    let (addr, _) = spawn_scripted(vec![ScriptStep::Status(500), ScriptStep::Status(429)]).await;
    let endpoint = fast_endpoint(addr);
    let m = manifest(&endpoint.base_url);
    let outcome = elicit_one(&endpoint, "prompt", &m).await.unwrap();
    assert_eq!(outcome.parsed.map(|c| c.canonical()), Some("Disagree"));
    assert_eq!(outcome.attempts, 3);
}

#[tokio::test]
async fn garbage_bodies_exhaust_the_budget_without_erroring() {
    let (addr, hits) = spawn_scripted(vec![
        ScriptStep::Garbage,
        ScriptStep::Garbage,
        ScriptStep::Garbage,
    ])
    .await;
    let endpoint = fast_endpoint(addr);
    let m = manifest(&endpoint.base_url);
    let outcome = elicit_one(&endpoint, "prompt", &m).await.unwrap();
    assert_eq!(outcome.parsed, None);
    assert_eq!(outcome.attempts, m.retry_limit);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn auth_style_rejections_are_fatal_immediately() {
    let (addr, hits) = spawn_scripted(vec![ScriptStep::Status(401)]).await;
    let endpoint = fast_endpoint(addr);
    let m = manifest(&endpoint.base_url);
    let err = elicit_one(&endpoint, "prompt", &m).await.unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn guided_choice_narrowing_is_honored_over_the_wire() {
    let cfg = PlantConfig::default();
    let matrix = ScoringMatrix::builtin();
    let statements = builtin_statements();
    let (addr, server) = mocknet::spawn(cfg, matrix, statements.clone(), 0).await.unwrap();
    let client = reqwest::Client::new();

    // Every canonical string allowed: 200 with a canonical answer.
    let persona = inject_descriptor(
        &Persona {
            id: 0,
            text: "a blacksmith".to_string(),
        },
        Condition::Baseline,
    );
    let prompt = build_prompt(&statements[0], Some(&persona));
    let ok = client
        .post(format!("http://{addr}/v1/chat/completions"))
        .json(&wire::ChatCompletionRequest {
            model: "m".to_string(),
            messages: vec![wire::ChatMessage {
                role: "user".to_string(),
                content: prompt.clone(),
            }],
            temperature: 0.0,
            max_tokens: Some(8),
            guided_choice: None,
        })
        .send()
        .await
        .unwrap();
    assert_eq!(ok.status().as_u16(), 200);

    // Guided set excluding the canonical answer: the constraint cannot be
    // satisfied and the server must say so.
    let narrowed = client
        .post(format!("http://{addr}/v1/chat/completions"))
        .json(&wire::ChatCompletionRequest {
            model: "m".to_string(),
            messages: vec![wire::ChatMessage {
                role: "user".to_string(),
                content: prompt,
            }],
            temperature: 0.0,
            max_tokens: Some(8),
            guided_choice: Some(vec!["Yes".to_string(), "No".to_string()]),
        })
        .send()
        .await
        .unwrap();
    assert_eq!(narrowed.status().as_u16(), 400);
    server.abort();
}
