mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::{chat_reply, FixtureServer};
use dialect_mbr::clients::{
    generate_candidates, score_text, ClientError, GenConfig, RemoteScorer, RemoteScorerConfig, ScorerBackend,
};
use dialect_mbr::metrics::ScorerError;
use dialect_mbr::DialectScorer;

fn seed_echo() -> FixtureServer {
    FixtureServer::start(|req| {
        let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
        (200, chat_reply(&format!("candidate seed={}", body["seed"])))
    })
}

fn gen_cfg(url: &str, n: usize) -> GenConfig {
    GenConfig {
        endpoint: format!("{url}/v1"),
        model: "fixture".into(),
        num_candidates: n,
        seed_base: Some(100),
        retry_backoff: Duration::ZERO,
        timeout: Duration::from_secs(5),
        ..GenConfig::default()
    }
}

#[test]
fn twenty_candidates_in_index_order() {
    let server = seed_echo();
    let set = generate_candidates("اكتب جملة", "p1", &gen_cfg(&server.url, 20)).unwrap();
    assert_eq!(set.len(), 20);
    for (i, c) in set.candidates().iter().enumerate() {
        assert_eq!(c.index, i);
        assert_eq!(c.text, format!("candidate seed={}", 100 + i));
    }
    assert_eq!(server.count(), 20);
    let reqs = server.requests.lock().unwrap();
    assert!(reqs.iter().all(|r| r.path == "/v1/chat/completions"));
}

#[test]
fn request_body_carries_sampling_settings() {
    let server = seed_echo();
    let mut cfg = gen_cfg(&server.url, 1);
    cfg.api_key = Some("secret".into());
    let set = generate_candidates("hello", "p", &cfg).unwrap();
    assert_eq!(set.len(), 1);
    let body = &server.bodies()[0];
    assert_eq!(body["model"], "fixture");
    assert_eq!(body["messages"][0]["content"], "hello");
    assert_eq!(body["temperature"], 0.9);
    assert_eq!(body["top_p"], 0.95);
    assert_eq!(body["seed"], 100);
    let reqs = server.requests.lock().unwrap();
    assert!(reqs[0].headers.iter().any(|(k, v)| k == "authorization" && v == "Bearer secret"));
}

#[test]
fn persistent_server_error_fails_whole_set() {
    let server = FixtureServer::start(|_| (500, "{\"error\":\"boom\"}".into()));
    let mut cfg = gen_cfg(&server.url, 3);
    cfg.max_retries = 2;
    let err = generate_candidates("x", "p9", &cfg).unwrap_err();
    match err {
        ClientError::Status { prompt_id, status, attempts, .. } => {
            assert_eq!(prompt_id, "p9");
            assert_eq!(status, 500);
            assert_eq!(attempts, 3);
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(server.count(), 9);
}

#[test]
fn transient_failure_is_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = Arc::clone(&calls);
    let server = FixtureServer::start(move |_| {
        if seen.fetch_add(1, Ordering::SeqCst) == 0 {
            (503, "busy".into())
        } else {
            (200, chat_reply("ok"))
        }
    });
    let set = generate_candidates("x", "p", &gen_cfg(&server.url, 1)).unwrap();
    assert_eq!(set.candidates()[0].text, "ok");
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

#[test]
fn malformed_completion_is_reported() {
    let server = FixtureServer::start(|_| (200, "{\"choices\":[]}".into()));
    let mut cfg = gen_cfg(&server.url, 1);
    cfg.max_retries = 0;
    let err = generate_candidates("x", "p", &cfg).unwrap_err();
    assert!(matches!(err, ClientError::MalformedResponse { index: 0, .. }), "{err}");
}

#[test]
fn unreachable_server_is_transport_error() {
    let mut cfg = gen_cfg("http://127.0.0.1:1", 1);
    cfg.max_retries = 0;
    let err = generate_candidates("x", "p", &cfg).unwrap_err();
    assert!(matches!(err, ClientError::Transport { .. }), "{err}");
}

fn remote(url: &str) -> ScorerBackend {
    ScorerBackend::Remote(
        RemoteScorer::new(RemoteScorerConfig {
            endpoint: url.to_string(),
            retry_backoff: Duration::ZERO,
            max_retries: 1,
            ..RemoteScorerConfig::default()
        })
        .unwrap(),
    )
}

#[test]
fn remote_scorer_passes_scores_through() {
    let server = FixtureServer::start(|_| (200, "{\"aldi\":0.8,\"nadi\":{\"syr\":0.5}}".into()));
    let backend = remote(&server.url);
    let score = score_text("شو هاد", "syr", &backend).unwrap();
    assert_eq!(score.aldi, 0.8);
    assert_eq!(score.nadi_probs.get("syr"), Some(&0.5));
    assert_eq!(score.target_dialect, "syr");
    assert!((backend.adi2("شو هاد", "syr").unwrap() - 0.4).abs() < 1e-15);

    let reqs = server.requests.lock().unwrap();
    assert_eq!(reqs[0].path, "/score");
    let body: serde_json::Value = serde_json::from_str(&reqs[0].body).unwrap();
    assert_eq!(body["text"], "شو هاد");
    assert_eq!(body["target_dialect"], "syr");
}

#[test]
fn remote_scorer_rejects_bad_payloads_without_retry() {
    let server = FixtureServer::start(|_| (200, "{\"aldi\":1.5,\"nadi_probs\":{\"syr\":0.5}}".into()));
    let err = score_text("x", "syr", &remote(&server.url)).unwrap_err();
    assert!(matches!(err, ScorerError::Metrics(_)), "{err}");
    assert_eq!(server.count(), 1);

    let server = FixtureServer::start(|_| (200, "{\"label\":\"syr\"}".into()));
    let err = score_text("x", "syr", &remote(&server.url)).unwrap_err();
    assert!(matches!(err, ScorerError::Schema(_)), "{err}");
}

#[test]
fn remote_scorer_status_after_retries() {
    let server = FixtureServer::start(|_| (502, "bad gateway".into()));
    let err = score_text("x", "syr", &remote(&server.url)).unwrap_err();
    assert!(matches!(err, ScorerError::Status { status: 502, .. }), "{err}");
    assert_eq!(server.count(), 2);
}

#[test]
fn missing_target_from_remote_is_error() {
    let server = FixtureServer::start(|_| (200, "{\"aldi\":0.8,\"nadi_probs\":{\"mor\":0.5}}".into()));
    let err = remote(&server.url).adi2("x", "syr").unwrap_err();
    assert!(err.to_string().contains("syr"), "{err}");
}
