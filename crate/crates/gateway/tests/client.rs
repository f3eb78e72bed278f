use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use cystscribe_gateway::exchange::{ExchangeLog, MemoryExchanges};
use cystscribe_gateway::stub::{StubOptions, StubReply, StubRequest, StubServer};
use cystscribe_gateway::{
    build_prompt, DecodingProfile, EndpointConfig, ExchangeSink, Gateway, GatewayError, PromptMode, RetryPolicy,
};

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 5,
        base_delay_ms: 1,
        max_delay_ms: 5,
        max_rate_limit_waits: 10,
    }
}

fn endpoint(server: &StubServer) -> EndpointConfig {
    let mut cfg = EndpointConfig::new(&server.base_url(), "stub-model");
    cfg.retry = fast_retry();
    cfg
}

fn numbered() -> Arc<dyn Fn(&StubRequest) -> StubReply + Send + Sync> {
    let counter = Arc::new(AtomicUsize::new(0));
    Arc::new(move |req: &StubRequest| {
        StubReply::Choices(
            (0..req.n)
                .map(|_| format!("{{\"sample\": {}}}", counter.fetch_add(1, Ordering::SeqCst)))
                .collect(),
        )
    })
}

#[tokio::test]
async fn returns_exactly_num_samples_with_top_up() {
    for (cap, n) in [(None, 1), (None, 40), (Some(3), 40), (Some(1), 7), (Some(7), 20)] {
        let server = StubServer::start_with(
            numbered(),
            StubOptions {
                max_choices: cap,
                ..StubOptions::default()
            },
        )
        .await
        .unwrap();
        let mut cfg = endpoint(&server);
        cfg.max_n_per_request = 16;
        let gateway = Gateway::new(cfg, None).unwrap();
        let profile = DecodingProfile::sampling("t", 0.4, 0.9, n);
        let bundle = build_prompt("Pancreas: 4 mm cyst.", PromptMode::Standard).unwrap();
        let texts = gateway.complete(&bundle, &profile).await.unwrap();
        assert_eq!(texts.len(), n as usize, "cap {cap:?} n {n}");
        let mut seen: Vec<_> = texts.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), texts.len());
    }
}

#[tokio::test]
async fn self_consistency_preset_returns_forty() {
    let server = StubServer::fixed("{}").await.unwrap();
    let gateway = Gateway::new(endpoint(&server), None).unwrap();
    let bundle = build_prompt("Pancreas: 4 mm cyst.", PromptMode::Cot).unwrap();
    let texts = gateway
        .complete(&bundle, &DecodingProfile::self_consistency())
        .await
        .unwrap();
    assert_eq!(texts.len(), 40);
    let body = &server.stats().bodies()[0];
    assert_eq!(body["temperature"], 0.4);
    assert_eq!(body["top_p"], 0.9);
    assert_eq!(body["messages"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn beam_profile_uses_backend_parameter_or_falls_back() {
    let server = StubServer::fixed("{}").await.unwrap();
    let bundle = build_prompt("r", PromptMode::Cot).unwrap();

    let mut cfg = endpoint(&server);
    cfg.supports_beam_search = true;
    let texts = Gateway::new(cfg, None)
        .unwrap()
        .complete(&bundle, &DecodingProfile::beam5())
        .await
        .unwrap();
    assert_eq!(texts.len(), 1);
    let body = &server.stats().bodies()[0];
    assert_eq!(body["use_beam_search"], true);
    assert_eq!(body["best_of"], 5);

    let texts = Gateway::new(endpoint(&server), None)
        .unwrap()
        .complete(&bundle, &DecodingProfile::beam5())
        .await
        .unwrap();
    assert_eq!(texts.len(), 1);
    let body = &server.stats().bodies()[1];
    assert!(body.get("use_beam_search").is_none());
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["n"], 1);
}

#[tokio::test]
async fn server_errors_retry_under_one_request_id() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = StubServer::start(Arc::new(move |_req: &StubRequest| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            StubReply::Status {
                status: 503,
                retry_after: None,
                body: "busy".into(),
            }
        } else {
            StubReply::Choices(vec!["{}".into()])
        }
    }))
    .await
    .unwrap();
    let sink = Arc::new(MemoryExchanges::default());
    let gateway = Gateway::new(endpoint(&server), Some(sink.clone() as Arc<dyn ExchangeSink>)).unwrap();
    let bundle = build_prompt("r", PromptMode::Standard).unwrap();
    let texts = gateway
        .complete(&bundle, &DecodingProfile::gpt_standard())
        .await
        .unwrap();
    assert_eq!(texts, ["{}"]);
    let ids = server.stats().request_ids();
    assert_eq!(ids.len(), 3);
    assert!(ids.iter().all(|id| id == &ids[0]));
    let records = sink.snapshot();
    assert_eq!(records.iter().map(|r| r.attempt).collect::<Vec<_>>(), [1, 2, 3]);
    assert_eq!(
        records.iter().map(|r| r.status).collect::<Vec<_>>(),
        [Some(503), Some(503), Some(200)]
    );

    // Same logical call, same id on a fresh run.
    let again = Gateway::new(endpoint(&server), None).unwrap();
    again.complete(&bundle, &DecodingProfile::gpt_standard()).await.unwrap();
    assert_eq!(server.stats().request_ids()[3], ids[0]);
}

#[tokio::test]
async fn persistent_server_errors_give_up_after_five_attempts() {
    let server = StubServer::start(Arc::new(|_req: &StubRequest| StubReply::Status {
        status: 500,
        retry_after: None,
        body: "boom".into(),
    }))
    .await
    .unwrap();
    let gateway = Gateway::new(endpoint(&server), None).unwrap();
    let bundle = build_prompt("r", PromptMode::Standard).unwrap();
    let err = gateway
        .complete(&bundle, &DecodingProfile::gpt_standard())
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::Status { status: 500, ref body, .. } if body == "boom"));
    assert_eq!(server.stats().requests(), 5);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let server = StubServer::start(Arc::new(|_req: &StubRequest| StubReply::Status {
        status: 400,
        retry_after: None,
        body: "bad".into(),
    }))
    .await
    .unwrap();
    let gateway = Gateway::new(endpoint(&server), None).unwrap();
    let bundle = build_prompt("r", PromptMode::Standard).unwrap();
    assert!(gateway
        .complete(&bundle, &DecodingProfile::gpt_standard())
        .await
        .is_err());
    assert_eq!(server.stats().requests(), 1);
}

#[tokio::test]
async fn rate_limit_rejections_wait_for_retry_after() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = StubServer::start(Arc::new(move |_req: &StubRequest| {
        // More 429s than the transport retry budget allows.
        if c.fetch_add(1, Ordering::SeqCst) < 7 {
            StubReply::Status {
                status: 429,
                retry_after: Some(0),
                body: "slow down".into(),
            }
        } else {
            StubReply::Choices(vec!["{}".into()])
        }
    }))
    .await
    .unwrap();
    let gateway = Gateway::new(endpoint(&server), None).unwrap();
    let bundle = build_prompt("r", PromptMode::Standard).unwrap();
    let texts = gateway
        .complete(&bundle, &DecodingProfile::gpt_standard())
        .await
        .unwrap();
    assert_eq!(texts.len(), 1);
    assert_eq!(server.stats().requests(), 8);

    let server = StubServer::start(Arc::new(|_req: &StubRequest| StubReply::Status {
        status: 429,
        retry_after: Some(1),
        body: String::new(),
    }))
    .await
    .unwrap();
    let mut cfg = endpoint(&server);
    cfg.retry.max_rate_limit_waits = 1;
    let start = Instant::now();
    let err = Gateway::new(cfg, None)
        .unwrap()
        .complete(&bundle, &DecodingProfile::gpt_standard())
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::RateLimited { waits: 1, .. }));
    assert!(start.elapsed() >= Duration::from_secs(1));
}

#[tokio::test]
async fn malformed_response_surfaces_raw_body() {
    let server = StubServer::start(Arc::new(|_req: &StubRequest| {
        StubReply::Raw("<html>oops</html>".into())
    }))
    .await
    .unwrap();
    let gateway = Gateway::new(endpoint(&server), None).unwrap();
    let bundle = build_prompt("r", PromptMode::Standard).unwrap();
    match gateway.complete(&bundle, &DecodingProfile::gpt_standard()).await {
        Err(GatewayError::Malformed { body, .. }) => assert_eq!(body, "<html>oops</html>"),
        other => panic!("unexpected {other:?}"),
    }
}

#[tokio::test]
async fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let mut cfg = EndpointConfig::new(&format!("http://127.0.0.1:{port}/v1"), "m");
    cfg.retry = fast_retry();
    let sink = Arc::new(MemoryExchanges::default());
    let gateway = Gateway::new(cfg, Some(sink.clone() as Arc<dyn ExchangeSink>)).unwrap();
    let bundle = build_prompt("r", PromptMode::Standard).unwrap();
    let err = gateway
        .complete(&bundle, &DecodingProfile::gpt_standard())
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::Transport { attempts: 5, .. }));
    assert_eq!(sink.snapshot().len(), 5);
    assert!(sink.snapshot().iter().all(|r| r.error.is_some() && r.status.is_none()));
}

#[tokio::test]
async fn missing_api_key_variable_is_a_config_error() {
    let mut cfg = EndpointConfig::new("http://127.0.0.1:1/v1", "m");
    cfg.api_key_env = Some("CYSTSCRIBE_TEST_UNSET_KEY".into());
    assert!(matches!(Gateway::new(cfg, None), Err(GatewayError::Config(_))));
}

#[tokio::test]
async fn exchanges_are_persisted_as_jsonl_before_return() {
    let server = StubServer::fixed("{\"a\": 1}").await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exchanges.jsonl");
    let log = Arc::new(ExchangeLog::open(&path).unwrap());
    let mut cfg = endpoint(&server);
    cfg.max_n_per_request = 4;
    let gateway = Gateway::new(cfg, Some(log as Arc<dyn ExchangeSink>)).unwrap();
    let bundle = build_prompt("r", PromptMode::Standard).unwrap();
    gateway
        .complete(&bundle, &DecodingProfile::sampling("t", 0.4, 0.9, 10))
        .await
        .unwrap();
    let records = ExchangeLog::read_all(&path).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records
        .iter()
        .all(|r| r.status == Some(200) && r.endpoint.starts_with("stub-model@127.0.0.1")));
    let ns: Vec<_> = records.iter().map(|r| r.request["n"].as_u64().unwrap()).collect();
    let mut sorted = ns.clone();
    sorted.sort();
    assert_eq!(sorted, [2, 4, 4]);
}

#[tokio::test]
async fn in_flight_cap_is_respected() {
    let server = StubServer::start_with(
        numbered(),
        StubOptions {
            latency: Duration::from_millis(30),
            max_choices: Some(1),
            ..StubOptions::default()
        },
    )
    .await
    .unwrap();
    let mut cfg = endpoint(&server);
    cfg.max_in_flight = 3;
    cfg.max_n_per_request = 1;
    let gateway = Gateway::new(cfg, None).unwrap();
    let bundle = build_prompt("r", PromptMode::Standard).unwrap();
    let texts = gateway
        .complete(&bundle, &DecodingProfile::sampling("t", 0.4, 0.9, 12))
        .await
        .unwrap();
    assert_eq!(texts.len(), 12);
    assert!(server.stats().max_in_flight() <= 3);
    assert!(server.stats().max_in_flight() >= 2);
}

#[tokio::test]
async fn rate_limit_holds_on_a_short_window() {
    let server = StubServer::fixed("{}").await.unwrap();
    let mut cfg = endpoint(&server);
    cfg.requests_per_minute = Some(3);
    cfg.rate_window_ms = 200;
    cfg.max_in_flight = 16;
    let gateway = Gateway::new(cfg, None).unwrap();
    let bundle = build_prompt("r", PromptMode::Standard).unwrap();
    let start = Instant::now();
    let mut set = tokio::task::JoinSet::new();
    for i in 0..9 {
        let g = gateway.clone();
        let b = build_prompt(&format!("report {i}"), PromptMode::Standard).unwrap();
        set.spawn(async move { g.complete(&b, &DecodingProfile::gpt_standard()).await.map(|t| t.len()) });
    }
    while let Some(r) = set.join_next().await {
        assert_eq!(r.unwrap().unwrap(), 1);
    }
    assert!(start.elapsed() >= Duration::from_millis(400));
    assert_eq!(server.stats().requests(), 9);
    drop(bundle);
}
