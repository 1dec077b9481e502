use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use av_rationale::gateway::{EndpointConfig, Gateway, GatewayError};
use av_rationale::BinLabel;
use av_rationale::{build_prompt, DocumentPair, PromptKind, RenderedPrompt};
use av_testkit::{marker, marker_in, MockReply, MockServer};

fn endpoint(server: &MockServer) -> EndpointConfig {
    let mut cfg = EndpointConfig::new(server.base_url().parse().unwrap(), "mock-model");
    cfg.backoff_base_ms = 5;
    cfg.backoff_cap_ms = 20;
    cfg.timeout_secs = 10;
    cfg
}

fn prompts(n: usize) -> Vec<RenderedPrompt> {
    (0..n)
        .map(|i| {
            let id = format!("p{i:02}");
            let pair = DocumentPair::new(
                &id,
                format!("first {}", marker(&id)),
                "second",
                BinLabel::Yes,
                "t",
            )
            .unwrap();
            build_prompt(PromptKind::Cave, &pair)
        })
        .collect()
}

fn echo() -> MockServer {
    MockServer::start(|p| MockReply::Text(format!("echo {}", marker_in(p).unwrap_or_default())))
}

#[tokio::test]
async fn echo_and_multiple_responses() {
    let server = echo();
    let mut cfg = endpoint(&server);
    cfg.n_responses = 2;
    let gw = Gateway::new(cfg).unwrap();
    let out = gw.complete(&prompts(1)[0]).await.unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(
        out.iter().map(|r| r.response_index).collect::<Vec<_>>(),
        [0, 1]
    );
    assert!(out
        .iter()
        .all(|r| r.text == "echo p00" && r.pair_id == "p00" && !r.cached));
    assert_eq!(server.requests(), 2);
}

#[tokio::test]
async fn warm_cache_makes_no_requests() {
    let server = echo();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = endpoint(&server);
    cfg.cache_dir = Some(dir.path().to_path_buf());
    let ps = prompts(5);
    let gw = Gateway::new(cfg.clone()).unwrap();
    let (first, summary) = gw.run_batch(&ps, 3).await;
    assert_eq!(summary.succeeded, 5);
    let cold = server.requests();
    assert_eq!(cold, 5);

    let gw = Gateway::new(cfg).unwrap();
    let (second, _) = gw.run_batch(&ps, 3).await;
    assert_eq!(server.requests(), cold);
    assert_eq!(gw.network_requests(), 0);
    let text = |items: &[av_rationale::gateway::BatchItem], id: &str| {
        items
            .iter()
            .find(|(p, _)| p == id)
            .unwrap()
            .1
            .as_ref()
            .unwrap()[0]
            .text
            .clone()
    };
    for p in &ps {
        assert_eq!(text(&first, &p.pair_id), text(&second, &p.pair_id));
    }
    assert!(second.iter().all(|(_, r)| r.as_ref().unwrap()[0].cached));
}

#[tokio::test]
async fn concurrency_is_bounded() {
    let server = MockServer::start(|_| MockReply::Delayed(Duration::from_millis(60), "ok".into()));
    let gw = Gateway::new(endpoint(&server)).unwrap();
    let (_, summary) = gw.run_batch(&prompts(12), 3).await;
    assert_eq!(summary.succeeded, 12);
    assert!(
        server.max_in_flight() <= 3,
        "saw {}",
        server.max_in_flight()
    );
    assert!(
        server.max_in_flight() >= 2,
        "batch did not overlap requests"
    );
}

#[tokio::test]
async fn failures_are_isolated() {
    let server = MockServer::start(|p| match marker_in(p).as_deref() {
        Some("p01") | Some("p03") => MockReply::Status(500),
        _ => MockReply::Text("fine".into()),
    });
    let mut cfg = endpoint(&server);
    cfg.max_retries = 2;
    let gw = Gateway::new(cfg).unwrap();
    let (items, summary) = gw.run_batch(&prompts(6), 4).await;
    assert_eq!((summary.succeeded, summary.failed), (4, 2));
    for (id, r) in &items {
        if id == "p01" || id == "p03" {
            assert!(matches!(
                r,
                Err(GatewayError::RetriesExhausted { attempts: 3, .. })
            ));
        } else {
            assert!(r.is_ok());
        }
    }
    // 4 successes + 2 failures x 3 attempts.
    assert_eq!(server.requests(), 10);
}

#[tokio::test]
async fn transient_429_then_success() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = MockServer::start(move |_| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            MockReply::Status(429)
        } else {
            MockReply::Text("late".into())
        }
    });
    let gw = Gateway::new(endpoint(&server)).unwrap();
    let out = gw.complete(&prompts(1)[0]).await.unwrap();
    assert_eq!(out[0].text, "late");
    assert_eq!(server.requests(), 3);
}

#[tokio::test]
async fn auth_failure_is_fatal_without_retry() {
    let server = MockServer::start(|_| MockReply::Status(401));
    let gw = Gateway::new(endpoint(&server)).unwrap();
    let err = gw.complete(&prompts(1)[0]).await.unwrap_err();
    assert!(matches!(err, GatewayError::Auth { status: 401, .. }));
    assert!(err.is_fatal());
    assert_eq!(server.requests(), 1);
}

#[tokio::test]
async fn missing_key_env_is_reported() {
    let server = echo();
    let mut cfg = endpoint(&server);
    cfg.api_key_env = Some("AVR_TEST_KEY_THAT_IS_NOT_SET".into());
    let gw = Gateway::new(cfg).unwrap();
    let err = gw.complete(&prompts(1)[0]).await.unwrap_err();
    assert!(matches!(err, GatewayError::MissingApiKey(_)));
    assert_eq!(server.requests(), 0);
}

#[tokio::test]
async fn empty_batch() {
    let server = echo();
    let gw = Gateway::new(endpoint(&server)).unwrap();
    let (items, summary) = gw.run_batch(&[], 4).await;
    assert!(items.is_empty());
    assert_eq!((summary.succeeded, summary.failed), (0, 0));
    assert_eq!(server.requests(), 0);
}
