//! Test support: a scriptable chat-completions server and record builders.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, LazyLock};
use std::time::Duration;

use av_rationale::corpus::CorpusDoc;
use av_rationale::{BinLabel, FeatureAnalysis, FeatureKey, FinalScore, RationaleRecord, TriLabel};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use regex::Regex;
use serde_json::{json, Value};

/// Typeset sample rationale: labels MAYBE, NO, YES, NO, YES, NO, MAYBE, NO;
/// score 0.375; output NO.
pub const SAMPLE_OUTPUT: &str = include_str!("../fixtures/sample_output.txt");

/// What the mock answers for one request.
#[derive(Debug, Clone)]
pub enum MockReply {
    Text(String),
    /// Reply text after a pause, to make overlapping requests observable.
    Delayed(Duration, String),
    Status(u16),
}

type Handler = dyn Fn(&str) -> MockReply + Send + Sync;

#[derive(Clone)]
struct ServerState {
    handler: Arc<Handler>,
    requests: Arc<AtomicU64>,
    in_flight: Arc<AtomicUsize>,
    max_in_flight: Arc<AtomicUsize>,
}

/// A running mock. The server lives on its own runtime thread so it can
/// serve both async tests and subprocesses.
pub struct MockServer {
    pub addr: SocketAddr,
    requests: Arc<AtomicU64>,
    max_in_flight: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start(handler: impl Fn(&str) -> MockReply + Send + Sync + 'static) -> MockServer {
        let state = ServerState {
            handler: Arc::new(handler),
            requests: Arc::new(AtomicU64::new(0)),
            in_flight: Arc::new(AtomicUsize::new(0)),
            max_in_flight: Arc::new(AtomicUsize::new(0)),
        };
        let requests = state.requests.clone();
        let max_in_flight = state.max_in_flight.clone();
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()
                .expect("runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
                    .await
                    .expect("bind");
                tx.send(listener.local_addr().expect("addr"))
                    .expect("send addr");
                let app = Router::new()
                    .route("/v1/chat/completions", post(chat))
                    .with_state(state);
                axum::serve(listener, app).await.expect("serve");
            });
        });
        MockServer {
            addr: rx.recv().expect("server started"),
            requests,
            max_in_flight,
        }
    }

    /// Base URL to put in an endpoint config.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

async fn chat(State(state): State<ServerState>, Json(body): Json<Value>) -> Response {
    state.requests.fetch_add(1, Ordering::SeqCst);
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(now, Ordering::SeqCst);
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
    let reply = (state.handler)(prompt);
    let response = match reply {
        MockReply::Text(text) => completion(&text),
        MockReply::Delayed(pause, text) => {
            tokio::time::sleep(pause).await;
            completion(&text)
        }
        MockReply::Status(code) => (
            StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            "scripted failure",
        )
            .into_response(),
    };
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    response
}

fn completion(text: &str) -> Response {
    Json(json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
    }))
    .into_response()
}

/// Tag embedded in document text so the mock can tell pairs apart.
pub fn marker(pair_id: &str) -> String {
    format!("[[{pair_id}]]")
}

static MARKER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[\[([^\]]+)\]\]").unwrap());

/// First pair marker found in a prompt.
pub fn marker_in(prompt: &str) -> Option<String> {
    MARKER_RE.captures(prompt).map(|c| c[1].to_string())
}

/// A valid record with the given intermediate labels.
pub fn record(
    pair_id: &str,
    labels: [TriLabel; 8],
    score: &str,
    output: BinLabel,
) -> RationaleRecord {
    let features = FeatureKey::ALL
        .iter()
        .zip(labels)
        .map(|(&k, l)| {
            FeatureAnalysis::new(k, format!("Observed {} in both texts. {l}", k.as_str())).unwrap()
        })
        .collect();
    RationaleRecord::new(pair_id, features, FinalScore::parse(score).unwrap(), output).unwrap()
}

/// Canonical text of a record whose labels, score and output all agree.
pub fn consistent_rationale(pair_id: &str, output: BinLabel) -> String {
    let (label, score) = match output {
        BinLabel::Yes => (TriLabel::Yes, "0.8"),
        BinLabel::No => (TriLabel::No, "0.2"),
    };
    record(pair_id, [label; 8], score, output).to_canonical_json()
}

/// Documents with `docs_per_author` texts for each of `authors` authors.
pub fn synthetic_corpus(authors: usize, docs_per_author: usize) -> Vec<CorpusDoc> {
    let mut docs = Vec::with_capacity(authors * docs_per_author);
    for a in 0..authors {
        for d in 0..docs_per_author {
            docs.push(CorpusDoc {
                doc_id: format!("a{a:03}-d{d:02}"),
                author_id: format!("author{a:03}"),
                text: format!("Author {a} wrote document {d}. It has some words in it."),
            });
        }
    }
    docs
}
