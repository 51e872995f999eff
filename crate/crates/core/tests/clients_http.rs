//! Network clients against a scripted loopback server.

mod common;

use std::time::Duration;

use common::http::{dead_url, MockServer};
use serde_json::json;
use tooluse::clients::{
    ChatEndpoint, ClientError, HttpModelClient, HttpToolHost, ModelClient, ModelRequest,
    RetryPolicy, ToolHost, ToolRequest,
};
use tooluse::curation::{dedup_texts, EmbeddingEndpoint, EmbeddingSimilarity, Similarity};

fn fast_retry(attempts: u32) -> RetryPolicy {
    RetryPolicy {
        attempts,
        base_delay: Duration::from_millis(5),
        max_delay: Duration::from_millis(20),
    }
}

fn chat_reply(text: &str) -> String {
    json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] }).to_string()
}

#[test]
fn chat_client_sends_schema_and_reads_first_choice() {
    let server = MockServer::start(vec![(
        200,
        chat_reply("Thought: Do I need to use a tool? No\nAI: hi"),
    )]);
    let mut ep = ChatEndpoint::new(format!("{}/v1/chat/completions", server.url), "teacher-x");
    ep.api_key_env = "TOOLUSE_TEST_KEY_SET".into();
    std::env::set_var("TOOLUSE_TEST_KEY_SET", "sk-test-123");
    let client = HttpModelClient::new(ep).unwrap().with_retry(fast_retry(1));

    let req = ModelRequest::new("prompt text")
        .with_temperature(0.7)
        .with_stop("\nObservation:");
    let out = client.complete(&req).unwrap();
    assert!(out.ends_with("AI: hi"));

    let got = server.received();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].method, "POST");
    assert_eq!(got[0].path, "/v1/chat/completions");
    assert_eq!(got[0].header("authorization"), Some("Bearer sk-test-123"));
    let body = got[0].json();
    assert_eq!(body["model"], "teacher-x");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "prompt text");
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["stop"][0], "\nObservation:");
    assert_eq!(client.log().len(), 1);
}

#[test]
fn missing_credential_variable_sends_no_authorization() {
    let server = MockServer::start(vec![(200, chat_reply("ok"))]);
    let mut ep = ChatEndpoint::new(server.url.clone(), "m");
    ep.api_key_env = "TOOLUSE_TEST_KEY_NEVER_SET".into();
    let client = HttpModelClient::new(ep).unwrap();
    client.complete(&ModelRequest::new("p")).unwrap();
    assert_eq!(server.received()[0].header("authorization"), None);
}

#[test]
fn server_errors_are_retried() {
    let server = MockServer::start(vec![
        (503, "busy".into()),
        (500, "busy".into()),
        (200, chat_reply("third time")),
    ]);
    let client = HttpModelClient::new(ChatEndpoint::new(server.url.clone(), "m"))
        .unwrap()
        .with_retry(fast_retry(3));
    assert_eq!(
        client.complete(&ModelRequest::new("p")).unwrap(),
        "third time"
    );
    assert_eq!(server.received().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(vec![(400, "bad request".into())]);
    let client = HttpModelClient::new(ChatEndpoint::new(server.url.clone(), "m"))
        .unwrap()
        .with_retry(fast_retry(3));
    let err = client.complete(&ModelRequest::new("p")).unwrap_err();
    assert!(matches!(err, ClientError::ModelUnavailable(ref m) if m.contains("bad request")));
    assert_eq!(server.received().len(), 1);
}

#[test]
fn unreachable_model_is_an_upstream_error() {
    let client = HttpModelClient::new(ChatEndpoint::new(dead_url(), "m"))
        .unwrap()
        .with_retry(fast_retry(2));
    let err = client.complete(&ModelRequest::new("p")).unwrap_err();
    assert!(err.is_upstream(), "{err:?}");
}

#[test]
fn tool_host_routes_by_slug_and_returns_body() {
    let server = MockServer::start(vec![(200, "image/out_edge.png".into())]);
    let host = HttpToolHost::new(server.url.clone(), 2).unwrap();
    let req = ToolRequest::new("Edge Detection On Image", vec!["image/a.png".into()]).unwrap();
    assert_eq!(host.invoke(&req).unwrap(), "image/out_edge.png");
    let got = server.received();
    assert_eq!(got[0].path, "/tools/edge-detection-on-image");
    assert_eq!(
        got[0].json(),
        json!({ "tool": "Edge Detection On Image", "arguments": ["image/a.png"] })
    );
}

#[test]
fn tool_failure_keeps_status_and_body() {
    let server = MockServer::start(vec![(500, "CUDA out of memory".into())]);
    let host = HttpToolHost::new(server.url.clone(), 1)
        .unwrap()
        .with_retry(fast_retry(3));
    let req = ToolRequest::new("Image Super-Resolution", vec!["image/a.png".into()]).unwrap();
    match host.invoke(&req).unwrap_err() {
        ClientError::ToolFailure { tool, status, body } => {
            assert_eq!(tool, "Image Super-Resolution");
            assert_eq!(status, 500);
            assert_eq!(body, "CUDA out of memory");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unreachable_tool_host_is_upstream() {
    let host = HttpToolHost::new(dead_url(), 1)
        .unwrap()
        .with_retry(fast_retry(1));
    let req = ToolRequest::new("Detection", vec!["image/a.png".into()]).unwrap();
    let err = host.invoke(&req).unwrap_err();
    assert!(
        matches!(err, ClientError::ToolHostUnavailable(_)),
        "{err:?}"
    );
}

#[test]
fn embedding_similarity_fetches_once_and_dedups() {
    // Texts mentioning "cat" embed to the same direction.
    let server = MockServer::start_with(|_, req| {
        let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
        let data: Vec<_> = body["input"]
            .as_array()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let v = if t.as_str().unwrap().contains("cat") {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                };
                json!({ "index": i, "embedding": v })
            })
            .collect();
        (200, json!({ "data": data }).to_string())
    });
    let sim = EmbeddingSimilarity::new(EmbeddingEndpoint::new(server.url.clone(), "embed"))
        .unwrap()
        .with_retry(fast_retry(1));
    let texts = [
        "find the cat",
        "a cat sleeping",
        "draw a boat",
        "find the cat",
    ];
    let out = dedup_texts(&texts, 0.8, &sim).unwrap();
    assert_eq!(out.retained, vec![0, 2]);
    assert_eq!(out.removed.len(), 2);
    assert_eq!(sim.similarity("find the cat", "draw a boat").unwrap(), 0.0);
    // Three distinct texts, one request; later lookups hit the cache.
    assert_eq!(server.received().len(), 1);
    assert_eq!(
        server.received()[0].json()["input"]
            .as_array()
            .unwrap()
            .len(),
        3
    );
}
