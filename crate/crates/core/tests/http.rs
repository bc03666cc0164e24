mod common;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

use common::FakeServer;
use narracap::annotations::synth_fixture;
use narracap::embed::{BBox, EmbedError, Embedding, EmbeddingSource, HttpEmbeddingSource, RegionSpec};
use narracap::llm::{
    complete_with_retry, CompletionRequest, HttpTransport, LlmError, MockLlm, PromptVariant,
    RetryPolicy, Transport,
};
use narracap::runner::{run_predict, ConfigOverrides, RunError};
use narracap::taxonomy::VocabularySet;

fn vectors(embs: &[&Embedding]) -> String {
    json!({ "vectors": embs.iter().map(|e| e.as_slice().to_vec()).collect::<Vec<_>>() }).to_string()
}

/// Answers like an OpenAI endpoint by delegating to the in-process mock.
fn mock_llm_server() -> FakeServer {
    let mock = MockLlm::new();
    FakeServer::start(move |req| {
        let reply = mock.send(&req.path, &req.json()).unwrap();
        (reply.status, reply.body)
    })
}

#[test]
fn llm_transport_retries_rate_limits() {
    let hits = AtomicUsize::new(0);
    let mock = MockLlm::new();
    let server = FakeServer::start(move |req| {
        if hits.fetch_add(1, Ordering::SeqCst) < 2 {
            return (429, json!({"error": {"message": "slow down"}}).to_string());
        }
        let reply = mock.send(&req.path, &req.json()).unwrap();
        (reply.status, reply.body)
    });
    let transport = HttpTransport::new(format!("{}/v1/", server.url), Some("sk-test".into()));
    let request = CompletionRequest::new(
        "gpt-4-0613",
        PromptVariant::SixLabels,
        "A man in a beach. He is crying.".into(),
    );
    let done = complete_with_retry(&request, &transport, None, &RetryPolicy::no_wait(5)).unwrap();
    assert_eq!(done.attempts, 3);
    assert!(!done.cached);
    assert!(done.text.to_lowercase().contains("sadness"), "{}", done.text);

    let seen = server.recorded();
    assert_eq!(seen.len(), 3);
    for r in &seen {
        assert_eq!(r.path, "/v1/chat/completions");
        assert_eq!(r.header("authorization"), Some("Bearer sk-test"));
        assert_eq!(r.json()["model"], "gpt-4-0613");
    }
}

#[test]
fn llm_client_error_is_not_retried() {
    let server = FakeServer::start(|_| (401, json!({"error": {"message": "bad key"}}).to_string()));
    let transport = HttpTransport::new(server.url.clone(), None);
    let request = CompletionRequest::new("m", PromptVariant::TopLabels, "x".into());
    let err = complete_with_retry(&request, &transport, None, &RetryPolicy::no_wait(5)).unwrap_err();
    assert!(matches!(err, LlmError::Transport(_)), "{err:?}");
    assert_eq!(server.count(), 1);
    assert!(server.recorded()[0].header("authorization").is_none());
}

#[test]
fn completion_requests_use_the_completion_path() {
    let server = mock_llm_server();
    let transport = HttpTransport::new(server.url.clone(), None);
    let request = CompletionRequest::new(
        "mistral-7b",
        PromptVariant::MistralCompletion,
        "A woman in a party. She is dancing. From suffering, ...".into(),
    );
    let done = complete_with_retry(&request, &transport, None, &RetryPolicy::no_wait(0)).unwrap();
    assert_eq!(server.recorded()[0].path, "/completions");
    assert!(server.recorded()[0].json().get("prompt").is_some());
    assert!(done.text.to_lowercase().contains("excitement"), "{}", done.text);
}

#[test]
fn embedding_service_protocol() {
    let a = Embedding::normalized(&[1.0, 0.0, 0.0]).unwrap();
    let b = Embedding::normalized(&[0.0, 1.0, 0.0]).unwrap();
    let c = Embedding::normalized(&[0.0, 0.0, 1.0]).unwrap();
    let server = {
        let (a, b, c) = (a.clone(), b.clone(), c.clone());
        FakeServer::start(move |req| match req.path.as_str() {
            "/embed_text" => {
                let texts = req.json()["texts"].as_array().unwrap().clone();
                let out: Vec<&Embedding> = texts
                    .iter()
                    .map(|t| if t == "a photo of a cat" { &a } else { &b })
                    .collect();
                (200, vectors(&out))
            }
            "/embed_image" => (200, vectors(&[&c])),
            _ => (404, "{}".into()),
        })
    };
    let source = HttpEmbeddingSource::new(&server.url, 100.0);
    let got = source
        .embed_texts(&["a photo of a cat".into(), "a photo of a dog".into()])
        .unwrap();
    assert_eq!(got, vec![a, b]);

    let crop = RegionSpec::crop("img7", BBox { x1: 1, y1: 2, x2: 30, y2: 40 }).unwrap();
    assert_eq!(source.image_embedding(&crop).unwrap(), c);
    source.image_embedding(&RegionSpec::full("img7")).unwrap();

    let seen = server.recorded();
    assert_eq!(seen[0].json(), json!({"texts": ["a photo of a cat", "a photo of a dog"]}));
    assert_eq!(
        seen[1].json(),
        json!({"image_id": "img7", "region": "bbox", "bbox": [1, 2, 30, 40]})
    );
    assert_eq!(seen[2].json(), json!({"image_id": "img7", "region": "full"}));
}

#[test]
fn embedding_service_failures() {
    let server = FakeServer::start(|req| match req.path.as_str() {
        "/embed_text" => (200, json!({"vectors": [[3.0, 4.0]]}).to_string()),
        _ => (500, "{}".into()),
    });
    let source = HttpEmbeddingSource::new(&server.url, 100.0);
    let err = source.embed_texts(&["x".into()]).unwrap_err();
    assert!(matches!(err, EmbedError::Integrity { .. }), "{err:?}");
    let err = source.image_embedding(&RegionSpec::full("i")).unwrap_err();
    assert!(matches!(err, EmbedError::Service(_)), "{err:?}");
}

/// Serves the fixture store through the HTTP embedding protocol.
fn store_server(store: narracap::embed::EmbeddingStore) -> FakeServer {
    let vocabs = VocabularySet::bundled();
    let mut by_prompt: HashMap<String, Embedding> = HashMap::new();
    for vocab in [
        &vocabs.gender_age,
        &vocabs.actions,
        &vocabs.signals,
        &vocabs.environments,
        &vocabs.emotions,
    ] {
        for (i, prompt) in vocab.prompts().into_iter().enumerate() {
            let emb = store.get_text_embedding(vocab.category, i).unwrap().clone();
            by_prompt.insert(prompt, emb);
        }
    }
    let store = Arc::new(store);
    FakeServer::start(move |req| {
        let body: Value = req.json();
        match req.path.as_str() {
            "/embed_text" => {
                let texts = body["texts"].as_array().unwrap();
                let out: Vec<&Embedding> = texts
                    .iter()
                    .map(|t| &by_prompt[t.as_str().unwrap()])
                    .collect();
                (200, vectors(&out))
            }
            "/embed_image" => {
                let id = body["image_id"].as_str().unwrap();
                let region = match body.get("bbox") {
                    Some(b) => {
                        let b: Vec<i64> = serde_json::from_value(b.clone()).unwrap();
                        RegionSpec::crop(id, BBox { x1: b[0], y1: b[1], x2: b[2], y2: b[3] }).unwrap()
                    }
                    None => RegionSpec::full(id),
                };
                match store.get_image_embedding(&region) {
                    Ok(e) => (200, vectors(&[e])),
                    Err(e) => (404, json!({"error": e.to_string()}).to_string()),
                }
            }
            _ => (404, "{}".into()),
        }
    })
}

#[test]
fn pipeline_over_http_matches_local_run_and_caches() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = synth_fixture(1, 12, 1);
    fixture.write_dir(dir.path()).unwrap();
    let embed = store_server(fixture.store.clone());
    let llm = mock_llm_server();

    let config = |store: String, endpoint: String, out: &str| {
        ConfigOverrides {
            dataset: Some(dir.path().join("annotations.jsonl")),
            store: Some(store),
            endpoint: Some(endpoint),
            out: Some(dir.path().join(out)),
            resamples: Some(100),
            ..Default::default()
        }
        .resolve()
        .unwrap()
    };
    let local = config(dir.path().join("store.nemb").display().to_string(), "mock".into(), "local");
    let remote = config(embed.url.clone(), llm.url.clone(), "remote");

    run_predict(&local).unwrap();
    let out = run_predict(&remote).unwrap();
    assert_eq!(out.reports[0].1.f1, 100.0);
    assert_eq!(llm.count(), 12);
    let read = |c: &narracap::runner::ExperimentConfig| std::fs::read(c.out.join("predictions.jsonl")).unwrap();
    assert_eq!(read(&local), read(&remote));

    // same out dir: every reply comes from the response cache
    let again = run_predict(&remote).unwrap();
    assert_eq!(llm.count(), 12);
    let stats = again.manifest.llm.unwrap();
    assert_eq!(stats.cache_hits, 12);
    assert_eq!(stats.network_attempts, 0);
    assert_eq!(read(&remote), read(&local));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let dir = tempfile::tempdir().unwrap();
    synth_fixture(1, 2, 1).write_dir(dir.path()).unwrap();
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = ConfigOverrides {
        dataset: Some(dir.path().join("annotations.jsonl")),
        store: Some(dir.path().join("store.nemb").display().to_string()),
        endpoint: Some(format!("http://127.0.0.1:{port}")),
        out: Some(dir.path().join("run")),
        max_retries: Some(0),
        ..Default::default()
    }
    .resolve()
    .unwrap();
    let err = run_predict(&config).unwrap_err();
    assert!(matches!(err, RunError::Transport(_)), "{err:?}");
    assert_eq!(err.exit_code(), 4);
    let log = std::fs::read_to_string(config.out.join("errors.log")).unwrap();
    assert!(log.contains("127.0.0.1"), "{log}");
}
