mod common;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use common::{completion, Response, StubServer};
use cotr_harness::gateway::mock::{Fixture, FixtureEntry, Step};
use cotr_harness::gateway::{
    ChatBackend, ChatRequest, FinishReason, Gateway, GatewayError, MockBackend, OpenAiCompatibleBackend,
    ResponseCache,
};
use cotr_harness::mt::{HttpTranslator, MtError, TranslationProvider, Translator};
use cotr_harness::retry::RetryPolicy;
use serde_json::json;

fn req(tag: &str, user: &str) -> ChatRequest {
    ChatRequest {
        model_id: "m-1".into(),
        system_text: "system".into(),
        user_text: user.into(),
        temperature: 0.0,
        max_tokens: 64,
        request_tag: tag.into(),
    }
}

fn scripted(tag: &str, script: Vec<Step>) -> Arc<MockBackend> {
    Arc::new(MockBackend::new(Fixture {
        entries: vec![FixtureEntry {
            tag: Some(tag.into()),
            script,
            ..Default::default()
        }],
        default: None,
    }))
}

fn reply(text: &str) -> Step {
    Step::Reply {
        reply: text.into(),
        finish: FinishReason::Complete,
    }
}

fn transport() -> Step {
    Step::Fail {
        fail: cotr_harness::gateway::mock::FailKind::Transport,
        status: None,
        message: "connection reset".into(),
    }
}

#[test]
fn second_identical_request_is_served_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let mock = scripted("t", vec![reply("Label: Positive")]);
    let gw = Gateway::new(mock.clone(), Some(ResponseCache::new(dir.path())), 2);
    let first = gw.complete(&req("t", "u"), &RetryPolicy::no_delay(3)).unwrap();
    assert!(!first.from_cache);
    assert_eq!(first.attempts, 1);
    let second = gw.complete(&req("t", "u"), &RetryPolicy::no_delay(3)).unwrap();
    assert!(second.from_cache);
    assert_eq!(second.raw_text, first.raw_text);
    assert_eq!(mock.calls(), 1);
    assert_eq!(gw.stats().cache_hits(), 1);

    // A fresh gateway over the same directory sees the entry too.
    let cold = Gateway::new(mock.clone(), Some(ResponseCache::new(dir.path())), 1);
    assert!(cold.complete(&req("t", "u"), &RetryPolicy::no_delay(1)).unwrap().from_cache);
    assert_eq!(mock.calls(), 1);
}

#[test]
fn transient_failures_are_retried() {
    let mock = scripted("t", vec![transport(), transport(), reply("ok")]);
    let gw = Gateway::new(mock.clone(), None, 1);
    let resp = gw.complete(&req("t", "u"), &RetryPolicy::no_delay(4)).unwrap();
    assert_eq!(resp.raw_text.as_deref(), Some("ok"));
    assert_eq!(resp.attempts, 3);
    assert_eq!(mock.calls(), 3);
}

#[test]
fn single_attempt_policy_surfaces_transport_error() {
    let mock = scripted("t", vec![transport(), reply("ok")]);
    let gw = Gateway::new(mock.clone(), None, 1);
    let err = gw.complete(&req("t", "u"), &RetryPolicy::no_delay(1)).unwrap_err();
    assert!(matches!(err, GatewayError::Transport { .. }), "{err:?}");
    assert_eq!(mock.calls(), 1);
}

#[test]
fn auth_errors_are_not_retried() {
    let mock = scripted(
        "t",
        vec![Step::Fail {
            fail: cotr_harness::gateway::mock::FailKind::Auth,
            status: None,
            message: "bad key".into(),
        }],
    );
    let gw = Gateway::new(mock.clone(), None, 1);
    assert!(matches!(
        gw.complete(&req("t", "u"), &RetryPolicy::no_delay(5)),
        Err(GatewayError::Auth { .. })
    ));
    assert_eq!(mock.calls(), 1);
}

#[test]
fn failed_calls_are_not_cached() {
    let dir = tempfile::tempdir().unwrap();
    let mock = scripted("t", vec![transport(), reply("ok")]);
    let gw = Gateway::new(mock.clone(), Some(ResponseCache::new(dir.path())), 1);
    assert!(gw.complete(&req("t", "u"), &RetryPolicy::no_delay(1)).is_err());
    let resp = gw.complete(&req("t", "u"), &RetryPolicy::no_delay(1)).unwrap();
    assert!(!resp.from_cache);
    assert_eq!(resp.raw_text.as_deref(), Some("ok"));
}

#[test]
fn in_flight_calls_never_exceed_the_bound() {
    let mock = Arc::new(
        MockBackend::new(Fixture {
            entries: vec![],
            default: Some(vec![reply("ok")]),
        })
        .with_delay(Duration::from_millis(30)),
    );
    let gw = Arc::new(Gateway::new(mock.clone(), None, 3));
    let handles: Vec<_> = (0..12)
        .map(|i| {
            let gw = gw.clone();
            thread::spawn(move || gw.complete(&req("any", &format!("u{i}")), &RetryPolicy::no_delay(1)).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(mock.calls(), 12);
    assert!(mock.max_in_flight() <= 3, "{}", mock.max_in_flight());
    assert_eq!(mock.max_in_flight(), 3);
}

#[test]
fn http_backend_sends_openai_body_and_parses_reply() {
    let server = StubServer::start(|r, _| {
        let body = r.json();
        assert_eq!(r.method, "POST");
        assert_eq!(r.path, "/v1/chat/completions");
        assert_eq!(r.header("authorization"), Some("Bearer sk-test"));
        assert_eq!(body["model"], "m-1");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 64);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hello");
        Response::json(200, completion("Label: Neutral", "stop"))
    });
    let backend = OpenAiCompatibleBackend::new(
        "stub",
        format!("{}/v1/chat/completions", server.url),
        Some("sk-test".into()),
        Duration::from_secs(5),
    );
    let resp = backend.send(&req("t", "hello")).unwrap();
    assert_eq!(resp.raw_text.as_deref(), Some("Label: Neutral"));
    assert_eq!(resp.finish_reason, FinishReason::Complete);
    assert_eq!((resp.prompt_tokens, resp.completion_tokens), (11, 3));
}

#[test]
fn http_status_mapping_and_rate_limit_retry() {
    let server = StubServer::start(|r, i| {
        let user = r.json()["messages"][1]["content"].as_str().unwrap().to_owned();
        match user.as_str() {
            "auth" => Response::json(401, json!({"error": "invalid key"})),
            "filtered" => Response::json(200, json!({"choices": [{"message": {"content": null}, "finish_reason": "content_filter"}]})),
            "long" => Response::json(200, completion("Label: Pos", "length")),
            "server" => Response::json(503, json!({"error": "overloaded"})),
            // First request is rate limited, later ones succeed.
            _ if i == 0 => Response::json(429, json!({"error": "slow down"})).with_header("Retry-After", "0"),
            _ => Response::json(200, completion("fine", "stop")),
        }
    });
    let url = format!("{}/v1/chat/completions", server.url);
    let backend: Arc<dyn ChatBackend> =
        Arc::new(OpenAiCompatibleBackend::new("stub", url, None, Duration::from_secs(5)));
    let gw = Gateway::new(backend.clone(), None, 2);
    let policy = RetryPolicy::no_delay(3);

    let ok = gw.complete(&req("t", "first"), &policy).unwrap();
    assert_eq!(ok.raw_text.as_deref(), Some("fine"));
    assert_eq!(ok.attempts, 2);
    assert!(matches!(gw.complete(&req("t", "auth"), &policy), Err(GatewayError::Auth { .. })));
    let refused = gw.complete(&req("t", "filtered"), &policy).unwrap();
    assert_eq!(refused.finish_reason, FinishReason::Refused);
    assert_eq!(refused.raw_text, None);
    let truncated = gw.complete(&req("t", "long"), &policy).unwrap();
    assert_eq!(truncated.finish_reason, FinishReason::Truncated);
    assert_eq!(truncated.raw_text.as_deref(), Some("Label: Pos"));
    assert!(matches!(
        gw.complete(&req("t", "server"), &policy),
        Err(GatewayError::Provider { status: 503, .. })
    ));
    assert_eq!(gw.stats().backend_calls(), 2 + 1 + 1 + 1 + 3);
}

#[test]
fn http_timeout_is_a_transport_error() {
    let server = StubServer::start(|_, _| Response::json(200, completion("late", "stop")).delayed(Duration::from_millis(1500)));
    let backend = OpenAiCompatibleBackend::new(
        "stub",
        format!("{}/v1/chat/completions", server.url),
        None,
        Duration::from_millis(200),
    );
    assert!(matches!(backend.send(&req("t", "u")), Err(GatewayError::Transport { .. })));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let backend = OpenAiCompatibleBackend::new("stub", "http://127.0.0.1:9/v1", None, Duration::from_secs(2));
    assert!(matches!(backend.send(&req("t", "u")), Err(GatewayError::Transport { .. })));
}

#[test]
fn http_translator_round_trip_and_cache() {
    let server = StubServer::start(|r, _| {
        let body = r.json();
        match body["q"].as_str().unwrap() {
            "मी आनंदी आहे" => Response::json(200, json!({"translatedText": "I am happy"})),
            "nested" => Response::json(200, json!({"data": {"translations": [{"translatedText": "deep"}]}})),
            _ => Response::json(400, json!({"error": "language pair not supported"})),
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let provider = Arc::new(HttpTranslator::new("stub-mt", &server.url, None, Duration::from_secs(5)));
    assert_eq!(provider.translate("nested", "mr", "en").unwrap(), "deep");
    let translator = Translator::new(provider, Some(dir.path()), RetryPolicy::no_delay(2));
    let first = translator.translate("मी आनंदी आहे", "mr", "en").unwrap();
    assert_eq!(first.translated_text, "I am happy");
    assert_eq!(first.provider, "stub-mt");
    assert!(!first.from_cache);
    let hits_before = server.hits();
    let second = translator.translate("मी आनंदी आहे", "mr", "en").unwrap();
    assert!(second.from_cache);
    assert_eq!(server.hits(), hits_before);
    assert!(matches!(
        translator.translate("xx", "mr", "zz"),
        Err(MtError::UnsupportedLanguage { .. })
    ));
}
