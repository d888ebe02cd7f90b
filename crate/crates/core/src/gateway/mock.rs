//! Fixture-driven chat backend for offline runs and tests.
//!
//! A fixture file is JSON:
//!
//! ```json
//! {
//!   "entries": [
//!     {"tag": "mahasent/s01/cotr", "script": [{"reply": "Translation: ...\nLabel: Positive"}]},
//!     {"tag": "mahahate/h02/standard", "model": "mock-a",
//!      "script": [{"fail": "transport", "message": "reset"}, {"reply": "Label: Hate"}]},
//!     {"key": "<64 hex digits>", "script": [{"reply": "...", "finish": "truncated"}]}
//!   ],
//!   "default": [{"reply": "Label: Positive"}]
//! }
//! ```
//!
//! Entries are matched by cache key first, then by request tag and model,
//! then by request tag alone, then `default`. Each match consumes the next
//! step of its script; the final step repeats once the script is exhausted.
//! Unmatched requests fail with a 404 provider error.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{cache_key, ChatBackend, ChatRequest, ChatResponse, FinishReason, GatewayError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailKind {
    Auth,
    RateLimit,
    Transport,
    Provider,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Step {
    Reply {
        reply: String,
        #[serde(default = "complete")]
        finish: FinishReason,
    },
    Refuse {
        refuse: bool,
    },
    Fail {
        fail: FailKind,
        #[serde(default)]
        status: Option<u16>,
        #[serde(default)]
        message: String,
    },
}

fn complete() -> FinishReason {
    FinishReason::Complete
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub script: Vec<Step>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    #[serde(default)]
    pub entries: Vec<FixtureEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Vec<Step>>,
}

impl Fixture {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let fixture: Fixture =
            serde_json::from_str(&text).map_err(|e| format!("invalid mock fixture {}: {e}", path.display()))?;
        for (i, entry) in fixture.entries.iter().enumerate() {
            if entry.script.is_empty() {
                return Err(format!("{}: entry {i} has an empty script", path.display()));
            }
            if entry.key.is_none() && entry.tag.is_none() {
                return Err(format!("{}: entry {i} has neither key nor tag", path.display()));
            }
        }
        Ok(fixture)
    }
}

/// Deterministic scripted backend with call instrumentation.
#[derive(Debug)]
pub struct MockBackend {
    fixture: Fixture,
    by_key: HashMap<String, usize>,
    by_tag_model: HashMap<(String, String), usize>,
    by_tag: HashMap<String, usize>,
    cursors: Mutex<HashMap<Option<usize>, usize>>,
    delay: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new(fixture: Fixture) -> Self {
        let mut by_key = HashMap::new();
        let mut by_tag_model = HashMap::new();
        let mut by_tag = HashMap::new();
        for (i, e) in fixture.entries.iter().enumerate() {
            if let Some(k) = &e.key {
                by_key.entry(k.to_lowercase()).or_insert(i);
            } else if let Some(t) = &e.tag {
                match &e.model {
                    Some(m) => by_tag_model.entry((t.clone(), m.clone())).or_insert(i),
                    None => by_tag.entry(t.clone()).or_insert(i),
                };
            }
        }
        Self {
            fixture,
            by_key,
            by_tag_model,
            by_tag,
            cursors: Mutex::new(HashMap::new()),
            delay: Duration::ZERO,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        Fixture::load(path).map(Self::new)
    }

    /// Fixture with one single-reply entry per (tag, reply).
    pub fn from_replies<T: Into<String>, R: Into<String>>(pairs: impl IntoIterator<Item = (T, R)>) -> Self {
        Self::new(Fixture {
            entries: pairs
                .into_iter()
                .map(|(t, r)| FixtureEntry {
                    tag: Some(t.into()),
                    script: vec![Step::Reply {
                        reply: r.into(),
                        finish: FinishReason::Complete,
                    }],
                    ..Default::default()
                })
                .collect(),
            default: None,
        })
    }

    /// Hold each call for `delay`; used to observe concurrency.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn lookup(&self, req: &ChatRequest) -> Option<Option<usize>> {
        if let Some(&i) = self.by_key.get(&cache_key(req).hex()) {
            return Some(Some(i));
        }
        if let Some(&i) = self
            .by_tag_model
            .get(&(req.request_tag.clone(), req.model_id.clone()))
        {
            return Some(Some(i));
        }
        if let Some(&i) = self.by_tag.get(&req.request_tag) {
            return Some(Some(i));
        }
        self.fixture.default.as_ref().map(|_| None)
    }

    fn next_step(&self, slot: Option<usize>) -> Step {
        let script = match slot {
            Some(i) => &self.fixture.entries[i].script,
            None => self.fixture.default.as_ref().expect("lookup checked default"),
        };
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors.entry(slot).or_insert(0);
        let step = script[(*cursor).min(script.len() - 1)].clone();
        *cursor += 1;
        step
    }
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl ChatBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            thread::sleep(self.delay);
        }
        let result = match self.lookup(req) {
            None => Err(GatewayError::Provider {
                status: 404,
                body: format!("no mock fixture for tag {:?}", req.request_tag),
            }),
            Some(slot) => match self.next_step(slot) {
                Step::Reply { reply, finish } => {
                    let mut resp = ChatResponse::new(Some(reply), finish);
                    resp.prompt_tokens = word_count(&req.system_text) + word_count(&req.user_text);
                    resp.completion_tokens = resp.raw_text.as_deref().map_or(0, word_count);
                    Ok(resp)
                }
                Step::Refuse { .. } => Ok(ChatResponse::new(None, FinishReason::Refused)),
                Step::Fail { fail, status, message } => Err(match fail {
                    FailKind::Auth => GatewayError::Auth { message },
                    FailKind::RateLimit => GatewayError::RateLimit {
                        message,
                        retry_after_ms: None,
                    },
                    FailKind::Transport => GatewayError::Transport { message },
                    FailKind::Provider => GatewayError::Provider {
                        status: status.unwrap_or(500),
                        body: message,
                    },
                }),
            },
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(tag: &str) -> ChatRequest {
        ChatRequest {
            model_id: "mock-1".into(),
            system_text: String::new(),
            user_text: "u".into(),
            temperature: 0.0,
            max_tokens: 16,
            request_tag: tag.into(),
        }
    }

    #[test]
    fn script_advances_and_last_step_repeats() {
        let fixture: Fixture = serde_json::from_str(
            r#"{"entries":[{"tag":"t","script":[{"fail":"transport","message":"x"},{"reply":"ok"}]}]}"#,
        )
        .unwrap();
        let mock = MockBackend::new(fixture);
        assert!(matches!(mock.send(&req("t")), Err(GatewayError::Transport { .. })));
        assert_eq!(mock.send(&req("t")).unwrap().raw_text.as_deref(), Some("ok"));
        assert_eq!(mock.send(&req("t")).unwrap().raw_text.as_deref(), Some("ok"));
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn matching_precedence() {
        let r = req("t");
        let fixture = Fixture {
            entries: vec![
                FixtureEntry {
                    tag: Some("t".into()),
                    script: vec![Step::Reply { reply: "tag".into(), finish: FinishReason::Complete }],
                    ..Default::default()
                },
                FixtureEntry {
                    tag: Some("t".into()),
                    model: Some("mock-1".into()),
                    script: vec![Step::Reply { reply: "tag+model".into(), finish: FinishReason::Complete }],
                    ..Default::default()
                },
                FixtureEntry {
                    key: Some(cache_key(&r).hex()),
                    script: vec![Step::Reply { reply: "key".into(), finish: FinishReason::Complete }],
                    ..Default::default()
                },
            ],
            default: Some(vec![Step::Refuse { refuse: true }]),
        };
        let mock = MockBackend::new(fixture);
        assert_eq!(mock.send(&r).unwrap().raw_text.as_deref(), Some("key"));
        let other_model = ChatRequest { model_id: "x".into(), ..r.clone() };
        assert_eq!(mock.send(&other_model).unwrap().raw_text.as_deref(), Some("tag"));
        let other_body = ChatRequest { user_text: "v".into(), ..r.clone() };
        assert_eq!(mock.send(&other_body).unwrap().raw_text.as_deref(), Some("tag+model"));
        let unmatched = ChatRequest { user_text: "w".into(), ..req("zzz") };
        assert_eq!(mock.send(&unmatched).unwrap().finish_reason, FinishReason::Refused);
    }

    #[test]
    fn unknown_tag_without_default_is_404() {
        let mock = MockBackend::from_replies([("a", "b")]);
        assert!(matches!(
            mock.send(&req("nope")),
            Err(GatewayError::Provider { status: 404, .. })
        ));
    }

    #[test]
    fn fixture_validation() {
        let dir = tempfile::TempDir::new().unwrap();
        let p = dir.path().join("f.json");
        fs::write(&p, r#"{"entries":[{"tag":"t","script":[]}]}"#).unwrap();
        assert!(Fixture::load(&p).is_err());
        fs::write(&p, r#"{"entries":[{"script":[{"reply":"x"}]}]}"#).unwrap();
        assert!(Fixture::load(&p).is_err());
    }
}
