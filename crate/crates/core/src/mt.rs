//! External machine translation for the translate-and-test baseline.
//!
//! A [`Translator`] pairs a [`TranslationProvider`] with the same retry and
//! cache discipline as the chat gateway. Entries are stored under
//! `<cache_dir>/mt/<digest>.json`, keyed by provider, text and language pair.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::retry::{self, RetryPolicy, Retryable};
use crate::store::FileStore;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MtError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("translation provider returned status {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("translation transport error: {0}")]
    Transport(String),
    #[error("unsupported language pair {source_lang}->{target_lang}")]
    UnsupportedLanguage { source_lang: String, target_lang: String },
}

impl Retryable for MtError {
    fn is_retryable(&self) -> bool {
        match self {
            MtError::Transport(_) => true,
            MtError::Provider { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationResult {
    pub source_text: String,
    pub translated_text: String,
    pub source_lang: String,
    pub target_lang: String,
    pub provider: String,
    #[serde(default)]
    pub from_cache: bool,
}

/// A two-letter lowercase primary tag, optionally followed by subtags
/// (`mr`, `en`, `en-US`).
pub fn is_well_formed_lang(code: &str) -> bool {
    let mut parts = code.split('-');
    let primary = parts.next().unwrap_or_default();
    primary.len() == 2
        && primary.bytes().all(|b| b.is_ascii_lowercase())
        && parts.all(|p| (1..=8).contains(&p.len()) && p.bytes().all(|b| b.is_ascii_alphanumeric()))
}

pub trait TranslationProvider: Send + Sync {
    /// Provider stamp recorded with every translation.
    fn name(&self) -> &str;
    fn translate(&self, text: &str, source_lang: &str, target_lang: &str) -> Result<String, MtError>;
}

/// Generic HTTP MT endpoint.
///
/// Sends `POST {"q": text, "source": "mr", "target": "en", "format": "text"}`
/// and accepts either `{"translatedText": ...}` or the
/// `{"data": {"translations": [{"translatedText": ...}]}}` response shape.
/// The key, when configured, is sent as a bearer token and as `api_key`.
pub struct HttpTranslator {
    name: String,
    endpoint_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpTranslator {
    pub fn new(name: impl Into<String>, endpoint_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            name: name.into(),
            endpoint_url: endpoint_url.into(),
            api_key,
            agent,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MtReply {
    Flat {
        #[serde(rename = "translatedText")]
        translated_text: String,
    },
    Nested {
        data: NestedData,
    },
}

#[derive(Deserialize)]
struct NestedData {
    translations: Vec<NestedTranslation>,
}

#[derive(Deserialize)]
struct NestedTranslation {
    #[serde(rename = "translatedText")]
    translated_text: String,
}

pub(crate) fn parse_mt_reply(body: &str) -> Result<String, MtError> {
    let reply: MtReply = serde_json::from_str(body).map_err(|e| MtError::Provider {
        status: 200,
        body: format!("unparseable translation response ({e})"),
    })?;
    match reply {
        MtReply::Flat { translated_text } => Ok(translated_text),
        MtReply::Nested { data } => data
            .translations
            .into_iter()
            .next()
            .map(|t| t.translated_text)
            .ok_or_else(|| MtError::Provider {
                status: 200,
                body: "empty translations list".into(),
            }),
    }
}

impl TranslationProvider for HttpTranslator {
    fn name(&self) -> &str {
        &self.name
    }

    fn translate(&self, text: &str, source_lang: &str, target_lang: &str) -> Result<String, MtError> {
        let mut body = serde_json::json!({
            "q": text,
            "source": source_lang,
            "target": target_lang,
            "format": "text",
        });
        let mut call = self.agent.post(&self.endpoint_url);
        if let Some(key) = &self.api_key {
            body["api_key"] = serde_json::Value::String(key.clone());
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(&body).map_err(|e| MtError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| MtError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            let lowered = text.to_lowercase();
            if status == 400 && (lowered.contains("language") || lowered.contains("not supported")) {
                return Err(MtError::UnsupportedLanguage {
                    source_lang: source_lang.to_owned(),
                    target_lang: target_lang.to_owned(),
                });
            }
            return Err(MtError::Provider {
                status,
                body: text.chars().take(300).collect(),
            });
        }
        parse_mt_reply(&text)
    }
}

/// Mock fixture: `{"source_lang": "mr", "target_lang": "en", "translations": {"मी आनंदी आहे": "I am happy"}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtFixture {
    pub source_lang: String,
    pub target_lang: String,
    pub translations: HashMap<String, String>,
}

#[derive(Debug)]
pub struct MockTranslator {
    fixture: MtFixture,
    calls: AtomicUsize,
}

impl MockTranslator {
    pub fn new(fixture: MtFixture) -> Self {
        Self {
            fixture,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let fixture =
            serde_json::from_str(&text).map_err(|e| format!("invalid MT fixture {}: {e}", path.display()))?;
        Ok(Self::new(fixture))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TranslationProvider for MockTranslator {
    fn name(&self) -> &str {
        "mock-mt"
    }

    fn translate(&self, text: &str, source_lang: &str, target_lang: &str) -> Result<String, MtError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if source_lang != self.fixture.source_lang || target_lang != self.fixture.target_lang {
            return Err(MtError::UnsupportedLanguage {
                source_lang: source_lang.to_owned(),
                target_lang: target_lang.to_owned(),
            });
        }
        self.fixture
            .translations
            .get(text)
            .cloned()
            .ok_or_else(|| MtError::Provider {
                status: 404,
                body: format!("no mock translation for {:?}", text.chars().take(40).collect::<String>()),
            })
    }
}

fn mt_key(provider: &str, text: &str, source_lang: &str, target_lang: &str) -> String {
    let mut h = Sha256::new();
    for field in ["mt-v1", provider, text, source_lang, target_lang] {
        h.update((field.len() as u64).to_be_bytes());
        h.update(field.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Cached, retrying front end to a translation provider.
pub struct Translator {
    provider: Arc<dyn TranslationProvider>,
    store: Option<FileStore>,
    policy: RetryPolicy,
    provider_calls: AtomicUsize,
}

impl Translator {
    pub fn new(provider: Arc<dyn TranslationProvider>, cache_dir: Option<&Path>, policy: RetryPolicy) -> Self {
        Self {
            provider,
            store: cache_dir.map(|d| FileStore::new(d.join("mt"))),
            policy,
            provider_calls: AtomicUsize::new(0),
        }
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    /// Calls made to the provider (excluding cache hits), counting retries.
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    pub fn translate(&self, text: &str, source_lang: &str, target_lang: &str) -> Result<TranslationResult, MtError> {
        if text.trim().is_empty() {
            return Err(MtError::Validation("text to translate is empty".into()));
        }
        for code in [source_lang, target_lang] {
            if !is_well_formed_lang(code) {
                return Err(MtError::Validation(format!("malformed language code {code:?}")));
            }
        }
        let key = mt_key(self.provider.name(), text, source_lang, target_lang);
        if let Some(store) = &self.store {
            if let Some(mut hit) = store.get::<TranslationResult>(&key) {
                if hit.source_text == text {
                    hit.from_cache = true;
                    return Ok(hit);
                }
            }
        }
        let (translated, _) = retry::with_backoff(&self.policy, |_| {
            self.provider_calls.fetch_add(1, Ordering::SeqCst);
            self.provider.translate(text, source_lang, target_lang)
        })?;
        if translated.trim().is_empty() {
            return Err(MtError::Provider {
                status: 200,
                body: "provider returned an empty translation".into(),
            });
        }
        let result = TranslationResult {
            source_text: text.to_owned(),
            translated_text: translated,
            source_lang: source_lang.to_owned(),
            target_lang: target_lang.to_owned(),
            provider: self.provider.name().to_owned(),
            from_cache: false,
        };
        if let Some(store) = &self.store {
            if let Err(e) = store.put(&key, &result) {
                log::warn!("failed to cache translation: {e}");
            }
        }
        Ok(result)
    }
}
