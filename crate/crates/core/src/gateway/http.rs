//! Chat-completions client for OpenAI-compatible endpoints.
//!
//! Request body: `{model, messages: [{role, content}], temperature, max_tokens}`.
//! The endpoint URL is used as given (e.g. `https://api.openai.com/v1/chat/completions`).

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, ChatResponse, FinishReason, GatewayError};

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct Body<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct Completion {
    #[serde(default)]
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Option<ReplyMessage>,
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: Option<String>,
    refusal: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub struct OpenAiCompatibleBackend {
    name: String,
    endpoint_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiCompatibleBackend {
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

/// Translate an HTTP status and body into a gateway error.
pub(crate) fn status_error(status: u16, body: String, retry_after: Option<&str>) -> GatewayError {
    match status {
        401 | 403 => GatewayError::Auth { message: body },
        429 => GatewayError::RateLimit {
            message: body,
            retry_after_ms: retry_after
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(|secs| (secs * 1000.0) as u64),
        },
        _ => GatewayError::Provider { status, body },
    }
}

fn parse_completion(body: &str) -> Result<ChatResponse, GatewayError> {
    let completion: Completion = serde_json::from_str(body).map_err(|e| GatewayError::Provider {
        status: 200,
        body: format!("unparseable completion ({e}): {}", excerpt(body)),
    })?;
    let Some(choice) = completion.choices.into_iter().next() else {
        return Err(GatewayError::Provider {
            status: 200,
            body: format!("completion has no choices: {}", excerpt(body)),
        });
    };
    let message = choice.message.unwrap_or(ReplyMessage {
        content: None,
        refusal: None,
    });
    let finish = match (choice.finish_reason.as_deref(), &message.content, &message.refusal) {
        (_, _, Some(_)) | (Some("content_filter"), _, _) => FinishReason::Refused,
        (Some("length"), _, _) => FinishReason::Truncated,
        (_, Some(_), _) => FinishReason::Complete,
        _ => FinishReason::Error,
    };
    let mut resp = ChatResponse::new(message.content, finish);
    if let Some(usage) = completion.usage {
        resp.prompt_tokens = usage.prompt_tokens;
        resp.completion_tokens = usage.completion_tokens;
    }
    Ok(resp)
}

fn excerpt(s: &str) -> String {
    s.chars().take(300).collect()
}

impl ChatBackend for OpenAiCompatibleBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let mut messages = Vec::with_capacity(2);
        if !req.system_text.is_empty() {
            messages.push(Message {
                role: "system",
                content: &req.system_text,
            });
        }
        messages.push(Message {
            role: "user",
            content: &req.user_text,
        });
        let body = Body {
            model: &req.model_id,
            messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let mut call = self.agent.post(&self.endpoint_url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let started = Instant::now();
        let mut response = call.send_json(&body).map_err(|e| GatewayError::Transport {
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned);
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport {
                message: e.to_string(),
            })?;
        if !(200..300).contains(&status) {
            return Err(status_error(status, excerpt(&text), retry_after.as_deref()));
        }
        let mut resp = parse_completion(&text)?;
        resp.latency_ms = started.elapsed().as_millis() as u64;
        Ok(resp)
    }
}
