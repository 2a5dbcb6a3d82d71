//! OpenAI-compatible `/chat/completions` client.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{Backend, BackendError, ChatRequest, CompletionResult, TokenAlternative};

pub const BASE_URL_ENV: &str = "FACTCAL_BASE_URL";
pub const API_KEY_ENV: &str = "FACTCAL_API_KEY";
const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

pub struct OpenAiBackend {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client");
        OpenAiBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            client,
        }
    }

    /// Reads `FACTCAL_BASE_URL` and `FACTCAL_API_KEY`.
    pub fn from_env() -> Self {
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(&base, key, Duration::from_secs(120))
    }

    pub fn request_body(request: &ChatRequest<'_>) -> Value {
        let p = request.params;
        let mut body = json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": p.temperature,
            "top_p": p.top_p,
            "max_tokens": p.max_tokens,
            "n": 1,
        });
        if p.logprobs_top_k > 0 {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(p.logprobs_top_k);
        }
        body
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

pub fn parse_response(body: &str, top_k: u32) -> Result<CompletionResult, BackendError> {
    let resp: ChatResponse = serde_json::from_str(body).map_err(|e| BackendError::Decode(e.to_string()))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Decode("no choices".into()))?;
    let text = choice.message.content.unwrap_or_default();
    let alternatives = if top_k > 0 {
        let first = choice
            .logprobs
            .and_then(|l| l.content)
            .and_then(|c| c.into_iter().next())
            .ok_or_else(|| BackendError::Decode("logprobs requested but missing".into()))?;
        Some(
            first
                .top_logprobs
                .into_iter()
                .map(|t| TokenAlternative {
                    token: t.token,
                    probability: t.logprob.exp(),
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(CompletionResult {
        text,
        first_token_alternatives: alternatives,
    })
}

impl Backend for OpenAiBackend {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<CompletionResult, BackendError> {
        let url = format!("{}/chat/completions", self.base_url);
        let mut req = self.client.post(&url).json(&Self::request_body(request));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(e.to_string())
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        if status == 429 {
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(BackendError::RateLimited { retry_after });
        }
        let body = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Http { status, body });
        }
        parse_response(&body, request.params.logprobs_top_k)
    }
}
