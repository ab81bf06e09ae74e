use std::time::Duration;

use serde::Deserialize;

use super::{ChatRequest, Transport, TransportError, TransportReply};

/// OpenAI-compatible `/chat/completions` transport.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self { base_url: base_url.into(), api_key, timeout: Duration::from_secs(120) }
    }

    /// Reads the key from the named environment variable, if set.
    pub fn from_env(base_url: impl Into<String>, key_var: &str) -> Self {
        Self::new(base_url, std::env::var(key_var).ok().filter(|k| !k.is_empty()))
    }
}

#[derive(Deserialize)]
struct Reply {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub(crate) fn classify_status(code: u16, body: String) -> TransportError {
    match code {
        401 | 403 => TransportError::Auth(body),
        429 => TransportError::RateLimited(body),
        500..=599 => TransportError::Server { status: code, message: body },
        _ => TransportError::Rejected(format!("HTTP {code}: {body}")),
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<TransportReply, TransportError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut req = ureq::post(&url).timeout(self.timeout);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        match req.send_json(body) {
            Ok(resp) => {
                let reply: Reply = resp
                    .into_json()
                    .map_err(|e| TransportError::Rejected(format!("malformed reply: {e}")))?;
                let text = reply
                    .choices
                    .into_iter()
                    .next()
                    .and_then(|c| c.message.content)
                    .ok_or_else(|| TransportError::Rejected("reply has no choices".into()))?;
                let usage = reply.usage.unwrap_or(Usage { prompt_tokens: 0, completion_tokens: 0 });
                Ok(TransportReply {
                    text,
                    prompt_tokens: usage.prompt_tokens,
                    completion_tokens: usage.completion_tokens,
                })
            }
            Err(ureq::Error::Status(code, resp)) => Err(classify_status(code, resp.into_string().unwrap_or_default())),
            Err(e) => Err(TransportError::Network(e.to_string())),
        }
    }
}
