//! Chat-completion client used by the listwise refiner and the LLM reasoner.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embed::Semaphore;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("chat endpoint transport failure: {0}")]
    Transport(String),
    #[error("chat endpoint returned an invalid response: {0}")]
    BadResponse(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError>;
}

/// Retries retryable failures up to `attempts` times in total.
pub fn complete_with_retry(
    client: &dyn ChatClient,
    messages: &[ChatMessage],
    attempts: usize,
) -> Result<String, LlmError> {
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        match client.complete(messages) {
            Ok(text) => return Ok(text),
            Err(e) if e.is_retryable() => {
                log::warn!("chat attempt {} failed: {e}", attempt + 1);
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Full URL of an OpenAI-compatible `/chat/completions` route.
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Environment variable holding the API key; never stored in config.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub retries: usize,
}

fn default_max_tokens() -> u32 {
    256
}
fn default_key_env() -> String {
    "IMLOOP_API_KEY".into()
}
fn default_in_flight() -> usize {
    4
}
fn default_retries() -> usize {
    3
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            api_key_env: default_key_env(),
            max_in_flight: default_in_flight(),
            retries: default_retries(),
        }
    }

    pub fn build(&self) -> Arc<dyn ChatClient> {
        Arc::new(HttpChatClient::new(self.clone(), std::env::var(&self.api_key_env).ok()))
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Blocking client for an OpenAI-compatible chat completion endpoint.
pub struct HttpChatClient {
    config: EndpointConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    in_flight: Semaphore,
}

impl HttpChatClient {
    pub fn new(config: EndpointConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        let in_flight = Semaphore::new(config.max_in_flight);
        Self { config, api_key, agent, in_flight }
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let _permit = self.in_flight.acquire();
        let mut req = self.agent.post(&self.config.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(ChatRequest {
                model: &self.config.model,
                messages,
                temperature: self.config.temperature,
                max_tokens: self.config.max_tokens,
            })
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(LlmError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(LlmError::BadResponse(format!("HTTP {status}")));
        }
        let body: ChatResponse = resp.body_mut().read_json().map_err(|e| LlmError::BadResponse(e.to_string()))?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| LlmError::BadResponse("no choices".into()))
    }
}


#[cfg(test)]
mod tests {
    use super::testing::CannedChat;
    use super::*;

    #[test]
    fn retry_recovers_from_transport_errors() {
        let chat = CannedChat::new(vec![Err(LlmError::Transport("down".into())), Ok("fine".into())]);
        assert_eq!(complete_with_retry(&chat, &[], 3).unwrap(), "fine");
    }

    #[test]
    fn retry_gives_up() {
        let chat = CannedChat::new(vec![
            Err(LlmError::Transport("a".into())),
            Err(LlmError::Transport("b".into())),
            Ok("late".into()),
        ]);
        assert!(complete_with_retry(&chat, &[], 2).is_err());
    }

    #[test]
    fn bad_response_is_not_retried() {
        let chat = CannedChat::new(vec![Err(LlmError::BadResponse("x".into())), Ok("y".into())]);
        assert!(matches!(complete_with_retry(&chat, &[], 3), Err(LlmError::BadResponse(_))));
    }
}
