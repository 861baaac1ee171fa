//! LLM transport: the provider trait and an OpenAI-compatible chat client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::prompt::{PromptBundle, UserPart};
use crate::provider::{ProviderError, RetryPolicy};

pub const DEFAULT_MODEL: &str = "gpt-5.1";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("prompt exceeds the model context window: {0}")]
    ContextOverflow(String),
}

pub trait LlmProvider: Send + Sync {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError>;
}

impl<T: LlmProvider + ?Sized> LlmProvider for &T {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        (**self).complete(bundle)
    }
}

impl<T: LlmProvider + ?Sized> LlmProvider for Box<T> {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        (**self).complete(bundle)
    }
}

/// One completion with transport-level retries. The response text and usage
/// are returned exactly as the provider reported them.
pub fn call_llm(
    bundle: &PromptBundle,
    provider: &dyn LlmProvider,
    retry: &RetryPolicy,
) -> Result<LlmResponse, LlmError> {
    let mut overflow = None;
    let result = retry.run(|| match provider.complete(bundle) {
        Ok(r) => Ok(r),
        Err(LlmError::Provider(e)) => Err(e),
        Err(LlmError::ContextOverflow(msg)) => {
            overflow = Some(msg.clone());
            Err(ProviderError::fatal("llm", msg))
        }
    });
    match (result, overflow) {
        (Ok(r), _) => Ok(r),
        (Err(_), Some(msg)) => Err(LlmError::ContextOverflow(msg)),
        (Err(e), None) => Err(LlmError::Provider(e)),
    }
}

/// Builds the chat-completions request body: system prompt, then one user
/// message with the claim text and inline base64 images.
pub fn chat_request_body(model: &str, bundle: &PromptBundle) -> Value {
    let content: Vec<Value> = bundle
        .user_parts
        .iter()
        .map(|p| match p {
            UserPart::Text { text } => json!({"type": "text", "text": text}),
            UserPart::Image { media_type, data } => json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{media_type};base64,{data}")}
            }),
        })
        .collect();
    json!({
        "model": model,
        "messages": [
            {"role": "system", "content": bundle.system_prompt},
            {"role": "user", "content": content}
        ]
    })
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub fn parse_chat_response(status: u16, body: &str) -> Result<LlmResponse, LlmError> {
    if !(200..300).contains(&status) {
        if status == 400 && body.contains("context_length_exceeded") {
            return Err(LlmError::ContextOverflow(crate::provider::truncate(body, 300)));
        }
        return Err(ProviderError::from_status("llm", status, body).into());
    }
    let parsed: ChatResponse = serde_json::from_str(body)
        .map_err(|e| ProviderError::fatal("llm", format!("bad response: {e}")))?;
    let text = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| ProviderError::fatal("llm", "response has no message content"))?;
    let usage = parsed
        .usage
        .map(|u| Usage { input_tokens: u.prompt_tokens, output_tokens: u.completion_tokens })
        .unwrap_or_default();
    Ok(LlmResponse { text, usage })
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint with
/// image input.
pub struct OpenAiChat {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: String,
}

impl OpenAiChat {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: impl Into<String>,
    ) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| ProviderError::fatal("llm", e.to_string()))?;
        Ok(Self { client, endpoint: endpoint.into(), model: model.into(), api_key: api_key.into() })
    }
}

impl LlmProvider for OpenAiChat {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&chat_request_body(&self.model, bundle))
            .send()
            .map_err(|e| ProviderError::from_reqwest("llm", &e))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| ProviderError::from_reqwest("llm", &e))?;
        parse_chat_response(status, &body)
    }
}
