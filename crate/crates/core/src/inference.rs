//! Answer generation backends and the prompt template.

use std::sync::LazyLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::protocol::content_hash;

pub const EXTRACTIVE_BACKEND_ID: &str = "extractive-v1";
pub const API_KEY_ENV: &str = "CFEDRAG_API_KEY";
pub const UNKNOWN_ANSWER: &str = "unknown";

const DEFAULT_TEMPLATE: &str = "You are a helpful expert. Answer using only the provided context.\nContext:\n{context}\nQuestion: {query}\nAnswer with yes, no, or maybe, then a brief rationale.\nAnswer:";

static CONTEXT_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\[\d+\] ").unwrap());
static MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"ANSWER::([a-z]+)").unwrap());

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("inference failed: {0}")]
    InferenceFailed(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    text: String,
    hash: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, InferenceError> {
        let text = text.into();
        for placeholder in ["{context}", "{query}"] {
            let count = text.matches(placeholder).count();
            if count != 1 {
                return Err(InferenceError::InvalidTemplate(format!(
                    "{placeholder} appears {count} times, expected once"
                )));
            }
        }
        Ok(Self {
            hash: content_hash(&text),
            text,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn template_hash(&self) -> &str {
        &self.hash
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = InferenceError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> Self {
        t.text
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        default_template()
    }
}

pub fn default_template() -> PromptTemplate {
    PromptTemplate::new(DEFAULT_TEMPLATE).expect("default template is well formed")
}

/// Returns the token of the first `ANSWER::<token>` marker found in the
/// numbered context lines, scanning in rank order.
pub fn generate_extractive(prompt: &str) -> String {
    prompt
        .lines()
        .filter(|line| CONTEXT_LINE.is_match(line))
        .find_map(|line| MARKER.captures(line).map(|c| c[1].to_string()))
        .unwrap_or_else(|| UNKNOWN_ANSWER.to_string())
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

/// One non-streaming chat completion at temperature 0.
pub fn generate_remote(prompt: &str, endpoint: &str, model_id: &str) -> Result<String, InferenceError> {
    let url = format!("{}/v1/chat/completions", endpoint.trim_end_matches('/'));
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(120))
        .build();
    let mut req = agent.post(&url).set("Content-Type", "application/json");
    if let Ok(key) = std::env::var(API_KEY_ENV) {
        if !key.is_empty() {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
    }
    let body = ChatRequest {
        model: model_id,
        messages: [ChatMessage {
            role: "user",
            content: prompt,
        }],
        temperature: 0,
    };
    let resp: ChatResponse = req
        .send_json(body)
        .map_err(|e| InferenceError::InferenceFailed(e.to_string()))?
        .into_json()
        .map_err(|e| InferenceError::InferenceFailed(format!("bad response body: {e}")))?;
    resp.choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| InferenceError::InferenceFailed("no choices returned".into()))
}

pub trait InferenceBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn generate(&self, prompt: &str) -> Result<String, InferenceError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractiveBackend;

impl InferenceBackend for ExtractiveBackend {
    fn backend_id(&self) -> &str {
        EXTRACTIVE_BACKEND_ID
    }

    fn generate(&self, prompt: &str) -> Result<String, InferenceError> {
        Ok(generate_extractive(prompt))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteChatBackend {
    pub endpoint: String,
    pub model_id: String,
}

impl InferenceBackend for RemoteChatBackend {
    fn backend_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, prompt: &str) -> Result<String, InferenceError> {
        generate_remote(prompt, &self.endpoint, &self.model_id)
    }
}
