use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::prompt::PromptVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Chat,
    Completion,
}

impl RequestKind {
    /// Path appended to the endpoint base URL.
    pub fn path(self) -> &'static str {
        match self {
            RequestKind::Chat => "/chat/completions",
            RequestKind::Completion => "/completions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub repetition_penalty: Option<f64>,
}

impl SamplingParams {
    /// Greedy decoding, 256 tokens, top_p 1, no penalties.
    pub fn chat_defaults() -> Self {
        SamplingParams {
            temperature: 0.0,
            max_tokens: 256,
            top_p: 1.0,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            repetition_penalty: None,
        }
    }

    /// 256 new tokens with repetition penalty 1.15.
    pub fn completion_defaults() -> Self {
        SamplingParams {
            repetition_penalty: Some(1.15),
            ..Self::chat_defaults()
        }
    }

    pub fn defaults_for(kind: RequestKind) -> Self {
        match kind {
            RequestKind::Chat => Self::chat_defaults(),
            RequestKind::Completion => Self::completion_defaults(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub kind: RequestKind,
    pub prompt: String,
    /// Image path or identifier for vision requests; the transport decides
    /// how to put it on the wire.
    pub image_ref: Option<String>,
    pub params: SamplingParams,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, variant: PromptVariant, prompt: String) -> Self {
        let kind = if variant.is_chat() {
            RequestKind::Chat
        } else {
            RequestKind::Completion
        };
        CompletionRequest {
            model: model.into(),
            kind,
            prompt,
            image_ref: None,
            params: SamplingParams::defaults_for(kind),
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }

    /// OpenAI-compatible request body.
    pub fn wire_body(&self) -> Value {
        let p = &self.params;
        match self.kind {
            RequestKind::Chat => {
                let content = match &self.image_ref {
                    None => Value::String(self.prompt.clone()),
                    Some(image) => json!([
                        {"type": "text", "text": self.prompt},
                        {"type": "image_url", "image_url": {"url": image}},
                    ]),
                };
                json!({
                    "model": self.model,
                    "messages": [{"role": "user", "content": content}],
                    "temperature": p.temperature,
                    "max_tokens": p.max_tokens,
                    "top_p": p.top_p,
                    "frequency_penalty": p.frequency_penalty,
                    "presence_penalty": p.presence_penalty,
                })
            }
            RequestKind::Completion => {
                let mut body = json!({
                    "model": self.model,
                    "prompt": self.prompt,
                    "temperature": p.temperature,
                    "max_tokens": p.max_tokens,
                    "top_p": p.top_p,
                });
                if let Some(rp) = p.repetition_penalty {
                    body["repetition_penalty"] = json!(rp);
                }
                body
            }
        }
    }

    /// SHA-256 over the request path and the canonical wire body.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.kind.path().as_bytes());
        hasher.update(b"\n");
        hasher.update(self.wire_body().to_string().as_bytes());
        hex::encode(hasher.finalize())
    }
}
