use serde_json::Value;

pub const LLM_URL_ENV: &str = "NARRACAP_LLM_URL";
pub const LLM_KEY_ENV: &str = "NARRACAP_LLM_API_KEY";

/// Raw HTTP-level reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn ok(body: impl Into<String>) -> Self {
        Reply {
            status: 200,
            body: body.into(),
        }
    }
}

/// Sends one request body to `path` under the endpoint. `Err` means the
/// request never produced an HTTP reply (connection refused, timeout).
pub trait Transport: Send + Sync {
    fn send(&self, path: &str, body: &Value) -> Result<Reply, String>;
}

/// OpenAI-compatible HTTP endpoint, e.g. `https://api.openai.com/v1`.
pub struct HttpTransport {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(std::time::Duration::from_secs(120)))
            .build()
            .new_agent();
        HttpTransport {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            agent,
        }
    }

    /// Reads `NARRACAP_LLM_URL` and `NARRACAP_LLM_API_KEY`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(LLM_URL_ENV).ok().filter(|s| !s.is_empty())?;
        let key = std::env::var(LLM_KEY_ENV).ok().filter(|s| !s.is_empty());
        Some(Self::new(url, key))
    }
}

impl Transport for HttpTransport {
    fn send(&self, path: &str, body: &Value) -> Result<Reply, String> {
        let url = format!("{}{}", self.base_url, path);
        let mut req = self.agent.post(&url).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = req.send(body.to_string()).map_err(|e| format!("{url}: {e}"))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| format!("{url}: reading body: {e}"))?;
        Ok(Reply { status, body })
    }
}

/// Pulls the generated text out of a chat or completion response body.
pub fn extract_text(body: &str) -> Result<String, String> {
    let value: Value = serde_json::from_str(body).map_err(|e| format!("body is not JSON: {e}"))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or("response has no choices")?;
    if let Some(content) = choice.get("message").and_then(|m| m.get("content")) {
        return content
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "message content is not a string".to_string());
    }
    choice
        .get("text")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| "choice has neither message.content nor text".to_string())
}

/// The prompt text inside a request body of either schema.
pub fn prompt_of(body: &Value) -> Option<String> {
    if let Some(p) = body.get("prompt").and_then(Value::as_str) {
        return Some(p.to_string());
    }
    let content = body.get("messages")?.get(0)?.get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => parts
            .iter()
            .find(|p| p.get("type").and_then(Value::as_str) == Some("text"))
            .and_then(|p| p.get("text"))
            .and_then(Value::as_str)
            .map(str::to_string),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn extracts_chat_and_completion_text() {
        let chat = json!({"choices": [{"message": {"role": "assistant", "content": "happiness"}}]});
        assert_eq!(extract_text(&chat.to_string()).unwrap(), "happiness");
        let completion = json!({"choices": [{"text": " fear"}]});
        assert_eq!(extract_text(&completion.to_string()).unwrap(), " fear");
        assert!(extract_text("not json").is_err());
        assert!(extract_text(r#"{"choices": []}"#).is_err());
        assert!(extract_text(r#"{"error": "x"}"#).is_err());
    }

    #[test]
    fn prompt_from_both_schemas() {
        assert_eq!(prompt_of(&json!({"prompt": "p"})).unwrap(), "p");
        assert_eq!(
            prompt_of(&json!({"messages": [{"role": "user", "content": "q"}]})).unwrap(),
            "q"
        );
        let parts = json!({"messages": [{"role": "user", "content": [
            {"type": "text", "text": "r"},
            {"type": "image_url", "image_url": {"url": "x.jpg"}}
        ]}]});
        assert_eq!(prompt_of(&parts).unwrap(), "r");
    }
}
