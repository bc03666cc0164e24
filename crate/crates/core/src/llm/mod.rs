//! Prompt construction, chat/completion requests with caching and retry, and
//! parsing of free-text replies.

pub mod cache;
pub mod mock;
pub mod parse;
pub mod prompt;
pub mod request;
pub mod transport;

use std::time::Duration;

use thiserror::Error;

pub use cache::{CacheEntry, ResponseCache};
pub use mock::MockLlm;
pub use parse::{parse_labels, LabelScanner, ParsedLabels};
pub use prompt::{build_prompt, PromptVariant};
pub use request::{CompletionRequest, RequestKind, SamplingParams};
pub use transport::{extract_text, HttpTransport, Reply, Transport};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("config: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): base * 2^retry, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    pub fn no_wait(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub cached: bool,
    /// Network attempts made; 0 on a cache hit.
    pub attempts: u32,
}

fn is_transient(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// Sends `request`, consulting and filling `cache`. Rate-limit and server
/// errors, and failures to get any reply, are retried with exponential
/// backoff.
pub fn complete_with_retry(
    request: &CompletionRequest,
    transport: &dyn Transport,
    cache: Option<&ResponseCache>,
    policy: &RetryPolicy,
) -> Result<Completion, LlmError> {
    let digest = request.digest();
    if let Some(entry) = cache.and_then(|c| c.get(&digest)) {
        let text = extract_text(&entry.response).map_err(LlmError::Protocol)?;
        return Ok(Completion {
            text,
            cached: true,
            attempts: 0,
        });
    }
    let path = request.kind.path();
    let body = request.wire_body();
    let mut attempts = 0;
    let mut last_failure = String::new();
    while attempts <= policy.max_retries {
        if attempts > 0 {
            let wait = policy.delay(attempts - 1);
            log::debug!("retry {attempts} for {digest} after {wait:?}: {last_failure}");
            std::thread::sleep(wait);
        }
        attempts += 1;
        match transport.send(path, &body) {
            Ok(reply) if reply.status == 200 => {
                let text = extract_text(&reply.body).map_err(LlmError::Protocol)?;
                if let Some(cache) = cache {
                    cache.put(&CacheEntry {
                        digest: digest.clone(),
                        path: path.to_string(),
                        request: body.clone(),
                        response: reply.body,
                    })?;
                }
                return Ok(Completion {
                    text,
                    cached: false,
                    attempts,
                });
            }
            Ok(reply) if is_transient(reply.status) => {
                last_failure = format!("HTTP {}", reply.status);
            }
            Ok(reply) => {
                return Err(LlmError::Transport(format!(
                    "HTTP {} from {path}: {}",
                    reply.status,
                    reply.body.chars().take(200).collect::<String>()
                )));
            }
            Err(e) => last_failure = e,
        }
    }
    Err(LlmError::Transport(format!(
        "retry budget exhausted after {attempts} attempts: {last_failure}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<Result<Reply, String>>>,
        calls: Mutex<u32>,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<Reply, String>>) -> Self {
            replies.reverse();
            Scripted {
                replies: Mutex::new(replies),
                calls: Mutex::new(0),
            }
        }
        fn calls(&self) -> u32 {
            *self.calls.lock().unwrap()
        }
    }

    impl Transport for Scripted {
        fn send(&self, _path: &str, _body: &Value) -> Result<Reply, String> {
            *self.calls.lock().unwrap() += 1;
            self.replies.lock().unwrap().pop().expect("script exhausted")
        }
    }

    fn status(code: u16) -> Result<Reply, String> {
        Ok(Reply {
            status: code,
            body: "{}".into(),
        })
    }

    fn good(text: &str) -> Result<Reply, String> {
        Ok(Reply::ok(
            serde_json::json!({"choices": [{"message": {"content": text}}]}).to_string(),
        ))
    }

    fn request() -> CompletionRequest {
        CompletionRequest::new("m", PromptVariant::SixLabels, "A man. From ...".into())
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_secs(1),
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(3), Duration::from_millis(800));
        assert_eq!(p.delay(4), Duration::from_secs(1));
        assert_eq!(p.delay(40), Duration::from_secs(1));
    }

    #[test]
    fn rate_limited_twice_then_ok() {
        let t = Scripted::new(vec![status(429), status(429), good("fear")]);
        let c = complete_with_retry(&request(), &t, None, &RetryPolicy::no_wait(5)).unwrap();
        assert_eq!(c.text, "fear");
        assert_eq!(c.attempts, 3);
        assert_eq!(t.calls(), 3);
    }

    #[test]
    fn budget_exhausted() {
        let t = Scripted::new(vec![status(503), Err("refused".into()), status(500)]);
        let e = complete_with_retry(&request(), &t, None, &RetryPolicy::no_wait(2)).unwrap_err();
        assert!(matches!(e, LlmError::Transport(_)), "{e}");
        assert_eq!(t.calls(), 3);
    }

    #[test]
    fn client_error_is_not_retried() {
        let t = Scripted::new(vec![status(401)]);
        let e = complete_with_retry(&request(), &t, None, &RetryPolicy::no_wait(5)).unwrap_err();
        assert!(matches!(e, LlmError::Transport(_)));
        assert_eq!(t.calls(), 1);
    }

    #[test]
    fn invalid_body_is_protocol_error() {
        let t = Scripted::new(vec![Ok(Reply::ok("<html>oops</html>"))]);
        let e = complete_with_retry(&request(), &t, None, &RetryPolicy::no_wait(5)).unwrap_err();
        assert!(matches!(e, LlmError::Protocol(_)));
    }

    #[test]
    fn second_request_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let t = Scripted::new(vec![good("sadness")]);
        let first = complete_with_retry(&request(), &t, Some(&cache), &RetryPolicy::no_wait(0)).unwrap();
        assert!(!first.cached);
        let second = complete_with_retry(&request(), &t, Some(&cache), &RetryPolicy::no_wait(0)).unwrap();
        assert_eq!(second.text, "sadness");
        assert!(second.cached);
        assert_eq!(second.attempts, 0);
        assert_eq!(t.calls(), 1);
    }
}
