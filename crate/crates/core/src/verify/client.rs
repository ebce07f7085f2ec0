//! Minimal chat-completion client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

pub const DEFAULT_API_KEY_ENV: &str = "LEVELSCOPE_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key; the key itself
    /// is never stored in config.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 60,
            max_retries: 2,
        }
    }
}

/// Anything that turns a system and user message into reply text.
pub trait ChatBackend: Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String>;
}

pub struct HttpChatClient {
    cfg: LlmClientConfig,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(cfg: LlmClientConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        HttpChatClient { cfg, agent }
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.cfg
    }
}

impl ChatBackend for HttpChatClient {
    fn complete(&self, system: &str, user: &str) -> Result<String> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
        });
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Ok(key) = std::env::var(&self.cfg.api_key_env) {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let unreachable = |e: ureq::Error| Error::BackendUnreachable(e.to_string());
        let reply: serde_json::Value = req.send_json(&body).map_err(unreachable)?.body_mut().read_json().map_err(unreachable)?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::BackendUnreachable("reply has no choices[0].message.content".into()))
    }
}

#[cfg(test)]
pub(crate) mod mock {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves canned HTTP responses in order, one per connection, and keeps
    /// the request bodies it received.
    pub struct MockServer {
        pub url: String,
        pub bodies: Arc<Mutex<Vec<String>>>,
    }

    pub fn serve(responses: Vec<(u16, String)>) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let seen = Arc::clone(&bodies);
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut buf = vec![0; len];
                let _ = reader.read_exact(&mut buf);
                seen.lock().unwrap().push(String::from_utf8_lossy(&buf).into_owned());
                let mut stream = reader.into_inner();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        MockServer { url, bodies }
    }

    pub fn completion(text: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }
}
