//! Backend speaking the OpenAI-compatible chat-completions protocol.

use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{WorkerBackend, WorkerCall, WorkerError, WorkerResult};
use crate::spec_model::CapacityLevel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityModels {
    pub small: String,
    pub medium: String,
    pub large: String,
}

impl CapacityModels {
    pub fn for_capacity(&self, c: CapacityLevel) -> &str {
        match c {
            CapacityLevel::Small => &self.small,
            CapacityLevel::Medium => &self.medium,
            CapacityLevel::Large => &self.large,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub models: CapacityModels,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Extra attempts after a failed request.
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Environment variable holding the bearer token, if any.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    1
}

fn default_key_env() -> String {
    "ORCHESTRA_API_KEY".into()
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, models: CapacityModels) -> Self {
        Self {
            endpoint: endpoint.into(),
            models,
            timeout_secs: default_timeout(),
            retries: default_retries(),
            api_key_env: default_key_env(),
            temperature: None,
            max_tokens: None,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self {
            config,
            agent,
            api_key,
        }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    pub fn request_body(&self, call: &WorkerCall<'_>, seed: u64) -> Value {
        let mut body = json!({
            "model": self.config.models.for_capacity(call.capacity),
            "messages": [
                {"role": "system", "content": system_prompt(call)},
                {"role": "user", "content": user_prompt(call)},
            ],
            "seed": seed,
        });
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = self.config.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<WorkerResult, WorkerError> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(map_err)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_err)?;
        if !(200..300).contains(&status) {
            let mut body = text;
            body.truncate(512);
            return Err(WorkerError::Status { status, body });
        }
        parse_completion(&text)
    }
}

fn map_err(e: ureq::Error) -> WorkerError {
    match e {
        ureq::Error::Timeout(_) => WorkerError::Timeout,
        ureq::Error::StatusCode(status) => WorkerError::Status {
            status,
            body: String::new(),
        },
        other => WorkerError::Transport(other.to_string()),
    }
}

pub fn system_prompt(call: &WorkerCall<'_>) -> String {
    format!(
        "You are the `{}` agent, acting as a {}.\nDuty: {}\nEnd with a line `answer: <final answer>`.",
        call.role.agent_type, call.role.base_role, call.role.duty
    )
}

pub fn user_prompt(call: &WorkerCall<'_>) -> String {
    let mut out = format!("Task:\n{}\n", call.task.prompt);
    for (node, text) in &call.parent_outputs {
        let _ = write!(out, "\nOutput of `{node}`:\n{text}\n");
    }
    out
}

/// Read `choices[0].message.content` and the usage counts.
pub fn parse_completion(text: &str) -> Result<WorkerResult, WorkerError> {
    let v: Value = serde_json::from_str(text).map_err(|e| WorkerError::Protocol(e.to_string()))?;
    let output = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| WorkerError::Protocol("missing choices[0].message.content".into()))?;
    let count = |field: &str| v.pointer(&format!("/usage/{field}")).and_then(Value::as_u64);
    let (tokens_in, tokens_out) = match (count("prompt_tokens"), count("completion_tokens")) {
        (Some(i), Some(o)) => (i, o),
        _ => return Err(WorkerError::Protocol("missing usage token counts".into())),
    };
    Ok(WorkerResult::new(output, tokens_in, tokens_out))
}

impl WorkerBackend for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    fn call(&self, call: &WorkerCall<'_>, seed: u64) -> Result<WorkerResult, WorkerError> {
        let body = self.request_body(call, seed);
        let mut last = self.attempt(&body);
        for _ in 0..self.config.retries {
            match &last {
                Err(e) if e.is_environmental() && !matches!(e, WorkerError::Protocol(_)) => {
                    last = self.attempt(&body);
                }
                _ => break,
            }
        }
        last
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_completion_body() {
        let r = parse_completion(
            r#"{"choices":[{"message":{"role":"assistant","content":"answer: 4"}}],
                "usage":{"prompt_tokens":11,"completion_tokens":3,"total_tokens":14}}"#,
        )
        .unwrap();
        assert_eq!(r, WorkerResult::new("answer: 4", 11, 3));
        assert!(matches!(parse_completion("{}"), Err(WorkerError::Protocol(_))));
        assert!(matches!(
            parse_completion(r#"{"choices":[{"message":{"content":"x"}}]}"#),
            Err(WorkerError::Protocol(_))
        ));
    }

    #[test]
    fn config_defaults_from_toml() {
        let cfg: HttpConfig = toml::from_str(
            r#"
            endpoint = "http://127.0.0.1:1/v1"
            [models]
            small = "s"
            medium = "m"
            large = "l"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.retries, 1);
        assert_eq!(cfg.models.for_capacity(CapacityLevel::Large), "l");
    }
}
