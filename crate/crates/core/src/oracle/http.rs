use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{CompletionOracle, DecodingParams, OracleError};

/// Exponential backoff between retries of transient failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 500,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }

    /// Run `op` until it succeeds, fails permanently, or retries run out.
    pub fn run<T, E, F>(&self, mut op: F, transient: impl Fn(&E) -> bool) -> Result<T, E>
    where
        F: FnMut() -> Result<T, E>,
    {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if attempt < self.max_retries && transient(&e) => {
                    std::thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn default_temperature() -> f64 {
    0.0
}
fn default_max_output_units() -> u32 {
    16
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_parallelism() -> usize {
    4
}

/// Connection and decoding settings for an OpenAI-compatible endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// e.g. `https://api.openai.com/v1` or `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer key. `None`
    /// sends no Authorization header.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_output_units")]
    pub max_output_units: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl OracleConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            temperature: default_temperature(),
            max_output_units: default_max_output_units(),
            timeout_secs: default_timeout_secs(),
            retry: RetryPolicy::default(),
            parallelism: default_parallelism(),
        }
    }
}

/// Bounds the number of requests in flight on a shared client.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn with<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock();
            while *free == 0 {
                self.cv.wait(&mut free);
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock() += 1;
        self.cv.notify_one();
        out
    }
}

/// Chat-completions client. The prompt is sent verbatim as a single user
/// message and `choices[0].message.content` is returned verbatim.
#[derive(Debug)]
pub struct OpenAiClient {
    cfg: OracleConfig,
    endpoint: String,
    api_key: Option<String>,
    identity: String,
    http: reqwest::blocking::Client,
    gate: Gate,
}

impl OpenAiClient {
    pub fn new(cfg: OracleConfig) -> Result<Self, OracleError> {
        if cfg.temperature.is_nan() || cfg.temperature < 0.0 {
            return Err(OracleError::Malformed(format!(
                "temperature must be >= 0, got {}",
                cfg.temperature
            )));
        }
        let api_key = match &cfg.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(key) if !key.is_empty() => Some(key),
                _ => return Err(OracleError::AuthMissing(var.clone())),
            },
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        let endpoint = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
        let identity = format!("openai:{}@{}", cfg.model, cfg.base_url.trim_end_matches('/'));
        Ok(Self {
            gate: Gate::new(cfg.parallelism.max(1)),
            cfg,
            endpoint,
            api_key,
            identity,
            http,
        })
    }

    fn request_body(&self, prompt: &str) -> serde_json::Value {
        json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_output_units,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, OracleError> {
        let mut req = self.http.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(OracleError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| OracleError::Malformed(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| OracleError::Malformed("missing choices[0].message.content".into()))
    }
}

impl CompletionOracle for OpenAiClient {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn decoding(&self) -> DecodingParams {
        DecodingParams {
            temperature: self.cfg.temperature,
            max_output_units: self.cfg.max_output_units,
        }
    }

    fn parallelism(&self) -> usize {
        self.cfg.parallelism.max(1)
    }

    fn complete(&self, prompt: &str) -> Result<String, OracleError> {
        if prompt.is_empty() {
            return Err(OracleError::EmptyPrompt);
        }
        let body = self.request_body(prompt);
        self.gate.with(|| {
            self.cfg
                .retry
                .run(|| self.attempt(&body), OracleError::is_transient)
        })
    }
}
