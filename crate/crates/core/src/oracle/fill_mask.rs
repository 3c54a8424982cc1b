use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{check_mask_count, normalize_fills, FillMaskProvider, MaskFill, ProviderError, RetryPolicy};

/// Provider backed by a fixed table from masked text to answers. Masked
/// texts absent from the table yield no candidates.
#[derive(Debug, Clone, Default)]
pub struct StaticFillMask {
    table: HashMap<String, Vec<MaskFill>>,
}

impl StaticFillMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_entry<I, S>(mut self, masked_text: &str, fills: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        self.insert(masked_text, fills.into_iter().map(|(w, p)| MaskFill::new(w, p)).collect());
        self
    }

    pub fn insert(&mut self, masked_text: &str, fills: Vec<MaskFill>) {
        self.table.insert(masked_text.to_owned(), fills);
    }

    /// Load a JSON object mapping masked text to `[{word, probability}]`.
    pub fn from_json_file(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Failure(format!("{}: {e}", path.display())))?;
        let table: HashMap<String, Vec<MaskFill>> = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Failure(format!("{}: {e}", path.display())))?;
        Ok(Self { table })
    }
}

impl FillMaskProvider for StaticFillMask {
    fn fill_mask(&self, masked_text: &str, k: usize) -> Result<Vec<MaskFill>, ProviderError> {
        check_mask_count(masked_text)?;
        let fills = self.table.get(masked_text).cloned().unwrap_or_default();
        normalize_fills(fills, k)
    }
}

#[derive(Deserialize)]
struct FillMaskResponse {
    candidates: Vec<MaskFill>,
}

/// Client for the fill-mask service: `POST {base}/fill_mask {"text", "k"}`.
#[derive(Debug)]
pub struct HttpFillMask {
    endpoint: String,
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpFillMask {
    pub fn new(base_url: &str, timeout: Duration, retry: RetryPolicy) -> Result<Self, ProviderError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Failure(e.to_string()))?;
        Ok(Self {
            endpoint: format!("{}/fill_mask", base_url.trim_end_matches('/')),
            http,
            retry,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<Vec<MaskFill>, (bool, ProviderError)> {
        let resp = self
            .http
            .post(&self.endpoint)
            .json(body)
            .send()
            .map_err(|e| (true, ProviderError::Failure(e.to_string())))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| (true, ProviderError::Failure(e.to_string())))?;
        if !status.is_success() {
            let transient = status.as_u16() == 429 || status.is_server_error();
            return Err((transient, ProviderError::Failure(format!("HTTP {status}: {text}"))));
        }
        let parsed: FillMaskResponse = serde_json::from_str(&text)
            .map_err(|e| (false, ProviderError::Failure(format!("malformed response: {e}"))))?;
        Ok(parsed.candidates)
    }
}

impl FillMaskProvider for HttpFillMask {
    fn fill_mask(&self, masked_text: &str, k: usize) -> Result<Vec<MaskFill>, ProviderError> {
        check_mask_count(masked_text)?;
        let body = json!({"text": masked_text, "k": k});
        let fills = self
            .retry
            .run(|| self.attempt(&body), |(transient, _)| *transient)
            .map_err(|(_, e)| e)?;
        normalize_fills(fills, k)
    }
}
