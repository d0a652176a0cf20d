use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Distribution, LmError, Scorer};

/// Scorer backed by an external service.
///
/// Request: `{"tokens": [...], "position": k}`.
/// Response: `{"logprobs": {token: logprob, ...}}`, either over the whole
/// vocabulary or its top entries. With `top_n` set, only the `top_n` most
/// probable entries are kept and ranks beyond them are reported as lower bounds.
pub struct HttpScorer {
    url: String,
    top_n: Option<usize>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    tokens: &'a [String],
    position: usize,
}

#[derive(Deserialize)]
struct ScoreResponse {
    logprobs: HashMap<String, f64>,
}

impl HttpScorer {
    pub fn new(url: impl Into<String>, top_n: Option<usize>) -> Result<Self, LmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| LmError::Transport(e.to_string()))?;
        Ok(HttpScorer {
            url: url.into(),
            top_n,
            client,
        })
    }
}

impl Scorer for HttpScorer {
    fn distribution(&self, tokens: &[String], position: usize) -> Result<Distribution, LmError> {
        if position >= tokens.len() {
            return Err(LmError::PositionOutOfRange {
                position,
                len: tokens.len(),
            });
        }
        let resp = self
            .client
            .post(&self.url)
            .json(&ScoreRequest { tokens, position })
            .send()
            .map_err(|e| LmError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(LmError::Transport(format!("HTTP {}", resp.status())));
        }
        let body: ScoreResponse = resp.json().map_err(|e| LmError::Protocol(e.to_string()))?;
        if let Some((t, lp)) = body.logprobs.iter().find(|(_, lp)| !lp.is_finite() || **lp > 0.0) {
            return Err(LmError::Protocol(format!("invalid logprob {lp} for {t:?}")));
        }

        let mut logprobs: Vec<(String, f64)> = body.logprobs.into_iter().collect();
        logprobs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mass: f64 = logprobs.iter().map(|(_, lp)| lp.exp()).sum();
        let mut complete = (mass - 1.0).abs() < 1e-6;
        if let Some(n) = self.top_n {
            if logprobs.len() > n {
                logprobs.truncate(n);
                complete = false;
            }
        }
        Ok(Distribution { logprobs, complete })
    }

    fn describe(&self) -> String {
        match self.top_n {
            Some(n) => format!("http({}, top_n={n})", self.url),
            None => format!("http({})", self.url),
        }
    }
}
