//! Minimal JSON-over-HTTP client with retry and exponential backoff, shared
//! by the remote embedding, generation and entity-extraction adapters.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ProviderError;

/// Connection settings for a remote model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteSettings {
    pub endpoint: Option<String>,
    /// Name of the environment variable holding a bearer token.
    pub api_key_env: Option<String>,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        Self {
            endpoint: None,
            api_key_env: None,
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 60,
        }
    }
}

pub(crate) struct JsonClient {
    agent: ureq::Agent,
    provider: String,
    endpoint: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
}

impl JsonClient {
    pub(crate) fn new(provider: &str, settings: &RemoteSettings) -> Result<Self, String> {
        let endpoint = settings
            .endpoint
            .clone()
            .ok_or_else(|| format!("{provider}: remote provider requires an endpoint"))?;
        let api_key = match &settings.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| format!("{provider}: environment variable {var} is not set"))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            provider: provider.to_string(),
            endpoint,
            api_key,
            max_retries: settings.max_retries,
            backoff: Duration::from_millis(settings.backoff_ms),
        })
    }

    /// POSTs `body` and decodes the JSON reply. Transport failures, 429 and 5xx
    /// are retried up to `max_retries` times; other statuses fail immediately.
    pub(crate) fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<Resp, ProviderError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let err = match self.try_post(body) {
                Ok(resp) => return Ok(resp),
                Err(e) => e,
            };
            let (message, status, retry_after, retryable) = err;
            if !retryable || attempts > self.max_retries {
                return Err(ProviderError {
                    provider: self.provider.clone(),
                    message,
                    attempts,
                    status,
                    retry_after,
                    retryable,
                });
            }
            let wait = retry_after.unwrap_or(self.backoff * 2u32.saturating_pow(attempts - 1));
            log::warn!(
                "{}: attempt {attempts} failed ({message}); retrying in {wait:?}",
                self.provider
            );
            thread::sleep(wait);
        }
    }

    #[allow(clippy::type_complexity)]
    fn try_post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<Resp, (String, Option<u16>, Option<Duration>, bool)> {
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| (e.to_string(), None, None, true))?;
        let status = response.status().as_u16();
        if status >= 400 {
            let retry_after = response
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            let retryable = status == 429 || status >= 500;
            let text = response
                .body_mut()
                .read_to_string()
                .unwrap_or_default();
            return Err((text, Some(status), retry_after, retryable));
        }
        response
            .body_mut()
            .read_json::<Resp>()
            .map_err(|e| (format!("malformed response: {e}"), Some(status), None, false))
    }
}
