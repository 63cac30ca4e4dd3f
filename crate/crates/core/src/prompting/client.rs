use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::json;

use crate::error::{Error, Result};
use crate::relsdata::UnifiedLabel;

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    /// Carried for mocks and logging; never sent to a provider.
    pub instance_id: String,
}

/// Provider-agnostic text completion.
pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String>;
}

/// Deterministic offline clients.
pub enum MockClient {
    /// Answers with each instance's gold label.
    Gold(HashMap<String, UnifiedLabel>),
    Fixed(UnifiedLabel),
    Unparseable,
    /// Fails the first `failures` calls per instance, then defers to `inner`.
    Flaky {
        failures: usize,
        inner: Box<MockClient>,
        seen: Mutex<HashMap<String, usize>>,
    },
}

impl MockClient {
    pub fn gold<'a>(instances: impl IntoIterator<Item = &'a crate::relsdata::RelationInstance>) -> Self {
        MockClient::Gold(instances.into_iter().map(|i| (i.id.clone(), i.label)).collect())
    }

    pub fn flaky(failures: usize, inner: MockClient) -> Self {
        MockClient::Flaky {
            failures,
            inner: Box::new(inner),
            seen: Mutex::new(HashMap::new()),
        }
    }
}

impl LlmClient for MockClient {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        match self {
            MockClient::Gold(map) => map
                .get(&request.instance_id)
                .map(|l| format!("The relation is {l}."))
                .ok_or_else(|| Error::Client(format!("no gold label for {}", request.instance_id))),
            MockClient::Fixed(l) => Ok(l.to_string()),
            MockClient::Unparseable => Ok("I cannot determine this.".into()),
            MockClient::Flaky { failures, inner, seen } => {
                let attempt = {
                    let mut seen = seen.lock().expect("mock state lock");
                    let n = seen.entry(request.instance_id.clone()).or_insert(0);
                    *n += 1;
                    *n
                };
                if attempt <= *failures {
                    Err(Error::Client(format!("simulated transport failure {attempt}")))
                } else {
                    inner.complete(request)
                }
            }
        }
    }
}

/// Chat-completions style HTTP endpoint. The key is read from an
/// environment variable at construction.
pub struct HttpClient {
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn from_env(endpoint: &str, key_var: &str) -> Result<Self> {
        let api_key = std::env::var(key_var)
            .map_err(|_| Error::Config(format!("environment variable {key_var} holds no API key")))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
        })
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        let body = json!({
            "model": request.model,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let resp: serde_json::Value = self
            .agent
            .post(&self.endpoint)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| Error::Client(e.to_string()))?
            .into_json()
            .map_err(|e| Error::Client(e.to_string()))?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Client(format!("unexpected response shape: {resp}")))
    }
}
