//! Text-completion clients used to write intention chains.
//!
//! The template backend is deterministic and needs no network. The HTTP
//! backend speaks a minimal JSON contract: `POST {endpoint}` with
//! `{"prompt": "..."}` and an optional bearer key, answering either
//! `{"text": "..."}` or a plain-text body.

use std::time::Duration;

use super::AnnotError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Template,
    ExternalHttp,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, AnnotError>;
    fn backend(&self) -> Backend;
}

/// Structured prompt understood by [`TemplateClient`] and readable by an
/// external model.
pub fn intention_prompt(instruction: &str, scene: &super::SceneSummary) -> String {
    format!(
        "Decompose the user's latent intention into exactly 4 numbered reasoning steps, \
         then give a one-sentence summary on a line starting with 'summary:'.\n\
         instruction: {}\ntarget: {}\ngoal: {}\nrelation: {}\nobjects: {}\n",
        instruction.to_lowercase(),
        scene.target,
        scene.goal,
        scene.relation,
        scene.objects.join(", ")
    )
}

/// Fills the fixed four-slot schema (restate the instruction, name the
/// object, name the placement, state the plan) from the prompt fields.
#[derive(Debug, Default, Clone)]
pub struct TemplateClient;

impl LlmClient for TemplateClient {
    fn complete(&self, prompt: &str) -> Result<String, AnnotError> {
        let field = |key: &str| {
            prompt
                .lines()
                .find_map(|l| l.strip_prefix(key).map(|v| v.trim().to_string()))
                .ok_or_else(|| AnnotError::MalformedCompletion(format!("prompt lacks '{key}'")))
        };
        let instruction = field("instruction:")?;
        let target = field("target:")?;
        let goal = field("goal:")?;
        let relation = field("relation:")?;
        Ok(format!(
            "1. the user says {instruction}\n\
             2. the user needs the {target}\n\
             3. the {target} should go {relation} the {goal}\n\
             4. put the {target} {relation} the {goal}\n\
             summary: i will put the {target} {relation} the {goal} for the user ."
        ))
    }

    fn backend(&self) -> Backend {
        Backend::Template
    }
}

/// Blocking HTTP client with a request timeout. Retries are handled by the
/// caller so malformed answers get a second chance too.
pub struct HttpClient {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpClient {
    pub const ENDPOINT_VAR: &'static str = "VLA_LLM_ENDPOINT";
    pub const KEY_VAR: &'static str = "VLA_LLM_API_KEY";

    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    /// Reads the endpoint and key from the environment; `None` when unset.
    pub fn from_env(timeout: Duration) -> Option<Self> {
        let endpoint = std::env::var(Self::ENDPOINT_VAR).ok()?;
        let key = std::env::var(Self::KEY_VAR).ok();
        Some(Self::new(endpoint, key, timeout))
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String, AnnotError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req
            .set("Content-Type", "application/json")
            .send_string(&serde_json::json!({ "prompt": prompt }).to_string())
            .map_err(|e| AnnotError::Client(e.to_string()))?;
        let body = resp
            .into_string()
            .map_err(|e| AnnotError::Client(e.to_string()))?;
        match serde_json::from_str::<serde_json::Value>(&body) {
            Ok(v) => match v.get("text").and_then(|t| t.as_str()) {
                Some(t) => Ok(t.to_string()),
                None => Ok(body),
            },
            Err(_) => Ok(body),
        }
    }

    fn backend(&self) -> Backend {
        Backend::ExternalHttp
    }
}

/// Picks the HTTP backend when its endpoint variable is set, otherwise the
/// template backend. Never makes a network call unless asked to.
pub fn client_from_env() -> Box<dyn LlmClient> {
    match HttpClient::from_env(Duration::from_secs(30)) {
        Some(c) => Box::new(c),
        None => Box::new(TemplateClient),
    }
}
