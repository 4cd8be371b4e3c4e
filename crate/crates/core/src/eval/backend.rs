//! Text generators the harness can query.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::dataset::LabeledDataset;
use crate::eval::template::{render_prompt, TaskSpec};
use crate::model::tokenizer::{detokenize_lossy, tokenize, BOS, EOS};
use crate::model::{DecodeSession, Model};

pub trait ModelBackend: Sync {
    /// Name recorded in reports.
    fn name(&self) -> String;

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String>;

    /// Whether `generate` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Greedy decoding with the in-process engine.
pub struct EngineBackend {
    model: Model,
    name: String,
}

impl EngineBackend {
    pub fn new(model: Model, name: impl Into<String>) -> EngineBackend {
        EngineBackend {
            model,
            name: name.into(),
        }
    }
}

impl ModelBackend for EngineBackend {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        let mut tokens = vec![BOS];
        tokens.extend(tokenize(prompt));
        let out =
            DecodeSession::new(&self.model).greedy_decode(&tokens, max_new_tokens, Some(EOS))?;
        Ok(detokenize_lossy(&out))
    }
}

/// Fixed answers, for exercising the pipeline without a model.
#[derive(Debug, Clone)]
pub enum ScriptedBackend {
    /// Answers every prompt with the same text.
    Constant(String),
    /// Looks the prompt up; unknown prompts are backend errors.
    Table {
        name: String,
        answers: HashMap<String, String>,
    },
}

impl ScriptedBackend {
    /// Replies to each sample's prompt with its gold label.
    pub fn gold_echo(dataset: &LabeledDataset, spec: &TaskSpec) -> ScriptedBackend {
        let answers = dataset
            .samples
            .iter()
            .map(|s| {
                (
                    render_prompt(spec, &s.text),
                    dataset.labels[s.label].clone(),
                )
            })
            .collect();
        ScriptedBackend::Table {
            name: "gold-echo".into(),
            answers,
        }
    }

    /// `gold-echo` or `constant:<text>`.
    pub fn from_spec(
        spec: &str,
        dataset: &LabeledDataset,
        task: &TaskSpec,
    ) -> Result<ScriptedBackend> {
        if spec == "gold-echo" {
            Ok(ScriptedBackend::gold_echo(dataset, task))
        } else if let Some(text) = spec.strip_prefix("constant:") {
            Ok(ScriptedBackend::Constant(text.to_string()))
        } else {
            Err(Error::Usage(format!(
                "unknown scripted backend {spec:?} (expected gold-echo or constant:<text>)"
            )))
        }
    }
}

impl ModelBackend for ScriptedBackend {
    fn name(&self) -> String {
        match self {
            ScriptedBackend::Constant(t) => format!("constant:{t}"),
            ScriptedBackend::Table { name, .. } => name.clone(),
        }
    }

    fn generate(&self, prompt: &str, _max_new_tokens: usize) -> Result<String> {
        match self {
            ScriptedBackend::Constant(t) => Ok(t.clone()),
            ScriptedBackend::Table { answers, .. } => answers
                .get(prompt)
                .cloned()
                .ok_or_else(|| Error::Backend("no scripted answer for prompt".into())),
        }
    }
}

pub const URL_ENV: &str = "BACKEND_URL";
pub const TOKEN_ENV: &str = "BACKEND_TOKEN";

#[derive(Serialize)]
struct RemoteRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponse {
    text: String,
}

/// A model behind an HTTP endpoint: POST `{"prompt": ...}` and read
/// `{"text": ...}` back. The token, if any, is sent as a bearer header.
pub struct RemoteBackend {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> RemoteBackend {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build();
        RemoteBackend {
            url: url.into(),
            token,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    /// Endpoint from `BACKEND_URL` unless `url` is given; token from `BACKEND_TOKEN`.
    pub fn from_env(url: Option<String>) -> Result<RemoteBackend> {
        let url = match url {
            Some(u) => u,
            None => std::env::var(URL_ENV).map_err(|_| {
                Error::Usage(format!("no backend URL given and {URL_ENV} is not set"))
            })?,
        };
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Ok(RemoteBackend::new(url, token, Duration::from_secs(120)))
    }
}

impl ModelBackend for RemoteBackend {
    fn name(&self) -> String {
        self.url.clone()
    }

    fn generate(&self, prompt: &str, _max_new_tokens: usize) -> Result<String> {
        let body = serde_json::to_vec(&RemoteRequest { prompt }).expect("request serializes");
        let mut req = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send(&body[..])
            .map_err(|e| Error::Backend(format!("{}: {e}", self.url)))?;
        let reply: RemoteResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Backend(format!("{}: bad response: {e}", self.url)))?;
        Ok(reply.text)
    }
}
