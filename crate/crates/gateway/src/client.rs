//! Blocking client for the HTTP API.

use std::io::{BufRead, BufReader};
use std::time::Duration;

use reqwest::blocking::{Client as Http, RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde_json::Value;
use stratus_core::governance::Budget;
use stratus_core::results::ProvenanceRecord;
use stratus_core::workflow::{TemplateVersion, WorkflowTemplate};
use thiserror::Error;

use crate::cli::RunRequest;
use crate::http::USER_HEADER;
use crate::service::{JobSummary, JobView, StatusEvent, Submission};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{message}")]
    Api {
        status: u16,
        kind: String,
        message: String,
    },
    #[error("cannot reach the gateway: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    /// Error class as reported by the server (`transport` / `decode` locally).
    pub fn kind(&self) -> &str {
        match self {
            ClientError::Api { kind, .. } => kind,
            ClientError::Transport(_) => "transport",
            ClientError::Decode(_) => "decode",
        }
    }
}

pub struct Client {
    base: String,
    user: String,
    http: Http,
}

impl Client {
    /// `addr` is `host:port` or a full `http://` URL.
    pub fn new(addr: &str, user: &str) -> Client {
        let base = if addr.starts_with("http://") || addr.starts_with("https://") {
            addr.trim_end_matches('/').to_string()
        } else {
            format!("http://{addr}")
        };
        Client {
            base,
            user: user.to_string(),
            http: Http::builder()
                .timeout(None::<Duration>)
                .build()
                .expect("http client builds"),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, rb: RequestBuilder) -> Result<Response, ClientError> {
        let resp = rb
            .header(USER_HEADER, &self.user)
            .send()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let body: Value = resp.json().unwrap_or(Value::Null);
        Err(ClientError::Api {
            status,
            kind: body["error"].as_str().unwrap_or("http").to_string(),
            message: body["message"]
                .as_str()
                .map_or_else(|| format!("HTTP {status}"), str::to_string),
        })
    }

    fn json<T: DeserializeOwned>(&self, rb: RequestBuilder) -> Result<T, ClientError> {
        self.send(rb)?
            .json()
            .map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn health(&self) -> Result<Value, ClientError> {
        self.json(self.http.get(self.url("/v1/health")))
    }

    pub fn submit(&self, req: &RunRequest) -> Result<Submission, ClientError> {
        self.json(self.http.post(self.url("/v1/jobs")).json(req))
    }

    pub fn jobs(&self, workspace: Option<&str>) -> Result<Vec<JobSummary>, ClientError> {
        let mut rb = self.http.get(self.url("/v1/jobs"));
        if let Some(ws) = workspace {
            rb = rb.query(&[("workspace", ws)]);
        }
        self.json(rb)
    }

    pub fn job(&self, id: &str) -> Result<JobView, ClientError> {
        self.json(self.http.get(self.url(&format!("/v1/jobs/{id}"))))
    }

    pub fn cancel(&self, id: &str) -> Result<JobView, ClientError> {
        self.json(self.http.post(self.url(&format!("/v1/jobs/{id}/cancel"))))
    }

    pub fn logs(&self, id: &str) -> Result<String, ClientError> {
        self.send(self.http.get(self.url(&format!("/v1/jobs/{id}/logs"))))?
            .text()
            .map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn record(&self, id: &str) -> Result<ProvenanceRecord, ClientError> {
        self.json(self.http.get(self.url(&format!("/v1/jobs/{id}/record"))))
    }

    /// Opens the status stream, resuming after `last_event_id` when given.
    pub fn events(&self, id: &str, last_event_id: Option<u64>) -> Result<EventStream, ClientError> {
        let mut rb = self.http.get(self.url(&format!("/v1/jobs/{id}/events")));
        if let Some(last) = last_event_id {
            rb = rb.header("Last-Event-ID", last.to_string());
        }
        let resp = self.send(rb)?;
        Ok(EventStream {
            reader: Box::new(BufReader::new(resp)),
        })
    }

    /// Follows the status stream to the terminal state, reconnecting with
    /// `Last-Event-ID` if the connection drops.
    pub fn follow(
        &self,
        id: &str,
        mut on_event: impl FnMut(&StatusEvent),
    ) -> Result<JobView, ClientError> {
        let mut last: Option<u64> = None;
        for _attempt in 0..20 {
            let stream = self.events(id, last)?;
            for ev in stream {
                let ev = ev?;
                last = Some(ev.seq);
                on_event(&ev);
                if ev.state.is_terminal() {
                    return self.job(id);
                }
            }
            std::thread::sleep(Duration::from_millis(100));
        }
        self.job(id)
    }

    pub fn templates(&self) -> Result<Vec<TemplateVersion>, ClientError> {
        self.json(self.http.get(self.url("/v1/templates")))
    }

    pub fn template(
        &self,
        name: &str,
        version: Option<u32>,
    ) -> Result<WorkflowTemplate, ClientError> {
        let path = match version {
            Some(v) => format!("/v1/templates/{name}/{v}"),
            None => format!("/v1/templates/{name}"),
        };
        self.json(self.http.get(self.url(&path)))
    }

    pub fn register_template(
        &self,
        t: &WorkflowTemplate,
        workspace: &str,
    ) -> Result<TemplateVersion, ClientError> {
        self.json(
            self.http
                .post(self.url("/v1/templates"))
                .query(&[("workspace", workspace)])
                .json(t),
        )
    }

    pub fn catalog(&self) -> Result<Value, ClientError> {
        self.json(self.http.get(self.url("/v1/catalog")))
    }

    pub fn budgets(&self) -> Result<Vec<Budget>, ClientError> {
        self.json(self.http.get(self.url("/v1/budgets")))
    }

    pub fn budget(&self, id: &str) -> Result<Budget, ClientError> {
        self.json(self.http.get(self.url(&format!("/v1/budgets/{id}"))))
    }
}

/// Server-sent events decoded into [`StatusEvent`]s.
pub struct EventStream {
    reader: Box<dyn BufRead + Send>,
}

impl Iterator for EventStream {
    type Item = Result<StatusEvent, ClientError>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut data = String::new();
        loop {
            let mut line = String::new();
            match self.reader.read_line(&mut line) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(ClientError::Transport(e.to_string()))),
            }
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() {
                if data.is_empty() {
                    continue;
                }
                return Some(
                    serde_json::from_str(&data).map_err(|e| ClientError::Decode(e.to_string())),
                );
            }
            if let Some(d) = line.strip_prefix("data:") {
                if !data.is_empty() {
                    data.push('\n');
                }
                data.push_str(d.strip_prefix(' ').unwrap_or(d));
            }
        }
    }
}
