//! HTTP front end. Routes:
//!
//! - `GET  /api/sessions/{id}/tasks?annotator=NAME` blinded task list
//! - `POST /api/sessions/{id}/annotations` one [`Submission`] as JSON
//! - `GET  /api/sessions/{id}/results` A/B tables and kappa; needs
//!   `Authorization: Bearer <admin token>`
//! - anything else under `GET` is served from the static directory

use crate::service::{EvalService, Submission};
use crate::session::Mode;
use crate::stats::{ab_results, agreement, AbTable};
use crate::HumanEvalError;
use serde::Serialize;
use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use tiny_http::{Header, Method, Request, Response, Server};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// `host:port`; port 0 picks a free one.
    pub addr: String,
    pub admin_token: String,
    pub static_dir: Option<PathBuf>,
    pub workers: usize,
}

pub struct HumanEvalServer {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl HumanEvalServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the workers exit (they only exit on shutdown).
    pub fn join(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }

    pub fn shutdown(self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        self.join();
    }
}

pub fn serve(service: Arc<EvalService>, config: ServerConfig) -> Result<HumanEvalServer, HumanEvalError> {
    let server = Server::http(&config.addr)
        .map_err(|e| HumanEvalError::Io(std::io::Error::other(e.to_string())))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| HumanEvalError::Invalid("server is not bound to an IP socket".into()))?;
    let server = Arc::new(server);
    let config = Arc::new(config);
    let workers = (0..config.workers.max(1))
        .map(|_| {
            let (server, service, config) = (server.clone(), service.clone(), config.clone());
            std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    handle(req, &service, &config);
                }
            })
        })
        .collect();
    Ok(HumanEvalServer {
        server,
        addr,
        workers,
    })
}

type Reply = Response<std::io::Cursor<Vec<u8>>>;

fn json<T: Serialize>(status: u16, body: &T) -> Reply {
    let bytes = serde_json::to_vec(body).expect("response serializes");
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

fn error(status: u16, message: impl Into<String>) -> Reply {
    json(status, &serde_json::json!({ "error": message.into() }))
}

fn status_for(e: &HumanEvalError) -> u16 {
    match e {
        HumanEvalError::UnknownTask(_) | HumanEvalError::UnknownSession(_) => 404,
        HumanEvalError::Duplicate(_) => 409,
        HumanEvalError::ScoreRange { .. } | HumanEvalError::Invalid(_) => 422,
        HumanEvalError::EmptyPairing(_) | HumanEvalError::InsufficientOverlap(_) => 422,
        _ => 500,
    }
}

fn query_param(query: &str, key: &str) -> Option<String> {
    form_urlencoded::parse(query.as_bytes())
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.into_owned())
}

#[derive(Serialize)]
struct Results {
    ab: Vec<AbTable>,
    agreement: Vec<crate::stats::AgreementRow>,
    n_records: usize,
}

fn results(service: &EvalService, query: &str) -> Result<Results, HumanEvalError> {
    let records = service.records();
    let pairings: Vec<(String, String)> = match (query_param(query, "system"), query_param(query, "opponent")) {
        (Some(s), Some(o)) => vec![(s, o)],
        _ => service
            .session()
            .items
            .iter()
            .filter(|i| i.mode == Mode::AbPair)
            .map(|i| {
                let mut k = i.candidates.keys().cloned();
                (k.next().unwrap_or_default(), k.next().unwrap_or_default())
            })
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let mut ab = Vec::new();
    for (s, o) in pairings {
        match ab_results(&records, &s, &o) {
            Ok(t) => ab.push(t),
            Err(HumanEvalError::EmptyPairing(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Results {
        ab,
        agreement: agreement(&records),
        n_records: records.len(),
    })
}

fn authorized(req: &Request, token: &str) -> bool {
    let want = format!("Bearer {token}");
    req.headers()
        .iter()
        .any(|h| h.field.equiv("Authorization") && h.value.as_str() == want)
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

fn static_file(dir: &Path, url_path: &str) -> Reply {
    let rel = url_path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return error(400, "bad path");
    }
    let path = dir.join(rel);
    match std::fs::read(&path) {
        Ok(bytes) => Response::from_data(bytes).with_header(
            Header::from_bytes("Content-Type", content_type(&path)).expect("static header"),
        ),
        Err(_) => error(404, "not found"),
    }
}

fn route(req: &mut Request, service: &EvalService, config: &ServerConfig) -> Reply {
    let url = req.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((&url, ""));
    let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
    let sid = &service.session().session_id;
    match (req.method(), segments.as_slice()) {
        (Method::Get, ["api", "sessions", s, "tasks"]) if s == sid => {
            match query_param(query, "annotator") {
                Some(a) => json(200, &service.tasks_for(&a)),
                None => error(400, "annotator query parameter required"),
            }
        }
        (Method::Post, ["api", "sessions", s, "annotations"]) if s == sid => {
            let mut body = String::new();
            if req.as_reader().read_to_string(&mut body).is_err() {
                return error(400, "unreadable body");
            }
            let sub: Submission = match serde_json::from_str(&body) {
                Ok(s) => s,
                Err(e) => return error(400, e.to_string()),
            };
            match service.submit(sub) {
                Ok(ack) => json(200, &ack),
                Err(e) => error(status_for(&e), e.to_string()),
            }
        }
        (Method::Get, ["api", "sessions", s, "results"]) if s == sid => {
            if !authorized(req, &config.admin_token) {
                return error(401, "admin token required");
            }
            match results(service, query) {
                Ok(r) => json(200, &r),
                Err(e) => error(status_for(&e), e.to_string()),
            }
        }
        (_, ["api", ..]) => error(404, "no such endpoint"),
        (Method::Get, _) => match &config.static_dir {
            Some(dir) => static_file(dir, path),
            None => error(404, "no static bundle configured"),
        },
        _ => error(405, "method not allowed"),
    }
}

fn handle(mut req: Request, service: &EvalService, config: &ServerConfig) {
    let reply = route(&mut req, service, config);
    if let Err(e) = req.respond(reply) {
        log::warn!("failed to send response: {e}");
    }
}
