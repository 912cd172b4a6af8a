//! Annotation session server: hands out sketch pairs and journals every answer.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cppcl::curriculum::{
    constraints_from_annotations, propose_annotation_pairs, Annotation, AnnotationChoice,
};
use cppcl::{io, Error, Modality};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::commands::{load_features, CliError, CliResult};
use crate::AnnotateServeArgs;

/// One journal line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub pair_id: usize,
    pub left: usize,
    pub right: usize,
    pub choice: String,
    /// Unix seconds.
    pub timestamp: u64,
}

impl JournalRecord {
    pub fn annotation(&self) -> cppcl::Result<Annotation> {
        Ok(Annotation {
            left: self.left,
            right: self.right,
            choice: self.choice.parse()?,
        })
    }
}

/// Reads a journal, skipping lines that do not parse (e.g. one cut short by a crash).
pub fn read_journal(path: &Path) -> cppcl::Result<Vec<JournalRecord>> {
    let text = io::read_text(path)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JournalRecord>(line) {
            Ok(r) => {
                r.annotation()?;
                records.push(r);
            }
            Err(e) => warn!(
                "{}:{}: skipping malformed record: {e}",
                path.display(),
                lineno + 1
            ),
        }
    }
    Ok(records)
}

struct Session {
    pairs: Vec<(usize, usize)>,
    answers: BTreeMap<usize, JournalRecord>,
    journal: File,
    /// Sketch image file names in index order.
    images: Vec<String>,
    images_dir: Option<PathBuf>,
}

#[derive(Debug)]
enum AnswerError {
    UnknownPair,
    Repeated,
    Io(std::io::Error),
}

impl Session {
    fn open(
        pairs: Vec<(usize, usize)>,
        journal_path: &Path,
        images_dir: Option<PathBuf>,
    ) -> CliResult<Self> {
        let mut answers = BTreeMap::new();
        if journal_path.exists() {
            for r in read_journal(journal_path)? {
                if pairs.get(r.pair_id) != Some(&(r.left, r.right)) {
                    return Err(CliError::Core(Error::Data(format!(
                        "journal pair {} ({}, {}) does not match this session",
                        r.pair_id, r.left, r.right
                    ))));
                }
                answers.entry(r.pair_id).or_insert(r);
            }
            info!("resumed {} answers", answers.len());
        }
        let io_err = |e| {
            CliError::Core(Error::Io {
                path: journal_path.into(),
                source: e,
            })
        };
        let mut journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(journal_path)
            .map_err(io_err)?;
        // a crash may have left a partial line; start a fresh one
        let len = journal.metadata().map_err(io_err)?.len();
        if len > 0 {
            let mut tail = [0u8; 1];
            let mut f = File::open(journal_path).map_err(io_err)?;
            use std::io::{Read, Seek, SeekFrom};
            f.seek(SeekFrom::End(-1)).map_err(io_err)?;
            f.read_exact(&mut tail).map_err(io_err)?;
            if tail[0] != b'\n' {
                journal.write_all(b"\n").map_err(io_err)?;
            }
        }
        let images = match &images_dir {
            Some(dir) => {
                let mut names: Vec<String> = std::fs::read_dir(dir)
                    .map_err(|e| {
                        CliError::Core(Error::Io {
                            path: dir.clone(),
                            source: e,
                        })
                    })?
                    .filter_map(|e| e.ok())
                    .filter(|e| e.path().is_file())
                    .filter_map(|e| e.file_name().into_string().ok())
                    .collect();
                names.sort();
                names
            }
            None => Vec::new(),
        };
        Ok(Self {
            pairs,
            answers,
            journal,
            images,
            images_dir,
        })
    }

    fn remaining(&self) -> usize {
        self.pairs.len() - self.answers.len()
    }

    fn next(&self) -> Option<usize> {
        (0..self.pairs.len()).find(|id| !self.answers.contains_key(id))
    }

    fn image_url(&self, id: usize) -> Option<String> {
        self.images.get(id).map(|name| format!("/static/{name}"))
    }

    fn answer(&mut self, pair_id: usize, choice: AnnotationChoice) -> Result<usize, AnswerError> {
        let &(left, right) = self.pairs.get(pair_id).ok_or(AnswerError::UnknownPair)?;
        if self.answers.contains_key(&pair_id) {
            return Err(AnswerError::Repeated);
        }
        let record = JournalRecord {
            pair_id,
            left,
            right,
            choice: choice.token().to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        self.journal
            .write_all(line.as_bytes())
            .map_err(AnswerError::Io)?;
        self.journal.sync_data().map_err(AnswerError::Io)?;
        self.answers.insert(pair_id, record);
        Ok(self.remaining())
    }

    fn progress(&self) -> (usize, usize) {
        let skipped = self.answers.values().filter(|r| r.choice == "skip").count();
        (self.answers.len() - skipped, skipped)
    }

    fn export(&self) -> String {
        let annotations: Vec<Annotation> = self
            .answers
            .values()
            .map(|r| r.annotation().expect("validated on insert"))
            .collect();
        io::format_constraints(&constraints_from_annotations(
            &annotations,
            Modality::Sketch,
        ))
    }
}

type Shared = Arc<Mutex<Session>>;

fn lock(state: &Shared) -> std::sync::MutexGuard<'_, Session> {
    state.lock().unwrap_or_else(|p| p.into_inner())
}

async fn next_pair(State(state): State<Shared>) -> Response {
    let s = lock(&state);
    match s.next() {
        None => StatusCode::NO_CONTENT.into_response(),
        Some(id) => {
            let (l, r) = s.pairs[id];
            Json(json!({
                "pair_id": id,
                "left": {"id": l, "image_url": s.image_url(l)},
                "right": {"id": r, "image_url": s.image_url(r)},
            }))
            .into_response()
        }
    }
}

#[derive(Deserialize)]
struct AnswerBody {
    choice: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({"error": msg.into()}))).into_response()
}

async fn answer(
    State(state): State<Shared>,
    UrlPath(pair_id): UrlPath<String>,
    body: Result<Json<AnswerBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Ok(pair_id) = pair_id.parse::<usize>() else {
        return error(StatusCode::NOT_FOUND, format!("unknown pair {pair_id}"));
    };
    let choice = match body {
        Ok(Json(b)) => match b.choice.parse::<AnnotationChoice>() {
            Ok(c) => c,
            Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
        },
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let mut s = lock(&state);
    match s.answer(pair_id, choice) {
        Ok(remaining) => Json(json!({ "remaining": remaining })).into_response(),
        Err(AnswerError::UnknownPair) => {
            error(StatusCode::NOT_FOUND, format!("unknown pair {pair_id}"))
        }
        Err(AnswerError::Repeated) => error(
            StatusCode::CONFLICT,
            format!("pair {pair_id} already answered"),
        ),
        Err(AnswerError::Io(e)) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("journal write failed: {e}"),
        ),
    }
}

async fn progress(State(state): State<Shared>) -> Response {
    let s = lock(&state);
    let (answered, skipped) = s.progress();
    Json(json!({"answered": answered, "skipped": skipped, "remaining": s.remaining()}))
        .into_response()
}

async fn export(State(state): State<Shared>) -> Response {
    let body = lock(&state).export();
    ([(header::CONTENT_TYPE, "text/csv")], body).into_response()
}

fn content_type(path: &Path) -> &'static str {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("svg") => "image/svg+xml",
        Some("bmp") => "image/bmp",
        Some("webp") => "image/webp",
        Some("pgm" | "pnm") => "image/x-portable-graymap",
        _ => "application/octet-stream",
    }
}

async fn static_file(State(state): State<Shared>, UrlPath(rel): UrlPath<String>) -> Response {
    let rel = PathBuf::from(rel);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return error(StatusCode::NOT_FOUND, "not found");
    }
    let Some(dir) = lock(&state).images_dir.clone() else {
        return error(StatusCode::NOT_FOUND, "no image directory configured");
    };
    let path = dir.join(&rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "not found"),
    }
}

fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/pairs/next", get(next_pair))
        .route("/api/pairs/{pair_id}/answer", post(answer))
        .route("/api/progress", get(progress))
        .route("/api/export", get(export))
        .route("/static/{*path}", get(static_file))
        .with_state(state)
}

pub fn run(a: &AnnotateServeArgs) -> CliResult {
    let fs = load_features(&a.features, Modality::Sketch)?;
    let (groups, _) = io::parse_groups(&io::read_text(&a.groups)?)?;
    let pairs = propose_annotation_pairs(&fs, &groups)?;
    let session = Session::open(pairs, &a.journal, a.images_dir.clone())?;
    let addr: SocketAddr = a
        .bind
        .parse()
        .map_err(|e| CliError::Usage(format!("bad bind address {:?}: {e}", a.bind)))?;
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| CliError::Core(Error::Solver(format!("cannot start runtime: {e}"))))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| {
            CliError::Core(Error::Io {
                path: a.bind.clone().into(),
                source: e,
            })
        })?;
        let local = listener.local_addr().map_err(|e| {
            CliError::Core(Error::Io {
                path: a.bind.clone().into(),
                source: e,
            })
        })?;
        println!("listening on http://{local}");
        std::io::stdout().flush().ok();
        axum::serve(listener, router(Arc::new(Mutex::new(session))))
            .with_graceful_shutdown(async {
                tokio::signal::ctrl_c().await.ok();
            })
            .await
            .map_err(|e| {
                CliError::Core(Error::Io {
                    path: a.bind.clone().into(),
                    source: e,
                })
            })
    })
}
