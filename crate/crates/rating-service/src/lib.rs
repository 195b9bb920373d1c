//! HTTP service hosting blinded rating studies.
//!
//! Each study lives in `data_dir/studies/<id>/` as its manifest, an
//! append-only `ratings.csv` in the metrics schema and a `served.log` of
//! which worker was shown which trial. Every answer is flushed to disk
//! before it is acknowledged.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sgctx_core::metrics::{aggregate_study, append_ratings, read_ratings, write_ratings, Answer, CategoryMap, MetricsError, RatingRecord, DEFAULT_MIN_CONTROL_ACCURACY};
use sgctx_core::study::{valid_id, Progress, StudyError, StudyManifest, TrialPayload};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("unknown study {0}")]
    UnknownStudy(String),
    #[error("unknown media {0}")]
    UnknownMedia(String),
    #[error("study {0} already exists with a different manifest")]
    StudyExists(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::UnknownStudy(_) | Self::UnknownMedia(_) | Self::Study(StudyError::UnknownTrial(_)) => StatusCode::NOT_FOUND,
            Self::Metrics(MetricsError::Empty(_)) => StatusCode::NOT_FOUND,
            Self::StudyExists(_) | Self::Study(StudyError::Duplicate { .. }) => StatusCode::CONFLICT,
            Self::Io { .. } | Self::Metrics(_) => StatusCode::INTERNAL_SERVER_ERROR,
            Self::Study(_) | Self::BadRequest(_) => StatusCode::BAD_REQUEST,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ServiceError + '_ {
    move |source| ServiceError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Where media references resolve; defaults to `data_dir/media`.
    pub media_dir: Option<PathBuf>,
    pub min_control_accuracy: f64,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self { data_dir: data_dir.into(), media_dir: None, min_control_accuracy: DEFAULT_MIN_CONTROL_ACCURACY }
    }

    pub fn media_dir(&self) -> PathBuf {
        self.media_dir.clone().unwrap_or_else(|| self.data_dir.join("media"))
    }
}

struct Log {
    ratings: File,
    served: File,
    progress: Progress,
    records: Vec<RatingRecord>,
}

struct Study {
    manifest: StudyManifest,
    dir: PathBuf,
    log: Mutex<Log>,
}

impl Study {
    fn ratings_path(&self) -> PathBuf {
        self.dir.join("ratings.csv")
    }
}

/// Drops a trailing partial line left by a write that was never
/// acknowledged.
fn trim_partial_line(path: &Path) -> Result<(), ServiceError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    log::warn!("{}: dropping {} bytes of an unfinished line", path.display(), bytes.len() - keep);
    let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    f.set_len(keep as u64).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

fn open_append(path: &Path) -> Result<File, ServiceError> {
    OpenOptions::new().append(true).open(path).map_err(io_err(path))
}

fn load_study(dir: &Path) -> Result<Study, ServiceError> {
    let mpath = dir.join("manifest.json");
    let manifest = StudyManifest::from_json(&fs::read_to_string(&mpath).map_err(io_err(&mpath))?)?;
    manifest.validate(None)?;
    let rpath = dir.join("ratings.csv");
    let spath = dir.join("served.log");
    trim_partial_line(&rpath)?;
    trim_partial_line(&spath)?;
    let records = read_ratings(File::open(&rpath).map_err(io_err(&rpath))?)?;
    let mut progress = Progress::new(&manifest);
    for line in fs::read_to_string(&spath).map_err(io_err(&spath))?.lines() {
        let (w, t) = line.split_once(',').ok_or_else(|| ServiceError::BadRequest(format!("{}: bad line {line:?}", spath.display())))?;
        let i = manifest.trial_index(t).ok_or_else(|| StudyError::UnknownTrial(t.to_string()))?;
        progress.mark_served(w, i);
    }
    for r in &records {
        let i = manifest.trial_index(&r.trial_id).ok_or_else(|| StudyError::UnknownTrial(r.trial_id.clone()))?;
        progress.record(&r.worker_id, i);
    }
    let log = Log { ratings: open_append(&rpath)?, served: open_append(&spath)?, progress, records };
    Ok(Study { manifest, dir: dir.to_path_buf(), log: Mutex::new(log) })
}

/// The service state: every hosted study.
pub struct Service {
    config: ServiceConfig,
    studies: RwLock<BTreeMap<String, Arc<Study>>>,
}

/// Result of [`Service::next_task`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextTask {
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial: Option<TrialPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub worker_id: String,
    pub trial_id: String,
    pub answer: Answer,
}

impl Service {
    /// Opens `data_dir`, reloading every study found there.
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        let root = config.data_dir.join("studies");
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mut studies = BTreeMap::new();
        for entry in fs::read_dir(&root).map_err(io_err(&root))? {
            let dir = entry.map_err(io_err(&root))?.path();
            if dir.join("manifest.json").is_file() {
                let s = load_study(&dir)?;
                log::info!("loaded study {} with {} ratings", s.manifest.study_id, s.log.lock().unwrap().records.len());
                studies.insert(s.manifest.study_id.clone(), Arc::new(s));
            }
        }
        Ok(Arc::new(Self { config, studies: RwLock::new(studies) }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn study(&self, id: &str) -> Result<Arc<Study>, ServiceError> {
        self.studies.read().unwrap().get(id).cloned().ok_or_else(|| ServiceError::UnknownStudy(id.to_string()))
    }

    /// Registers a study. Returns `true` when it was created and `false`
    /// when an identical manifest was already hosted.
    pub fn create_study(&self, manifest: StudyManifest) -> Result<bool, ServiceError> {
        manifest.validate(Some(&self.config.media_dir()))?;
        let mut studies = self.studies.write().unwrap();
        if let Some(existing) = studies.get(&manifest.study_id) {
            return if existing.manifest == manifest { Ok(false) } else { Err(ServiceError::StudyExists(manifest.study_id)) };
        }
        let dir = self.config.data_dir.join("studies").join(&manifest.study_id);
        let tmp = self.config.data_dir.join("studies").join(format!(".{}.tmp", manifest.study_id));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
        let write = |name: &str, bytes: &[u8]| -> Result<(), ServiceError> {
            let p = tmp.join(name);
            let mut f = File::create(&p).map_err(io_err(&p))?;
            f.write_all(bytes).map_err(io_err(&p))?;
            f.sync_all().map_err(io_err(&p))
        };
        write("manifest.json", manifest.to_json().as_bytes())?;
        let mut header = Vec::new();
        write_ratings(&mut header, &[])?;
        write("ratings.csv", &header)?;
        write("served.log", b"")?;
        fs::rename(&tmp, &dir).map_err(io_err(&dir))?;
        let study = load_study(&dir)?;
        log::info!("created study {} ({} trials, {} controls)", manifest.study_id, manifest.trials.len(), manifest.control_count());
        studies.insert(manifest.study_id.clone(), Arc::new(study));
        Ok(true)
    }

    pub fn next_task(&self, study_id: &str, worker: &str) -> Result<NextTask, ServiceError> {
        if !valid_id(worker) {
            return Err(ServiceError::BadRequest(format!("invalid worker id {worker:?}")));
        }
        let study = self.study(study_id)?;
        let mut log = study.log.lock().unwrap();
        let was_pending = log.progress.pending(worker);
        let Some(i) = log.progress.next(&study.manifest, worker) else {
            return Ok(NextTask { done: true, trial: None });
        };
        if was_pending != Some(i) {
            let line = format!("{worker},{}\n", study.manifest.trials[i].trial_id);
            let path = study.dir.join("served.log");
            log.served.write_all(line.as_bytes()).map_err(io_err(&path))?;
            log.served.sync_data().map_err(io_err(&path))?;
        }
        Ok(NextTask { done: false, trial: Some(study.manifest.payload(i)) })
    }

    pub fn submit(&self, study_id: &str, s: &Submission) -> Result<(), ServiceError> {
        if !valid_id(&s.worker_id) {
            return Err(ServiceError::BadRequest(format!("invalid worker id {:?}", s.worker_id)));
        }
        let study = self.study(study_id)?;
        let i = study.manifest.trial_index(&s.trial_id).ok_or_else(|| StudyError::UnknownTrial(s.trial_id.clone()))?;
        let mut log = study.log.lock().unwrap();
        log.progress.check(&study.manifest, &s.worker_id, i, s.answer)?;
        let rec = study.manifest.record(i, &s.worker_id, s.answer);
        let path = study.ratings_path();
        append_ratings(&mut log.ratings, std::slice::from_ref(&rec))?;
        log.ratings.sync_data().map_err(io_err(&path))?;
        log.progress.record(&s.worker_id, i);
        log.records.push(rec);
        Ok(())
    }

    /// Canonical result JSON, identical to offline aggregation of the
    /// same ratings log.
    pub fn results(&self, study_id: &str) -> Result<String, ServiceError> {
        let study = self.study(study_id)?;
        let records = study.log.lock().unwrap().records.clone();
        if records.is_empty() {
            return Err(MetricsError::Empty("ratings").into());
        }
        let r = aggregate_study(&records, self.config.min_control_accuracy, &CategoryMap::default(), study.manifest.model_pair())?;
        Ok(r.to_json())
    }

    pub fn media(&self, name: &str) -> Result<(Vec<u8>, &'static str), ServiceError> {
        if !valid_id(name) {
            return Err(ServiceError::UnknownMedia(name.to_string()));
        }
        let path = self.config.media_dir().join(name);
        let bytes = fs::read(&path).map_err(|_| ServiceError::UnknownMedia(name.to_string()))?;
        Ok((bytes, content_type(name)))
    }
}

pub fn content_type(name: &str) -> &'static str {
    match name.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase()).as_deref() {
        Some("ppm") => "image/x-portable-pixmap",
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

async fn create_study(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Response, ServiceError> {
    let text = std::str::from_utf8(&body).map_err(|_| ServiceError::BadRequest("manifest is not UTF-8".into()))?;
    let manifest = StudyManifest::from_json(text)?;
    let id = manifest.study_id.clone();
    let created = svc.create_study(manifest)?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(json!({ "study_id": id }))).into_response())
}

async fn next_task(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<NextTask>, ServiceError> {
    let worker = q.get("worker").ok_or_else(|| ServiceError::BadRequest("missing ?worker=".into()))?;
    Ok(Json(svc.next_task(&id, worker)?))
}

async fn submit(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Response, ServiceError> {
    let s: Submission = serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("rating: {e}")))?;
    svc.submit(&id, &s)?;
    Ok((StatusCode::CREATED, Json(json!({ "recorded": true, "trial_id": s.trial_id })))
        .into_response())
}

async fn results(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Response, ServiceError> {
    let body = svc.results(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

async fn media(State(svc): State<Arc<Service>>, UrlPath(name): UrlPath<String>) -> Result<Response, ServiceError> {
    let (bytes, ct) = svc.media(&name)?;
    Ok(([(header::CONTENT_TYPE, ct)], bytes).into_response())
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/studies", post(create_study))
        .route("/studies/{id}/next", get(next_task))
        .route("/studies/{id}/ratings", post(submit))
        .route("/studies/{id}/results", get(results))
        .route("/media/{name}", get(media))
        .with_state(svc)
}

/// Serves until `shutdown` resolves.
pub async fn serve(listener: tokio::net::TcpListener, svc: Arc<Service>, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> io::Result<()> {
    axum::serve(listener, router(svc)).with_graceful_shutdown(shutdown).await
}
