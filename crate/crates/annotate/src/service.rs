use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use floodvqa_core::eval::{
    aggregate_plausibility, fleiss_kappa, report, AccuracyReport, Aggregation, EvalError,
    Rating, RatingMatrix, Rubric,
};
use floodvqa_core::pipeline::RunLog;
use floodvqa_core::DatasetManifest;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::campaign::{AnnotationTask, Campaign, SessionState};
use crate::store::{RatingStore, StoreError, StoredRating};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("ratings log {path}: rating {index}: {message}")]
    Replay {
        path: PathBuf,
        index: usize,
        message: String,
    },
}

/// An HTTP-facing error: status plus `{"error": message}` body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextTask {
    Task(AnnotationTask),
    Complete { status: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub rated: usize,
    pub total: usize,
    /// `rated / total`, or 1 for an empty campaign.
    pub fraction: f64,
}

/// A metric that may not be computable yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field<T> {
    pub available: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl<T> Field<T> {
    fn from_result<E: std::fmt::Display>(r: Result<T, E>) -> Self {
        match r {
            Ok(v) => Self {
                available: true,
                value: Some(v),
                reason: None,
            },
            Err(e) => Self {
                available: false,
                value: None,
                reason: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub progress: Progress,
    pub n_raters: usize,
    /// Items rated by every rater.
    pub n_complete_items: usize,
    pub aggregation: Aggregation,
    pub kappa: Field<f64>,
    pub accuracy: Field<AccuracyReport>,
}

/// Majority needs an odd panel; even panels fall back to per-rating.
pub fn default_aggregation(n_raters: usize) -> Aggregation {
    if n_raters % 2 == 1 {
        Aggregation::Majority
    } else {
        Aggregation::PerRating
    }
}

/// Metrics over a ratings snapshot. Only items every rater has rated
/// contribute.
pub fn compute_metrics(
    ratings: &[Rating],
    raters: &[String],
    n_tasks: usize,
    run_log: &RunLog,
    manifest: &DatasetManifest,
) -> Metrics {
    let aggregation = default_aggregation(raters.len());
    let matrix = if raters.len() == 1 {
        Err(EvalError::Shape { what: "2 raters", got: 1 })
    } else {
        RatingMatrix::from_ratings(ratings, Some(raters))
    };
    let n_complete_items = match (&matrix, raters.len()) {
        (Ok(m), _) => m.n_items(),
        (Err(_), 1) => ratings.len(),
        _ => 0,
    };
    let observations = match (&matrix, raters.len()) {
        (_, 1) if !ratings.is_empty() => Ok(ratings
            .iter()
            .map(|r| (r.question_id.clone(), r.score))
            .collect()),
        (Err(e), _) => Err(e.clone()),
        (Ok(m), _) => aggregate_plausibility(m, aggregation),
    };
    let kappa = matrix.as_ref().map_err(Clone::clone).and_then(fleiss_kappa);
    let accuracy = observations.and_then(|obs: Vec<(String, u8)>| report(run_log, &obs, manifest));
    Metrics {
        progress: Progress {
            rated: ratings.len(),
            total: n_tasks,
            fraction: if n_tasks == 0 {
                1.0
            } else {
                ratings.len() as f64 / n_tasks as f64
            },
        },
        n_raters: raters.len(),
        n_complete_items,
        aggregation,
        kappa: Field::from_result(kappa),
        accuracy: Field::from_result(accuracy),
    }
}

struct Inner {
    store: RatingStore,
    ratings: Vec<StoredRating>,
    /// `rated[rater][question]`.
    rated: Vec<Vec<bool>>,
}

pub struct ServiceState {
    campaign: Campaign,
    run_log: RunLog,
    manifest: DatasetManifest,
    image_root: PathBuf,
    rubric: Rubric,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for ServiceState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceState")
            .field("raters", &self.campaign.raters())
            .field("image_root", &self.image_root)
            .finish_non_exhaustive()
    }
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, msg)
}

impl ServiceState {
    /// Opens the ratings log and replays it against the campaign.
    pub fn open(
        campaign: Campaign,
        run_log: RunLog,
        manifest: DatasetManifest,
        image_root: PathBuf,
        ratings_log: &Path,
    ) -> Result<Self, ServiceError> {
        let (store, ratings) = RatingStore::open(ratings_log)?;
        let mut rated = vec![vec![false; campaign.n_questions()]; campaign.raters().len()];
        for (index, r) in ratings.iter().enumerate() {
            let replay = |message: String| ServiceError::Replay {
                path: ratings_log.to_path_buf(),
                index: index + 1,
                message,
            };
            let (qi, ri) = campaign
                .locate(&r.task_id)
                .ok_or_else(|| replay(format!("unknown task `{}`", r.task_id)))?;
            if campaign.raters()[ri] != r.evaluator_id || campaign.question_id(qi) != r.question_id
            {
                return Err(replay(format!("task `{}` does not match its rater or question", r.task_id)));
            }
            if r.score > 1 {
                return Err(replay(format!("score {}", r.score)));
            }
            if std::mem::replace(&mut rated[ri][qi], true) {
                return Err(replay(format!("task `{}` rated twice", r.task_id)));
            }
        }
        Ok(Self {
            campaign,
            run_log,
            manifest,
            image_root,
            rubric: Rubric::default(),
            inner: Mutex::new(Inner {
                store,
                ratings,
                rated,
            }),
        })
    }

    pub fn ratings_log(&self) -> PathBuf {
        self.inner.lock().unwrap().store.path().to_path_buf()
    }

    pub fn rubric(&self) -> &Rubric {
        &self.rubric
    }

    fn rater(&self, evaluator_id: &str) -> Result<usize, ApiError> {
        self.campaign
            .rater_index(evaluator_id)
            .ok_or_else(|| not_found(format!("unknown evaluator `{evaluator_id}`")))
    }

    /// First unrated task in the evaluator's queue.
    pub fn next_task(&self, evaluator_id: &str) -> Result<NextTask, ApiError> {
        let ri = self.rater(evaluator_id)?;
        let inner = self.inner.lock().unwrap();
        let next = inner.rated[ri].iter().position(|done| !done);
        Ok(match next.and_then(|qi| self.campaign.task(qi, ri)) {
            Some(task) => NextTask::Task(task),
            None => NextTask::Complete {
                status: "complete".into(),
            },
        })
    }

    pub fn session(&self, evaluator_id: &str) -> Result<SessionState, ApiError> {
        let ri = self.rater(evaluator_id)?;
        let completed = self.inner.lock().unwrap().rated[ri].iter().filter(|d| **d).count();
        let assigned = self.campaign.queue(ri);
        Ok(SessionState {
            evaluator_id: evaluator_id.to_string(),
            remaining: assigned.len() - completed,
            completed,
            assigned,
        })
    }

    /// Validates, persists and then records one rating. Returns only after
    /// the log line is on disk.
    pub fn submit(&self, evaluator_id: &str, task_id: &str, score: &Value) -> Result<(), ApiError> {
        let score = match score.as_u64() {
            Some(s @ (0 | 1)) => s as u8,
            _ => {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("score must be 0 or 1, got {score}"),
                ))
            }
        };
        let ri = self.rater(evaluator_id)?;
        let (qi, task_rater) = self
            .campaign
            .locate(task_id)
            .ok_or_else(|| not_found(format!("unknown task `{task_id}`")))?;
        if task_rater != ri {
            return Err(not_found(format!(
                "task `{task_id}` is not assigned to `{evaluator_id}`"
            )));
        }

        let mut inner = self.inner.lock().unwrap();
        if inner.rated[ri][qi] {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("task `{task_id}` is already rated"),
            ));
        }
        let record = StoredRating {
            evaluator_id: evaluator_id.to_string(),
            question_id: self.campaign.question_id(qi).to_string(),
            score,
            task_id: task_id.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        inner.store.append(&record).map_err(|e| {
            tracing::error!(error = %e, "cannot persist rating");
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "rating was not saved")
        })?;
        inner.rated[ri][qi] = true;
        inner.ratings.push(record);
        Ok(())
    }

    /// Ratings accepted so far, in log order.
    pub fn ratings(&self) -> Vec<Rating> {
        self.inner
            .lock()
            .unwrap()
            .ratings
            .iter()
            .map(|r| Rating {
                evaluator_id: r.evaluator_id.clone(),
                question_id: r.question_id.clone(),
                score: r.score,
                rubric_note: None,
            })
            .collect()
    }

    pub fn metrics(&self) -> Metrics {
        let ratings = self.ratings();
        compute_metrics(
            &ratings,
            self.campaign.raters(),
            self.campaign.n_tasks(),
            &self.run_log,
            &self.manifest,
        )
    }

    pub fn image(&self, image_id: &str) -> Result<(&'static str, Vec<u8>), ApiError> {
        let record = self
            .manifest
            .image(image_id)
            .ok_or_else(|| not_found(format!("unknown image `{image_id}`")))?;
        let path = self.image_root.join(&record.path);
        let bytes = std::fs::read(&path)
            .map_err(|e| not_found(format!("image `{image_id}` unavailable: {e}")))?;
        Ok((content_type(&record.path), bytes))
    }
}

pub fn content_type(path: &str) -> &'static str {
    let ext = Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

type Shared = Arc<ServiceState>;

fn evaluator_param(q: &HashMap<String, String>) -> Result<&str, ApiError> {
    q.get("evaluator")
        .map(String::as_str)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing `evaluator` query parameter"))
}

async fn get_rubric(State(s): State<Shared>) -> Json<Rubric> {
    Json(s.rubric().clone())
}

async fn get_next(
    State(s): State<Shared>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<NextTask>, ApiError> {
    Ok(Json(s.next_task(evaluator_param(&q)?)?))
}

async fn get_session(
    State(s): State<Shared>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<SessionState>, ApiError> {
    Ok(Json(s.session(evaluator_param(&q)?)?))
}

#[derive(Debug, Deserialize)]
struct SubmitBody {
    evaluator_id: String,
    task_id: String,
    score: Value,
}

async fn post_rating(
    State(s): State<Shared>,
    body: Result<Json<SubmitBody>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(body) =
        body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    tokio::task::spawn_blocking(move || s.submit(&body.evaluator_id, &body.task_id, &body.score))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({"ok": true})))
}

async fn get_metrics(State(s): State<Shared>) -> Json<Metrics> {
    Json(s.metrics())
}

async fn get_image(
    State(s): State<Shared>,
    UrlPath(image_id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let (ctype, bytes) = s.image(&image_id)?;
    Ok(([(header::CONTENT_TYPE, ctype)], bytes).into_response())
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/rubric", get(get_rubric))
        .route("/api/tasks/next", get(get_next))
        .route("/api/session", get(get_session))
        .route("/api/ratings", post(post_rating))
        .route("/api/metrics", get(get_metrics))
        .route("/images/{image_id}", get(get_image))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
