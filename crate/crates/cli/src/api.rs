//! JSON-over-HTTP API. Every handler locks the shared engine on a blocking
//! thread, so store writes are serialized while requests are accepted
//! concurrently.

use std::sync::{Arc, Mutex};

use abacus_core::budget::{BudgetSpec, ComputedBudget};
use abacus_core::enforcement::{BreachFilter, BreachRecord, EnforcementAction};
use abacus_core::gate::{DeploymentPlan, GateDecision};
use abacus_core::ingest::IngestReport;
use abacus_core::model::{BillingRecord, BudgetPeriod};
use abacus_core::money::Money;
use abacus_core::service::{whatif, Abacus, AccountView, BudgetRecord, ChargebackRow, Clock, ServiceError};
use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Shared handle to one engine plus the clock and credentials it is served
/// with.
#[derive(Clone)]
pub struct AppState {
    engine: Arc<Mutex<Abacus>>,
    clock: Arc<dyn Clock>,
    token: Option<Arc<str>>,
}

impl AppState {
    /// The bearer token comes from the engine's config; `None` disables auth.
    pub fn new(engine: Abacus, clock: Arc<dyn Clock>) -> Self {
        let token = engine.config().token.as_deref().map(Arc::from);
        AppState {
            engine: Arc::new(Mutex::new(engine)),
            clock,
            token,
        }
    }

    pub fn engine(&self) -> &Arc<Mutex<Abacus>> {
        &self.engine
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    /// Runs `f` against the engine off the async runtime.
    pub async fn run<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&mut Abacus, DateTime<Utc>) -> Result<T, ApiError> + Send + 'static,
    {
        let engine = self.engine.clone();
        let now = self.now();
        tokio::task::spawn_blocking(move || {
            let mut guard = engine
                .lock()
                .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "engine lock poisoned"))?;
            f(&mut guard, now)
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl std::fmt::Display) -> Self {
        ApiError {
            status,
            body: json!({ "error": message.to_string() }),
        }
    }

    fn bad_request(message: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl From<ServiceError> for ApiError {
    fn from(err: ServiceError) -> Self {
        let status = match &err {
            ServiceError::InvalidInput(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            ServiceError::Backpressure => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Store(_) | ServiceError::Poisoned => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut e = ApiError::new(status, &err);
        if let ServiceError::Conflict { current, .. } = err {
            e.body["current_version"] = json!(current);
        }
        e
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        ApiError::bad_request(rejection.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(rejection: QueryRejection) -> Self {
        ApiError::bad_request(rejection.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut response = (self.status, Json(self.body)).into_response();
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            response
                .headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
        }
        response
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/budgets", get(list_budgets))
        .route("/budgets/{id}", get(get_budget).put(put_budget))
        .route("/spend/ingest", post(ingest))
        .route("/accounts", get(list_accounts))
        .route("/accounts/{id}", get(get_account))
        .route("/accounts/{id}/reinstate", post(reinstate))
        .route("/breaches", get(list_breaches))
        .route("/alerts", get(list_alerts))
        .route("/plans/check", post(check_plan))
        .route("/reports/chargeback", get(chargeback))
        .route("/whatif", get(whatif_handler))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

fn tokens_match(given: &[u8], expected: &[u8]) -> bool {
    given.len() == expected.len() && given.iter().zip(expected).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if !given.is_some_and(|g| tokens_match(g.as_bytes(), token.as_bytes())) {
            let mut response =
                ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
            response
                .headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
            return response;
        }
    }
    next.run(request).await
}

async fn list_budgets(State(state): State<AppState>) -> ApiResult<Vec<BudgetRecord>> {
    state.run(|e, _| Ok(e.budgets().cloned().collect())).await.map(Json)
}

async fn get_budget(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let record: BudgetRecord = state
        .run(move |e, _| {
            e.budget(&id)
                .cloned()
                .ok_or_else(|| ServiceError::NotFound(format!("budget {id}")).into())
        })
        .await?;
    Ok(([(header::ETAG, etag(record.version))], Json(&record)).into_response())
}

/// `If-Match: "3"` (quotes and a weak prefix are optional).
fn expected_version(headers: &HeaderMap) -> Result<Option<u64>, ApiError> {
    let Some(value) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    let text = value.to_str().map_err(ApiError::bad_request)?;
    text.trim()
        .trim_start_matches("W/")
        .trim_matches('"')
        .parse()
        .map(Some)
        .map_err(|_| ApiError::bad_request(format!("If-Match must be a budget version, got {text:?}")))
}

fn etag(version: u64) -> HeaderValue {
    HeaderValue::from_str(&format!("\"{version}\"")).expect("digits are a valid header")
}

async fn put_budget(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<BudgetSpec>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(spec) = body?;
    let expected = expected_version(&headers)?;
    let record = state
        .run(move |e, now| Ok(e.put_budget(&id, spec, expected, now)?))
        .await?;
    let status = if record.version == 1 {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    };
    let mut response = (status, Json(&record)).into_response();
    response.headers_mut().insert(header::ETAG, etag(record.version));
    Ok(response)
}

async fn ingest(
    State(state): State<AppState>,
    body: Result<Json<Vec<BillingRecord>>, JsonRejection>,
) -> ApiResult<IngestReport> {
    let Json(records) = body?;
    state
        .run(move |e, _| Ok(e.ingest(records.into_iter().map(Ok))?))
        .await
        .map(Json)
}

async fn list_accounts(State(state): State<AppState>) -> ApiResult<Vec<AccountView>> {
    state.run(|e, now| Ok(e.accounts(now))).await.map(Json)
}

async fn get_account(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<AccountView> {
    state
        .run(move |e, now| {
            e.account(&id, now)
                .ok_or_else(|| ServiceError::NotFound(format!("account {id}")).into())
        })
        .await
        .map(Json)
}

#[derive(Debug, Default, Deserialize)]
struct ReinstateBody {
    #[serde(default)]
    reason: String,
}

#[derive(Debug, Serialize)]
struct ReinstateResponse {
    record: BreachRecord,
    account: Option<AccountView>,
}

async fn reinstate(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<ReinstateResponse> {
    let body: ReinstateBody = if body.iter().all(u8::is_ascii_whitespace) {
        ReinstateBody::default()
    } else {
        serde_json::from_slice(&body).map_err(ApiError::bad_request)?
    };
    state
        .run(move |e, now| {
            let record = e.reinstate(&id, &body.reason, now)?;
            Ok(ReinstateResponse {
                record,
                account: e.account(&id, now),
            })
        })
        .await
        .map(Json)
}

#[derive(Debug, Default, Deserialize)]
pub struct BreachQuery {
    pub account: Option<String>,
    pub period: Option<String>,
    pub action: Option<String>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

pub const MAX_PAGE: usize = 1000;

impl BreachQuery {
    pub fn filter(&self) -> Result<BreachFilter, ServiceError> {
        let period = self.period.as_deref().map(parse_period).transpose()?;
        let action = self
            .action
            .as_deref()
            .map(|a| {
                serde_json::from_value::<EnforcementAction>(json!(a))
                    .map_err(|_| ServiceError::InvalidInput(format!("unknown action {a:?}")))
            })
            .transpose()?;
        Ok(BreachFilter {
            account: self.account.clone().filter(|a| !a.is_empty()),
            period,
            action,
        })
    }

    pub fn page(&self) -> (usize, usize) {
        (self.offset.unwrap_or(0), self.limit.unwrap_or(MAX_PAGE).min(MAX_PAGE))
    }
}

pub fn parse_period(text: &str) -> Result<BudgetPeriod, ServiceError> {
    text.parse()
        .map_err(|e: abacus_core::model::ModelError| ServiceError::InvalidInput(e.to_string()))
}

async fn list_breaches(
    State(state): State<AppState>,
    q: Result<Query<BreachQuery>, QueryRejection>,
) -> ApiResult<Vec<BreachRecord>> {
    let Query(q) = q?;
    let filter = q.filter()?;
    let (offset, limit) = q.page();
    state
        .run(move |e, _| Ok(e.query_breaches(&filter, offset, limit)))
        .await
        .map(Json)
}

#[derive(Debug, Deserialize)]
struct AlertQuery {
    cursor: Option<u64>,
}

async fn list_alerts(
    State(state): State<AppState>,
    q: Result<Query<AlertQuery>, QueryRejection>,
) -> ApiResult<serde_json::Value> {
    let Query(q) = q?;
    let cursor = q.cursor.unwrap_or(0);
    state
        .run(move |e, _| {
            let (alerts, next) = e.poll_alerts(cursor);
            Ok(json!({ "alerts": alerts, "next_cursor": next }))
        })
        .await
        .map(Json)
}

async fn check_plan(
    State(state): State<AppState>,
    body: Result<Json<DeploymentPlan>, JsonRejection>,
) -> ApiResult<GateDecision> {
    let Json(plan) = body?;
    state.run(move |e, now| Ok(e.check_plan(&plan, now)?)).await.map(Json)
}

#[derive(Debug, Serialize)]
pub struct ChargebackReport {
    pub period: String,
    pub total: Money,
    pub rows: Vec<ChargebackRow>,
}

impl ChargebackReport {
    pub fn build(engine: &Abacus, period: &BudgetPeriod) -> Result<Self, ServiceError> {
        let rows = engine.chargeback(period)?;
        let total = abacus_core::money::checked_sum(rows.iter().map(|r| r.total))
            .map_err(|e| ServiceError::InvalidInput(e.to_string()))?;
        Ok(ChargebackReport {
            period: period.label(),
            total,
            rows,
        })
    }
}

#[derive(Debug, Deserialize)]
struct PeriodQuery {
    period: Option<String>,
}

async fn chargeback(
    State(state): State<AppState>,
    q: Result<Query<PeriodQuery>, QueryRejection>,
) -> ApiResult<ChargebackReport> {
    let Query(q) = q?;
    let period = q.period.as_deref().map(parse_period).transpose()?;
    state
        .run(move |e, now| {
            let period = period.unwrap_or_else(|| BudgetPeriod::containing(e.config().granularity, now));
            Ok(ChargebackReport::build(e, &period)?)
        })
        .await
        .map(Json)
}

/// Query form of the budget formula; `hc` is a comma-separated list of
/// historical amounts and an absent `v` means "compute from history".
#[derive(Debug, Deserialize)]
pub struct WhatIfQuery {
    pub hc: String,
    pub g: String,
    pub c: String,
    pub v: Option<String>,
    pub ab: String,
}

impl WhatIfQuery {
    pub fn evaluate(&self, now: DateTime<Utc>) -> Result<ComputedBudget, ServiceError> {
        let bad = |what: &str, e: &dyn std::fmt::Display| ServiceError::InvalidInput(format!("{what}: {e}"));
        let hc = self
            .hc
            .split(',')
            .map(|s| s.trim().parse::<Money>().map_err(|e| bad("hc", &e)))
            .collect::<Result<Vec<_>, _>>()?;
        let decimal = |what: &str, s: &str| s.trim().parse::<Decimal>().map_err(|e| bad(what, &e));
        let g = decimal("g", &self.g)?;
        let c = decimal("c", &self.c)?;
        let v = self
            .v
            .as_deref()
            .filter(|s| !s.trim().is_empty())
            .map(|s| decimal("v", s))
            .transpose()?;
        let ab = self.ab.trim().parse::<Money>().map_err(|e| bad("ab", &e))?;
        whatif(hc, g, c, v, ab, now)
    }
}

async fn whatif_handler(
    State(state): State<AppState>,
    q: Result<Query<WhatIfQuery>, QueryRejection>,
) -> ApiResult<ComputedBudget> {
    let Query(q) = q?;
    Ok(Json(q.evaluate(state.now())?))
}
