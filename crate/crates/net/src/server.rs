//! axum routers for the fleet controller and the research portal. Both share
//! one controller behind a mutex; handlers never hold the lock across an await.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::DefaultBodyLimit;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use scooterlab::controller::enrich::providers_from_name;
use scooterlab::controller::{Acknowledgments, FcError, FileJournal, FleetController, TripKey};
use scooterlab::model::{
    Loan, LoanId, ProjectId, Role, Scooter, ScooterId, ScooterStatus, Timestamp, TripChunk, TripId, UserId,
};
use scooterlab::policy::PolicyDraft;
use scooterlab::protocol::{ApiError, CensusRequest, FinalizeRequest, Heartbeat};
use scooterlab::ramp::export::{geojson, trip_geojson};
use scooterlab::ramp::query::{matching_trips, split_list};
use scooterlab::ramp::{self, Action, Caller, ExportFormat, NewProject, NewUser, Ramp, RampError, TripQuery};

/// Largest accepted request body; bulk imports can be big.
pub const BODY_LIMIT: usize = 1 << 30;

/// Request header carrying the caller's clock in epoch ms. Simulations use
/// it to drive the controller on virtual time; without it the wall clock is used.
pub const CLOCK_HEADER: &str = "x-scooterlab-clock";

pub struct Shared {
    fc: Mutex<FleetController>,
    ramp: Mutex<Ramp>,
}

impl Shared {
    pub fn new(fc: FleetController) -> Arc<Self> {
        Arc::new(Self {
            fc: Mutex::new(fc),
            ramp: Mutex::new(Ramp::new()),
        })
    }

    pub fn fc(&self) -> MutexGuard<'_, FleetController> {
        // a panicking handler leaves state consistent: every mutation is
        // journaled before it is applied
        self.fc.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn ramp(&self) -> MutexGuard<'_, Ramp> {
        self.ramp.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn flush(&self) -> Result<(), FcError> {
        self.fc().flush()
    }
}

// ---- errors ----

#[derive(Debug)]
pub struct HttpError(pub StatusCode, pub ApiError);

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "AuthFailure" | "BadCredential" | "ExpiredToken" | "Unauthenticated" => StatusCode::UNAUTHORIZED,
        "Forbidden" => StatusCode::FORBIDDEN,
        "UnknownScooter" | "UnknownLoan" | "UnknownTrip" | "UnknownProject" | "NotFound" => StatusCode::NOT_FOUND,
        "DuplicateName" | "FleetConflict" | "ScooterUnavailable" | "LoanNotActive" | "FinalizeConflict"
        | "InvalidProjectState" => StatusCode::CONFLICT,
        "InvalidPolicy" => StatusCode::UNPROCESSABLE_ENTITY,
        "StorageError" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        HttpError(status_for(&e.code), e)
    }
}

impl From<FcError> for HttpError {
    fn from(e: FcError) -> Self {
        e.to_api().into()
    }
}

impl From<RampError> for HttpError {
    fn from(e: RampError) -> Self {
        e.to_api().into()
    }
}

impl From<JsonRejection> for HttpError {
    fn from(e: JsonRejection) -> Self {
        invalid(e.body_text())
    }
}

impl From<QueryRejection> for HttpError {
    fn from(e: QueryRejection) -> Self {
        invalid(e.body_text())
    }
}

fn invalid(msg: impl Into<String>) -> HttpError {
    ApiError::new("InvalidRequest", msg).into()
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type Reply<T> = Result<Json<T>, HttpError>;

// ---- request context ----

fn now(headers: &HeaderMap) -> Result<Timestamp, HttpError> {
    match headers.get(CLOCK_HEADER) {
        None => Ok(Timestamp::now()),
        Some(v) => v
            .to_str()
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .map(Timestamp)
            .ok_or_else(|| invalid(format!("bad {CLOCK_HEADER} header"))),
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn caller(state: &Shared, headers: &HeaderMap) -> Result<Caller, HttpError> {
    let token = bearer(headers).ok_or(RampError::Unauthenticated)?;
    Ok(state.ramp().caller(token, now(headers)?)?)
}

fn require(state: &Shared, headers: &HeaderMap, action: Action) -> Result<Caller, HttpError> {
    let c = caller(state, headers)?;
    c.require(action)?;
    Ok(c)
}

fn scooter_token(headers: &HeaderMap) -> Result<&str, HttpError> {
    bearer(headers).ok_or_else(|| FcError::Auth.into())
}

async fn health() -> &'static str {
    "ok"
}

// ---- fleet controller: node surface ----

async fn put_chunk(
    State(state): State<Arc<Shared>>,
    Path((scooter, trip, seq)): Path<(String, String, u32)>,
    headers: HeaderMap,
    body: Result<Json<TripChunk>, JsonRejection>,
) -> Response {
    let run = || -> Result<_, HttpError> {
        let Json(chunk) = body.map_err(|e| HttpError::from(FcError::MalformedChunk(e.body_text())))?;
        let key = &chunk.chunk_key;
        if key.scooter_id.as_str() != scooter || key.trip_id.as_str() != trip || key.seq != seq {
            return Err(FcError::MalformedChunk(format!("body key {key} does not match the path")).into());
        }
        let token = scooter_token(&headers)?;
        let ack = state.fc().receive_chunk(token, chunk, now(&headers)?)?;
        Ok(Json(ack))
    };
    run().into_response()
}

async fn finalize(
    State(state): State<Arc<Shared>>,
    Path((scooter, trip)): Path<(String, String)>,
    headers: HeaderMap,
    body: Result<Json<FinalizeRequest>, JsonRejection>,
) -> Response {
    let run = || -> Result<_, HttpError> {
        let Json(req) = body?;
        let token = scooter_token(&headers)?;
        let outcome = state.fc().finalize_trip(
            token,
            &ScooterId::new(scooter),
            &TripId::new(trip),
            req.chunk_count,
            now(&headers)?,
        )?;
        Ok(Json(outcome))
    };
    run().into_response()
}

#[derive(Debug, Deserialize)]
struct ConfigPoll {
    #[serde(default)]
    current: u64,
    battery_pct: Option<f64>,
    odometer_m: Option<f64>,
}

async fn poll_config(
    State(state): State<Arc<Shared>>,
    Path(scooter): Path<String>,
    headers: HeaderMap,
    q: Result<Query<ConfigPoll>, QueryRejection>,
) -> Response {
    let run = || -> Result<_, HttpError> {
        let Query(q) = q?;
        let heartbeat = match (q.battery_pct, q.odometer_m) {
            (Some(battery_pct), Some(odometer_m)) => Some(Heartbeat { battery_pct, odometer_m }),
            (None, None) => None,
            _ => return Err(invalid("battery_pct and odometer_m come together")),
        };
        let token = scooter_token(&headers)?;
        let got = state
            .fc()
            .get_config(token, &ScooterId::new(scooter), q.current, heartbeat, now(&headers)?)?;
        Ok(match got {
            Some(config) => Json(config).into_response(),
            None => StatusCode::NO_CONTENT.into_response(),
        })
    };
    run().into_response()
}

/// Battery for one scooter: open to its own token or any portal session.
async fn scooter_battery(State(state): State<Arc<Shared>>, Path(scooter): Path<String>, headers: HeaderMap) -> Response {
    let run = || -> Result<_, HttpError> {
        let id = ScooterId::new(scooter);
        let fc_token = bearer(&headers).map(str::to_owned);
        let own = fc_token.as_deref() == Some(state.fc().scooter_token(&id).as_str());
        if !own {
            require(&state, &headers, Action::ViewBattery)?;
        }
        Ok(Json(state.fc().battery_level(&id)?))
    };
    run().into_response()
}

// ---- fleet controller: admin surface ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewScooter {
    pub scooter_id: ScooterId,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "full")]
    pub battery_pct: f64,
}

fn default_model() -> String {
    "Segway G30 Max".into()
}

fn full() -> f64 {
    100.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Registration {
    pub scooter: Scooter,
    pub token: String,
}

async fn register(
    State(state): State<Arc<Shared>>,
    headers: HeaderMap,
    body: Result<Json<NewScooter>, JsonRejection>,
) -> Reply<Registration> {
    require(&state, &headers, Action::ManageFleet)?;
    let Json(new) = body?;
    let scooter = Scooter::new(new.scooter_id, &new.model, new.battery_pct).map_err(|e| invalid(e.to_string()))?;
    let (scooter, token) = state.fc().register_scooter(scooter)?;
    Ok(Json(Registration { scooter, token }))
}

async fn list_scooters(State(state): State<Arc<Shared>>, headers: HeaderMap) -> Reply<Vec<Scooter>> {
    require(&state, &headers, Action::ManageFleet)?;
    Ok(Json(state.fc().scooters().cloned().collect()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InspectRequest {
    pub pass: bool,
}

async fn inspect(
    State(state): State<Arc<Shared>>,
    Path(scooter): Path<String>,
    headers: HeaderMap,
    body: Result<Json<InspectRequest>, JsonRejection>,
) -> Reply<ScooterStatus> {
    require(&state, &headers, Action::ManageFleet)?;
    let Json(req) = body?;
    Ok(Json(state.fc().inspect(&ScooterId::new(scooter), req.pass)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckoutRequest {
    pub scooter_id: ScooterId,
    /// Defaults to the caller.
    #[serde(default)]
    pub rider_id: Option<UserId>,
    #[serde(default)]
    pub acknowledgments: Acknowledgments,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenewRequest {
    #[serde(default)]
    pub acknowledgments: Acknowledgments,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnRequest {
    pub inspection_pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Returned {
    pub loan: Loan,
    pub status: ScooterStatus,
}

/// Riders act on their own loans; admins on anyone's.
fn loan_actor(c: &Caller, rider: &UserId) -> Result<(), HttpError> {
    if c.role == Role::Admin || c.user_id == *rider {
        Ok(())
    } else {
        Err(RampError::Forbidden {
            role: c.role,
            action: format!("act on loans of {rider}"),
        }
        .into())
    }
}

async fn checkout(
    State(state): State<Arc<Shared>>,
    headers: HeaderMap,
    body: Result<Json<CheckoutRequest>, JsonRejection>,
) -> Reply<Loan> {
    let c = caller(&state, &headers)?;
    let Json(req) = body?;
    let rider = req.rider_id.unwrap_or_else(|| c.user_id.clone());
    loan_actor(&c, &rider)?;
    let mut fc = state.fc();
    if fc.user(&rider).is_none() {
        return Err(ApiError::new("NotFound", format!("unknown rider {rider}")).into());
    }
    Ok(Json(fc.checkout(&rider, &req.scooter_id, req.acknowledgments, now(&headers)?)?))
}

fn loan_of(fc: &FleetController, id: &LoanId) -> Result<Loan, HttpError> {
    fc.loan(id).cloned().ok_or_else(|| FcError::UnknownLoan(id.clone()).into())
}

async fn renew(
    State(state): State<Arc<Shared>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<RenewRequest>, JsonRejection>,
) -> Reply<Loan> {
    let c = caller(&state, &headers)?;
    let Json(req) = body?;
    let id = LoanId::new(id);
    let mut fc = state.fc();
    loan_actor(&c, &loan_of(&fc, &id)?.rider_id)?;
    Ok(Json(fc.renew(&id, req.acknowledgments, now(&headers)?)?))
}

async fn return_loan(
    State(state): State<Arc<Shared>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<ReturnRequest>, JsonRejection>,
) -> Reply<Returned> {
    require(&state, &headers, Action::ManageFleet)?;
    let Json(req) = body?;
    let id = LoanId::new(id);
    let mut fc = state.fc();
    let status = fc.return_and_inspect(&id, req.inspection_pass, now(&headers)?)?;
    Ok(Json(Returned {
        loan: loan_of(&fc, &id)?,
        status,
    }))
}

async fn list_loans(State(state): State<Arc<Shared>>, headers: HeaderMap) -> Reply<Vec<Loan>> {
    let c = caller(&state, &headers)?;
    let fc = state.fc();
    Ok(Json(
        fc.loans()
            .filter(|l| c.role == Role::Admin || l.rider_id == c.user_id)
            .cloned()
            .collect(),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssueConfig {
    pub policy: PolicyDraft,
    #[serde(default)]
    pub project_id: Option<ProjectId>,
}

async fn issue_config(
    State(state): State<Arc<Shared>>,
    Path(scooter): Path<String>,
    headers: HeaderMap,
    body: Result<Json<IssueConfig>, JsonRejection>,
) -> Response {
    let run = || -> Result<_, HttpError> {
        require(&state, &headers, Action::ManageFleet)?;
        let Json(req) = body?;
        let config = state
            .fc()
            .issue_config_draft(&ScooterId::new(scooter), &req.policy, req.project_id, now(&headers)?)?;
        Ok(Json(config))
    };
    run().into_response()
}

async fn config_history(State(state): State<Arc<Shared>>, Path(scooter): Path<String>, headers: HeaderMap) -> Response {
    let run = || -> Result<_, HttpError> {
        require(&state, &headers, Action::ManageFleet)?;
        let id = ScooterId::new(scooter);
        let fc = state.fc();
        if fc.scooter(&id).is_none() {
            return Err(FcError::UnknownScooter(id).into());
        }
        Ok(Json(fc.config_history(&id).to_vec()))
    };
    run().into_response()
}

async fn census(
    State(state): State<Arc<Shared>>,
    headers: HeaderMap,
    body: Result<Json<CensusRequest>, JsonRejection>,
) -> Response {
    let run = || -> Result<_, HttpError> {
        require(&state, &headers, Action::ManageFleet)?;
        let Json(req) = body?;
        let keys: Vec<TripKey> = req.trips;
        Ok(Json(state.fc().census(&keys)))
    };
    run().into_response()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestReport {
    #[serde(flatten)]
    pub stats: scooterlab::controller::IngestStats,
    pub trips: usize,
    pub quarantined_chunks: usize,
    pub quarantined_trips: usize,
}

async fn ingest(State(state): State<Arc<Shared>>, headers: HeaderMap) -> Reply<IngestReport> {
    require(&state, &headers, Action::ManageFleet)?;
    let fc = state.fc();
    Ok(Json(IngestReport {
        stats: fc.stats(),
        trips: fc.trip_count(),
        quarantined_chunks: fc.quarantine().len(),
        quarantined_trips: fc.quarantined_trips().len(),
    }))
}

async fn enrichment_sweep(State(state): State<Arc<Shared>>, headers: HeaderMap) -> Response {
    let run = || -> Result<_, HttpError> {
        require(&state, &headers, Action::ManageFleet)?;
        let n = state.fc().enrichment_sweep(now(&headers)?)?;
        Ok(Json(serde_json::json!({ "trips_enriched": n })))
    };
    run().into_response()
}

pub fn fc_router(state: Arc<Shared>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/chunks/{scooter}/{trip}/{seq}", put(put_chunk))
        .route("/v1/trips/{scooter}/{trip}/finalize", post(finalize))
        .route("/v1/config/{scooter}", get(poll_config))
        .route("/v1/scooters", post(register).get(list_scooters))
        .route("/v1/scooters/{id}/battery", get(scooter_battery))
        .route("/v1/scooters/{id}/inspect", post(inspect))
        .route("/v1/loans", post(checkout).get(list_loans))
        .route("/v1/loans/{id}/renew", post(renew))
        .route("/v1/loans/{id}/return", post(return_loan))
        .route("/v1/configs/{scooter}", post(issue_config).get(config_history))
        .route("/v1/census", post(census))
        .route("/v1/ingest", get(ingest))
        .route("/v1/enrichment/sweep", post(enrichment_sweep))
        .route("/v1/trips", get(trips))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

// ---- research portal ----

/// A user as returned by the API; the credential digest never leaves the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserView {
    pub user_id: UserId,
    pub role: Role,
    pub display_name: String,
}

async fn create_user(
    State(state): State<Arc<Shared>>,
    headers: HeaderMap,
    body: Result<Json<NewUser>, JsonRejection>,
) -> Reply<UserView> {
    let Json(new) = body?;
    let c = match bearer(&headers) {
        Some(_) => Some(caller(&state, &headers)?),
        None => None,
    };
    let mut fc = state.fc();
    let u = state.ramp().create_user(&mut fc, c.as_ref(), new)?;
    Ok(Json(UserView {
        user_id: u.user_id,
        role: u.role,
        display_name: u.display_name,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Login {
    pub name: String,
    pub credential: String,
}

async fn login(
    State(state): State<Arc<Shared>>,
    headers: HeaderMap,
    body: Result<Json<Login>, JsonRejection>,
) -> Reply<ramp::Session> {
    let Json(l) = body?;
    let fc = state.fc();
    Ok(Json(state.ramp().authenticate(&fc, &l.name, &l.credential, now(&headers)?)?))
}

async fn renew_session(State(state): State<Arc<Shared>>, headers: HeaderMap) -> Reply<ramp::Session> {
    let token = bearer(&headers).ok_or(RampError::Unauthenticated)?;
    Ok(Json(state.ramp().renew_session(token, now(&headers)?)?))
}

async fn logout(State(state): State<Arc<Shared>>, headers: HeaderMap) -> StatusCode {
    if let Some(token) = bearer(&headers) {
        state.ramp().logout(token);
    }
    StatusCode::NO_CONTENT
}

async fn whoami(State(state): State<Arc<Shared>>, headers: HeaderMap) -> Reply<Caller> {
    Ok(Json(caller(&state, &headers)?))
}

async fn create_project(
    State(state): State<Arc<Shared>>,
    headers: HeaderMap,
    body: Result<Json<NewProject>, JsonRejection>,
) -> Reply<scooterlab::model::Project> {
    let c = caller(&state, &headers)?;
    let Json(new) = body?;
    Ok(Json(ramp::create_project(&mut state.fc(), &c, new)?))
}

async fn list_projects(State(state): State<Arc<Shared>>, headers: HeaderMap) -> Reply<Vec<scooterlab::model::Project>> {
    let c = caller(&state, &headers)?;
    Ok(Json(ramp::list_projects(&state.fc(), &c)?))
}

async fn get_project(
    State(state): State<Arc<Shared>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Reply<scooterlab::model::Project> {
    let c = caller(&state, &headers)?;
    let id = ProjectId::new(id);
    ramp::list_projects(&state.fc(), &c)?
        .into_iter()
        .find(|p| p.project_id == id)
        .map(Json)
        .ok_or_else(|| RampError::UnknownProject(id).into())
}

async fn activate(State(state): State<Arc<Shared>>, Path(id): Path<String>, headers: HeaderMap) -> Reply<ramp::Activation> {
    let c = caller(&state, &headers)?;
    let t = now(&headers)?;
    Ok(Json(ramp::activate_project(&mut state.fc(), &c, &ProjectId::new(id), t)?))
}

async fn complete(
    State(state): State<Arc<Shared>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Reply<scooterlab::model::Project> {
    let c = caller(&state, &headers)?;
    Ok(Json(ramp::complete_project(&mut state.fc(), &c, &ProjectId::new(id))?))
}

fn parse_query(raw: Option<&str>) -> Result<TripQuery, HttpError> {
    serde_urlencoded::from_str(raw.unwrap_or("")).map_err(|e| invalid(e.to_string()))
}

async fn trips(State(state): State<Arc<Shared>>, headers: HeaderMap, uri: axum::http::Uri) -> Reply<ramp::TripPage> {
    let c = caller(&state, &headers)?;
    let q = parse_query(uri.query())?;
    let filter = q.filter()?;
    Ok(Json(ramp::query_trips(&state.fc(), &c, &filter, q.cursor.as_deref(), q.limit)?))
}

async fn trips_geojson(
    State(state): State<Arc<Shared>>,
    headers: HeaderMap,
    uri: axum::http::Uri,
) -> Result<Response, HttpError> {
    let c = caller(&state, &headers)?;
    let q = parse_query(uri.query())?;
    let include_samples = q.include_samples.unwrap_or(false);
    let fc = state.fc();
    let body = match &q.ids {
        Some(ids) => {
            let ids: Vec<TripId> = split_list(ids).map(TripId::new).collect();
            trip_geojson(&fc, &c, &ids, include_samples)?
        }
        None => {
            c.require(Action::QueryTrips)?;
            geojson(matching_trips(&fc, &c, &q.filter()?)?, include_samples)
        }
    };
    Ok(([(header::CONTENT_TYPE, "application/geo+json")], Json(body)).into_response())
}

async fn stats(State(state): State<Arc<Shared>>, headers: HeaderMap, uri: axum::http::Uri) -> Reply<ramp::StatsReport> {
    let c = caller(&state, &headers)?;
    let q = parse_query(uri.query())?;
    let filter = q.filter()?;
    Ok(Json(ramp::stats(&state.fc(), &c, &filter, q.include_empty.unwrap_or(false))?))
}

async fn export(State(state): State<Arc<Shared>>, headers: HeaderMap, uri: axum::http::Uri) -> Result<Response, HttpError> {
    let c = caller(&state, &headers)?;
    let q = parse_query(uri.query())?;
    let format: ExportFormat = q.format.as_deref().unwrap_or("csv").parse()?;
    let filter = q.filter()?;
    let bytes = ramp::export(&state.fc(), &c, &filter, format)?;
    Ok(([(header::CONTENT_TYPE, format.content_type())], bytes).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Imported {
    pub imported: usize,
}

async fn import(State(state): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Reply<Imported> {
    let c = caller(&state, &headers)?;
    let imported = ramp::import_jsonl(&mut state.fc(), &c, &body)?;
    Ok(Json(Imported { imported }))
}

async fn battery(
    State(state): State<Arc<Shared>>,
    headers: HeaderMap,
) -> Reply<Vec<scooterlab::protocol::BatteryLevel>> {
    let c = caller(&state, &headers)?;
    Ok(Json(ramp::battery_levels(&state.fc(), &c)?))
}

pub fn ramp_router(state: Arc<Shared>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/v1/users", post(create_user))
        .route("/v1/sessions", post(login).delete(logout))
        .route("/v1/sessions/renew", post(renew_session))
        .route("/v1/whoami", get(whoami))
        .route("/v1/projects", post(create_project).get(list_projects))
        .route("/v1/projects/{id}", get(get_project))
        .route("/v1/projects/{id}/activate", post(activate))
        .route("/v1/projects/{id}/complete", post(complete))
        .route("/v1/trips", get(trips))
        .route("/v1/trips/geojson", get(trips_geojson))
        .route("/v1/stats", get(stats))
        .route("/v1/export", get(export))
        .route("/v1/import", post(import))
        .route("/v1/battery", get(battery))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

// ---- process ----

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub fc_addr: SocketAddr,
    pub ramp_addr: SocketAddr,
    /// Journal directory; `None` keeps everything in memory.
    pub storage: Option<PathBuf>,
    pub secret: String,
    pub provider: String,
    pub provider_seed: u64,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            fc_addr: ([127, 0, 0, 1], 7070).into(),
            ramp_addr: ([127, 0, 0, 1], 7071).into(),
            storage: None,
            secret: "scooterlab-dev-secret".into(),
            provider: "stub".into(),
            provider_seed: 0,
            static_dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("storage: {0}")]
    Storage(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn open_controller(config: &ServeConfig) -> Result<FleetController, ServeError> {
    let providers = providers_from_name(&config.provider, config.provider_seed).map_err(ServeError::Config)?;
    match &config.storage {
        None => Ok(FleetController::in_memory(&config.secret, providers)),
        Some(dir) => {
            let journal = FileJournal::open(dir).map_err(|e| ServeError::Storage(format!("{}: {e}", dir.display())))?;
            FleetController::open(Box::new(journal), &config.secret, providers)
                .map_err(|e| ServeError::Storage(e.to_string()))
        }
    }
}

/// Bound listeners, ready to serve.
pub struct Bound {
    pub state: Arc<Shared>,
    fc: TcpListener,
    ramp: TcpListener,
    static_dir: Option<PathBuf>,
}

impl Bound {
    pub async fn bind(config: &ServeConfig) -> Result<Self, ServeError> {
        let state = Shared::new(open_controller(config)?);
        let listen = |addr| async move { TcpListener::bind(addr).await.map_err(|source| ServeError::Bind { addr, source }) };
        Ok(Self {
            state,
            fc: listen(config.fc_addr).await?,
            ramp: listen(config.ramp_addr).await?,
            static_dir: config.static_dir.clone(),
        })
    }

    pub fn fc_addr(&self) -> SocketAddr {
        self.fc.local_addr().expect("bound socket has an address")
    }

    pub fn ramp_addr(&self) -> SocketAddr {
        self.ramp.local_addr().expect("bound socket has an address")
    }

    /// Serves both listeners until `shutdown` resolves, then flushes storage.
    pub async fn serve(self, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> Result<(), ServeError> {
        let (tx, _) = tokio::sync::broadcast::channel::<()>(1);
        let stop = |tx: &tokio::sync::broadcast::Sender<()>| {
            let mut rx = tx.subscribe();
            async move {
                let _ = rx.recv().await;
            }
        };
        let fc = axum::serve(self.fc, fc_router(self.state.clone())).with_graceful_shutdown(stop(&tx));
        let ramp = axum::serve(self.ramp, ramp_router(self.state.clone(), self.static_dir)).with_graceful_shutdown(stop(&tx));
        let trigger = tx.clone();
        tokio::spawn(async move {
            shutdown.await;
            let _ = trigger.send(());
        });
        let (a, b) = tokio::join!(fc, ramp);
        let flushed = self.state.flush();
        a?;
        b?;
        flushed.map_err(|e| ServeError::Storage(e.to_string()))
    }
}

/// Both services on a background runtime, for tests and in-process tooling.
pub struct Running {
    pub fc_url: String,
    pub ramp_url: String,
    pub state: Arc<Shared>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<Result<(), ServeError>>>,
}

impl Running {
    pub fn start(config: ServeConfig) -> Result<Self, ServeError> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let bound = rt.block_on(Bound::bind(&config))?;
        let fc_url = format!("http://{}", bound.fc_addr());
        let ramp_url = format!("http://{}", bound.ramp_addr());
        let state = bound.state.clone();
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(bound.serve(async {
                let _ = rx.await;
            }))
        });
        Ok(Self {
            fc_url,
            ramp_url,
            state,
            stop: Some(tx),
            thread: Some(thread),
        })
    }

    /// Ephemeral ports, in-memory storage.
    pub fn ephemeral() -> Self {
        Self::start(ServeConfig {
            fc_addr: ([127, 0, 0, 1], 0).into(),
            ramp_addr: ([127, 0, 0, 1], 0).into(),
            ..ServeConfig::default()
        })
        .expect("ephemeral server starts")
    }

    pub fn stop(mut self) -> Result<(), ServeError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<(), ServeError> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(ServeError::Config("server thread panicked".into()))),
            None => Ok(()),
        }
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
