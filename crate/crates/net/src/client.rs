//! Blocking HTTP clients for both services, the node uplink over HTTP and a
//! simulation controller that drives a live server.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use ureq::http::{Method, Request};

use scooterlab::agent::{Uplink, UplinkError};
use scooterlab::controller::{Acknowledgments, TripKey};
use scooterlab::model::{Loan, LoanId, Project, ProjectId, Scooter, ScooterConfig, ScooterId, ScooterStatus, Timestamp, TripChunk, TripId, UserId};
use scooterlab::policy::PolicyDraft;
use scooterlab::protocol::{ApiError, BatteryLevel, Census, CensusRequest, ChunkAck, FinalizeOutcome, FinalizeRequest, Heartbeat};
use scooterlab::ramp::{Activation, NewProject, NewUser, Session, StatsReport, TripPage, TripQuery};
use scooterlab::sim::{SimController, SimError};

use crate::server::{
    CheckoutRequest, Imported, IngestReport, InspectRequest, IssueConfig, Login, NewScooter, Registration,
    RenewRequest, ReturnRequest, Returned, UserView, CLOCK_HEADER,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {reason}")]
    Transport { url: String, reason: String },
    #[error("HTTP {status} {error}")]
    Api { status: u16, error: ApiError },
    #[error("bad response from {url}: {reason}")]
    Decode { url: String, reason: String },
}

impl ClientError {
    pub fn api(&self) -> Option<&ApiError> {
        match self {
            ClientError::Api { error, .. } => Some(error),
            _ => None,
        }
    }

    pub fn code(&self) -> Option<&str> {
        self.api().map(|e| e.code.as_str())
    }
}

/// One request as sent, for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
}

pub type Recorder = Arc<Mutex<Vec<Recorded>>>;

/// Raw response: status, content type and body.
#[derive(Debug, Clone)]
pub struct RawResponse {
    pub status: u16,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

/// Base URL plus bearer token and an optional virtual clock.
#[derive(Clone)]
pub struct Http {
    agent: ureq::Agent,
    base: String,
    pub token: Option<String>,
    pub clock: Option<Timestamp>,
    recorder: Option<Recorder>,
}

impl Http {
    pub fn new(base: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            agent,
            base: base.into().trim_end_matches('/').to_owned(),
            token: None,
            clock: None,
            recorder: None,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn with_recorder(mut self, recorder: Recorder) -> Self {
        self.recorder = Some(recorder);
        self
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    /// Sends a request; `path` may carry a query string.
    pub fn raw(&self, method: Method, path: &str, body: Option<Vec<u8>>, json: bool) -> Result<RawResponse, ClientError> {
        let url = format!("{}{}", self.base, path);
        if let Some(rec) = &self.recorder {
            rec.lock().unwrap_or_else(|e| e.into_inner()).push(Recorded {
                method: method.to_string(),
                path: path.to_owned(),
                body: body.as_ref().map(|b| String::from_utf8_lossy(b).into_owned()),
            });
        }
        let mut req = Request::builder().method(method).uri(&url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        if let Some(c) = self.clock {
            req = req.header(CLOCK_HEADER, c.millis().to_string());
        }
        if json {
            req = req.header("Content-Type", "application/json");
        }
        let req = req.body(body.unwrap_or_default()).map_err(|e| ClientError::Transport {
            url: url.clone(),
            reason: e.to_string(),
        })?;
        let mut resp = self.agent.run(req).map_err(|e| ClientError::Transport {
            url: url.clone(),
            reason: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let content_type = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned);
        let body = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(|e| ClientError::Transport {
                url: url.clone(),
                reason: e.to_string(),
            })?;
        Ok(RawResponse { status, content_type, body })
    }

    /// Like [`Http::raw`] but turns non-2xx statuses into [`ClientError::Api`].
    pub fn call(&self, method: Method, path: &str, body: Option<Vec<u8>>, json: bool) -> Result<RawResponse, ClientError> {
        let r = self.raw(method, path, body, json)?;
        if (200..300).contains(&r.status) {
            return Ok(r);
        }
        let error = serde_json::from_slice::<ApiError>(&r.body)
            .unwrap_or_else(|_| ApiError::new("HttpError", String::from_utf8_lossy(&r.body).into_owned()));
        Err(ClientError::Api { status: r.status, error })
    }

    fn decode<T: DeserializeOwned>(&self, path: &str, r: &RawResponse) -> Result<T, ClientError> {
        serde_json::from_slice(&r.body).map_err(|e| ClientError::Decode {
            url: format!("{}{}", self.base, path),
            reason: e.to_string(),
        })
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let r = self.call(Method::GET, path, None, false)?;
        self.decode(path, &r)
    }

    pub fn send<B: Serialize + ?Sized, T: DeserializeOwned>(&self, method: Method, path: &str, body: &B) -> Result<T, ClientError> {
        let bytes = serde_json::to_vec(body).expect("request bodies serialize");
        let r = self.call(method, path, Some(bytes), true)?;
        self.decode(path, &r)
    }

    pub fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.send(Method::POST, path, body)
    }

    pub fn health(&self) -> Result<(), ClientError> {
        self.call(Method::GET, "/health", None, false).map(|_| ())
    }
}

fn with_query<Q: Serialize>(path: &str, q: &Q) -> String {
    let qs = serde_urlencoded::to_string(q).expect("query parameters serialize");
    if qs.is_empty() {
        path.to_owned()
    } else {
        format!("{path}?{qs}")
    }
}

// ---- fleet controller ----

/// Admin and rider calls to the fleet controller.
#[derive(Clone)]
pub struct FcClient {
    pub http: Http,
}

impl FcClient {
    pub fn new(http: Http) -> Self {
        Self { http }
    }

    pub fn register(&self, new: &NewScooter) -> Result<Registration, ClientError> {
        self.http.post("/v1/scooters", new)
    }

    pub fn scooters(&self) -> Result<Vec<Scooter>, ClientError> {
        self.http.get("/v1/scooters")
    }

    pub fn battery(&self, scooter: &ScooterId) -> Result<BatteryLevel, ClientError> {
        self.http.get(&format!("/v1/scooters/{scooter}/battery"))
    }

    pub fn inspect(&self, scooter: &ScooterId, pass: bool) -> Result<ScooterStatus, ClientError> {
        self.http.post(&format!("/v1/scooters/{scooter}/inspect"), &InspectRequest { pass })
    }

    pub fn checkout(&self, scooter: &ScooterId, rider: Option<&UserId>, acks: Acknowledgments) -> Result<Loan, ClientError> {
        self.http.post(
            "/v1/loans",
            &CheckoutRequest {
                scooter_id: scooter.clone(),
                rider_id: rider.cloned(),
                acknowledgments: acks,
            },
        )
    }

    pub fn renew(&self, loan: &LoanId, acks: Acknowledgments) -> Result<Loan, ClientError> {
        self.http.post(&format!("/v1/loans/{loan}/renew"), &RenewRequest { acknowledgments: acks })
    }

    pub fn return_loan(&self, loan: &LoanId, inspection_pass: bool) -> Result<Returned, ClientError> {
        self.http.post(&format!("/v1/loans/{loan}/return"), &ReturnRequest { inspection_pass })
    }

    pub fn loans(&self) -> Result<Vec<Loan>, ClientError> {
        self.http.get("/v1/loans")
    }

    pub fn issue_config(&self, scooter: &ScooterId, policy: &PolicyDraft, project_id: Option<ProjectId>) -> Result<ScooterConfig, ClientError> {
        self.http.post(
            &format!("/v1/configs/{scooter}"),
            &IssueConfig {
                policy: policy.clone(),
                project_id,
            },
        )
    }

    pub fn config_history(&self, scooter: &ScooterId) -> Result<Vec<ScooterConfig>, ClientError> {
        self.http.get(&format!("/v1/configs/{scooter}"))
    }

    pub fn census(&self, trips: &[TripKey]) -> Result<Census, ClientError> {
        self.http.post("/v1/census", &CensusRequest { trips: trips.to_vec() })
    }

    pub fn ingest(&self) -> Result<IngestReport, ClientError> {
        self.http.get("/v1/ingest")
    }
}

/// The node uplink over HTTP.
pub struct HttpUplink<'a> {
    pub http: &'a Http,
}

fn uplink_error(e: ClientError) -> UplinkError {
    match e {
        ClientError::Transport { reason, .. } => UplinkError::Unreachable(reason),
        ClientError::Api { status: 401, .. } => UplinkError::Auth,
        ClientError::Api { error, .. } if error.code == "DigestMismatch" => UplinkError::DigestMismatch(error.message),
        ClientError::Api { status, error } if status >= 500 => UplinkError::Unreachable(error.to_string()),
        ClientError::Api { error, .. } => UplinkError::Rejected(error.to_string()),
        ClientError::Decode { reason, .. } => UplinkError::Malformed(reason),
    }
}

impl HttpUplink<'_> {
    fn as_node(&self, token: &str) -> Http {
        let mut h = self.http.clone();
        h.token = Some(token.to_owned());
        h
    }
}

impl Uplink for HttpUplink<'_> {
    fn put_chunk(&mut self, token: &str, chunk: &TripChunk) -> Result<ChunkAck, UplinkError> {
        let k = &chunk.chunk_key;
        let path = format!("/v1/chunks/{}/{}/{}", k.scooter_id, k.trip_id, k.seq);
        self.as_node(token).send(Method::PUT, &path, chunk).map_err(uplink_error)
    }

    fn finalize_trip(&mut self, token: &str, scooter_id: &ScooterId, trip_id: &TripId, chunk_count: u32) -> Result<FinalizeOutcome, UplinkError> {
        let path = format!("/v1/trips/{scooter_id}/{trip_id}/finalize");
        self.as_node(token)
            .post(&path, &FinalizeRequest { chunk_count })
            .map_err(uplink_error)
    }

    fn fetch_config(&mut self, token: &str, scooter_id: &ScooterId, current_version: u64, heartbeat: Heartbeat) -> Result<Option<ScooterConfig>, UplinkError> {
        #[derive(Serialize)]
        struct Poll {
            current: u64,
            battery_pct: f64,
            odometer_m: f64,
        }
        let path = with_query(
            &format!("/v1/config/{scooter_id}"),
            &Poll {
                current: current_version,
                battery_pct: heartbeat.battery_pct,
                odometer_m: heartbeat.odometer_m,
            },
        );
        let node = self.as_node(token);
        let r = node.call(Method::GET, &path, None, false).map_err(uplink_error)?;
        if r.status == 204 {
            return Ok(None);
        }
        node.decode(&path, &r).map(Some).map_err(uplink_error)
    }
}

/// Drives a simulation against a live controller. Requests carry the
/// simulation clock so the server sees virtual time.
pub struct HttpController {
    pub fc: FcClient,
}

impl HttpController {
    pub fn new(fc_url: &str, admin_token: &str) -> Self {
        Self {
            fc: FcClient::new(Http::new(fc_url).with_token(Some(admin_token.to_owned()))),
        }
    }

    fn at(&self, now: Timestamp) -> FcClient {
        let mut fc = self.fc.clone();
        fc.http.clock = Some(now);
        fc
    }
}

fn sim_error(e: ClientError) -> SimError {
    SimError::Controller(e.to_string())
}

impl SimController for HttpController {
    fn register(&mut self, scooter: Scooter) -> Result<String, SimError> {
        let reg = self
            .fc
            .register(&NewScooter {
                scooter_id: scooter.scooter_id,
                model: scooter.model,
                battery_pct: scooter.battery_pct,
            })
            .map_err(sim_error)?;
        Ok(reg.token)
    }

    fn issue_config(&mut self, scooter_id: &ScooterId, policy: &PolicyDraft, project_id: Option<ProjectId>, now: Timestamp) -> Result<ScooterConfig, SimError> {
        self.at(now).issue_config(scooter_id, policy, project_id).map_err(sim_error)
    }

    fn uplink(&mut self, now: Timestamp) -> Box<dyn Uplink + '_> {
        self.fc.http.clock = Some(now);
        Box::new(HttpUplink { http: &self.fc.http })
    }

    fn census(&mut self, trips: &[TripKey]) -> Result<Census, SimError> {
        self.fc.census(trips).map_err(sim_error)
    }
}

// ---- research portal ----

#[derive(Clone)]
pub struct RampClient {
    pub http: Http,
}

#[derive(Debug, Clone)]
pub struct Download {
    pub content_type: Option<String>,
    pub bytes: Vec<u8>,
}

impl RampClient {
    pub fn new(http: Http) -> Self {
        Self { http }
    }

    pub fn create_user(&self, new: &NewUser) -> Result<UserView, ClientError> {
        self.http.post("/v1/users", new)
    }

    pub fn login(&self, name: &str, credential: &str) -> Result<Session, ClientError> {
        self.http.post(
            "/v1/sessions",
            &Login {
                name: name.into(),
                credential: credential.into(),
            },
        )
    }

    pub fn renew_session(&self) -> Result<Session, ClientError> {
        self.http.post("/v1/sessions/renew", &serde_json::json!({}))
    }

    pub fn logout(&self) -> Result<(), ClientError> {
        self.http.call(Method::DELETE, "/v1/sessions", None, false).map(|_| ())
    }

    pub fn whoami(&self) -> Result<scooterlab::ramp::Caller, ClientError> {
        self.http.get("/v1/whoami")
    }

    pub fn create_project(&self, new: &NewProject) -> Result<Project, ClientError> {
        self.http.post("/v1/projects", new)
    }

    pub fn projects(&self) -> Result<Vec<Project>, ClientError> {
        self.http.get("/v1/projects")
    }

    pub fn project(&self, id: &ProjectId) -> Result<Project, ClientError> {
        self.http.get(&format!("/v1/projects/{id}"))
    }

    pub fn activate(&self, id: &ProjectId) -> Result<Activation, ClientError> {
        self.http.post(&format!("/v1/projects/{id}/activate"), &serde_json::json!({}))
    }

    pub fn complete(&self, id: &ProjectId) -> Result<Project, ClientError> {
        self.http.post(&format!("/v1/projects/{id}/complete"), &serde_json::json!({}))
    }

    pub fn trips(&self, q: &TripQuery) -> Result<TripPage, ClientError> {
        self.http.get(&with_query("/v1/trips", q))
    }

    /// Follows cursors until the last page.
    pub fn all_trips(&self, q: &TripQuery) -> Result<TripPage, ClientError> {
        let mut q = q.clone();
        let mut out = TripPage::default();
        loop {
            let page = self.trips(&q)?;
            out.trips.extend(page.trips);
            match page.next_cursor {
                Some(c) => q.cursor = Some(c),
                None => return Ok(out),
            }
        }
    }

    pub fn geojson(&self, q: &TripQuery) -> Result<serde_json::Value, ClientError> {
        self.http.get(&with_query("/v1/trips/geojson", q))
    }

    pub fn stats(&self, q: &TripQuery) -> Result<StatsReport, ClientError> {
        self.http.get(&with_query("/v1/stats", q))
    }

    pub fn export(&self, q: &TripQuery) -> Result<Download, ClientError> {
        let r = self.http.call(Method::GET, &with_query("/v1/export", q), None, false)?;
        Ok(Download {
            content_type: r.content_type,
            bytes: r.body,
        })
    }

    pub fn import(&self, jsonl: Vec<u8>) -> Result<Imported, ClientError> {
        let r = self.http.call(Method::POST, "/v1/import", Some(jsonl), false)?;
        self.http.decode("/v1/import", &r)
    }

    pub fn battery(&self) -> Result<Vec<BatteryLevel>, ClientError> {
        self.http.get("/v1/battery")
    }
}
