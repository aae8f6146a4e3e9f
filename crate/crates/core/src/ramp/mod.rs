//! Research portal: users and sessions, projects, trip queries, statistics
//! and export. State lives in the fleet controller; this layer adds
//! authentication and the role matrix.

pub mod export;
pub mod query;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controller::{FcError, FleetController};
use crate::model::{
    Project, ProjectId, ProjectState, Role, ScooterConfig, ScooterId, Timestamp, TripId, User, UserId, DAY_MS,
};
use crate::policy::{validate_policy, PolicyDraft, PolicyViolation};
use crate::protocol::{ApiError, BatteryLevel};

pub use export::{export, import_jsonl, trip_geojson, ExportFormat, CSV_HEADER};
pub use query::{
    parse_region, query_trips, stats, Bucket, RegionMode, StatsReport, TripFilter, TripPage, TripQuery, TripSummary,
    DEFAULT_PAGE, MAX_PAGE,
};

pub const SESSION_TTL_MS: i64 = DAY_MS;

#[derive(Debug, Error)]
pub enum RampError {
    #[error("user name {0} is taken")]
    DuplicateName(String),
    #[error("bad credential")]
    BadCredential,
    #[error("session expired")]
    ExpiredToken,
    #[error("missing or unknown session token")]
    Unauthenticated,
    #[error("role {role:?} may not {action}")]
    Forbidden { role: Role, action: String },
    #[error("scooters already in an active project: {}", join(.0))]
    FleetConflict(Vec<ScooterId>),
    #[error("invalid policy: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidPolicy(Vec<PolicyViolation>),
    #[error("unknown scooters: {}", join(.0))]
    UnknownScooter(Vec<ScooterId>),
    #[error("unknown project {0}")]
    UnknownProject(ProjectId),
    #[error("project {0} is {1:?}")]
    ProjectState(ProjectId, ProjectState),
    #[error("unknown trip {0}")]
    UnknownTrip(TripId),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("unsupported export format {0:?}")]
    UnsupportedFormat(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Controller(#[from] FcError),
}

fn join(ids: &[ScooterId]) -> String {
    ids.iter().map(ScooterId::as_str).collect::<Vec<_>>().join(", ")
}

impl RampError {
    pub fn code(&self) -> &'static str {
        match self {
            RampError::DuplicateName(_) => "DuplicateName",
            RampError::BadCredential => "BadCredential",
            RampError::ExpiredToken => "ExpiredToken",
            RampError::Unauthenticated => "Unauthenticated",
            RampError::Forbidden { .. } => "Forbidden",
            RampError::FleetConflict(_) => "FleetConflict",
            RampError::InvalidPolicy(_) => "InvalidPolicy",
            RampError::UnknownScooter(_) => "UnknownScooter",
            RampError::UnknownProject(_) => "UnknownProject",
            RampError::ProjectState(..) => "InvalidProjectState",
            RampError::UnknownTrip(_) => "UnknownTrip",
            RampError::InvalidFilter(_) => "InvalidFilter",
            RampError::UnsupportedFormat(_) => "UnsupportedFormat",
            RampError::Invalid(_) => "InvalidRequest",
            RampError::Controller(e) => e.code(),
        }
    }

    pub fn to_api(&self) -> ApiError {
        let details = match self {
            RampError::FleetConflict(ids) | RampError::UnknownScooter(ids) => serde_json::json!(ids),
            RampError::InvalidPolicy(vs) => serde_json::json!(vs
                .iter()
                .map(|v| serde_json::json!({"code": v.code(), "message": v.to_string()}))
                .collect::<Vec<_>>()),
            RampError::Controller(e) => return e.to_api(),
            _ => serde_json::Value::Null,
        };
        ApiError::new(self.code(), self.to_string()).with_details(details)
    }
}

/// What a role may do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Action {
    ManageUsers,
    ManageFleet,
    ManageProjects,
    QueryTrips,
    ViewBattery,
    ImportData,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::ManageUsers,
        Action::ManageFleet,
        Action::ManageProjects,
        Action::QueryTrips,
        Action::ViewBattery,
        Action::ImportData,
    ];

    fn verb(self) -> &'static str {
        match self {
            Action::ManageUsers => "manage users",
            Action::ManageFleet => "manage the fleet",
            Action::ManageProjects => "manage projects",
            Action::QueryTrips => "query trips",
            Action::ViewBattery => "view battery levels",
            Action::ImportData => "import data",
        }
    }
}

pub fn permits(role: Role, action: Action) -> bool {
    match role {
        Role::Admin => true,
        Role::Researcher => matches!(action, Action::ManageProjects | Action::QueryTrips | Action::ViewBattery),
        Role::Rider => action == Action::ViewBattery,
    }
}

/// The authenticated user behind a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caller {
    pub user_id: UserId,
    pub role: Role,
}

impl Caller {
    pub fn require(&self, action: Action) -> Result<(), RampError> {
        if permits(self.role, action) {
            Ok(())
        } else {
            Err(RampError::Forbidden {
                role: self.role,
                action: action.verb().into(),
            })
        }
    }

    /// Admins see every project; researchers only their own.
    pub fn can_see_project(&self, project: Option<&Project>) -> bool {
        match self.role {
            Role::Admin => true,
            Role::Researcher => project.is_some_and(|p| p.owner == self.user_id),
            Role::Rider => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub user_id: UserId,
    pub role: Role,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewUser {
    pub name: String,
    pub role: Role,
    pub credential: String,
    #[serde(default)]
    pub display_name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewProject {
    pub title: String,
    pub policy: PolicyDraft,
    pub fleet: BTreeSet<ScooterId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub project: Project,
    pub configs: Vec<ScooterConfig>,
}

fn digest_credential(salt: &str, credential: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(credential.as_bytes());
    hex::encode(h.finalize())
}

pub fn hash_credential(credential: &str) -> String {
    let salt = hex::encode(rand::rng().random::<[u8; 16]>());
    format!("{salt}${}", digest_credential(&salt, credential))
}

pub fn verify_credential(stored: &str, credential: &str) -> bool {
    match stored.split_once('$') {
        Some((salt, digest)) => digest_credential(salt, credential) == digest,
        None => false,
    }
}

/// Session table. Users and projects are kept by the fleet controller.
#[derive(Debug, Default)]
pub struct Ramp {
    sessions: BTreeMap<String, Session>,
}

impl Ramp {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a user. Only admins may do so, except for the very first
    /// account, which bootstraps an empty deployment and must be an admin.
    pub fn create_user(&mut self, fc: &mut FleetController, caller: Option<&Caller>, new: NewUser) -> Result<User, RampError> {
        if fc.users().next().is_some() {
            caller.ok_or(RampError::Unauthenticated)?.require(Action::ManageUsers)?;
        } else if new.role != Role::Admin {
            return Err(RampError::Invalid("the first account must be an admin".into()));
        }
        let name = new.name.trim();
        if name.is_empty() || new.credential.is_empty() {
            return Err(RampError::Invalid("name and credential are required".into()));
        }
        let user_id = UserId::new(name);
        if fc.user(&user_id).is_some() {
            return Err(RampError::DuplicateName(name.to_owned()));
        }
        let user = User {
            user_id,
            role: new.role,
            display_name: new.display_name.unwrap_or_else(|| name.to_owned()),
            credential_digest: hash_credential(&new.credential),
        };
        fc.put_user(user.clone())?;
        Ok(user)
    }

    pub fn authenticate(&mut self, fc: &FleetController, name: &str, credential: &str, now: Timestamp) -> Result<Session, RampError> {
        let user = fc.user(&UserId::new(name)).ok_or(RampError::BadCredential)?;
        if !verify_credential(&user.credential_digest, credential) {
            return Err(RampError::BadCredential);
        }
        let session = Session {
            token: hex::encode(rand::rng().random::<[u8; 32]>()),
            user_id: user.user_id.clone(),
            role: user.role,
            expires_at: now.plus_ms(SESSION_TTL_MS),
        };
        self.sessions.retain(|_, s| s.expires_at > now);
        self.sessions.insert(session.token.clone(), session.clone());
        Ok(session)
    }

    pub fn caller(&self, token: &str, now: Timestamp) -> Result<Caller, RampError> {
        let s = self.sessions.get(token).ok_or(RampError::Unauthenticated)?;
        if now >= s.expires_at {
            return Err(RampError::ExpiredToken);
        }
        Ok(Caller {
            user_id: s.user_id.clone(),
            role: s.role,
        })
    }

    /// Extends a live session by another full lifetime.
    pub fn renew_session(&mut self, token: &str, now: Timestamp) -> Result<Session, RampError> {
        self.caller(token, now)?;
        let s = self.sessions.get_mut(token).expect("checked above");
        s.expires_at = now.plus_ms(SESSION_TTL_MS);
        Ok(s.clone())
    }

    pub fn logout(&mut self, token: &str) {
        self.sessions.remove(token);
    }
}

pub fn create_project(fc: &mut FleetController, caller: &Caller, new: NewProject) -> Result<Project, RampError> {
    caller.require(Action::ManageProjects)?;
    if new.title.trim().is_empty() {
        return Err(RampError::Invalid("title is required".into()));
    }
    if new.fleet.is_empty() {
        return Err(RampError::Invalid("fleet is empty".into()));
    }
    let policy = validate_policy(&new.policy).map_err(RampError::InvalidPolicy)?;
    let unknown: Vec<ScooterId> = new.fleet.iter().filter(|s| fc.scooter(s).is_none()).cloned().collect();
    if !unknown.is_empty() {
        return Err(RampError::UnknownScooter(unknown));
    }
    let project = Project {
        project_id: ProjectId::new(format!("proj-{:04}", fc.projects().count() + 1)),
        owner: caller.user_id.clone(),
        title: new.title.trim().to_owned(),
        policy,
        fleet: new.fleet,
        state: ProjectState::Draft,
    };
    fc.put_project(project.clone())?;
    Ok(project)
}

fn owned_project(fc: &FleetController, caller: &Caller, id: &ProjectId) -> Result<Project, RampError> {
    caller.require(Action::ManageProjects)?;
    let project = fc.project(id).ok_or_else(|| RampError::UnknownProject(id.clone()))?;
    if !caller.can_see_project(Some(project)) {
        return Err(RampError::Forbidden {
            role: caller.role,
            action: format!("manage project {id}"),
        });
    }
    Ok(project.clone())
}

/// Activates a draft project and pushes its policy to every fleet scooter.
pub fn activate_project(fc: &mut FleetController, caller: &Caller, id: &ProjectId, now: Timestamp) -> Result<Activation, RampError> {
    let mut project = owned_project(fc, caller, id)?;
    if project.state != ProjectState::Draft {
        return Err(RampError::ProjectState(id.clone(), project.state));
    }
    let busy: BTreeSet<&ScooterId> = fc
        .projects()
        .filter(|p| p.state == ProjectState::Active && p.project_id != *id)
        .flat_map(|p| p.fleet.iter())
        .collect();
    let conflicts: Vec<ScooterId> = project.fleet.iter().filter(|s| busy.contains(s)).cloned().collect();
    if !conflicts.is_empty() {
        return Err(RampError::FleetConflict(conflicts));
    }
    let mut configs = Vec::new();
    for scooter in &project.fleet {
        configs.push(fc.issue_config(scooter, project.policy.clone(), Some(id.clone()), now)?);
    }
    project.state = ProjectState::Active;
    fc.put_project(project.clone())?;
    Ok(Activation { project, configs })
}

/// Ends an active project, releasing its fleet.
pub fn complete_project(fc: &mut FleetController, caller: &Caller, id: &ProjectId) -> Result<Project, RampError> {
    let mut project = owned_project(fc, caller, id)?;
    if project.state != ProjectState::Active {
        return Err(RampError::ProjectState(id.clone(), project.state));
    }
    project.state = ProjectState::Completed;
    fc.put_project(project.clone())?;
    Ok(project)
}

pub fn list_projects(fc: &FleetController, caller: &Caller) -> Result<Vec<Project>, RampError> {
    caller.require(Action::ManageProjects)?;
    Ok(fc.projects().filter(|p| caller.can_see_project(Some(p))).cloned().collect())
}

pub fn battery_levels(fc: &FleetController, caller: &Caller) -> Result<Vec<BatteryLevel>, RampError> {
    caller.require(Action::ViewBattery)?;
    Ok(fc.battery_levels())
}

#[cfg(test)]
mod tests;
