//! Deterministic fleet simulator driving node agents on a virtual clock.

pub mod mobility;
pub mod scenario;
pub mod synth;

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{
    AgentError, AgentEvent, AgentLimits, AgentStore, Disposition, FileStore, MemoryStore, NodeAgent,
    RideState, UploadEvent, Uplink, UplinkError,
};
use crate::controller::{FleetController, LocalLink, TripKey};
use crate::model::{ChunkKey, ProjectId, Scooter, ScooterConfig, ScooterId, Timestamp, TripChunk, TripId, MINUTE_MS};
use crate::policy::PolicyDraft;
use crate::protocol::{Census, ChunkAck, FinalizeOutcome, Heartbeat};

pub use mobility::{battery_step, mobility_step, Leg, Pose, Route, MAX_SPEED_MPS};
pub use scenario::{connectivity_at, demo_scenario, DemoOptions, Faults, Scenario, ScenarioError, WifiZone, ZoneArea};
pub use synth::{synthesize_readings, Ambient, Noise, SimSource};

pub const STEP_MS: i64 = 100;
pub const SUBTICK_MS: i64 = 10;
const POSE_EVERY_STEPS: u64 = 10;
const CONFIG_POLL_MS: i64 = 5_000;
const SCOOTER_MODEL: &str = "Segway G30 Max";

const RESTART_STREAM: u64 = 0xAE57;
const SENSOR_STREAM: u64 = 0x5E50;
const LINK_STREAM: u64 = 0x714C;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("controller: {0}")]
    Controller(String),
    #[error("agent {0}: {1}")]
    Agent(ScooterId, String),
    #[error("event log: {0}")]
    Io(#[from] io::Error),
}

/// What the simulator needs from a fleet controller, local or remote.
pub trait SimController {
    /// Registers a scooter and returns its upload token.
    fn register(&mut self, scooter: Scooter) -> Result<String, SimError>;
    fn issue_config(
        &mut self,
        scooter_id: &ScooterId,
        policy: &PolicyDraft,
        project_id: Option<ProjectId>,
        now: Timestamp,
    ) -> Result<ScooterConfig, SimError>;
    /// Node-facing link as seen at virtual time `now`.
    fn uplink(&mut self, now: Timestamp) -> Box<dyn Uplink + '_>;
    /// Census of everything stored for the listed trips.
    fn census(&mut self, trips: &[TripKey]) -> Result<Census, SimError>;
}

impl SimController for FleetController {
    fn register(&mut self, scooter: Scooter) -> Result<String, SimError> {
        self.register_scooter(scooter)
            .map(|(_, token)| token)
            .map_err(|e| SimError::Controller(e.to_string()))
    }

    fn issue_config(
        &mut self,
        scooter_id: &ScooterId,
        policy: &PolicyDraft,
        project_id: Option<ProjectId>,
        now: Timestamp,
    ) -> Result<ScooterConfig, SimError> {
        self.issue_config_draft(scooter_id, policy, project_id, now)
            .map_err(|e| SimError::Controller(e.to_string()))
    }

    fn uplink(&mut self, now: Timestamp) -> Box<dyn Uplink + '_> {
        Box::new(LocalLink { controller: self, now })
    }

    fn census(&mut self, trips: &[TripKey]) -> Result<Census, SimError> {
        Ok(FleetController::census(self, trips))
    }
}

/// Link that loses requests or their responses at the configured rates.
struct FaultLink<'a> {
    inner: Box<dyn Uplink + 'a>,
    rng: &'a mut ChaCha8Rng,
    faults: Faults,
}

impl FaultLink<'_> {
    fn call<T>(&mut self, f: impl FnOnce(&mut dyn Uplink) -> Result<T, UplinkError>) -> Result<T, UplinkError> {
        let lose_request = self.rng.random::<f64>() < self.faults.drop_request;
        let lose_response = self.rng.random::<f64>() < self.faults.drop_ack;
        if lose_request {
            return Err(UplinkError::Unreachable("request lost".into()));
        }
        let out = f(self.inner.as_mut());
        if lose_response && out.is_ok() {
            return Err(UplinkError::Unreachable("response lost".into()));
        }
        out
    }
}

impl Uplink for FaultLink<'_> {
    fn put_chunk(&mut self, token: &str, chunk: &TripChunk) -> Result<ChunkAck, UplinkError> {
        self.call(|u| u.put_chunk(token, chunk))
    }

    fn finalize_trip(
        &mut self,
        token: &str,
        scooter_id: &ScooterId,
        trip_id: &TripId,
        chunk_count: u32,
    ) -> Result<FinalizeOutcome, UplinkError> {
        self.call(|u| u.finalize_trip(token, scooter_id, trip_id, chunk_count))
    }

    fn fetch_config(
        &mut self,
        token: &str,
        scooter_id: &ScooterId,
        current_version: u64,
        heartbeat: Heartbeat,
    ) -> Result<Option<ScooterConfig>, UplinkError> {
        self.call(|u| u.fetch_config(token, scooter_id, current_version, heartbeat))
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent<P = serde_json::Value> {
    pub step: u64,
    pub scooter_id: Option<ScooterId>,
    pub event_type: String,
    pub payload: P,
}

#[derive(Serialize)]
struct LogLine<'a, P: Serialize> {
    step: u64,
    scooter_id: Option<&'a ScooterId>,
    event_type: &'a str,
    payload: &'a P,
}

struct EventLog<'w> {
    out: Option<&'w mut dyn Write>,
    hasher: Sha256,
    lines: u64,
    line: Vec<u8>,
}

impl<'w> EventLog<'w> {
    fn new(out: Option<&'w mut dyn Write>) -> Self {
        Self {
            out,
            hasher: Sha256::new(),
            lines: 0,
            line: Vec::with_capacity(512),
        }
    }

    fn emit<P: Serialize>(&mut self, step: u64, scooter_id: Option<&ScooterId>, event_type: &str, payload: &P) -> io::Result<()> {
        self.line.clear();
        serde_json::to_writer(
            &mut self.line,
            &LogLine {
                step,
                scooter_id,
                event_type,
                payload,
            },
        )?;
        self.line.push(b'\n');
        self.hasher.update(&self.line);
        self.lines += 1;
        if let Some(out) = self.out.as_mut() {
            out.write_all(&self.line)?;
        }
        Ok(())
    }

    /// Agent and upload events carry their own `event` tag; it becomes the
    /// line's event type.
    fn emit_tagged<E: Serialize>(&mut self, step: u64, scooter_id: &ScooterId, event: &E) -> io::Result<()> {
        let mut value = serde_json::to_value(event)?;
        let kind = value
            .as_object_mut()
            .and_then(|m| m.remove("event"))
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_else(|| "unknown".into());
        self.emit(step, Some(scooter_id), &kind, &value)
    }

    fn finish(mut self) -> io::Result<(String, u64)> {
        if let Some(out) = self.out.as_mut() {
            out.flush()?;
        }
        Ok((hex::encode(self.hasher.finalize()), self.lines))
    }
}

#[derive(Serialize)]
struct SamplePayload<'a> {
    trip_id: &'a TripId,
    kind: &'a crate::model::SensorKind,
    t: Timestamp,
    disposition: Disposition,
    value: &'a crate::model::SampleValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePayload {
    pub lat: f64,
    pub lon: f64,
    pub speed_mps: f64,
    pub heading_deg: f64,
    pub battery_pct: f64,
    pub odometer_m: f64,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Verify sample counts balance after every step. Fingerprints are
    /// always checked at the end.
    pub check_every_step: bool,
    /// Longest drain phase before giving up, seconds.
    pub max_drain_s: f64,
    /// Keep agent state on disk under this directory instead of in memory.
    pub store_root: Option<PathBuf>,
    /// Agent limits; the scenario's storage capacity overrides the default.
    pub limits: AgentLimits,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            check_every_step: false,
            max_drain_s: 3_600.0,
            store_root: None,
            limits: AgentLimits::default(),
        }
    }
}

/// Where every generated sample ended up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLedger {
    pub generated: Census,
    pub suppressed: Census,
    pub acked: Census,
    pub unsent: Census,
    /// Dropped on the node under storage pressure.
    pub dropped: Census,
    /// Refused by the controller and set aside on the node.
    pub quarantined: Census,
}

impl SampleLedger {
    fn merge(&mut self, o: &SampleLedger) {
        self.generated.merge(o.generated);
        self.suppressed.merge(o.suppressed);
        self.acked.merge(o.acked);
        self.unsent.merge(o.unsent);
        self.dropped.merge(o.dropped);
        self.quarantined.merge(o.quarantined);
    }

    /// Generated samples that passed the gate.
    pub fn recorded(&self) -> Census {
        Census {
            samples: self.generated.samples - self.suppressed.samples,
            fingerprint: self.generated.fingerprint.wrapping_sub(self.suppressed.fingerprint),
        }
    }

    /// Every generated sample is accounted for exactly once.
    pub fn balanced(&self) -> bool {
        let mut sum = self.suppressed;
        for c in [self.acked, self.unsent, self.dropped, self.quarantined] {
            sum.merge(c);
        }
        sum == self.generated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScooterSummary {
    pub scooter_id: ScooterId,
    pub trips: usize,
    pub restarts: u32,
    pub failed: bool,
    pub battery_pct: f64,
    pub odometer_m: f64,
    /// Odometer reading when the battery hit zero, if it did.
    pub depleted_at_m: Option<f64>,
    pub ledger: SampleLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub steps: u64,
    pub drain_steps: u64,
    pub drained: bool,
    pub degraded: bool,
    pub log_sha256: String,
    pub log_lines: u64,
    pub trips: Vec<TripKey>,
    pub scooters: Vec<ScooterSummary>,
    pub ledger: SampleLedger,
    /// Stored on the controller for the run's trips.
    pub ingested: Census,
    pub max_speed_mps: f64,
    pub simulated_s: f64,
}

impl SimReport {
    /// Controller holds exactly what the nodes saw acknowledged.
    pub fn census_matches(&self) -> bool {
        self.ingested == self.ledger.acked
    }

    /// Nothing lost, nothing duplicated, nothing left behind.
    pub fn exactly_once(&self) -> bool {
        self.drained && self.census_matches() && self.ingested == self.ledger.recorded()
    }
}

struct Rider {
    id: ScooterId,
    index: u64,
    token: String,
    route: Route,
    agent: Option<NodeAgent>,
    reopen: Box<dyn FnMut() -> Result<Box<dyn AgentStore>, AgentError>>,
    battery_pct: f64,
    odometer_m: f64,
    route_odometer: f64,
    frozen: Option<Pose>,
    prev: Pose,
    online: bool,
    last_poll: Option<Timestamp>,
    sensor_rng: ChaCha8Rng,
    link_rng: ChaCha8Rng,
    sealed: BTreeMap<ChunkKey, Census>,
    ledger: SampleLedger,
    trips: Vec<TripId>,
    restarts: u32,
    depleted_at_m: Option<f64>,
    failed: bool,
}

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.to_le_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn agent_error(id: &ScooterId, e: AgentError) -> SimError {
    SimError::Agent(id.clone(), e.to_string())
}

struct Ctx<'a, 'w> {
    scenario: &'a Scenario,
    limits: &'a AgentLimits,
    log: &'a mut EventLog<'w>,
    controller: &'a mut dyn SimController,
    step: u64,
    now: Timestamp,
    draining: bool,
    max_speed: f64,
}

impl Rider {
    fn agent(&mut self) -> &mut NodeAgent {
        self.agent.as_mut().expect("live agent")
    }

    fn restart(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        self.agent = None;
        let store = (self.reopen)().map_err(|e| agent_error(&self.id, e))?;
        let agent = NodeAgent::open(self.id.clone(), self.token.clone(), store, ctx.limits.clone())
            .map_err(|e| agent_error(&self.id, e))?;
        self.agent = Some(agent);
        self.restarts += 1;
        self.last_poll = None;
        ctx.log.emit(ctx.step, Some(&self.id), "agent_restarted", &serde_json::json!({ "restarts": self.restarts }))?;
        Ok(())
    }

    fn pose_at(&self, t: Timestamp, draining: bool) -> Pose {
        match self.frozen {
            Some(p) => Pose { t, ..p },
            None if draining => Pose { t, speed_mps: 0.0, ..self.prev },
            None => self.route.pose_at(t),
        }
    }

    fn track_agent_events(&mut self, ctx: &mut Ctx, events: &[AgentEvent]) -> Result<(), SimError> {
        for e in events {
            match e {
                AgentEvent::ChunkSealed { chunk_key, .. } => {
                    let census = self
                        .agent()
                        .outbox()
                        .find(|o| &o.chunk.chunk_key == chunk_key)
                        .map(|o| Census::of(&o.chunk.samples))
                        .unwrap_or_default();
                    self.sealed.insert(chunk_key.clone(), census);
                }
                AgentEvent::StoragePressure { dropped, .. } => {
                    self.ledger.dropped.merge(Census::of(dropped));
                }
                AgentEvent::TripStarted { trip_id, .. } => self.trips.push(trip_id.clone()),
                _ => {}
            }
            ctx.log.emit_tagged(ctx.step, &self.id, e)?;
        }
        Ok(())
    }

    fn track_upload_events(&mut self, ctx: &mut Ctx, events: &[UploadEvent]) -> Result<(), SimError> {
        for e in events {
            match e {
                UploadEvent::ChunkAcked { chunk_key, .. } => {
                    if let Some(c) = self.sealed.remove(chunk_key) {
                        self.ledger.acked.merge(c);
                    }
                }
                UploadEvent::ChunkQuarantined { chunk_key, .. } => {
                    if let Some(c) = self.sealed.remove(chunk_key) {
                        self.ledger.quarantined.merge(c);
                    }
                }
                _ => {}
            }
            ctx.log.emit_tagged(ctx.step, &self.id, e)?;
        }
        Ok(())
    }

    fn step(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        let now = ctx.now;
        let faults = if ctx.draining { Faults::default() } else { ctx.scenario.faults };

        if now.millis().rem_euclid(MINUTE_MS) == 0 && ctx.step > 0 {
            let minute = now.millis().div_euclid(MINUTE_MS);
            let u = scenario::hashed_unit(ctx.scenario.seed, RESTART_STREAM + self.index, minute);
            if u < faults.restart_per_minute {
                self.restart(ctx)?;
            }
        }

        let pose = self.pose_at(now, ctx.draining);
        if self.frozen.is_none() && !ctx.draining {
            let odo = self.route.odometer_at(now);
            let delta = (odo - self.route_odometer).max(0.0);
            self.route_odometer = odo;
            self.odometer_m += delta;
            self.battery_pct = battery_step(self.battery_pct, delta);
            if self.battery_pct <= 0.0 {
                self.frozen = Some(Pose { speed_mps: 0.0, ..pose });
                self.depleted_at_m = Some(self.odometer_m);
                ctx.log.emit(
                    ctx.step,
                    Some(&self.id),
                    "battery_depleted",
                    &serde_json::json!({ "odometer_m": self.odometer_m }),
                )?;
            }
        }
        let pose = self.pose_at(now, ctx.draining);
        ctx.max_speed = ctx.max_speed.max(pose.speed_mps);
        let (battery, odometer) = (self.battery_pct, self.odometer_m);
        self.agent().set_vehicle_state(battery, odometer);
        if ctx.step % POSE_EVERY_STEPS == 0 {
            let payload = PosePayload {
                lat: pose.position.lat(),
                lon: pose.position.lon(),
                speed_mps: pose.speed_mps,
                heading_deg: pose.heading_deg,
                battery_pct: battery,
                odometer_m: odometer,
            };
            ctx.log.emit(ctx.step, Some(&self.id), "pose", &payload)?;
        }

        let events = self.agent().observe_speed(now, pose.speed_mps).map_err(|e| agent_error(&self.id, e))?;
        self.track_agent_events(ctx, &events)?;

        if matches!(self.agent().ride(), RideState::Recording(_)) {
            let mut prev = self.prev;
            let mut source = SimSource {
                scooter_id: self.id.clone(),
                pose,
                prev,
                noise: ctx.scenario.noise,
                ambient: ctx.scenario.ambient,
                rng: self.sensor_rng.clone(),
            };
            for k in 0..STEP_MS / SUBTICK_MS {
                let t = now.plus_ms(k * SUBTICK_MS);
                let p = self.pose_at(t, ctx.draining);
                source.prev = prev;
                source.pose = p;
                prev = p;
                let out = self.agent().sample_tick(t, &mut source).map_err(|e| agent_error(&self.id, e))?;
                for (sample, disposition) in &out.samples {
                    self.ledger.generated.add(sample);
                    if *disposition == Disposition::Suppressed {
                        self.ledger.suppressed.add(sample);
                    }
                    let payload = SamplePayload {
                        trip_id: &sample.trip_id,
                        kind: &sample.kind,
                        t: sample.t,
                        disposition: *disposition,
                        value: &sample.value,
                    };
                    ctx.log.emit(ctx.step, Some(&self.id), "sample", &payload)?;
                }
                self.track_agent_events(ctx, &out.events)?;
            }
            self.sensor_rng = source.rng;
            self.prev = prev;
        } else {
            self.prev = pose;
        }

        let online = ctx.draining || connectivity_at(pose.position, now, ctx.scenario);
        if online != self.online {
            ctx.log.emit(
                ctx.step,
                Some(&self.id),
                if online { "link_up" } else { "link_down" },
                &serde_json::json!({}),
            )?;
            if online {
                self.last_poll = None;
            }
            self.online = online;
        }
        if !online {
            return Ok(());
        }
        let poll_due = self
            .last_poll
            .is_none_or(|last| now.millis() - last.millis() >= CONFIG_POLL_MS);
        let mut link = FaultLink {
            inner: ctx.controller.uplink(now),
            rng: &mut self.link_rng,
            faults,
        };
        let agent = self.agent.as_mut().expect("live agent");
        let config_events = if poll_due {
            self.last_poll = Some(now);
            agent.refresh_config(&mut link).map_err(|e| agent_error(&self.id, e))?.1
        } else {
            Vec::new()
        };
        let report = agent.sync(true, &mut link).map_err(|e| agent_error(&self.id, e))?;
        drop(link);
        self.track_agent_events(ctx, &config_events)?;
        self.track_upload_events(ctx, &report.events)?;
        Ok(())
    }

    fn unsent(&self) -> Census {
        self.agent.as_ref().map(|a| Census::of(a.unsent_samples())).unwrap_or_default()
    }

    fn settled(&self) -> bool {
        self.failed
            || self
                .agent
                .as_ref()
                .is_some_and(|a| *a.ride() == RideState::Idle && !a.has_unsent_work())
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Runs `scenario` against `controller`, writing the event log to `log_out`
/// when given.
pub fn run(
    scenario: &Scenario,
    controller: &mut dyn SimController,
    opts: &RunOptions,
    log_out: Option<&mut dyn Write>,
) -> Result<SimReport, SimError> {
    let routes = scenario.plan_routes()?;
    let mut limits = opts.limits.clone();
    if scenario.storage_capacity_bytes.is_some() {
        limits.storage_capacity_bytes = scenario.storage_capacity_bytes;
    }
    let mut log = EventLog::new(log_out);
    log.emit(
        0,
        None,
        "run_started",
        &serde_json::json!({ "seed": scenario.seed, "start": scenario.start, "duration_s": scenario.duration_s }),
    )?;

    let mut order: Vec<&scenario::ScooterSpec> = scenario.scooters.iter().collect();
    order.sort_by(|a, b| a.scooter_id.cmp(&b.scooter_id));
    let mut riders = Vec::with_capacity(order.len());
    for (index, spec) in order.into_iter().enumerate() {
        let index = index as u64;
        let id = spec.scooter_id.clone();
        let scooter = Scooter::new(id.clone(), SCOOTER_MODEL, spec.battery_pct)
            .map_err(|e| SimError::Agent(id.clone(), e.to_string()))?;
        let token = controller.register(scooter)?;
        let mut reopen: Box<dyn FnMut() -> Result<Box<dyn AgentStore>, AgentError>> = match &opts.store_root {
            Some(root) => {
                let dir = root.join(id.as_str());
                Box::new(move || Ok(Box::new(FileStore::open(&dir)?) as Box<dyn AgentStore>))
            }
            None => {
                let disk = MemoryStore::new();
                Box::new(move || Ok(Box::new(disk.clone()) as Box<dyn AgentStore>))
            }
        };
        let store = reopen().map_err(|e| agent_error(&id, e))?;
        let mut agent = NodeAgent::open(id.clone(), token.clone(), store, limits.clone()).map_err(|e| agent_error(&id, e))?;
        let config = controller.issue_config(&id, &scenario.policy, None, scenario.start)?;
        agent.provision(config.clone()).map_err(|e| agent_error(&id, e))?;
        log.emit(0, Some(&id), "provisioned", &serde_json::json!({ "version": config.version }))?;
        let route = routes[&id].clone();
        let start_pose = route.pose_at(scenario.start);
        riders.push(Rider {
            id,
            index,
            token,
            route,
            agent: Some(agent),
            reopen,
            battery_pct: spec.battery_pct,
            odometer_m: 0.0,
            route_odometer: 0.0,
            frozen: None,
            prev: start_pose,
            online: false,
            last_poll: None,
            sensor_rng: stream_rng(scenario.seed, SENSOR_STREAM, index),
            link_rng: stream_rng(scenario.seed, LINK_STREAM, index),
            sealed: BTreeMap::new(),
            ledger: SampleLedger::default(),
            trips: Vec::new(),
            restarts: 0,
            depleted_at_m: None,
            failed: false,
        });
    }

    let main_steps = ((scenario.duration_s * 1000.0) / STEP_MS as f64).round() as u64;
    let max_drain_steps = ((opts.max_drain_s * 1000.0) / STEP_MS as f64).round() as u64;
    let mut changes: Vec<&scenario::PolicyChange> = scenario.policy_changes.iter().collect();
    changes.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
    let mut changes = changes.into_iter().peekable();

    let mut degraded = false;
    let mut max_speed: f64 = 0.0;
    let mut step: u64 = 0;
    let mut drain_steps = 0;
    let mut drained = false;
    loop {
        let draining = step >= main_steps;
        let now = scenario.start.plus_ms(step as i64 * STEP_MS);
        if draining {
            if step == main_steps {
                log.emit(step, None, "drain_started", &serde_json::json!({}))?;
            }
            if riders.iter().all(Rider::settled) {
                drained = true;
                break;
            }
            if drain_steps >= max_drain_steps {
                break;
            }
            drain_steps += 1;
        }
        while let Some(change) = changes.next_if(|c| now.millis() >= scenario.start.millis() + (c.at_s * 1000.0).round() as i64) {
            for r in riders.iter().filter(|r| !r.failed) {
                let config = controller.issue_config(&r.id, &change.policy, change.project_id.clone(), now)?;
                log.emit(step, Some(&r.id), "config_issued", &serde_json::json!({ "version": config.version }))?;
            }
        }
        for rider in riders.iter_mut().filter(|r| !r.failed) {
            let mut ctx = Ctx {
                scenario,
                limits: &limits,
                log: &mut log,
                controller: &mut *controller,
                step,
                now,
                draining,
                max_speed,
            };
            let outcome = catch_unwind(AssertUnwindSafe(|| rider.step(&mut ctx)));
            max_speed = ctx.max_speed;
            let failure = match outcome {
                Ok(Ok(())) => None,
                Ok(Err(SimError::Io(e))) => return Err(SimError::Io(e)),
                Ok(Err(e)) => Some(e.to_string()),
                Err(p) => Some(panic_message(p)),
            };
            if let Some(reason) = failure {
                rider.failed = true;
                degraded = true;
                log.emit(step, Some(&rider.id), "agent_failed", &serde_json::json!({ "reason": reason }))?;
            }
            if opts.check_every_step && !rider.failed {
                let l = rider.ledger;
                let held = rider.agent.as_ref().map_or(0, |a| a.held_samples()) as u64;
                let accounted = l.suppressed.samples + l.acked.samples + held + l.dropped.samples + l.quarantined.samples;
                if accounted != l.generated.samples {
                    rider.failed = true;
                    degraded = true;
                    log.emit(step, Some(&rider.id), "conservation_violated", &l)?;
                }
            }
        }
        step += 1;
    }

    let mut ledger = SampleLedger::default();
    let mut trips = Vec::new();
    let mut scooters = Vec::new();
    for r in &mut riders {
        r.ledger.unsent = r.unsent();
        ledger.merge(&r.ledger);
        trips.extend(r.trips.iter().map(|t| (r.id.clone(), t.clone())));
        scooters.push(ScooterSummary {
            scooter_id: r.id.clone(),
            trips: r.trips.len(),
            restarts: r.restarts,
            failed: r.failed,
            battery_pct: r.battery_pct,
            odometer_m: r.odometer_m,
            depleted_at_m: r.depleted_at_m,
            ledger: r.ledger,
        });
    }
    let ingested = controller.census(&trips)?;
    log.emit(
        step,
        None,
        "run_finished",
        &serde_json::json!({
            "drained": drained,
            "degraded": degraded,
            "trips": trips.len(),
            "ledger": ledger,
            "ingested": ingested,
        }),
    )?;
    let (log_sha256, log_lines) = log.finish()?;
    Ok(SimReport {
        seed: scenario.seed,
        steps: step,
        drain_steps,
        drained,
        degraded,
        log_sha256,
        log_lines,
        trips,
        scooters,
        ledger,
        ingested,
        max_speed_mps: max_speed,
        simulated_s: step as f64 * STEP_MS as f64 / 1000.0,
    })
}

/// Parses a JSON-lines event log.
pub fn read_log(text: &str) -> Result<Vec<LogEvent>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
