//! Python bindings: geometry, policy validation, the simulator and an
//! in-process controller with portal queries.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use serde::de::DeserializeOwned;
use serde::Serialize;

use scooterlab::controller::enrich::providers_from_name;
use scooterlab::controller::FleetController;
use scooterlab::geo;
use scooterlab::model::{ProjectId, Role, ScooterId, Timestamp, UserId};
use scooterlab::policy::{validate_policy as validate, PolicyDraft};
use scooterlab::ramp::{self, Caller, ExportFormat, NewProject, TripQuery};
use scooterlab::schedule::{self, Schedule, ScheduleSpec};
use scooterlab::sim::{self, demo_scenario as demo, DemoOptions, RunOptions, Scenario};

create_exception!(scooterlab, ScooterlabError, PyException, "Raised with (code, message) args.");

fn err(code: &str, message: impl ToString) -> PyErr {
    ScooterlabError::new_err((code.to_owned(), message.to_string()))
}

fn ramp_err(e: ramp::RampError) -> PyErr {
    err(e.code(), e)
}

/// Python object -> Rust value via its JSON form.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| err("InvalidRequest", e))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| err("InvalidRequest", e))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn query_of(filter: Option<&Bound<'_, PyDict>>) -> PyResult<TripQuery> {
    match filter {
        Some(d) => from_py(d.as_any()),
        None => Ok(TripQuery::default()),
    }
}

#[pyclass(frozen, eq, module = "scooterlab")]
#[derive(Clone, Copy, PartialEq)]
struct GeoPoint(scooterlab::model::GeoPoint);

#[pymethods]
impl GeoPoint {
    #[new]
    fn new(lat: f64, lon: f64) -> PyResult<Self> {
        scooterlab::model::GeoPoint::new(lat, lon)
            .map(GeoPoint)
            .map_err(|e| err("InvalidCoordinate", e))
    }

    #[getter]
    fn lat(&self) -> f64 {
        self.0.lat()
    }

    #[getter]
    fn lon(&self) -> f64 {
        self.0.lon()
    }

    /// Great-circle distance in metres.
    fn distance_to(&self, other: &GeoPoint) -> f64 {
        geo::haversine_distance(self.0, other.0)
    }

    fn destination(&self, bearing_deg: f64, distance_m: f64) -> GeoPoint {
        GeoPoint(geo::destination(self.0, bearing_deg, distance_m))
    }

    fn __repr__(&self) -> String {
        format!("GeoPoint({:.9}, {:.9})", self.0.lat(), self.0.lon())
    }
}

#[pyclass(frozen, module = "scooterlab")]
struct GeoFence(geo::GeoFence);

fn ring(points: Vec<(f64, f64)>) -> PyResult<Vec<scooterlab::model::GeoPoint>> {
    points
        .into_iter()
        .map(|(lat, lon)| scooterlab::model::GeoPoint::new(lat, lon).map_err(|e| err("InvalidCoordinate", e)))
        .collect()
}

#[pymethods]
impl GeoFence {
    /// Rings are lists of (lat, lon) pairs.
    #[new]
    #[pyo3(signature = (exterior, holes = Vec::new()))]
    fn new(exterior: Vec<(f64, f64)>, holes: Vec<Vec<(f64, f64)>>) -> PyResult<Self> {
        let holes = holes.into_iter().map(ring).collect::<PyResult<_>>()?;
        geo::GeoFence::new(ring(exterior)?, holes)
            .map(GeoFence)
            .map_err(|e| err("InvalidFence", e))
    }

    #[staticmethod]
    fn rectangle(a: &GeoPoint, b: &GeoPoint) -> PyResult<Self> {
        geo::GeoFence::rectangle(a.0, b.0)
            .map(GeoFence)
            .map_err(|e| err("InvalidFence", e))
    }

    fn contains(&self, p: &GeoPoint) -> bool {
        geo::point_in_fence(p.0, &self.0)
    }

    fn exterior(&self) -> Vec<GeoPoint> {
        self.0.exterior().iter().copied().map(GeoPoint).collect()
    }

    fn __repr__(&self) -> String {
        format!("GeoFence({} vertices, {} holes)", self.0.exterior().len(), self.0.holes().len())
    }
}

#[pyfunction]
fn haversine_distance(a: &GeoPoint, b: &GeoPoint) -> f64 {
    geo::haversine_distance(a.0, b.0)
}

/// Summed great-circle length of a fix sequence, metres.
#[pyfunction]
fn trip_length(points: Vec<GeoPoint>) -> f64 {
    geo::trip_length(points.into_iter().map(|p| p.0))
}

/// Validates a policy draft and returns its normalized form. Raises with
/// code InvalidPolicy and every violation in the message.
#[pyfunction]
fn validate_policy(py: Python<'_>, draft: &Bound<'_, PyAny>) -> PyResult<PyObject> {
    let draft: PolicyDraft = from_py(draft)?;
    match validate(&draft) {
        Ok(policy) => to_py(py, &policy),
        Err(vs) => Err(err("InvalidPolicy", vs.iter().map(|v| format!("{}: {v}", v.code())).collect::<Vec<_>>().join("; "))),
    }
}

/// Whether epoch millisecond `t` falls inside the schedule.
#[pyfunction]
fn schedule_contains(spec: &Bound<'_, PyAny>, t: i64) -> PyResult<bool> {
    let spec: ScheduleSpec = from_py(spec)?;
    let s = Schedule::new(spec).map_err(|e| err("InvalidSchedule", e))?;
    Ok(schedule::schedule_contains(&s, Timestamp(t)))
}

#[pyfunction]
#[pyo3(signature = (seed = 7, scooters = 8, duration_s = 7200.0))]
fn demo_scenario(py: Python<'_>, seed: u64, scooters: usize, duration_s: f64) -> PyResult<PyObject> {
    let s = demo(&DemoOptions {
        seed,
        scooters,
        duration_s,
        ..DemoOptions::default()
    });
    to_py(py, &s)
}

/// In-process fleet controller. Portal calls run as an administrator.
#[pyclass(unsendable, name = "FleetController", module = "scooterlab")]
struct PyFleetController {
    fc: FleetController,
}

fn admin() -> Caller {
    Caller {
        user_id: UserId::new("python"),
        role: Role::Admin,
    }
}

#[pymethods]
impl PyFleetController {
    #[new]
    #[pyo3(signature = (providers = "stub", seed = 11))]
    fn new(providers: &str, seed: u64) -> PyResult<Self> {
        let providers = providers_from_name(providers, seed).map_err(|e| err("InvalidArgument", e))?;
        Ok(Self {
            fc: FleetController::in_memory("python", providers),
        })
    }

    /// Runs a scenario against this controller and returns the report.
    #[pyo3(signature = (scenario, log_path = None, check_every_step = false))]
    fn run(&mut self, py: Python<'_>, scenario: &Bound<'_, PyAny>, log_path: Option<std::path::PathBuf>, check_every_step: bool) -> PyResult<PyObject> {
        let scenario: Scenario = from_py(scenario)?;
        scenario.validate().map_err(|e| err("InvalidScenario", e))?;
        let opts = RunOptions {
            check_every_step,
            ..RunOptions::default()
        };
        let report = match log_path {
            Some(path) => {
                let file = std::fs::File::create(&path).map_err(|e| err("IoError", e))?;
                let mut w = std::io::BufWriter::new(file);
                let r = sim::run(&scenario, &mut self.fc, &opts, Some(&mut w));
                std::io::Write::flush(&mut w).map_err(|e| err("IoError", e))?;
                r
            }
            None => sim::run(&scenario, &mut self.fc, &opts, None),
        }
        .map_err(|e| err("SimulationFailed", e))?;
        let mut out = serde_json::to_value(&report).map_err(|e| err("InvalidRequest", e))?;
        out["exactly_once"] = report.exactly_once().into();
        to_py(py, &out)
    }

    #[getter]
    fn trip_count(&self) -> usize {
        self.fc.trip_count()
    }

    /// One page of trips. `filter` uses the query-string field names.
    #[pyo3(signature = (filter = None, cursor = None, limit = None))]
    fn query(&self, py: Python<'_>, filter: Option<&Bound<'_, PyDict>>, cursor: Option<&str>, limit: Option<usize>) -> PyResult<PyObject> {
        let f = query_of(filter)?.filter().map_err(ramp_err)?;
        let page = ramp::query_trips(&self.fc, &admin(), &f, cursor, limit).map_err(ramp_err)?;
        to_py(py, &page)
    }

    #[pyo3(signature = (filter = None, include_empty = false))]
    fn stats(&self, py: Python<'_>, filter: Option<&Bound<'_, PyDict>>, include_empty: bool) -> PyResult<PyObject> {
        let f = query_of(filter)?.filter().map_err(ramp_err)?;
        to_py(py, &ramp::stats(&self.fc, &admin(), &f, include_empty).map_err(ramp_err)?)
    }

    /// Export as csv, jsonl or geojson bytes.
    #[pyo3(signature = (format, filter = None))]
    fn export<'py>(&self, py: Python<'py>, format: &str, filter: Option<&Bound<'_, PyDict>>) -> PyResult<Bound<'py, PyBytes>> {
        let format: ExportFormat = format.parse().map_err(ramp_err)?;
        let f = query_of(filter)?.filter().map_err(ramp_err)?;
        let data = ramp::export(&self.fc, &admin(), &f, format).map_err(ramp_err)?;
        Ok(PyBytes::new(py, &data))
    }

    /// Loads trips from a JSON Lines export; returns how many were new.
    fn import_jsonl(&mut self, data: &[u8]) -> PyResult<usize> {
        ramp::import_jsonl(&mut self.fc, &admin(), data).map_err(ramp_err)
    }

    fn create_project(&mut self, py: Python<'_>, title: String, policy: &Bound<'_, PyAny>, fleet: Vec<String>) -> PyResult<PyObject> {
        let new = NewProject {
            title,
            policy: from_py(policy)?,
            fleet: fleet.into_iter().map(ScooterId::new).collect(),
        };
        to_py(py, &ramp::create_project(&mut self.fc, &admin(), new).map_err(ramp_err)?)
    }

    fn activate_project(&mut self, py: Python<'_>, project_id: &str, now_ms: i64) -> PyResult<PyObject> {
        let a = ramp::activate_project(&mut self.fc, &admin(), &ProjectId::new(project_id), Timestamp(now_ms)).map_err(ramp_err)?;
        to_py(py, &a)
    }
}

#[pymodule(name = "scooterlab")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ScooterlabError", m.py().get_type::<ScooterlabError>())?;
    m.add_class::<GeoPoint>()?;
    m.add_class::<GeoFence>()?;
    m.add_class::<PyFleetController>()?;
    m.add_function(wrap_pyfunction!(haversine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(trip_length, m)?)?;
    m.add_function(wrap_pyfunction!(validate_policy, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_contains, m)?)?;
    m.add_function(wrap_pyfunction!(demo_scenario, m)?)?;
    Ok(())
}
