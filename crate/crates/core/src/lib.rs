//! Micromobility sensing testbed: scooter node agents, a deterministic fleet
//! simulator, the fleet controller and the research portal service.

pub mod agent;
pub mod controller;
pub mod geo;
pub mod model;
pub mod policy;
pub mod protocol;
pub mod ramp;
pub mod schedule;
pub mod sim;
