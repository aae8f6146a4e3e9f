//! HTTP surface of the testbed: the fleet controller and research portal
//! servers, and blocking clients for both.

pub mod client;
pub mod server;

pub use client::{ClientError, FcClient, Http, HttpController, HttpUplink, RampClient};
pub use server::{fc_router, ramp_router, Bound, Running, ServeConfig, ServeError, Shared};
