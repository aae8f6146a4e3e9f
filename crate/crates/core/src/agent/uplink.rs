use thiserror::Error;

use crate::model::{ScooterConfig, ScooterId, TripChunk, TripId};
use crate::protocol::{ChunkAck, FinalizeOutcome, Heartbeat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UplinkError {
    /// Transient: the request may or may not have reached the server.
    #[error("link unavailable: {0}")]
    Unreachable(String),
    #[error("authentication rejected")]
    Auth,
    #[error("digest mismatch: {0}")]
    DigestMismatch(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Node-side view of the fleet controller.
pub trait Uplink {
    fn put_chunk(&mut self, token: &str, chunk: &TripChunk) -> Result<ChunkAck, UplinkError>;

    fn finalize_trip(
        &mut self,
        token: &str,
        scooter_id: &ScooterId,
        trip_id: &TripId,
        chunk_count: u32,
    ) -> Result<FinalizeOutcome, UplinkError>;

    /// `Ok(None)` means the node already runs the newest config.
    fn fetch_config(
        &mut self,
        token: &str,
        scooter_id: &ScooterId,
        current_version: u64,
        heartbeat: Heartbeat,
    ) -> Result<Option<ScooterConfig>, UplinkError>;
}
