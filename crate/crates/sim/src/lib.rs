//! Deterministic discrete-event simulator for homechain homes, storage and
//! the cluster-head overlay.

pub mod assertions;
pub mod error;
mod flows;
pub mod metrics;
pub mod net;
pub mod scaling;
pub mod scenario;
pub mod transform;
pub mod trials;
pub mod world;

pub use error::SimError;
pub use metrics::{FlowKind, FlowOutcome, FlowRecord, MetricsReport, MetricsRow};
pub use scenario::{Scenario, SweepParam};
pub use world::World;
