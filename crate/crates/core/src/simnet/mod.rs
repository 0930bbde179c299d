//! Deterministic simulation: a discrete-event network of switches and
//! clients with lossy links, scheduled faults, and safety checkers; plus an
//! exhaustive explorer of a small abstract model.

pub mod channel;
pub mod check;
pub mod explore;
pub mod lockcheck;
pub mod net;
pub mod report;
pub mod scenario;
pub mod sim;

pub use check::Violation;
pub use net::{Driver, KvWorkload, Network};
pub use report::{Metrics, Milestone, RunReport};
pub use scenario::ScenarioConfig;
pub use sim::{run, SimError, Simulator};
