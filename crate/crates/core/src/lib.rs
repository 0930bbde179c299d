//! Chain-replicated key-value coordination on switch-like state machines.

pub mod client;
pub mod control;
pub mod dataplane;
pub mod placement;
pub mod simnet;
pub mod store;
pub mod udprt;
pub mod wire;
