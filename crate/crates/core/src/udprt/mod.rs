//! Real-network backend. Switches exchange wire-format datagrams over UDP,
//! each with a line-oriented TCP admin port; a controller node drives them
//! through those admin ports; benchmark clients talk UDP to the switches and
//! TCP to the controller.
//!
//! Every node binds its own address, so a whole deployment fits on the
//! 127.0.0.0/8 loopback range of one host. Client `c` lives at the address
//! whose 32-bit value is its client id, on [`CLIENT_PORT`].

pub mod admin;
pub mod bench;
pub mod client;
pub mod cluster;
pub mod controller;
pub mod switch;

use std::io;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};

use thiserror::Error;

use crate::control::ControlError;
use crate::placement::PlacementError;

pub use admin::AdminClient;
pub use bench::{run_bench, BenchConfig, BenchReport};
pub use client::UdpClient;
pub use cluster::{Cluster, ClusterOptions};
pub use controller::{ControllerClient, UdpControl};
pub use switch::SwitchNode;

/// UDP port switches receive queries on.
pub const DATA_PORT: u16 = 50000;
/// TCP port of every node's admin listener.
pub const ADMIN_PORT: u16 = 50100;
/// UDP port clients receive replies on.
pub const CLIENT_PORT: u16 = 50300;

/// Where the controller listens unless told otherwise.
pub fn default_controller_addr() -> SocketAddr {
    SocketAddr::V4(SocketAddrV4::new(Ipv4Addr::LOCALHOST, ADMIN_PORT))
}

#[derive(Debug, Error)]
pub enum UdpError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: SocketAddr, source: io::Error },
    #[error("admin protocol: {0}")]
    AdminProtocol(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error("{0}")]
    Config(String),
}

/// Ports a deployment uses. Tests move them to avoid clashing with a
/// running cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ports {
    pub data: u16,
    pub admin: u16,
    pub client: u16,
}

impl Default for Ports {
    fn default() -> Self {
        Ports {
            data: DATA_PORT,
            admin: ADMIN_PORT,
            client: CLIENT_PORT,
        }
    }
}

impl Ports {
    /// Default ports shifted by `offset`.
    pub fn offset(offset: u16) -> Self {
        Ports {
            data: DATA_PORT + offset,
            admin: ADMIN_PORT + offset,
            client: CLIENT_PORT + offset,
        }
    }
}

/// Loopback address of benchmark client `i` (counting from 0).
pub fn bench_client_ip(i: u32) -> Ipv4Addr {
    let n = i + 1;
    Ipv4Addr::new(127, 1, (n >> 8) as u8, n as u8)
}
