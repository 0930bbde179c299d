//! A whole deployment in one process: every switch of a ring plus the
//! controller, each on its own threads and addresses.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::control::{Controller, ControllerConfig, Topology};
use crate::dataplane::SwitchState;
use crate::placement::{Ring, SwitchId};
use crate::store::Store;

use super::admin;
use super::controller::{controller_handler, ControllerNode};
use super::switch::{spawn_switch, NodeCounters, SwitchHandle};
use super::{default_controller_addr, Ports, UdpError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterOptions {
    pub ports: Ports,
    pub controller: SocketAddr,
    pub store_capacity: usize,
    pub drain_us: u64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            ports: Ports::default(),
            controller: default_controller_addr(),
            store_capacity: 4096,
            drain_us: 2_000,
        }
    }
}

pub struct Cluster {
    options: ClusterOptions,
    stop: Arc<AtomicBool>,
    switches: Vec<SwitchHandle>,
    controller: Arc<Mutex<ControllerNode>>,
    admin: JoinHandle<()>,
}

impl Cluster {
    pub fn start(ring: Ring, options: ClusterOptions) -> Result<Cluster, UdpError> {
        let all: Vec<SwitchId> = ring.all_switches().collect();
        if options.ports.admin == options.controller.port() && all.iter().any(|&s| std::net::IpAddr::V4(s) == options.controller.ip()) {
            return Err(UdpError::Config(format!("controller address {} is also a switch's admin address", options.controller)));
        }
        let ring = Arc::new(ring);
        let stop = Arc::new(AtomicBool::new(false));
        let mut switches = Vec::new();
        for &ip in &all {
            match spawn_switch(ip, ring.clone(), options.ports, Store::with_capacity(options.store_capacity), stop.clone()) {
                Ok(h) => switches.push(h),
                Err(e) => {
                    stop.store(true, Ordering::Relaxed);
                    for h in switches {
                        h.join();
                    }
                    return Err(e);
                }
            }
        }
        let listener = match admin::bind_listener(options.controller) {
            Ok(l) => l,
            Err(e) => {
                stop.store(true, Ordering::Relaxed);
                for h in switches {
                    h.join();
                }
                return Err(e);
            }
        };
        let controller = Controller::new(
            (*ring).clone(),
            Topology::full_mesh(&all),
            ControllerConfig { drain_us: options.drain_us },
        );
        let controller = Arc::new(Mutex::new(ControllerNode::new(controller, options.ports.admin)));
        let admin = admin::serve(listener, controller_handler(controller.clone(), stop.clone()), stop.clone());
        log::info!("cluster up: {} switches, controller at {}", all.len(), options.controller);
        Ok(Cluster {
            options,
            stop,
            switches,
            controller,
            admin,
        })
    }

    pub fn controller_addr(&self) -> SocketAddr {
        self.options.controller
    }

    pub fn options(&self) -> &ClusterOptions {
        &self.options
    }

    pub fn controller(&self) -> Arc<Mutex<ControllerNode>> {
        self.controller.clone()
    }

    /// Setting this flag stops the cluster, as `shutdown` over admin does.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }

    /// Blocks until a `shutdown` admin command arrives.
    pub fn wait(&self) {
        while !self.is_stopped() {
            thread::sleep(Duration::from_millis(50));
        }
    }

    /// Stops every thread and returns the final switch states.
    pub fn shutdown(self) -> BTreeMap<SwitchId, (SwitchState, NodeCounters)> {
        self.stop.store(true, Ordering::Relaxed);
        let _ = self.admin.join();
        self.switches.into_iter().map(|h| (h.ip, h.join())).collect()
    }
}
