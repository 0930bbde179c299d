//! Simulation scenarios, read from versioned TOML files.
//!
//! Switches are named by their index in the topology (`0` is `S0`).

use serde::Deserialize;
use thiserror::Error;

use crate::control::{testbed_switch, Topology};
use crate::placement::{PlacementError, Ring, SwitchId};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported scenario version {0}")]
    Version(u32),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Placement(#[from] PlacementError),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub topology: TopologyKind,
    #[serde(default)]
    pub ring: RingConfig,
    #[serde(default)]
    pub links: LinkModel,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub client: ClientConfig,
    #[serde(default)]
    pub controller: ControllerSettings,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub mutation: Mutation,
}

fn default_name() -> String {
    "scenario".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Four switches, hosts on S0.
    #[default]
    Testbed,
    /// `switches` fully linked switches, hosts on S0.
    FullMesh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementChoice {
    /// Every key on the chain `members` (head first).
    #[default]
    Chain,
    /// Consistent hashing over `members`.
    Ring,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingConfig {
    pub placement: PlacementChoice,
    pub members: Vec<u8>,
    /// Total switch count for a full-mesh topology.
    pub switches: u8,
    pub vnodes: usize,
    pub f: usize,
    pub groups: u32,
    pub seed: u64,
}

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig {
            placement: PlacementChoice::Chain,
            members: vec![0, 1, 2],
            switches: 4,
            vnodes: 1000,
            f: 2,
            groups: 10,
            seed: 1,
        }
    }
}

/// Per-link delay and per-packet fault probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkModel {
    pub base_us: u64,
    pub jitter_us: u64,
    pub loss: f64,
    pub dup: f64,
    pub reorder: f64,
    /// Upper bound of the extra delay given to a reordered packet.
    pub reorder_extra_us: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            base_us: 5,
            jitter_us: 5,
            loss: 0.0,
            dup: 0.0,
            reorder: 0.0,
            reorder_extra_us: 50,
        }
    }
}

impl LinkModel {
    pub fn max_hop_delay_us(&self) -> u64 {
        self.base_us + self.jitter_us + self.reorder_extra_us
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    #[default]
    Kv,
    Locks,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub kind: WorkloadKind,
    pub clients: u32,
    /// Operations (kv) or committed transactions (locks) to run.
    pub ops: u64,
    pub write_ratio: f64,
    pub value_size: usize,
    pub keys: u64,
    /// After the workload, read every key once and compare with the
    /// newest acknowledged write.
    pub final_reads: bool,
    pub contention_index: f64,
    pub cold_locks: u64,
    pub cold_per_txn: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            kind: WorkloadKind::Kv,
            clients: 8,
            ops: 1000,
            write_ratio: 0.5,
            value_size: 64,
            keys: 100,
            final_reads: true,
            contention_index: 1.0,
            cold_locks: 10_000,
            cold_per_txn: 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub timeout_us: u64,
    pub max_retries: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            timeout_us: crate::client::DEFAULT_SIM_TIMEOUT_US,
            max_retries: crate::client::DEFAULT_MAX_RETRIES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSettings {
    /// Stop-phase hold time; `0` picks a bound from the link model.
    pub drain_us: u64,
    /// Delay between a switch failing and the controller's failover.
    pub detect_us: u64,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        ControllerSettings { drain_us: 0, detect_us: 1_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultAction {
    /// Crash the switch; failover follows after `detect_us`.
    Fail,
    /// Recover the failed `switch` onto `replacement`.
    Recover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub action: FaultAction,
    pub switch: u8,
    pub replacement: Option<u8>,
    /// Trigger at a simulated time...
    pub at_us: Option<u64>,
    /// ...or once this many operations have completed.
    pub after_ops: Option<u64>,
}

/// Deliberate protocol bugs, for showing that the checkers notice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    #[default]
    None,
    DropSeqGuard,
    SkipSessionBump,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.version != SCENARIO_VERSION {
            return Err(ScenarioError::Version(self.version));
        }
        let l = &self.links;
        for (name, p) in [("loss", l.loss), ("dup", l.dup), ("reorder", l.reorder)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("links.{name} = {p} is not a probability"));
            }
        }
        let w = &self.workload;
        if !(0.0..=1.0).contains(&w.write_ratio) {
            return bad(format!("workload.write_ratio = {} is not a probability", w.write_ratio));
        }
        if w.clients == 0 || w.keys == 0 {
            return bad("workload needs at least one client and one key".into());
        }
        if w.kind == WorkloadKind::Locks && !(w.contention_index > 0.0 && w.contention_index <= 1.0) {
            return bad("workload.contention_index must be in (0, 1]".into());
        }
        if self.client.timeout_us == 0 {
            return bad("client.timeout_us must be positive".into());
        }
        let n = self.switch_count();
        if self.ring.members.iter().any(|&m| m >= n) {
            return bad("ring member outside the topology".into());
        }
        // never more simultaneous failures than a chain tolerates
        let mut down = 0usize;
        let f = self.chain_len().saturating_sub(1);
        for fault in &self.faults {
            if fault.switch >= n || fault.replacement.is_some_and(|r| r >= n) {
                return bad("fault names a switch outside the topology".into());
            }
            if fault.at_us.is_some() == fault.after_ops.is_some() {
                return bad("each fault needs exactly one of at_us and after_ops".into());
            }
            match fault.action {
                FaultAction::Fail => down += 1,
                FaultAction::Recover => {
                    if fault.replacement.is_none() {
                        return bad("recover needs a replacement".into());
                    }
                    down = down.saturating_sub(1);
                }
            }
            if down > f {
                return bad(format!("{down} simultaneous failures exceed f = {f}"));
            }
        }
        Ok(())
    }

    fn switch_count(&self) -> u8 {
        match self.topology {
            TopologyKind::Testbed => 4,
            TopologyKind::FullMesh => self.ring.switches,
        }
    }

    fn chain_len(&self) -> usize {
        match self.ring.placement {
            PlacementChoice::Chain => self.ring.members.len(),
            PlacementChoice::Ring => self.ring.f + 1,
        }
    }

    pub fn switch(&self, i: u8) -> SwitchId {
        testbed_switch(i)
    }

    pub fn topology(&self) -> Topology {
        match self.topology {
            TopologyKind::Testbed => Topology::testbed(),
            TopologyKind::FullMesh => {
                let all: Vec<SwitchId> = (0..self.ring.switches).map(testbed_switch).collect();
                Topology::full_mesh(&all)
            }
        }
    }

    pub fn build_ring(&self) -> Result<Ring, ScenarioError> {
        let members: Vec<SwitchId> = self.ring.members.iter().map(|&i| testbed_switch(i)).collect();
        let ring = match self.ring.placement {
            PlacementChoice::Chain => Ring::single_chain(&members, self.ring.vnodes, self.ring.groups, self.ring.seed)?,
            PlacementChoice::Ring => Ring::build(&members, self.ring.vnodes, self.ring.f, self.ring.groups, self.ring.seed)?,
        };
        let spares: Vec<SwitchId> = (0..self.switch_count()).map(testbed_switch).filter(|s| !members.contains(s)).collect();
        Ok(ring.with_spares(&spares))
    }

    pub fn drain_us(&self) -> u64 {
        if self.controller.drain_us > 0 {
            return self.controller.drain_us;
        }
        // a packet may cross every switch, plus the client links
        let hops = self.switch_count() as u64 + 2;
        4 * hops * self.links.max_hop_delay_us()
    }
}
