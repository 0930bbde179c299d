//! The controller: neighbor-rule failover, staged per-group recovery onto a
//! replacement switch, session bumps for new heads, and key administration.
//!
//! The controller never touches switch state directly. It issues
//! [`ControlCommand`]s through a [`SwitchControl`] backend, which the
//! simulator applies in-process and the UDP runtime sends over TCP.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataplane::{Envelope, Rule, RuleAction, SwitchState, SwitchStatus};
use crate::placement::{GroupId, Ring, SwitchId};
use crate::store::{StoreError, StoreImage};
use crate::wire::Key;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error("unknown switch {0}")]
    UnknownSwitch(SwitchId),
    #[error("switch {0} has not been failed over")]
    NotFailed(SwitchId),
    #[error("{new_sw} cannot replace {failed}: {reason}")]
    NotEligible {
        failed: SwitchId,
        new_sw: SwitchId,
        reason: &'static str,
    },
    #[error("no live switch can take virtual node {0}")]
    NoEligibleSwitch(u32),
    #[error("no live reference switch for key {0}")]
    NoReference(Key),
    #[error("replacement {new_sw} failed while recovering group {group}")]
    ReplacementFailedMidway { new_sw: SwitchId, group: GroupId },
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("transport: {0}")]
    Transport(String),
    #[error("bad command: {0}")]
    BadCommand(String),
}

/// Physical switch adjacency. Hosts hang off one access switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    adj: BTreeMap<SwitchId, BTreeSet<SwitchId>>,
    access: SwitchId,
}

/// Address of testbed switch `Si`.
pub fn testbed_switch(i: u8) -> SwitchId {
    Ipv4Addr::new(10, 0, 0, i + 1)
}

impl Topology {
    pub fn new(edges: &[(SwitchId, SwitchId)], access: SwitchId) -> Self {
        let mut adj: BTreeMap<SwitchId, BTreeSet<SwitchId>> = BTreeMap::new();
        adj.entry(access).or_default();
        for &(a, b) in edges {
            adj.entry(a).or_default().insert(b);
            adj.entry(b).or_default().insert(a);
        }
        Topology { adj, access }
    }

    /// Four switches S0..S3 with links S0-S1, S0-S3, S1-S2, S1-S3, S2-S3 and
    /// the hosts on S0.
    pub fn testbed() -> Self {
        let s = testbed_switch;
        Topology::new(&[(s(0), s(1)), (s(0), s(3)), (s(1), s(2)), (s(1), s(3)), (s(2), s(3))], s(0))
    }

    /// Every switch linked to every other one, hosts on the first.
    pub fn full_mesh(switches: &[SwitchId]) -> Self {
        let mut edges = Vec::new();
        for (i, &a) in switches.iter().enumerate() {
            for &b in &switches[i + 1..] {
                edges.push((a, b));
            }
        }
        Topology::new(&edges, switches[0])
    }

    pub fn access_switch(&self) -> SwitchId {
        self.access
    }

    pub fn switches(&self) -> impl Iterator<Item = SwitchId> + '_ {
        self.adj.keys().copied()
    }

    pub fn contains(&self, s: SwitchId) -> bool {
        self.adj.contains_key(&s)
    }

    pub fn neighbors(&self, s: SwitchId) -> Result<&BTreeSet<SwitchId>, ControlError> {
        self.adj.get(&s).ok_or(ControlError::UnknownSwitch(s))
    }

    /// First hop of a shortest path from `from` to `to` whose intermediate
    /// switches all satisfy `usable`. Ties go to the lowest address.
    pub fn next_hop(&self, from: SwitchId, to: SwitchId, usable: impl Fn(SwitchId) -> bool) -> Option<SwitchId> {
        if from == to {
            return Some(to);
        }
        let mut first: BTreeMap<SwitchId, SwitchId> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for &n in self.adj.get(&from)? {
            if n == to {
                return Some(n);
            }
            if usable(n) && first.insert(n, n).is_none() {
                queue.push_back(n);
            }
        }
        while let Some(cur) = queue.pop_front() {
            let hop = first[&cur];
            for &n in &self.adj[&cur] {
                if n == to {
                    return Some(hop);
                }
                if n != from && usable(n) && !first.contains_key(&n) {
                    first.insert(n, hop);
                    queue.push_back(n);
                }
            }
        }
        None
    }

    /// Number of links on a shortest path over all switches.
    pub fn diameter(&self) -> usize {
        let mut best = 0;
        for &a in self.adj.keys() {
            let mut dist = BTreeMap::from([(a, 0usize)]);
            let mut queue = VecDeque::from([a]);
            while let Some(c) = queue.pop_front() {
                for &n in &self.adj[&c] {
                    if !dist.contains_key(&n) {
                        dist.insert(n, dist[&c] + 1);
                        queue.push_back(n);
                    }
                }
            }
            best = best.max(dist.values().copied().max().unwrap_or(0));
        }
        best
    }
}

/// One switch mutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlCommand {
    SetStatus { at: SwitchId, status: SwitchStatus },
    InstallRule { at: SwitchId, rule: Rule },
    RemoveRule { at: SwitchId, match_dst: SwitchId, group: Option<GroupId>, priority: u8 },
    SetStop { at: SwitchId, failed: SwitchId, group: GroupId },
    ClearStop { at: SwitchId, failed: SwitchId, group: GroupId },
    BumpSession { at: SwitchId, session: u16 },
    /// Merges an image into the switch's store key by key.
    Load { at: SwitchId, image: StoreImage },
    Insert { at: SwitchId, key: Key, value: Vec<u8> },
    Tombstone { at: SwitchId, key: Key },
    Gc { at: SwitchId, key: Key },
}

impl ControlCommand {
    pub fn target(&self) -> SwitchId {
        use ControlCommand::*;
        match self {
            SetStatus { at, .. }
            | InstallRule { at, .. }
            | RemoveRule { at, .. }
            | SetStop { at, .. }
            | ClearStop { at, .. }
            | BumpSession { at, .. }
            | Load { at, .. }
            | Insert { at, .. }
            | Tombstone { at, .. }
            | Gc { at, .. } => *at,
        }
    }

    /// Parses the one-line text form produced by `Display`.
    pub fn parse_line(line: &str) -> Result<Self, ControlError> {
        let bad = || ControlError::BadCommand(line.to_string());
        let words: Vec<&str> = line.split_whitespace().collect();
        let ip = |i: usize| -> Result<SwitchId, ControlError> { words.get(i).and_then(|w| w.parse().ok()).ok_or_else(bad) };
        let num = |i: usize| -> Result<u64, ControlError> { words.get(i).and_then(|w| w.parse().ok()).ok_or_else(bad) };
        let key = |i: usize| -> Result<Key, ControlError> { words.get(i).and_then(|w| Key::from_hex(w)).ok_or_else(bad) };
        let group = |i: usize| -> Result<Option<GroupId>, ControlError> {
            match words.get(i) {
                Some(&"*") => Ok(None),
                Some(w) => w.parse().map(Some).map_err(|_| bad()),
                None => Err(bad()),
            }
        };
        let arity = |n: usize| if words.len() == n { Ok(()) } else { Err(bad()) };
        let at = ip(1)?;
        let cmd = match words[0] {
            "status" => match words.get(2) {
                Some(&"alive") => {
                    arity(3)?;
                    ControlCommand::SetStatus { at, status: SwitchStatus::Alive }
                }
                Some(&"failed") => {
                    arity(3)?;
                    ControlCommand::SetStatus { at, status: SwitchStatus::Failed }
                }
                Some(&"recovered") => {
                    arity(5)?;
                    ControlCommand::SetStatus {
                        at,
                        status: SwitchStatus::Recovered {
                            write_fwd: ip(3)?,
                            read_fwd: ip(4)?,
                        },
                    }
                }
                _ => return Err(bad()),
            },
            "rule" => {
                arity(6)?;
                let action = match words[5] {
                    "bypass" => RuleAction::Bypass,
                    "stop" => RuleAction::Stop,
                    w => RuleAction::Redirect(w.strip_prefix("redirect:").and_then(|v| v.parse().ok()).ok_or_else(bad)?),
                };
                ControlCommand::InstallRule {
                    at,
                    rule: Rule {
                        match_dst: ip(2)?,
                        group: group(3)?,
                        priority: num(4)? as u8,
                        action,
                    },
                }
            }
            "unrule" => {
                arity(5)?;
                ControlCommand::RemoveRule {
                    at,
                    match_dst: ip(2)?,
                    group: group(3)?,
                    priority: num(4)? as u8,
                }
            }
            "stop" | "unstop" => {
                arity(4)?;
                let (failed, group) = (ip(2)?, num(3)? as GroupId);
                if words[0] == "stop" {
                    ControlCommand::SetStop { at, failed, group }
                } else {
                    ControlCommand::ClearStop { at, failed, group }
                }
            }
            "session" => {
                arity(3)?;
                ControlCommand::BumpSession {
                    at,
                    session: num(2)? as u16,
                }
            }
            "load" => {
                arity(3)?;
                let bytes = hex::decode(words[2]).map_err(|_| bad())?;
                let image = StoreImage::from_bytes(&bytes).map_err(|_| bad())?;
                ControlCommand::Load { at, image }
            }
            "insert" => {
                arity(4)?;
                ControlCommand::Insert {
                    at,
                    key: key(2)?,
                    value: hex::decode(words[3]).map_err(|_| bad())?,
                }
            }
            "tombstone" => {
                arity(3)?;
                ControlCommand::Tombstone { at, key: key(2)? }
            }
            "gc" => {
                arity(3)?;
                ControlCommand::Gc { at, key: key(2)? }
            }
            _ => return Err(bad()),
        };
        Ok(cmd)
    }
}

impl fmt::Display for ControlCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let group = |g: &Option<GroupId>| g.map_or("*".to_string(), |g| g.to_string());
        match self {
            ControlCommand::SetStatus { at, status } => match status {
                SwitchStatus::Alive => write!(f, "status {at} alive"),
                SwitchStatus::Failed => write!(f, "status {at} failed"),
                SwitchStatus::Recovered { write_fwd, read_fwd } => {
                    write!(f, "status {at} recovered {write_fwd} {read_fwd}")
                }
            },
            ControlCommand::InstallRule { at, rule } => {
                let action = match rule.action {
                    RuleAction::Bypass => "bypass".to_string(),
                    RuleAction::Stop => "stop".to_string(),
                    RuleAction::Redirect(to) => format!("redirect:{to}"),
                };
                write!(f, "rule {at} {} {} {} {action}", rule.match_dst, group(&rule.group), rule.priority)
            }
            ControlCommand::RemoveRule { at, match_dst, group: g, priority } => {
                write!(f, "unrule {at} {match_dst} {} {priority}", group(g))
            }
            ControlCommand::SetStop { at, failed, group } => write!(f, "stop {at} {failed} {group}"),
            ControlCommand::ClearStop { at, failed, group } => write!(f, "unstop {at} {failed} {group}"),
            ControlCommand::BumpSession { at, session } => write!(f, "session {at} {session}"),
            ControlCommand::Load { at, image } => write!(f, "load {at} {}", hex::encode(image.to_bytes())),
            ControlCommand::Insert { at, key, value } => write!(f, "insert {at} {} {}", key.to_hex(), hex::encode(value)),
            ControlCommand::Tombstone { at, key } => write!(f, "tombstone {at} {}", key.to_hex()),
            ControlCommand::Gc { at, key } => write!(f, "gc {at} {}", key.to_hex()),
        }
    }
}

/// Applies one command to a switch. Returns the packets a cleared stop
/// released, which the caller must route onward from that switch.
pub fn apply_to_switch(sw: &mut SwitchState, cmd: ControlCommand) -> Result<Vec<Envelope>, ControlError> {
    match cmd {
        ControlCommand::SetStatus { status, .. } => sw.set_status(status),
        ControlCommand::InstallRule { rule, .. } => sw.install_rule(rule),
        ControlCommand::RemoveRule {
            match_dst, group, priority, ..
        } => {
            sw.remove_rule(match_dst, group, priority);
        }
        ControlCommand::SetStop { failed, group, .. } => sw.set_stop(failed, group),
        ControlCommand::ClearStop { failed, group, .. } => return Ok(sw.clear_stop(failed, group)),
        ControlCommand::BumpSession { session, .. } => sw.bump_session(session),
        ControlCommand::Load { image, .. } => sw.store.merge(&image)?,
        ControlCommand::Insert { key, value, .. } => {
            sw.store.insert_index(key, &value)?;
        }
        ControlCommand::Tombstone { key, .. } => {
            let loc = sw.store.lookup(&key)?;
            sw.store.tombstone(loc)?;
        }
        ControlCommand::Gc { key, .. } => sw.store.gc(&key)?,
    }
    Ok(Vec::new())
}

/// Where controller commands go.
pub trait SwitchControl {
    fn apply(&mut self, cmd: ControlCommand) -> Result<(), ControlError>;
    fn snapshot_keys(&mut self, at: SwitchId, keys: &[Key]) -> Result<StoreImage, ControlError>;
    fn is_alive(&mut self, at: SwitchId) -> bool;
    /// Lets the data plane run for `micros` before the next command.
    fn wait(&mut self, micros: u64);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Presync,
    Stopped,
    Activated,
}

/// Staged recovery of one failed switch onto one replacement, one virtual
/// group at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryPlan {
    pub failed: SwitchId,
    pub replacement: SwitchId,
    pub groups: Vec<GroupId>,
    /// Index into `groups` of the group being recovered.
    pub cursor: usize,
    /// Last phase completed for the current group, if any.
    pub phase: Option<Phase>,
    pub new_head_session: Option<u16>,
    /// `(group, phase)` in completion order.
    pub log: Vec<(GroupId, Phase)>,
}

impl RecoveryPlan {
    pub fn is_done(&self) -> bool {
        self.cursor >= self.groups.len()
    }

    pub fn current_group(&self) -> Option<GroupId> {
        self.groups.get(self.cursor).copied()
    }
}

/// Tunables of the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControllerConfig {
    /// How long a stop is held before the final sync, at least the longest
    /// path delay so in-flight updates land first.
    pub drain_us: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { drain_us: 1_000 }
    }
}

#[derive(Debug, Clone)]
pub struct Controller {
    ring: Ring,
    topology: Topology,
    config: ControllerConfig,
    sessions: u16,
    status: BTreeMap<SwitchId, SwitchStatus>,
    failed_over: BTreeSet<SwitchId>,
    replaced: BTreeMap<(SwitchId, GroupId), SwitchId>,
    keys: BTreeSet<Key>,
    /// Skip the session bump for a replacement head.
    pub skip_recovery_bump: bool,
}

impl Controller {
    pub fn new(ring: Ring, topology: Topology, config: ControllerConfig) -> Self {
        let status = ring.all_switches().chain(topology.switches()).map(|s| (s, SwitchStatus::Alive)).collect();
        Controller {
            ring,
            topology,
            config,
            sessions: 0,
            status,
            failed_over: BTreeSet::new(),
            replaced: BTreeMap::new(),
            keys: BTreeSet::new(),
            skip_recovery_bump: false,
        }
    }

    pub fn ring(&self) -> &Ring {
        &self.ring
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn keys(&self) -> &BTreeSet<Key> {
        &self.keys
    }

    pub fn status(&self, s: SwitchId) -> Option<SwitchStatus> {
        self.status.get(&s).copied()
    }

    pub fn statuses(&self) -> &BTreeMap<SwitchId, SwitchStatus> {
        &self.status
    }

    pub fn session_counter(&self) -> u16 {
        self.sessions
    }

    fn known(&self, s: SwitchId) -> Result<(), ControlError> {
        if self.status.contains_key(&s) {
            Ok(())
        } else {
            Err(ControlError::UnknownSwitch(s))
        }
    }

    /// Switch currently playing member `m`'s role for `group`, if any.
    fn stand_in(&self, m: SwitchId, group: GroupId) -> Option<SwitchId> {
        match self.status.get(&m) {
            Some(SwitchStatus::Alive) => Some(m),
            _ => self.replaced.get(&(m, group)).copied(),
        }
    }

    /// The chain that currently serves `key`: failed members are replaced by
    /// their activated stand-in or skipped.
    pub fn effective_chain(&self, key: &Key) -> Vec<SwitchId> {
        let group = self.ring.group_of_key(key);
        self.ring
            .chain_for_key(key)
            .iter()
            .filter_map(|&m| self.stand_in(m, group))
            .collect()
    }

    /// Stops the switch.
    pub fn mark_failed(&mut self, failed: SwitchId, ctl: &mut impl SwitchControl) -> Result<(), ControlError> {
        self.known(failed)?;
        self.status.insert(failed, SwitchStatus::Failed);
        ctl.apply(ControlCommand::SetStatus {
            at: failed,
            status: SwitchStatus::Failed,
        })
    }

    /// Installs a bypass rule for `failed` on each of its physical neighbors
    /// and gives the next member of every chain `failed` headed a fresh
    /// session. Returns the rules installed.
    pub fn failover(&mut self, failed: SwitchId, ctl: &mut impl SwitchControl) -> Result<Vec<(SwitchId, Rule)>, ControlError> {
        self.known(failed)?;
        if self.status[&failed] == SwitchStatus::Alive {
            self.mark_failed(failed, ctl)?;
        }
        let neighbors: Vec<SwitchId> = self.topology.neighbors(failed)?.iter().copied().collect();
        let first_time = self.failed_over.insert(failed);
        if first_time {
            let mut new_heads = BTreeSet::new();
            for seg in 0..self.ring.vnode_count() {
                let chain = self.ring.chain_of_segment(seg);
                if chain[0] == failed {
                    if let Some(&next) = chain[1..].iter().find(|&&m| self.status[&m] == SwitchStatus::Alive) {
                        new_heads.insert(next);
                    }
                }
            }
            if !new_heads.is_empty() {
                let session = self.next_session();
                for at in new_heads {
                    ctl.apply(ControlCommand::BumpSession { at, session })?;
                }
            }
        }
        let mut installed = Vec::new();
        for n in neighbors {
            if self.status.get(&n) != Some(&SwitchStatus::Alive) {
                continue;
            }
            let rule = Rule::failover(failed);
            ctl.apply(ControlCommand::InstallRule { at: n, rule })?;
            installed.push((n, rule));
        }
        Ok(installed)
    }

    fn next_session(&mut self) -> u16 {
        self.sessions += 1;
        self.sessions
    }

    fn affected_keys(&self, failed: SwitchId, group: GroupId) -> Vec<Key> {
        self.keys
            .iter()
            .filter(|k| self.ring.group_of_key(k) == group && self.ring.chain_for_key(k).contains(&failed))
            .copied()
            .collect()
    }

    /// Live switch holding the freshest copy `new_sw` may take for `key`:
    /// the next member after `failed`, or the previous one when `failed` is
    /// the tail.
    pub fn reference_for(&self, failed: SwitchId, key: &Key) -> Result<SwitchId, ControlError> {
        let group = self.ring.group_of_key(key);
        let chain = self.ring.chain_for_key(key);
        let i = chain.iter().position(|&m| m == failed).ok_or(ControlError::NoReference(*key))?;
        chain[i + 1..]
            .iter()
            .find_map(|&m| self.stand_in(m, group))
            .or_else(|| chain[..i].iter().rev().find_map(|&m| self.stand_in(m, group)))
            .ok_or(ControlError::NoReference(*key))
    }

    /// Validates inputs and prepares a plan. Bumps the replacement's session
    /// if it will head any chain.
    pub fn begin_recovery(&mut self, failed: SwitchId, new_sw: SwitchId, ctl: &mut impl SwitchControl) -> Result<RecoveryPlan, ControlError> {
        self.known(failed)?;
        self.known(new_sw)?;
        if !self.failed_over.contains(&failed) {
            return Err(ControlError::NotFailed(failed));
        }
        let not_eligible = |reason| ControlError::NotEligible { failed, new_sw, reason };
        if self.status[&new_sw] != SwitchStatus::Alive || !ctl.is_alive(new_sw) {
            return Err(not_eligible("replacement is not alive"));
        }
        let mut groups = BTreeSet::new();
        let mut heads = false;
        for key in &self.keys {
            let chain = self.ring.chain_for_key(key);
            if !chain.contains(&failed) {
                continue;
            }
            if chain.contains(&new_sw) {
                return Err(not_eligible("replacement already serves an affected chain"));
            }
            groups.insert(self.ring.group_of_key(key));
            heads |= chain[0] == failed;
        }
        let mut new_head_session = None;
        if heads && !self.skip_recovery_bump {
            let session = self.next_session();
            ctl.apply(ControlCommand::BumpSession { at: new_sw, session })?;
            new_head_session = Some(session);
        }
        Ok(RecoveryPlan {
            failed,
            replacement: new_sw,
            groups: groups.into_iter().collect(),
            cursor: 0,
            phase: None,
            new_head_session,
            log: Vec::new(),
        })
    }

    /// Advances the plan by one phase of the current group.
    pub fn step(&mut self, plan: &mut RecoveryPlan, ctl: &mut impl SwitchControl) -> Result<(), ControlError> {
        let Some(group) = plan.current_group() else {
            return Ok(());
        };
        let (failed, new_sw) = (plan.failed, plan.replacement);
        if !ctl.is_alive(new_sw) {
            if plan.phase == Some(Phase::Stopped) {
                for n in self.live_neighbors(failed)? {
                    ctl.apply(ControlCommand::ClearStop { at: n, failed, group })?;
                }
            }
            return Err(ControlError::ReplacementFailedMidway { new_sw, group });
        }
        let next = match plan.phase {
            None | Some(Phase::Activated) => {
                self.sync_group(failed, new_sw, group, ctl)?;
                Phase::Presync
            }
            Some(Phase::Presync) => {
                for n in self.live_neighbors(failed)? {
                    ctl.apply(ControlCommand::SetStop { at: n, failed, group })?;
                }
                ctl.wait(self.config.drain_us);
                if !ctl.is_alive(new_sw) {
                    plan.phase = Some(Phase::Stopped);
                    return self.step(plan, ctl);
                }
                self.sync_group(failed, new_sw, group, ctl)?;
                Phase::Stopped
            }
            Some(Phase::Stopped) => {
                let neighbors = self.live_neighbors(failed)?;
                for &n in &neighbors {
                    ctl.apply(ControlCommand::InstallRule {
                        at: n,
                        rule: Rule::redirect(failed, group, new_sw),
                    })?;
                }
                self.replaced.insert((failed, group), new_sw);
                for &n in &neighbors {
                    ctl.apply(ControlCommand::ClearStop { at: n, failed, group })?;
                }
                Phase::Activated
            }
        };
        plan.log.push((group, next));
        if next == Phase::Activated {
            plan.cursor += 1;
            plan.phase = None;
            if plan.is_done() {
                self.status.insert(
                    failed,
                    SwitchStatus::Recovered {
                        write_fwd: new_sw,
                        read_fwd: new_sw,
                    },
                );
            }
        } else {
            plan.phase = Some(next);
        }
        Ok(())
    }

    /// Runs a whole recovery.
    pub fn recover(&mut self, failed: SwitchId, new_sw: SwitchId, ctl: &mut impl SwitchControl) -> Result<RecoveryPlan, ControlError> {
        let mut plan = self.begin_recovery(failed, new_sw, ctl)?;
        while !plan.is_done() {
            self.step(&mut plan, ctl)?;
        }
        if plan.groups.is_empty() {
            self.status.insert(
                failed,
                SwitchStatus::Recovered {
                    write_fwd: new_sw,
                    read_fwd: new_sw,
                },
            );
        }
        Ok(plan)
    }

    fn live_neighbors(&self, s: SwitchId) -> Result<Vec<SwitchId>, ControlError> {
        Ok(self
            .topology
            .neighbors(s)?
            .iter()
            .filter(|n| self.status.get(n) == Some(&SwitchStatus::Alive))
            .copied()
            .collect())
    }

    fn sync_group(&self, failed: SwitchId, new_sw: SwitchId, group: GroupId, ctl: &mut impl SwitchControl) -> Result<(), ControlError> {
        let mut by_ref: BTreeMap<SwitchId, Vec<Key>> = BTreeMap::new();
        for key in self.affected_keys(failed, group) {
            by_ref.entry(self.reference_for(failed, &key)?).or_default().push(key);
        }
        for (r, keys) in by_ref {
            let image = ctl.snapshot_keys(r, &keys)?;
            ctl.apply(ControlCommand::Load { at: new_sw, image })?;
        }
        Ok(())
    }

    /// Installs `key` on its chain tail first, so no reader ever sees an
    /// entry upstream that is missing downstream. On failure the members
    /// already written are rolled back.
    pub fn admin_insert(&mut self, key: Key, value: &[u8], ctl: &mut impl SwitchControl) -> Result<(), ControlError> {
        let chain = self.effective_chain(&key);
        let mut done = Vec::new();
        for &at in chain.iter().rev() {
            let r = ctl.apply(ControlCommand::Insert {
                at,
                key,
                value: value.to_vec(),
            });
            if let Err(e) = r {
                // undo head side first so the suffix property holds throughout
                for at in done.into_iter().rev() {
                    let _ = ctl.apply(ControlCommand::Gc { at, key });
                }
                return Err(e);
            }
            done.push(at);
        }
        self.keys.insert(key);
        Ok(())
    }

    /// Tombstones `key` head first, then garbage-collects it everywhere.
    pub fn admin_delete(&mut self, key: Key, ctl: &mut impl SwitchControl) -> Result<(), ControlError> {
        let chain = self.effective_chain(&key);
        for &at in &chain {
            ctl.apply(ControlCommand::Tombstone { at, key })?;
        }
        for &at in &chain {
            ctl.apply(ControlCommand::Gc { at, key })?;
        }
        self.keys.remove(&key);
        Ok(())
    }

    /// Records a key that was loaded onto the switches out of band.
    pub fn register_key(&mut self, key: Key) {
        self.keys.insert(key);
    }
}

/// Spreads the failed switch's virtual nodes over live switches at random,
/// never onto a switch already in a chain that virtual node takes part in.
pub fn assign_replacements(
    failed: SwitchId,
    ring: &Ring,
    live: &BTreeSet<SwitchId>,
    seed: u64,
) -> Result<BTreeMap<u32, SwitchId>, ControlError> {
    let points = ring.points();
    let len = points.len();
    // chains each failed virtual node contributes a member to
    let mut chains_of: BTreeMap<usize, BTreeSet<SwitchId>> = BTreeMap::new();
    for seg in 0..len {
        let chain = ring.chain_of_segment(seg);
        if !chain.contains(&failed) {
            continue;
        }
        let mut seen = Vec::new();
        for step in 0..len {
            let i = (seg + step) % len;
            let owner = points[i].owner;
            if seen.contains(&owner) {
                continue;
            }
            seen.push(owner);
            if owner == failed {
                chains_of.entry(i).or_default().extend(chain.iter().copied());
                break;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        if p.owner != failed {
            continue;
        }
        let taken = chains_of.get(&i).cloned().unwrap_or_default();
        let eligible: Vec<SwitchId> = live.iter().filter(|s| **s != failed && !taken.contains(s)).copied().collect();
        let pick = eligible.choose(&mut rng).ok_or(ControlError::NoEligibleSwitch(p.id))?;
        out.insert(p.id, *pick);
    }
    Ok(out)
}
