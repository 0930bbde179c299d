//! Scenario runner: a network, a controller, a workload and a fault
//! schedule, stepped deterministically from one seed.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::client::history::check_consistency;
use crate::client::lock::{hot_items, FREE};
use crate::client::lock::TxnClient;
use crate::client::ClientError;
use crate::control::{testbed_switch, ControlError, Controller, ControllerConfig, RecoveryPlan, SwitchControl};
use crate::placement::SwitchId;
use crate::wire::Key;

use super::check::Violation;
use super::net::{Driver, KvWorkload, Network};
use super::report::{Milestone, RunReport};
use super::scenario::{FaultAction, Mutation, ScenarioConfig, ScenarioError, WorkloadKind};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trigger {
    At(u64),
    AfterOps(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    Fail(SwitchId),
    Failover(SwitchId),
    Recover(SwitchId, SwitchId),
}

/// Upper bound on handled events, a guard against runaway scenarios.
const MAX_EVENTS: u64 = 200_000_000;

#[derive(Debug)]
pub struct Simulator {
    pub net: Network,
    pub controller: Controller,
    name: String,
    seed: u64,
    detect_us: u64,
    pending: Vec<(Trigger, Action)>,
    failed_over: BTreeSet<SwitchId>,
    timeline: Vec<(u64, Milestone)>,
}

impl Simulator {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Result<Self, SimError> {
        cfg.validate()?;
        let ring = cfg.build_ring()?;
        let topology = cfg.topology();
        let mut net = Network::new(topology.clone(), Arc::new(ring.clone()), cfg.links, seed);
        let mut controller = Controller::new(ring, topology, ControllerConfig { drain_us: cfg.drain_us() });
        let w = &cfg.workload;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));

        match w.kind {
            WorkloadKind::Kv => {
                let keys: Vec<Key> = (0..w.keys).map(Key::from_index).collect();
                net.install_keys(&keys, &[])?;
                net.set_kv_workload(KvWorkload {
                    ops: w.ops,
                    write_ratio: w.write_ratio,
                    value_size: w.value_size,
                    keys,
                    final_reads: w.final_reads,
                });
                for _ in 0..w.clients {
                    net.add_client(cfg.client.timeout_us, cfg.client.max_retries, Driver::Kv)?;
                }
            }
            WorkloadKind::Locks => {
                let hot: Vec<Key> = (0..hot_items(w.contention_index) as u64).map(Key::from_index).collect();
                let cold: Vec<Key> = (0..w.cold_locks).map(|i| Key::from_index(1_000_000 + i)).collect();
                net.install_keys(&hot, &FREE)?;
                net.install_keys(&cold, &FREE)?;
                net.set_txn_target(w.ops);
                for c in 0..w.clients {
                    let txn_rng = ChaCha8Rng::seed_from_u64(rand::Rng::gen(&mut rng));
                    let txn = TxnClient::new(c + 1, hot.clone(), cold.clone(), w.cold_per_txn, txn_rng);
                    net.add_client(cfg.client.timeout_us, cfg.client.max_retries, Driver::Txn(Box::new(txn)))?;
                }
            }
        }
        for &k in net.keys() {
            controller.register_key(k);
        }
        for c in 0..net.client_count() {
            // stagger starts so clients do not move in lockstep
            net.kick(c, c as u64 % 17);
        }
        match cfg.mutation {
            Mutation::None => {}
            Mutation::DropSeqGuard => {
                let ids: Vec<SwitchId> = net.switches().map(|s| s.ip).collect();
                for s in ids {
                    net.switch_mut(s).expect("listed").faults.no_seq_guard = true;
                }
            }
            Mutation::SkipSessionBump => controller.skip_recovery_bump = true,
        }

        let pending = cfg
            .faults
            .iter()
            .map(|f| {
                let trigger = match (f.at_us, f.after_ops) {
                    (Some(t), _) => Trigger::At(t),
                    (None, Some(n)) => Trigger::AfterOps(n),
                    (None, None) => unreachable!("validated"),
                };
                let action = match f.action {
                    FaultAction::Fail => Action::Fail(testbed_switch(f.switch)),
                    FaultAction::Recover => Action::Recover(testbed_switch(f.switch), testbed_switch(f.replacement.expect("validated"))),
                };
                (trigger, action)
            })
            .collect();

        Ok(Simulator {
            net,
            controller,
            name: cfg.name.clone(),
            seed,
            detect_us: cfg.controller.detect_us,
            pending,
            failed_over: BTreeSet::new(),
            timeline: Vec::new(),
        })
    }

    pub fn timeline(&self) -> &[(u64, Milestone)] {
        &self.timeline
    }

    fn ready(&self, i: usize, horizon: Option<u64>) -> bool {
        let (trigger, action) = self.pending[i];
        if let Action::Recover(failed, _) = action {
            if !self.failed_over.contains(&failed) {
                return false;
            }
        }
        match trigger {
            Trigger::At(t) => horizon.is_none_or(|h| t <= h),
            Trigger::AfterOps(n) => self.net.metrics_ops_completed() >= n,
        }
    }

    /// Index of the pending action that should run before the next event.
    fn due(&self) -> Option<usize> {
        let horizon = self.net.next_event_time();
        let mut best: Option<(u64, usize)> = None;
        for i in 0..self.pending.len() {
            if !self.ready(i, horizon) {
                continue;
            }
            let when = match self.pending[i].0 {
                Trigger::At(t) => t,
                Trigger::AfterOps(_) => self.net.now(),
            };
            if best.is_none_or(|(w, _)| when < w) {
                best = Some((when, i));
            }
        }
        best.map(|(_, i)| i)
    }

    /// Runs the scenario to completion.
    pub fn run(mut self) -> Result<RunReport, SimError> {
        let mut events = 0u64;
        while self.net.violation().is_none() && events < MAX_EVENTS {
            if let Some(i) = self.due() {
                let (trigger, action) = self.pending.remove(i);
                if let Trigger::At(t) = trigger {
                    self.net.run_until(t);
                }
                self.execute(action)?;
                continue;
            }
            if !self.net.step() {
                break;
            }
            events += 1;
        }
        Ok(self.finish())
    }

    fn execute(&mut self, action: Action) -> Result<(), SimError> {
        let now = self.net.now();
        match action {
            Action::Fail(s) => {
                self.fail(s)?;
                self.pending.push((Trigger::At(now + self.detect_us), Action::Failover(s)));
            }
            Action::Failover(s) => self.failover(s)?,
            Action::Recover(failed, replacement) => {
                self.recover(failed, replacement)?;
            }
        }
        Ok(())
    }

    /// Crashes a switch now.
    pub fn fail(&mut self, s: SwitchId) -> Result<(), SimError> {
        self.controller.mark_failed(s, &mut self.net)?;
        self.timeline.push((self.net.now(), Milestone::Failed(s)));
        Ok(())
    }

    /// Installs the neighbor bypass for a failed switch.
    pub fn failover(&mut self, s: SwitchId) -> Result<(), SimError> {
        self.controller.failover(s, &mut self.net)?;
        self.failed_over.insert(s);
        self.timeline.push((self.net.now(), Milestone::FailedOver(s)));
        Ok(())
    }

    /// Starts a recovery; drive it with [`Simulator::step_recovery`].
    pub fn begin_recovery(&mut self, failed: SwitchId, replacement: SwitchId) -> Result<RecoveryPlan, SimError> {
        let plan = self.controller.begin_recovery(failed, replacement, &mut self.net)?;
        self.timeline.push((self.net.now(), Milestone::RecoveryStarted { failed, replacement }));
        Ok(plan)
    }

    /// One controller step, followed by a full chain-order check.
    pub fn step_recovery(&mut self, plan: &mut RecoveryPlan) -> Result<(), SimError> {
        self.controller.step(plan, &mut self.net)?;
        self.net.check_all_keys();
        if plan.is_done() {
            self.timeline.push((
                self.net.now(),
                Milestone::RecoveryDone {
                    failed: plan.failed,
                    replacement: plan.replacement,
                },
            ));
        }
        Ok(())
    }

    pub fn recover(&mut self, failed: SwitchId, replacement: SwitchId) -> Result<RecoveryPlan, SimError> {
        let mut plan = self.begin_recovery(failed, replacement)?;
        if plan.groups.is_empty() {
            self.timeline.push((self.net.now(), Milestone::RecoveryDone { failed, replacement }));
        }
        while !plan.is_done() && self.net.violation().is_none() {
            self.step_recovery(&mut plan)?;
        }
        Ok(plan)
    }

    /// Runs the network for `micros` of simulated time.
    pub fn run_for(&mut self, micros: u64) {
        self.net.wait(micros);
    }

    /// Final checks and the report.
    pub fn finish(mut self) -> RunReport {
        if self.net.violation().is_none() {
            self.net.check_all_keys();
        }
        if self.net.violation().is_none() {
            self.net.check_acked_at_tails();
        }
        let history = self.net.history();
        if self.net.violation().is_none() {
            if let Err(v) = check_consistency(&history) {
                self.net.report_violation(Violation::Consistency(v));
            }
        }
        RunReport {
            scenario: self.name,
            seed: self.seed,
            metrics: self.net.metrics(),
            history,
            final_state: self.net.final_state(),
            timeline: self.timeline,
            violation: self.net.violation().cloned(),
            trace: self.net.trace(),
        }
    }
}

/// Builds and runs a scenario.
pub fn run(cfg: &ScenarioConfig, seed: u64) -> Result<RunReport, SimError> {
    Simulator::new(cfg, seed)?.run()
}
