//! The discrete-event network: switches, client hosts, lossy links, and the
//! checkers that watch every step.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::history::{HistoryEvent, HistoryViolation};
use crate::client::lock::TxnClient;
use crate::client::{Agent, AgentConfig, ClientError, Completion, OpResult, Request, TimeoutAction};
use crate::control::{apply_to_switch, ControlCommand, ControlError, SwitchControl, Topology};
use crate::dataplane::{client_addr, Delivery, MAX_REWRITES, Emit, Envelope, Intercept, RuleAction, SwitchState, SwitchStatus};
use crate::placement::{hash64, GroupId, Ring, SwitchId};
use crate::store::StoreImage;
use crate::wire::{Key, OpCode, Packet, Version};

use super::check::{self, Violation};
use super::report::{percentile, FinalEntry, Metrics};
use super::scenario::LinkModel;

/// Events kept for the trace printed with a violation.
pub const TRACE_CAPACITY: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    /// A packet reaches a switch.
    Arrive { at: SwitchId, env: Envelope },
    /// A packet reaches a client host.
    Deliver { client: usize, env: Envelope },
    Timer { client: usize, req_id: u32, attempt: u32 },
    Issue { client: usize },
}

#[derive(Debug)]
struct Scheduled {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// One line of the event trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub time_us: u64,
    pub what: &'static str,
    pub at: Ipv4Addr,
    pub op: OpCode,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub client_id: u32,
    pub req_id: u32,
    pub version: Version,
    pub sc: usize,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:>9} {:<10} at {:<10} {:<6} {} -> {} client {} req {} ver {} sc {}",
            self.time_us,
            self.what,
            self.at,
            self.op.name(),
            self.src,
            self.dst,
            self.client_id,
            self.req_id,
            self.version,
            self.sc
        )
    }
}

/// What feeds a client its requests.
#[derive(Debug, Clone)]
pub enum Driver {
    /// The caller starts requests; completions are collected.
    Manual(Vec<Completion>),
    /// Random reads and writes drawn from the network's key-value workload.
    Kv,
    /// Two-phase-locking transactions.
    Txn(Box<TxnClient>),
}

#[derive(Debug, Clone)]
struct ClientSlot {
    agent: Agent,
    driver: Driver,
    /// Request in flight and its attempt number.
    current: Option<(u32, u32)>,
    current_is_final: bool,
    believed: BTreeSet<Key>,
}

/// Random key-value traffic shared by all `Driver::Kv` clients.
#[derive(Debug, Clone, PartialEq)]
pub struct KvWorkload {
    pub ops: u64,
    pub write_ratio: f64,
    pub value_size: usize,
    pub keys: Vec<Key>,
    /// Read every written key once the workload drains.
    pub final_reads: bool,
}

#[derive(Debug, Clone, Default)]
struct KvProgress {
    issued: u64,
    completed: u64,
    final_queue: VecDeque<Key>,
    final_started: bool,
}

#[derive(Debug, Default, Clone)]
struct Stats {
    ops_started: u64,
    ops_completed: u64,
    ok: u64,
    not_found: u64,
    cas_failed: u64,
    timeouts: u64,
    retries: u64,
    packets_sent: u64,
    packets_lost: u64,
    packets_duplicated: u64,
    packets_reordered: u64,
    final_reads: u64,
    final_read_timeouts: u64,
    unroutable: u64,
}

type DelayHook = Box<dyn FnMut(Ipv4Addr, &Envelope) -> Option<u64>>;

pub struct Network {
    now: u64,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    switches: BTreeMap<SwitchId, SwitchState>,
    topology: Topology,
    ring: Arc<Ring>,
    links: LinkModel,
    rng: ChaCha8Rng,
    workload_rng: ChaCha8Rng,
    clients: Vec<ClientSlot>,
    kv: Option<KvWorkload>,
    kv_progress: KvProgress,
    txn_target: Option<u64>,
    keys: Vec<Key>,
    /// Replacement activated for `(failed, group)`, learned from redirect rules.
    activated: BTreeMap<(SwitchId, GroupId), SwitchId>,
    active_stops: usize,
    started_in_stop: HashSet<(u32, u32)>,
    blocked: HashSet<(u32, u32)>,
    last_seen: HashMap<(u32, Key), (Version, u32)>,
    max_acked: BTreeMap<Key, Version>,
    stamps: HashMap<(Key, Version), u64>,
    lock_owners: HashMap<Key, u32>,
    violation: Option<Violation>,
    trace: VecDeque<TraceRecord>,
    latencies: Vec<u64>,
    stats: Stats,
    to_controller: Vec<Packet>,
    delay_hook: Option<DelayHook>,
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("now", &self.now)
            .field("switches", &self.switches.keys().collect::<Vec<_>>())
            .field("clients", &self.clients.len())
            .field("pending_events", &self.queue.len())
            .finish_non_exhaustive()
    }
}

impl Network {
    /// A network with one switch per topology node and ring member.
    pub fn new(topology: Topology, ring: Arc<Ring>, links: LinkModel, seed: u64) -> Self {
        let switches = topology
            .switches()
            .chain(ring.all_switches())
            .map(|s| (s, SwitchState::new(s)))
            .collect();
        Network {
            now: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            switches,
            topology,
            ring,
            links,
            rng: ChaCha8Rng::seed_from_u64(seed),
            workload_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fc1_1e47),
            clients: Vec::new(),
            kv: None,
            kv_progress: KvProgress::default(),
            txn_target: None,
            keys: Vec::new(),
            activated: BTreeMap::new(),
            active_stops: 0,
            started_in_stop: HashSet::new(),
            blocked: HashSet::new(),
            last_seen: HashMap::new(),
            max_acked: BTreeMap::new(),
            stamps: HashMap::new(),
            lock_owners: HashMap::new(),
            violation: None,
            trace: VecDeque::with_capacity(TRACE_CAPACITY),
            latencies: Vec::new(),
            stats: Stats::default(),
            to_controller: Vec::new(),
            delay_hook: None,
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn ring(&self) -> &Arc<Ring> {
        &self.ring
    }

    pub fn switch(&self, s: SwitchId) -> Option<&SwitchState> {
        self.switches.get(&s)
    }

    pub fn switch_mut(&mut self, s: SwitchId) -> Option<&mut SwitchState> {
        self.switches.get_mut(&s)
    }

    pub fn switches(&self) -> impl Iterator<Item = &SwitchState> + '_ {
        self.switches.values()
    }

    pub fn keys(&self) -> &[Key] {
        &self.keys
    }

    pub fn violation(&self) -> Option<&Violation> {
        self.violation.as_ref()
    }

    pub fn controller_mailbox(&self) -> &[Packet] {
        &self.to_controller
    }

    pub fn max_acked(&self) -> &BTreeMap<Key, Version> {
        &self.max_acked
    }

    /// Overrides the delay of chosen hops. The hook sees the sending node
    /// and the packet; `None` keeps the link model's delay.
    pub fn set_delay_hook(&mut self, hook: impl FnMut(Ipv4Addr, &Envelope) -> Option<u64> + 'static) {
        self.delay_hook = Some(Box::new(hook));
    }

    /// Loads `keys` with `value` onto every member of their chains.
    pub fn install_keys(&mut self, keys: &[Key], value: &[u8]) -> Result<(), ControlError> {
        for key in keys {
            for &s in self.ring.chain_for_key(key) {
                let sw = self.switches.get_mut(&s).ok_or(ControlError::UnknownSwitch(s))?;
                sw.store.insert_index(*key, value)?;
            }
            self.keys.push(*key);
        }
        Ok(())
    }

    pub fn set_kv_workload(&mut self, w: KvWorkload) {
        self.kv = Some(w);
    }

    /// Stop issuing transactions once this many have committed in total.
    pub fn set_txn_target(&mut self, committed: u64) {
        self.txn_target = Some(committed);
    }

    /// Adds a client host; returns its index. Client ids start at 1.
    pub fn add_client(&mut self, timeout_us: u64, max_retries: u32, driver: Driver) -> Result<usize, ClientError> {
        let index = self.clients.len();
        let config = AgentConfig {
            client_id: index as u32 + 1,
            timeout_us,
            max_retries,
        };
        self.clients.push(ClientSlot {
            agent: Agent::new(config, self.ring.clone())?,
            driver,
            current: None,
            current_is_final: false,
            believed: BTreeSet::new(),
        });
        Ok(index)
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn client_agent(&self, index: usize) -> &Agent {
        &self.clients[index].agent
    }

    /// Completions collected by a manual client.
    pub fn manual_completions(&self, index: usize) -> &[Completion] {
        match &self.clients[index].driver {
            Driver::Manual(done) => done,
            _ => &[],
        }
    }

    /// Lets a driven client start issuing after `delay_us`.
    pub fn kick(&mut self, client: usize, delay_us: u64) {
        self.schedule(delay_us, Event::Issue { client });
    }

    /// Starts a request on a manual client.
    pub fn start(&mut self, client: usize, request: Request) -> Result<u32, ClientError> {
        self.begin(client, request, false)
    }

    fn begin(&mut self, client: usize, request: Request, is_final: bool) -> Result<u32, ClientError> {
        let now = self.now;
        let slot = &mut self.clients[client];
        let (req_id, env) = slot.agent.start(request, now)?;
        slot.current = Some((req_id, 1));
        slot.current_is_final = is_final;
        let id = (slot.agent.client_id(), req_id);
        if is_final {
            self.stats.final_reads += 1;
        } else {
            self.stats.ops_started += 1;
            if self.active_stops > 0 {
                self.started_in_stop.insert(id);
            }
        }
        self.send_from_client(client, req_id, 1, env);
        Ok(req_id)
    }

    fn send_from_client(&mut self, client: usize, req_id: u32, attempt: u32, env: Envelope) {
        let timeout = self.clients[client].agent.config().timeout_us;
        self.record("send", env.src, &env);
        let access = self.topology.access_switch();
        self.send_hop(env.src, Event::Arrive { at: access, env });
        self.schedule(timeout, Event::Timer { client, req_id, attempt });
    }

    fn schedule(&mut self, delay: u64, event: Event) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled {
            time: self.now + delay,
            seq,
            event,
        }));
    }

    /// One link traversal, subject to the link model.
    fn send_hop(&mut self, from: Ipv4Addr, event: Event) {
        self.stats.packets_sent += 1;
        let l = self.links;
        let env = match &event {
            Event::Arrive { env, .. } | Event::Deliver { env, .. } => env.clone(),
            _ => unreachable!("only packets cross links"),
        };
        if l.loss > 0.0 && self.rng.gen_bool(l.loss) {
            self.stats.packets_lost += 1;
            self.record("lost", from, &env);
            return;
        }
        let copies = if l.dup > 0.0 && self.rng.gen_bool(l.dup) {
            self.stats.packets_duplicated += 1;
            2
        } else {
            1
        };
        for _ in 0..copies {
            let mut delay = l.base_us + if l.jitter_us > 0 { self.rng.gen_range(0..=l.jitter_us) } else { 0 };
            if l.reorder > 0.0 && self.rng.gen_bool(l.reorder) {
                self.stats.packets_reordered += 1;
                delay += self.rng.gen_range(1..=l.reorder_extra_us.max(1));
            }
            if let Some(hook) = self.delay_hook.as_mut() {
                if let Some(d) = hook(from, &env) {
                    delay = d;
                }
            }
            self.schedule(delay, event.clone());
        }
    }

    fn record(&mut self, what: &'static str, at: Ipv4Addr, env: &Envelope) {
        if self.trace.len() == TRACE_CAPACITY {
            self.trace.pop_front();
        }
        self.trace.push_back(TraceRecord {
            time_us: self.now,
            what,
            at,
            op: env.pkt.op,
            src: env.src,
            dst: env.dst,
            client_id: env.pkt.client_id,
            req_id: env.pkt.req_id,
            version: env.pkt.version(),
            sc: env.pkt.sc(),
        });
    }

    pub fn trace(&self) -> Vec<String> {
        self.trace.iter().map(|r| r.to_string()).collect()
    }

    fn flag(&mut self, v: Violation) {
        if self.violation.is_none() {
            log::debug!("violation at {} us: {v}", self.now);
            self.violation = Some(v);
        }
    }

    /// Records a violation found outside the network, such as by a final
    /// sweep.
    pub fn report_violation(&mut self, v: Violation) {
        self.flag(v);
    }

    pub fn next_event_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(s)| s.time)
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Handles the next event. Returns false when nothing is scheduled.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(s)) = self.queue.pop() else {
            return false;
        };
        self.now = self.now.max(s.time);
        match s.event {
            Event::Arrive { at, env } => self.arrive(at, env),
            Event::Deliver { client, env } => self.deliver(client, env),
            Event::Timer { client, req_id, attempt } => self.timer(client, req_id, attempt),
            Event::Issue { client } => self.issue(client),
        }
        true
    }

    /// Runs every event up to and including time `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: u64) {
        while self.next_event_time().is_some_and(|nt| nt <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    /// Runs until no events remain or `max_events` were handled.
    pub fn run_to_idle(&mut self, max_events: u64) -> u64 {
        let mut n = 0;
        while n < max_events && self.step() {
            n += 1;
        }
        n
    }

    fn arrive(&mut self, at: SwitchId, env: Envelope) {
        if !self.switches.get(&at).is_some_and(|s| s.is_alive()) {
            self.stats.packets_lost += 1;
            self.record("dead", at, &env);
            return;
        }
        if env.dst == at {
            self.process_at(at, env);
        } else {
            self.route(at, env, 0);
        }
    }

    fn process_at(&mut self, at: SwitchId, env: Envelope) {
        self.record("process", at, &env);
        let key = env.pkt.key;
        let is_write = matches!(env.pkt.op, OpCode::Write | OpCode::Cas);
        let role = Delivery::for_packet(&env.pkt);
        let sw = self.switches.get_mut(&at).expect("known switch");
        let emits = match sw.process(env.pkt, role) {
            Ok(e) => e,
            Err(e) => {
                log::debug!("switch {at}: {e}");
                return;
            }
        };
        if is_write {
            self.after_write(at, key);
        }
        for e in emits {
            match e {
                Emit::Net(env) => self.route(at, env, 0),
                Emit::ToController(p) => self.to_controller.push(p),
            }
        }
    }

    /// A packet at switch `at` that is headed elsewhere.
    fn route(&mut self, at: SwitchId, env: Envelope, depth: usize) {
        if depth > MAX_REWRITES {
            self.stats.unroutable += 1;
            self.record("loop", at, &env);
            return;
        }
        let group = self.ring.group_of_key(&env.pkt.key);
        let ids = (env.pkt.client_id, env.pkt.req_id);
        let trace_env = env.clone();
        let sw = self.switches.get_mut(&at).expect("known switch");
        match sw.intercept(env, group) {
            Intercept::Pass(env) => self.forward(at, env),
            Intercept::Rewritten(emits) => {
                self.record("rewrite", at, &trace_env);
                for e in emits {
                    match e {
                        Emit::Net(env) if env.dst == at => self.process_at(at, env),
                        Emit::Net(env) => self.route(at, env, depth + 1),
                        Emit::ToController(p) => self.to_controller.push(p),
                    }
                }
            }
            Intercept::Held | Intercept::Dropped => {
                self.record("held", at, &trace_env);
                if self.started_in_stop.contains(&ids) {
                    self.blocked.insert(ids);
                }
            }
        }
    }

    fn client_index(&self, addr: Ipv4Addr) -> Option<usize> {
        let id = u32::from(addr);
        let i = (id as usize).checked_sub(1)?;
        (i < self.clients.len() && client_addr(id) == addr).then_some(i)
    }

    fn forward(&mut self, at: SwitchId, env: Envelope) {
        if self.switches.contains_key(&env.dst) {
            let switches = &self.switches;
            match self.topology.next_hop(at, env.dst, |s| switches.get(&s).is_some_and(|x| x.is_alive())) {
                Some(hop) => self.send_hop(at, Event::Arrive { at: hop, env }),
                None => {
                    self.stats.unroutable += 1;
                    self.record("noroute", at, &env);
                }
            }
            return;
        }
        let Some(client) = self.client_index(env.dst) else {
            self.stats.unroutable += 1;
            self.record("nohost", at, &env);
            return;
        };
        let access = self.topology.access_switch();
        if at == access {
            self.send_hop(at, Event::Deliver { client, env });
            return;
        }
        let switches = &self.switches;
        match self.topology.next_hop(at, access, |s| switches.get(&s).is_some_and(|x| x.is_alive())) {
            Some(hop) => self.send_hop(at, Event::Arrive { at: hop, env }),
            None => {
                self.stats.unroutable += 1;
                self.record("noroute", at, &env);
            }
        }
    }

    fn deliver(&mut self, client: usize, env: Envelope) {
        self.record("deliver", env.dst, &env);
        let now = self.now;
        let slot = &mut self.clients[client];
        if let Some(c) = slot.agent.on_reply(&env.pkt, now) {
            slot.current = None;
            self.complete(client, c);
        }
    }

    fn timer(&mut self, client: usize, req_id: u32, attempt: u32) {
        if self.clients[client].current != Some((req_id, attempt)) {
            return;
        }
        let now = self.now;
        match self.clients[client].agent.on_timeout(req_id, now) {
            TimeoutAction::Retry(env) => {
                self.stats.retries += 1;
                self.clients[client].current = Some((req_id, attempt + 1));
                self.send_from_client(client, req_id, attempt + 1, env);
            }
            TimeoutAction::GaveUp(c) => {
                self.clients[client].current = None;
                self.complete(client, c);
            }
            TimeoutAction::Stale => {}
        }
    }

    fn complete(&mut self, client: usize, c: Completion) {
        let client_id = client as u32 + 1;
        let key = c.request.key();
        let is_final = std::mem::take(&mut self.clients[client].current_is_final);
        match &c.result {
            OpResult::TimedOut if is_final => self.stats.final_read_timeouts += 1,
            _ if is_final => {}
            OpResult::TimedOut => self.stats.timeouts += 1,
            OpResult::NotFound => self.stats.not_found += 1,
            OpResult::CasFailed { .. } => self.stats.cas_failed += 1,
            _ => self.stats.ok += 1,
        }
        if !is_final {
            self.stats.ops_completed += 1;
            self.latencies.push(c.finished_us - c.started_us);
        }
        // versions a client learns from the chain never go back
        let seen = match &c.result {
            OpResult::Read { version, .. } | OpResult::Written { version } => Some(*version),
            _ => None,
        };
        if let Some(v) = seen {
            if let Some(&(earlier, earlier_req)) = self.last_seen.get(&(client_id, key)) {
                if v < earlier {
                    self.flag(Violation::Consistency(HistoryViolation::VersionWentBack {
                        client_id,
                        key,
                        earlier,
                        earlier_req,
                        later: v,
                        later_req: c.req_id,
                    }));
                }
            }
            self.last_seen.insert((client_id, key), (v, c.req_id));
        }
        if let OpResult::Written { version } = c.result {
            let e = self.max_acked.entry(key).or_default();
            *e = (*e).max(version);
        }
        if is_final {
            let acked = self.max_acked.get(&key).copied().unwrap_or_default();
            if let Some(v) = seen {
                if v < acked {
                    let tail = self.effective_chain(&key).last().copied().unwrap_or(Ipv4Addr::UNSPECIFIED);
                    self.flag(Violation::LostWrite {
                        key,
                        acked,
                        tail,
                        tail_version: v,
                    });
                }
            }
        }
        let mut txn_done = false;
        match &mut self.clients[client].driver {
            Driver::Manual(done) => done.push(c),
            Driver::Kv => {
                if !is_final {
                    self.kv_progress.completed += 1;
                }
            }
            Driver::Txn(txn) => {
                txn.on_complete(&c);
                txn_done = true;
            }
        }
        if txn_done {
            self.diff_owners(client);
        }
        self.maybe_start_final_reads();
        self.issue(client);
    }

    fn maybe_start_final_reads(&mut self) {
        let Some(kv) = &self.kv else { return };
        if !kv.final_reads || self.kv_progress.final_started || self.kv_progress.completed < kv.ops {
            return;
        }
        self.kv_progress.final_started = true;
        self.kv_progress.final_queue = self.max_acked.keys().copied().collect();
        for c in 0..self.clients.len() {
            if matches!(self.clients[c].driver, Driver::Kv) && self.clients[c].current.is_none() {
                self.schedule(0, Event::Issue { client: c });
            }
        }
    }

    fn issue(&mut self, client: usize) {
        if self.clients[client].current.is_some() {
            return;
        }
        let request = match self.clients[client].driver {
            Driver::Manual(_) => return,
            Driver::Kv => match self.next_kv_request(client) {
                Some((request, is_final)) => {
                    if let Err(e) = self.begin(client, request, is_final) {
                        log::warn!("client {client}: {e}");
                    }
                    return;
                }
                None => return,
            },
            Driver::Txn(_) => {
                if self.txn_target.is_some_and(|t| t <= self.total_committed()) {
                    return;
                }
                let Driver::Txn(txn) = &mut self.clients[client].driver else { unreachable!() };
                let r = txn.next_request();
                self.diff_owners(client);
                r
            }
        };
        if let Err(e) = self.begin(client, request, false) {
            log::warn!("client {client}: {e}");
        }
    }

    fn next_kv_request(&mut self, client: usize) -> Option<(Request, bool)> {
        let kv = self.kv.as_ref()?;
        if self.kv_progress.issued < kv.ops {
            self.kv_progress.issued += 1;
            let key = kv.keys[self.workload_rng.gen_range(0..kv.keys.len())];
            if self.workload_rng.gen_bool(kv.write_ratio) {
                let mut value = vec![0u8; kv.value_size];
                let stamp = ((client as u64 + 1) << 32 | self.kv_progress.issued).to_be_bytes();
                let n = stamp.len().min(value.len());
                value[..n].copy_from_slice(&stamp[..n]);
                return Some((Request::Write(key, value), false));
            }
            return Some((Request::Read(key), false));
        }
        self.kv_progress.final_queue.pop_front().map(|key| (Request::Read(key), true))
    }

    fn total_committed(&self) -> u64 {
        self.clients
            .iter()
            .map(|c| match &c.driver {
                Driver::Txn(t) => t.committed,
                _ => 0,
            })
            .sum()
    }

    fn total_aborted(&self) -> u64 {
        self.clients
            .iter()
            .map(|c| match &c.driver {
                Driver::Txn(t) => t.aborted,
                _ => 0,
            })
            .sum()
    }

    /// Compares what a transaction client believes it holds with every
    /// other client's beliefs.
    fn diff_owners(&mut self, client: usize) {
        let client_id = client as u32 + 1;
        let Driver::Txn(txn) = &self.clients[client].driver else { return };
        let now: BTreeSet<Key> = txn.owned().collect();
        let before = std::mem::take(&mut self.clients[client].believed);
        for k in before.difference(&now) {
            if self.lock_owners.get(k) == Some(&client_id) {
                self.lock_owners.remove(k);
            }
        }
        for k in now.difference(&before) {
            match self.lock_owners.get(k) {
                Some(&other) if other != client_id => {
                    let v = Violation::MutualExclusion {
                        key: *k,
                        holders: (other, client_id),
                    };
                    self.flag(v);
                }
                _ => {
                    self.lock_owners.insert(*k, client_id);
                }
            }
        }
        self.clients[client].believed = now;
    }

    /// The members serving `key` right now, failed ones skipped or replaced.
    pub fn effective_chain(&self, key: &Key) -> Vec<SwitchId> {
        let status = |s: SwitchId| self.switches.get(&s).map_or(SwitchStatus::Failed, |x| x.status);
        check::effective_chain(self.ring.chain_for_key(key), self.ring.group_of_key(key), status, &self.activated)
    }

    pub fn version_at(&self, s: SwitchId, key: &Key) -> Option<Version> {
        self.switches.get(&s).and_then(|sw| sw.store.version_of(key))
    }

    fn after_write(&mut self, at: SwitchId, key: Key) {
        if let Some(slot) = self.switches[&at].store.get(&key) {
            if !slot.version.is_zero() {
                let h = hash64(&slot.value, 0);
                let version = slot.version;
                match self.stamps.get(&(key, version)) {
                    Some(&prev) if prev != h => self.flag(Violation::VersionReuse { key, version }),
                    Some(_) => {}
                    None => {
                        self.stamps.insert((key, version), h);
                    }
                }
            }
        }
        self.check_key(&key);
    }

    fn check_key(&mut self, key: &Key) {
        if self.violation.is_some() {
            return;
        }
        let chain = self.effective_chain(key);
        if let Err(v) = check::check_update_propagation(*key, &chain, |s| self.version_at(s, key)) {
            self.flag(v);
        }
    }

    /// Checks the chain order of every installed key.
    pub fn check_all_keys(&mut self) {
        for i in 0..self.keys.len() {
            let key = self.keys[i];
            self.check_key(&key);
            if self.violation.is_some() {
                return;
            }
        }
    }

    /// Checks every acknowledged write against the current tail.
    pub fn check_acked_at_tails(&mut self) {
        let acked: Vec<(Key, Version)> = self.max_acked.iter().map(|(k, v)| (*k, *v)).collect();
        for (key, acked) in acked {
            let Some(&tail) = self.effective_chain(&key).last() else {
                continue;
            };
            let tail_version = self.version_at(tail, &key).unwrap_or_default();
            if tail_version < acked {
                self.flag(Violation::LostWrite {
                    key,
                    acked,
                    tail,
                    tail_version,
                });
                return;
            }
        }
    }

    pub fn metrics(&self) -> Metrics {
        let s = &self.stats;
        let mut lat = self.latencies.clone();
        let sim_time_us = self.now;
        let stale_drops = self.switches.values().map(|x| x.counters.stale_drops).sum();
        Metrics {
            ops_started: s.ops_started,
            ops_completed: s.ops_completed,
            ok: s.ok,
            not_found: s.not_found,
            cas_failed: s.cas_failed,
            timeouts: s.timeouts,
            retries: s.retries,
            duplicate_replies: self.clients.iter().map(|c| c.agent.duplicate_replies).sum(),
            packets_sent: s.packets_sent,
            packets_lost: s.packets_lost,
            packets_duplicated: s.packets_duplicated,
            packets_reordered: s.packets_reordered,
            stale_drops,
            started_during_stop: self.started_in_stop.len() as u64,
            blocked: self.blocked.len() as u64,
            txn_committed: self.total_committed(),
            txn_aborted: self.total_aborted(),
            final_reads: s.final_reads,
            final_read_timeouts: s.final_read_timeouts,
            p50_us: percentile(&mut lat, 50.0),
            p99_us: percentile(&mut lat, 99.0),
            sim_time_us,
            qps: if sim_time_us == 0 {
                0.0
            } else {
                s.ops_completed as f64 * 1e6 / sim_time_us as f64
            },
        }
    }

    /// All client events, ordered by time, client and request.
    pub fn history(&self) -> Vec<HistoryEvent> {
        let mut all: Vec<HistoryEvent> = self.clients.iter().flat_map(|c| c.agent.history().iter().cloned()).collect();
        all.sort_by_key(|e| (e.time_us, e.client_id, e.req_id, e.kind));
        all
    }

    /// Every copy of every installed key on switches that are still up.
    pub fn final_state(&self) -> Vec<FinalEntry> {
        let mut out = Vec::new();
        for sw in self.switches.values().filter(|s| s.is_alive()) {
            for (key, _, slot) in sw.store.entries() {
                out.push(FinalEntry {
                    switch: sw.ip,
                    key: *key,
                    value: slot.value.clone(),
                    version: slot.version,
                    valid: slot.valid,
                });
            }
        }
        out.sort_by_key(|e| (e.switch, e.key));
        out
    }

    fn touched_keys(cmd: &ControlCommand) -> Option<Vec<Key>> {
        match cmd {
            ControlCommand::Load { image, .. } => Some(image.entries.iter().map(|e| e.key).collect()),
            ControlCommand::Insert { key, .. } | ControlCommand::Tombstone { key, .. } | ControlCommand::Gc { key, .. } => Some(vec![*key]),
            ControlCommand::BumpSession { .. } => Some(Vec::new()),
            _ => None,
        }
    }
}

impl SwitchControl for Network {
    fn apply(&mut self, cmd: ControlCommand) -> Result<(), ControlError> {
        let at = cmd.target();
        let touched = Network::touched_keys(&cmd);
        log::trace!("{} us: {}", self.now, cmd);
        let sw = self.switches.get_mut(&at).ok_or(ControlError::UnknownSwitch(at))?;
        match &cmd {
            ControlCommand::InstallRule { rule, .. } => {
                if let (RuleAction::Redirect(to), Some(g)) = (rule.action, rule.group) {
                    self.activated.insert((rule.match_dst, g), to);
                }
            }
            ControlCommand::SetStop { .. } => self.active_stops += 1,
            ControlCommand::ClearStop { .. } => self.active_stops = self.active_stops.saturating_sub(1),
            _ => {}
        }
        for env in apply_to_switch(sw, cmd)? {
            self.route(at, env, 0);
        }
        match touched {
            Some(keys) => {
                for k in keys {
                    self.check_key(&k);
                }
            }
            None => self.check_all_keys(),
        }
        Ok(())
    }

    fn snapshot_keys(&mut self, at: SwitchId, keys: &[Key]) -> Result<StoreImage, ControlError> {
        let sw = self.switches.get(&at).ok_or(ControlError::UnknownSwitch(at))?;
        Ok(sw.store.snapshot_keys(keys))
    }

    fn is_alive(&mut self, at: SwitchId) -> bool {
        self.switches.get(&at).is_some_and(|s| s.is_alive())
    }

    fn wait(&mut self, micros: u64) {
        let t = self.now + micros;
        self.run_until(t);
    }
}

impl Network {
    /// Operations completed so far, cheaper than a full [`Network::metrics`].
    pub fn metrics_ops_completed(&self) -> u64 {
        self.stats.ops_completed
    }
}
