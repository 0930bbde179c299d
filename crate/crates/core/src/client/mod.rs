//! Host-side agent: builds chain-routed requests, matches replies to
//! requests, retries on timeout, and records a history of what it observed.
//!
//! The agent does no I/O. A driver (the simulator or the UDP runtime) sends
//! the envelopes it returns, feeds replies to [`Agent::on_reply`], and calls
//! [`Agent::on_timeout`] when a request's timer fires.

pub mod history;
pub mod linearizability;
pub mod lock;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::dataplane::{client_addr, Envelope};
use crate::placement::{Ring, SwitchId};
use crate::wire::{Key, OpCode, Packet, Version, MAX_VALUE};

pub use history::{EventKind, HistoryEvent, Status};

pub const DEFAULT_SIM_TIMEOUT_US: u64 = 10_000;
pub const DEFAULT_UDP_TIMEOUT_US: u64 = 100_000;
pub const DEFAULT_MAX_RETRIES: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentConfig {
    pub client_id: u32,
    pub timeout_us: u64,
    pub max_retries: u32,
}

impl AgentConfig {
    pub fn simulated(client_id: u32) -> Self {
        AgentConfig {
            client_id,
            timeout_us: DEFAULT_SIM_TIMEOUT_US,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    pub fn udp(client_id: u32) -> Self {
        AgentConfig {
            timeout_us: DEFAULT_UDP_TIMEOUT_US,
            ..AgentConfig::simulated(client_id)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("value of {0} bytes exceeds the cap")]
    ValueTooLong(usize),
    #[error("timeout must be positive")]
    ZeroTimeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Request {
    Read(Key),
    Write(Key, Vec<u8>),
    /// Replace the value with `new` iff it currently equals `expected`.
    Cas { key: Key, expected: Vec<u8>, new: Vec<u8> },
}

impl Request {
    pub fn key(&self) -> Key {
        match self {
            Request::Read(k) | Request::Write(k, _) | Request::Cas { key: k, .. } => *k,
        }
    }

    pub fn op(&self) -> OpCode {
        match self {
            Request::Read(_) => OpCode::Read,
            Request::Write(..) => OpCode::Write,
            Request::Cas { .. } => OpCode::Cas,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum OpResult {
    Read { value: Vec<u8>, version: Version },
    Written { version: Version },
    CasFailed { current: Vec<u8>, version: Version },
    NotFound,
    TimedOut,
}

impl OpResult {
    /// Version the client learned from this result, if any.
    pub fn observed_version(&self) -> Option<Version> {
        match self {
            OpResult::Read { version, .. } | OpResult::Written { version } | OpResult::CasFailed { version, .. } => Some(*version),
            OpResult::NotFound | OpResult::TimedOut => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub req_id: u32,
    pub request: Request,
    pub result: OpResult,
    pub attempts: u32,
    pub started_us: u64,
    pub finished_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimeoutAction {
    /// Send this again and re-arm the timer.
    Retry(Envelope),
    GaveUp(Completion),
    /// The request already finished.
    Stale,
}

#[derive(Debug, Clone)]
struct Pending {
    request: Request,
    envelope: Envelope,
    attempts: u32,
    started_us: u64,
}

/// One logical client. Requests may overlap; each has its own `req_id`.
#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    ring: Arc<Ring>,
    next_req: u32,
    pending: BTreeMap<u32, Pending>,
    finished: BTreeSet<u32>,
    history: Vec<HistoryEvent>,
    routes: BTreeMap<Key, Vec<SwitchId>>,
    pub duplicate_replies: u64,
}

impl Agent {
    pub fn new(config: AgentConfig, ring: Arc<Ring>) -> Result<Self, ClientError> {
        if config.timeout_us == 0 {
            return Err(ClientError::ZeroTimeout);
        }
        Ok(Agent {
            config,
            ring,
            next_req: 1,
            pending: BTreeMap::new(),
            finished: BTreeSet::new(),
            history: Vec::new(),
            routes: BTreeMap::new(),
            duplicate_replies: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn client_id(&self) -> u32 {
        self.config.client_id
    }

    pub fn address(&self) -> SwitchId {
        client_addr(self.config.client_id)
    }

    pub fn history(&self) -> &[HistoryEvent] {
        &self.history
    }

    pub fn take_history(&mut self) -> Vec<HistoryEvent> {
        std::mem::take(&mut self.history)
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }

    /// Builds the first packet for a request and records its invocation.
    pub fn start(&mut self, request: Request, now_us: u64) -> Result<(u32, Envelope), ClientError> {
        let len = match &request {
            Request::Read(_) => 0,
            Request::Write(_, v) => v.len(),
            Request::Cas { expected, new, .. } => expected.len() + new.len(),
        };
        if len > MAX_VALUE {
            return Err(ClientError::ValueTooLong(len));
        }
        let req_id = self.next_req;
        self.next_req += 1;
        let envelope = self.build(&request, req_id);
        let (value, op) = match &request {
            Request::Read(_) => (Vec::new(), OpCode::Read),
            Request::Write(_, v) => (v.clone(), OpCode::Write),
            Request::Cas { new, .. } => (new.clone(), OpCode::Cas),
        };
        self.history.push(HistoryEvent {
            client_id: self.config.client_id,
            req_id,
            kind: EventKind::Invoke,
            op,
            key: request.key(),
            value,
            version: Version::ZERO,
            status: Status::Pending,
            time_us: now_us,
        });
        self.pending.insert(
            req_id,
            Pending {
                request,
                envelope: envelope.clone(),
                attempts: 1,
                started_us: now_us,
            },
        );
        Ok((req_id, envelope))
    }

    /// Overrides the ring's chain for `key`, for drivers that learn the
    /// live chain from the controller. Pending requests on the key are
    /// rebuilt so their next retry follows the new chain.
    pub fn set_route(&mut self, key: Key, chain: Vec<SwitchId>) {
        if chain.is_empty() {
            self.routes.remove(&key);
        } else {
            self.routes.insert(key, chain);
        }
        let ids: Vec<u32> = self.pending.iter().filter(|(_, p)| p.request.key() == key).map(|(id, _)| *id).collect();
        for id in ids {
            let env = self.build(&self.pending[&id].request, id);
            self.pending.get_mut(&id).unwrap().envelope = env;
        }
    }

    pub fn route(&self, key: &Key) -> Vec<SwitchId> {
        match self.routes.get(key) {
            Some(c) => c.clone(),
            None => self.ring.chain_for_key(key).to_vec(),
        }
    }

    fn build(&self, request: &Request, req_id: u32) -> Envelope {
        let key = request.key();
        let chain = self.route(&key);
        let mut pkt = Packet::new(request.op(), key);
        pkt.client_id = self.config.client_id;
        pkt.req_id = req_id;
        let dst = match request {
            Request::Read(_) => {
                // tail first, then the rest in reverse for failover
                let (tail, rest) = chain.split_last().expect("chains are never empty");
                pkt.chain = rest.iter().rev().copied().collect();
                *tail
            }
            Request::Write(_, v) => {
                pkt.value = v.clone();
                pkt.chain = chain[1..].to_vec();
                chain[0]
            }
            Request::Cas { expected, new, .. } => {
                pkt.value = [expected.as_slice(), new.as_slice()].concat();
                pkt.chain = chain[1..].to_vec();
                chain[0]
            }
        };
        Envelope {
            src: self.address(),
            dst,
            pkt,
        }
    }

    /// Matches a reply to its request. Replies for finished or unknown
    /// requests are ignored.
    pub fn on_reply(&mut self, pkt: &Packet, now_us: u64) -> Option<Completion> {
        if pkt.op != OpCode::Reply || pkt.client_id != self.config.client_id {
            return None;
        }
        let Some(p) = self.pending.remove(&pkt.req_id) else {
            if self.finished.contains(&pkt.req_id) {
                self.duplicate_replies += 1;
            }
            return None;
        };
        let result = if pkt.not_found() {
            OpResult::NotFound
        } else if pkt.cas_failed() {
            OpResult::CasFailed {
                current: pkt.value.clone(),
                version: pkt.version(),
            }
        } else {
            match p.request {
                Request::Read(_) => OpResult::Read {
                    value: pkt.value.clone(),
                    version: pkt.version(),
                },
                _ => OpResult::Written { version: pkt.version() },
            }
        };
        Some(self.finish(pkt.req_id, p, result, now_us))
    }

    pub fn on_timeout(&mut self, req_id: u32, now_us: u64) -> TimeoutAction {
        let Some(p) = self.pending.get_mut(&req_id) else {
            return TimeoutAction::Stale;
        };
        if p.attempts > self.config.max_retries {
            let p = self.pending.remove(&req_id).unwrap();
            return TimeoutAction::GaveUp(self.finish(req_id, p, OpResult::TimedOut, now_us));
        }
        p.attempts += 1;
        TimeoutAction::Retry(p.envelope.clone())
    }

    fn finish(&mut self, req_id: u32, p: Pending, result: OpResult, now_us: u64) -> Completion {
        self.finished.insert(req_id);
        let (status, value) = match &result {
            OpResult::Read { value, .. } => (Status::Ok, value.clone()),
            OpResult::Written { .. } => (
                Status::Ok,
                match &p.request {
                    Request::Write(_, v) => v.clone(),
                    Request::Cas { new, .. } => new.clone(),
                    Request::Read(_) => Vec::new(),
                },
            ),
            OpResult::CasFailed { current, .. } => (Status::CasFail, current.clone()),
            OpResult::NotFound => (Status::NotFound, Vec::new()),
            OpResult::TimedOut => (Status::Timeout, Vec::new()),
        };
        self.history.push(HistoryEvent {
            client_id: self.config.client_id,
            req_id,
            kind: EventKind::Complete,
            op: p.request.op(),
            key: p.request.key(),
            value,
            version: result.observed_version().unwrap_or_default(),
            status,
            time_us: now_us,
        });
        Completion {
            req_id,
            request: p.request,
            result,
            attempts: p.attempts,
            started_us: p.started_us,
            finished_us: now_us,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn s(i: u8) -> SwitchId {
        Ipv4Addr::new(10, 0, 0, i)
    }

    fn agent(chain: &[SwitchId]) -> Agent {
        let ring = Ring::single_chain(chain, 8, 1, 0).unwrap();
        Agent::new(AgentConfig::simulated(0xC0A8_0001), Arc::new(ring)).unwrap()
    }

    fn reply_for(env: &Envelope, version: Version, value: &[u8]) -> Packet {
        let mut r = env.pkt.clone();
        r.op = OpCode::Reply;
        r.chain.clear();
        r.value = value.to_vec();
        r.set_version(version);
        r
    }

    #[test]
    fn read_goes_to_tail_with_reversed_list() {
        let mut a = agent(&[s(0), s(1), s(2)]);
        let (_, env) = a.start(Request::Read(Key::from_index(1)), 0).unwrap();
        assert_eq!(env.dst, s(2));
        assert_eq!(env.pkt.chain, vec![s(1), s(0)]);
        assert_eq!(env.pkt.sc(), 2);
        assert!(env.pkt.value.is_empty());
    }

    #[test]
    fn single_switch_chain_has_empty_list() {
        let mut a = agent(&[s(0)]);
        let (_, env) = a.start(Request::Read(Key::from_index(1)), 0).unwrap();
        assert_eq!((env.dst, env.pkt.sc()), (s(0), 0));
    }

    #[test]
    fn write_goes_to_head() {
        let mut a = agent(&[s(0), s(1), s(2)]);
        let (_, env) = a.start(Request::Write(Key::from_index(1), b"v".to_vec()), 0).unwrap();
        assert_eq!(env.dst, s(0));
        assert_eq!(env.pkt.chain, vec![s(1), s(2)]);
        assert!(env.pkt.version().is_zero());
    }

    #[test]
    fn duplicate_reply_is_ignored() {
        let mut a = agent(&[s(0), s(1), s(2)]);
        let (_, env) = a.start(Request::Read(Key::from_index(1)), 0).unwrap();
        let r = reply_for(&env, Version::new(0, 1), b"x");
        assert!(a.on_reply(&r, 5).is_some());
        assert!(a.on_reply(&r, 6).is_none());
        assert_eq!(a.duplicate_replies, 1);
        let completes = a.history().iter().filter(|e| e.kind == EventKind::Complete).count();
        assert_eq!(completes, 1);
    }

    #[test]
    fn retries_reuse_the_packet_then_give_up() {
        let mut a = agent(&[s(0), s(1), s(2)]);
        let (id, env) = a.start(Request::Write(Key::from_index(1), b"v".to_vec()), 0).unwrap();
        for i in 0..DEFAULT_MAX_RETRIES {
            assert_eq!(a.on_timeout(id, (i as u64 + 1) * 10), TimeoutAction::Retry(env.clone()));
        }
        let TimeoutAction::GaveUp(c) = a.on_timeout(id, 1000) else { panic!() };
        assert_eq!(c.result, OpResult::TimedOut);
        assert_eq!(c.attempts, DEFAULT_MAX_RETRIES + 1);
        assert_eq!(a.on_timeout(id, 2000), TimeoutAction::Stale);
    }

    #[test]
    fn flags_map_to_results() {
        let mut a = agent(&[s(0)]);
        let (_, env) = a.start(Request::Write(Key::from_index(1), b"v".to_vec()), 0).unwrap();
        let mut r = reply_for(&env, Version::ZERO, b"");
        r.flags = crate::wire::flags::NOT_FOUND;
        assert_eq!(a.on_reply(&r, 1).unwrap().result, OpResult::NotFound);

        let (_, env) = a
            .start(
                Request::Cas {
                    key: Key::from_index(1),
                    expected: vec![0],
                    new: vec![1],
                },
                2,
            )
            .unwrap();
        assert_eq!(env.pkt.value, vec![0, 1]);
        let mut r = reply_for(&env, Version::new(0, 3), &[9]);
        r.flags = crate::wire::flags::CAS_FAIL;
        assert_eq!(
            a.on_reply(&r, 3).unwrap().result,
            OpResult::CasFailed {
                current: vec![9],
                version: Version::new(0, 3)
            }
        );
    }

    #[test]
    fn oversized_value_rejected() {
        let mut a = agent(&[s(0)]);
        assert_eq!(
            a.start(Request::Write(Key::from_index(1), vec![0; 129]), 0),
            Err(ClientError::ValueTooLong(129))
        );
    }

    #[test]
    fn route_override_rebuilds_pending_retries() {
        let mut a = agent(&[s(0), s(1), s(2)]);
        let k = Key::from_index(1);
        let (id, env) = a.start(Request::Write(k, b"v".to_vec()), 0).unwrap();
        assert_eq!(env.dst, s(0));
        a.set_route(k, vec![s(1), s(2)]);
        let TimeoutAction::Retry(again) = a.on_timeout(id, 10) else { panic!() };
        assert_eq!((again.dst, again.pkt.chain.clone()), (s(1), vec![s(2)]));
        assert_eq!(again.pkt.req_id, id);
        a.set_route(k, Vec::new());
        assert_eq!(a.route(&k), vec![s(0), s(1), s(2)]);
    }
}
