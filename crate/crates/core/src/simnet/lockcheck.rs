//! Exhaustive exploration of two clients contending for one CAS lock.
//!
//! Each client runs `acquire, release, acquire` against a short chain
//! built from the real dataplane, through its own [`Agent`] (so retries and
//! reply matching are the production code). Every link is a FIFO queue and
//! deliveries on different links interleave freely. The adversary may drop,
//! duplicate or reorder the head packet of a link a bounded number of
//! times, and a client may time out whenever it has a request outstanding.
//!
//! A client counts as an owner from the moment it learns its acquire
//! succeeded until it sends the release. Every reached state is checked
//! for two owners at once, and for an owner whose lock value is not what
//! the tail holds.

use std::collections::HashSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::sync::Arc;

use thiserror::Error;
use xxhash_rust::xxh3::xxh3_128;

use crate::client::lock::{acquire, acquire_succeeded, holder, release, FREE};
use crate::client::{Agent, AgentConfig, Completion, TimeoutAction};
use crate::dataplane::{client_addr, Delivery, Emit, Envelope, SwitchState};
use crate::placement::Ring;
use crate::store::Store;
use crate::wire::Key;

const CLIENTS: usize = 2;
/// `acquire, release, acquire`.
const SCRIPT_LEN: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockCheckBounds {
    pub drops: u8,
    pub duplicates: u8,
    pub reorders: u8,
    /// Resends per request before the client gives up.
    pub retries: u32,
    /// Switches in the chain, at least two so head and tail differ.
    pub chain_len: u8,
}

impl Default for LockCheckBounds {
    fn default() -> Self {
        LockCheckBounds {
            drops: 1,
            duplicates: 0,
            reorders: 0,
            retries: 1,
            chain_len: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LockCheckError {
    #[error("could not set up the chain: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LockViolation {
    TwoOwners { steps: Vec<String> },
    OwnerNotAtTail { client: u32, steps: Vec<String> },
}

impl fmt::Display for LockViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let steps = match self {
            LockViolation::TwoOwners { steps } => {
                writeln!(f, "two clients own the lock")?;
                steps
            }
            LockViolation::OwnerNotAtTail { client, steps } => {
                writeln!(f, "client {client} owns the lock but the tail disagrees")?;
                steps
            }
        };
        for (i, s) in steps.iter().enumerate() {
            writeln!(f, "{:>3}. {s}", i + 1)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockCheckReport {
    pub states: u64,
    pub transitions: u64,
    /// Largest number of simultaneous owners seen.
    pub max_owners: usize,
    /// Reached states in which every script has finished.
    pub terminal_states: u64,
    pub violation: Option<LockViolation>,
}

#[derive(Debug, Clone)]
struct Proc {
    agent: Agent,
    /// Index of the next script step to start.
    pc: u8,
    req: Option<u32>,
    attempts: u32,
    /// Token of the acquisition this client believes it holds.
    owns: Option<u32>,
}

impl Proc {
    fn owner(&self) -> u32 {
        self.agent.client_id()
    }
}

#[derive(Debug, Clone)]
struct World {
    switches: Vec<SwitchState>,
    net: Vec<Envelope>,
    procs: Vec<Proc>,
    drops: u8,
    duplicates: u8,
    reorders: u8,
}

#[derive(Debug, Clone, Copy)]
enum Move {
    Start(usize),
    Deliver(usize),
    Drop(usize),
    Duplicate(usize),
    Reorder(usize),
    Timeout(usize),
}

struct Checker {
    key: Key,
    bounds: LockCheckBounds,
}

impl Checker {
    fn token_for(pc: u8) -> u32 {
        // the two acquisitions of a script use different tokens
        u32::from(pc) / 2 + 1
    }

    fn canonical(&self, w: &World) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &w.switches {
            let slot = s.store.get(&self.key).expect("lock key installed");
            out.extend_from_slice(&slot.value);
            out.extend_from_slice(&slot.version.session.to_be_bytes());
            out.extend_from_slice(&slot.version.seq.to_be_bytes());
        }
        // links in a fixed order, each keeping its FIFO order
        let mut pkts: Vec<(Ipv4Addr, Ipv4Addr, Vec<u8>)> = w.net.iter().map(|e| (e.src, e.dst, e.pkt.encode())).collect();
        pkts.sort_by_key(|(src, dst, _)| (*src, *dst));
        let pkts: Vec<Vec<u8>> = pkts
            .into_iter()
            .map(|(src, dst, p)| [&src.octets()[..], &dst.octets()[..], &p[..]].concat())
            .collect();
        out.push(pkts.len() as u8);
        for p in pkts {
            out.extend_from_slice(&(p.len() as u16).to_be_bytes());
            out.extend(p);
        }
        for p in &w.procs {
            out.push(p.pc);
            out.extend_from_slice(&p.req.unwrap_or(0).to_be_bytes());
            out.extend_from_slice(&p.attempts.to_be_bytes());
            out.extend_from_slice(&p.owns.unwrap_or(0).to_be_bytes());
        }
        out.extend_from_slice(&[w.drops, w.duplicates, w.reorders]);
        out
    }

    fn moves(&self, w: &World) -> Vec<Move> {
        let mut out = Vec::new();
        for (i, p) in w.procs.iter().enumerate() {
            if p.req.is_none() && p.pc < SCRIPT_LEN {
                out.push(Move::Start(i));
            }
            if p.req.is_some() {
                out.push(Move::Timeout(i));
            }
        }
        let same_link = |a: &Envelope, b: &Envelope| a.src == b.src && a.dst == b.dst;
        for i in 0..w.net.len() {
            if w.net[..i].iter().any(|e| same_link(e, &w.net[i])) {
                continue;
            }
            out.push(Move::Deliver(i));
            if w.drops < self.bounds.drops {
                out.push(Move::Drop(i));
            }
            if w.duplicates < self.bounds.duplicates {
                out.push(Move::Duplicate(i));
            }
            if w.reorders < self.bounds.reorders && w.net[i + 1..].iter().any(|e| same_link(e, &w.net[i])) {
                out.push(Move::Reorder(i));
            }
        }
        out
    }

    fn complete(&self, p: &mut Proc, c: &Completion) {
        let pc = p.pc - 1;
        let token = Self::token_for(pc);
        if pc.is_multiple_of(2)
            && acquire_succeeded(&c.result) {
                p.owns = Some(token);
            }
        // a release needs no bookkeeping: ownership ended when it was sent
        p.req = None;
        p.attempts = 0;
    }

    fn apply(&self, w: &World, mv: Move) -> (World, String) {
        let mut w = w.clone();
        let label = match mv {
            Move::Start(i) => {
                let p = &mut w.procs[i];
                let token = Self::token_for(p.pc);
                let owner = p.owner();
                let (req, label) = if p.pc.is_multiple_of(2) {
                    (acquire(self.key, owner, token), format!("client {owner} sends acquire#{token}"))
                } else {
                    p.owns = None;
                    (release(self.key, owner, token), format!("client {owner} sends release#{token}"))
                };
                let (id, env) = p.agent.start(req, 0).expect("lock requests fit");
                p.req = Some(id);
                p.attempts = 1;
                p.pc += 1;
                w.net.push(env);
                label
            }
            Move::Timeout(i) => {
                let p = &mut w.procs[i];
                let id = p.req.expect("outstanding request");
                match p.agent.on_timeout(id, 0) {
                    TimeoutAction::Retry(env) => {
                        p.attempts += 1;
                        w.net.push(env);
                        format!("client {} times out and resends", p.owner())
                    }
                    TimeoutAction::GaveUp(c) => {
                        self.complete(p, &c);
                        format!("client {} gives up", p.owner())
                    }
                    TimeoutAction::Stale => unreachable!("timer only armed while outstanding"),
                }
            }
            Move::Drop(i) => {
                let env = w.net.remove(i);
                w.drops += 1;
                format!("drop {:?} to {}", env.pkt.op, env.dst)
            }
            Move::Duplicate(i) => {
                let env = w.net[i].clone();
                w.duplicates += 1;
                let label = format!("duplicate {:?} to {}", env.pkt.op, env.dst);
                w.net.push(env);
                label
            }
            Move::Reorder(i) => {
                let env = w.net.remove(i);
                w.reorders += 1;
                let label = format!("reorder {:?} to {}", env.pkt.op, env.dst);
                w.net.push(env);
                label
            }
            Move::Deliver(i) => {
                let env = w.net.remove(i);
                if let Some(sw) = w.switches.iter_mut().find(|s| s.ip == env.dst) {
                    let label = format!("{} processes {:?} from client {}", env.dst, env.pkt.op, env.pkt.client_id);
                    let role = Delivery::for_packet(&env.pkt);
                    for emit in sw.process(env.pkt, role).expect("switches stay alive") {
                        if let Emit::Net(e) = emit {
                            w.net.push(e);
                        }
                    }
                    label
                } else {
                    let p = w
                        .procs
                        .iter_mut()
                        .find(|p| client_addr(p.owner()) == env.dst)
                        .expect("packet for a known host");
                    match p.agent.on_reply(&env.pkt, 0) {
                        Some(c) => {
                            self.complete(p, &c);
                            format!("client {} gets {:?}", p.owner(), c.result)
                        }
                        None => format!("client {} ignores a stale reply", p.owner()),
                    }
                }
            }
        };
        (w, label)
    }

    fn violation(&self, w: &World) -> Option<Result<(), u32>> {
        let owners: Vec<&Proc> = w.procs.iter().filter(|p| p.owns.is_some()).collect();
        if owners.len() > 1 {
            return Some(Ok(()));
        }
        let tail = w.switches.last().expect("chain nonempty");
        let at_tail = holder(&tail.store.get(&self.key).expect("installed").value);
        for p in owners {
            if at_tail != Some((p.owner(), p.owns.expect("owner"))) {
                return Some(Err(p.owner()));
            }
        }
        None
    }
}

/// Explores every interleaving within `bounds`.
pub fn check_lock(bounds: LockCheckBounds) -> Result<LockCheckReport, LockCheckError> {
    if bounds.chain_len < 2 {
        return Err(LockCheckError::Setup("the chain needs a head and a separate tail".into()));
    }
    let ips: Vec<Ipv4Addr> = (1..=bounds.chain_len).map(|i| Ipv4Addr::new(10, 0, 0, i)).collect();
    let ring = Arc::new(Ring::single_chain(&ips, 1, 1, 1).map_err(|e| LockCheckError::Setup(e.to_string()))?);
    let key = Key::from_index(7);
    let switches = ips
        .iter()
        .map(|&ip| {
            let mut store = Store::with_capacity(4);
            store.insert_index(key, &FREE).map_err(|e| LockCheckError::Setup(e.to_string()))?;
            Ok(SwitchState::with_store(ip, store))
        })
        .collect::<Result<Vec<_>, LockCheckError>>()?;
    let procs = (1..=CLIENTS as u32)
        .map(|id| {
            let cfg = AgentConfig {
                client_id: id,
                timeout_us: 1,
                max_retries: bounds.retries,
            };
            let agent = Agent::new(cfg, ring.clone()).map_err(|e| LockCheckError::Setup(e.to_string()))?;
            Ok(Proc {
                agent,
                pc: 0,
                req: None,
                attempts: 0,
                owns: None,
            })
        })
        .collect::<Result<Vec<_>, LockCheckError>>()?;
    let checker = Checker { key, bounds };
    let init = World {
        switches,
        net: Vec::new(),
        procs,
        drops: 0,
        duplicates: 0,
        reorders: 0,
    };

    // depth-first with a fingerprint set: memory stays at the path length
    // plus 16 bytes per state
    let mut seen: HashSet<u128> = HashSet::new();
    seen.insert(xxh3_128(&checker.canonical(&init)));
    let mut report = LockCheckReport {
        states: 1,
        transitions: 0,
        max_owners: 0,
        terminal_states: 0,
        violation: None,
    };
    struct Frame {
        world: World,
        moves: Vec<Move>,
        next: usize,
        label: String,
    }
    let frame = |world: World, label: String| Frame {
        moves: checker.moves(&world),
        world,
        next: 0,
        label,
    };
    let mut stack = vec![frame(init, String::new())];
    'search: while let Some(top) = stack.last_mut() {
        let w = &top.world;
        if top.next == 0 {
            let owners = w.procs.iter().filter(|p| p.owns.is_some()).count();
            report.max_owners = report.max_owners.max(owners);
            if w.procs.iter().all(|p| p.pc == SCRIPT_LEN && p.req.is_none()) {
                report.terminal_states += 1;
            }
            if let Some(v) = checker.violation(w) {
                let steps = stack.iter().skip(1).map(|f| f.label.clone()).collect();
                report.violation = Some(match v {
                    Ok(()) => LockViolation::TwoOwners { steps },
                    Err(client) => LockViolation::OwnerNotAtTail { client, steps },
                });
                break 'search;
            }
        }
        while top.next < top.moves.len() {
            let mv = top.moves[top.next];
            top.next += 1;
            let (next, label) = checker.apply(&top.world, mv);
            report.transitions += 1;
            if seen.insert(xxh3_128(&checker.canonical(&next))) {
                report.states += 1;
                stack.push(frame(next, label));
                continue 'search;
            }
        }
        stack.pop();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reliable_network_keeps_the_lock_exclusive() {
        let r = check_lock(LockCheckBounds {
            drops: 0,
            duplicates: 0,
            reorders: 0,
            retries: 0,
            chain_len: 3,
        })
        .unwrap();
        assert_eq!(r.violation, None);
        assert_eq!(r.max_owners, 1);
        assert!(r.terminal_states > 0);
    }

    #[test]
    fn duplicating_network_keeps_the_lock_exclusive() {
        let r = check_lock(LockCheckBounds {
            drops: 0,
            duplicates: 1,
            reorders: 0,
            retries: 0,
            chain_len: 2,
        })
        .unwrap();
        assert_eq!(r.violation, None, "{}", r.violation.as_ref().unwrap());
        assert_eq!(r.max_owners, 1);
    }
}
