//! Exhaustive breadth-first exploration of a small abstract model of the
//! protocol.
//!
//! The model has one client (standing in for any number of hosts), a chain
//! of switches plus spares, a single direction buffer per ordered pair of
//! nodes, and these actions:
//!
//! * the client sends a read to the tail or a write to the head, or takes a
//!   reply off one of its incoming buffers;
//! * a switch takes a message off an incoming buffer into its one-message
//!   input slot, then processes it;
//! * a buffer between two switches drops, repeats or reorders its head
//!   message;
//! * a chain switch fails, after which it only forwards: reads to its
//!   predecessor and writes to its successor (or drops them if it was the
//!   tail);
//! * a failed switch is recovered onto a spare in one atomic step that
//!   copies the reference switch's memory and clears the buffers of both.
//!
//! Writes carry `(session, seq)` versions. Whoever first handles an
//! unstamped write stamps it with its own session and the next sequence
//! number. The switch that takes over stamping after a head failure, and a
//! spare that replaces a head, are given a fresh session.
//!
//! Every reached state is checked for:
//!
//! * `TypeInvariant`: every field holds a value of its domain;
//! * `Consistency`: the client's previous observation of every key is no
//!   newer than its current one;
//! * `UpdatePropagation`: along the chain, with failed members replaced by
//!   their recovery target or skipped, upstream versions are no older;
//! * `HeadSuccession`: each new stamp is newer than every version of the
//!   same key still held by a live switch, a message or the client.
//!
//! States where a buffer is longer than `max_qlen`, or where any switch
//! memory or client observation has a sequence number above
//! `max_version`, are not explored further.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::hash::{BuildHasherDefault, Hasher};
use std::str::FromStr;

use arrayvec::ArrayVec;
use thiserror::Error;
use xxhash_rust::xxh3::Xxh3;

use super::channel::ChannelOp;

pub const MAX_SWITCHES: usize = 6;
pub const MAX_KEYS: usize = 2;
pub const MAX_VALUES: u8 = 8;
/// Messages in flight over all buffers together.
const MAX_IN_FLIGHT: usize = 48;
pub const DEFAULT_STATE_CAP: u64 = 10_000_000;

/// Node id of the client in buffers and forwarding fields.
const CLIENT: u8 = u8::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExploreBounds {
    pub max_qlen: u8,
    pub max_failed: u8,
    pub max_version: u8,
    pub max_buf_ops: u8,
}

impl FromStr for ExploreBounds {
    type Err = ExploreError;

    /// Parses `qlen,failed,version,bufops`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u8> = s
            .split(',')
            .map(|p| p.trim().parse::<u8>())
            .collect::<Result<_, _>>()
            .map_err(|e| ExploreError::BadConfig(format!("bounds {s:?}: {e}")))?;
        let [max_qlen, max_failed, max_version, max_buf_ops] = parts[..] else {
            return Err(ExploreError::BadConfig(format!("bounds {s:?}: expected four comma-separated numbers")));
        };
        Ok(ExploreBounds {
            max_qlen,
            max_failed,
            max_version,
            max_buf_ops,
        })
    }
}

impl fmt::Display for ExploreBounds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.max_qlen, self.max_failed, self.max_version, self.max_buf_ops)
    }
}

/// Deliberate protocol bugs the explorer should find.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ModelMutation {
    #[default]
    None,
    /// Switches apply stamped writes whatever their version.
    DropSeqGuard,
    /// A spare that replaces the head keeps its old session.
    SkipSessionBump,
    /// Recovery redirects traffic to the spare without copying state.
    ActivateBeforeSync,
}

impl FromStr for ModelMutation {
    type Err = ExploreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "none" => ModelMutation::None,
            "drop-seq-guard" => ModelMutation::DropSeqGuard,
            "skip-session-bump" => ModelMutation::SkipSessionBump,
            "activate-before-sync" => ModelMutation::ActivateBeforeSync,
            _ => return Err(ExploreError::BadConfig(format!("unknown mutation {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreConfig {
    pub bounds: ExploreBounds,
    /// Switches in total; the chain uses all but `max_failed` of them.
    pub switches: u8,
    pub keys: u8,
    pub values: u8,
    pub mutation: ModelMutation,
    /// Stop with `BoundsExceeded` after this many distinct states.
    pub state_cap: u64,
    pub checked: InvariantSet,
}

/// Which invariants a run checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InvariantSet(u8);

impl InvariantSet {
    pub const ALL: InvariantSet = InvariantSet(0b1111);

    pub fn only(inv: Invariant) -> Self {
        InvariantSet(1 << inv as u8)
    }

    pub fn contains(self, inv: Invariant) -> bool {
        self.0 & (1 << inv as u8) != 0
    }
}

impl ExploreConfig {
    pub fn new(bounds: ExploreBounds, switches: u8, keys: u8, values: u8) -> Self {
        ExploreConfig {
            bounds,
            switches,
            keys,
            values,
            mutation: ModelMutation::None,
            state_cap: DEFAULT_STATE_CAP,
            checked: InvariantSet::ALL,
        }
    }

    /// Checks `inv` alone, so the search looks for its shortest violation.
    pub fn checking_only(mut self, inv: Invariant) -> Self {
        self.checked = InvariantSet::only(inv);
        self
    }

    pub fn with_mutation(mut self, mutation: ModelMutation) -> Self {
        self.mutation = mutation;
        self
    }

    pub fn with_state_cap(mut self, cap: u64) -> Self {
        self.state_cap = cap;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExploreError {
    #[error("invalid explorer configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Invariant {
    TypeInvariant,
    Consistency,
    UpdatePropagation,
    HeadSuccession,
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Version tag: session, then sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Ver {
    pub session: u8,
    pub seq: u8,
}

impl fmt::Display for Ver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.session, self.seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
struct Cell {
    /// `0` means no value.
    val: u8,
    ver: Ver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Read,
    Write,
    Reply,
}

/// A message. Its hop list is always a suffix of the chain, so it is
/// stored as the chain index of its first hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Msg {
    kind: Kind,
    key: u8,
    val: u8,
    ver: Ver,
    from: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
enum Status {
    #[default]
    Alive,
    Failed,
    Recovered,
}

/// One model state. Unused array slots stay at their defaults so equal
/// states hash equally.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    mem: [[Cell; MAX_KEYS]; MAX_SWITCHES],
    /// The input slot; `None` means ready.
    input: [Option<Msg>; MAX_SWITCHES],
    status: [Status; MAX_SWITCHES],
    read_fwd: [u8; MAX_SWITCHES],
    write_fwd: [u8; MAX_SWITCHES],
    session: [u8; MAX_SWITCHES],
    failed_count: u8,
    buf_ops: u8,
    /// `(src, dst, msg)`, sorted by `(src, dst)`, FIFO within a buffer.
    bufs: ArrayVec<(u8, u8, Msg), MAX_IN_FLIGHT>,
    prev: [Cell; MAX_KEYS],
    cur: [Cell; MAX_KEYS],
    sessions_issued: u8,
    /// Set when a switch stamped a version that was not newer than every
    /// version of the key still in the system.
    succession_broken: bool,
}

impl Default for State {
    fn default() -> Self {
        State {
            mem: Default::default(),
            input: [None; MAX_SWITCHES],
            status: Default::default(),
            read_fwd: [CLIENT; MAX_SWITCHES],
            write_fwd: [CLIENT; MAX_SWITCHES],
            session: [0; MAX_SWITCHES],
            failed_count: 0,
            buf_ops: 0,
            bufs: ArrayVec::new(),
            prev: Default::default(),
            cur: Default::default(),
            sessions_issued: 0,
            succession_broken: false,
        }
    }
}

impl State {
    fn buf_range(&self, src: u8, dst: u8) -> (usize, usize) {
        let start = self.bufs.partition_point(|&(s, d, _)| (s, d) < (src, dst));
        let end = self.bufs.partition_point(|&(s, d, _)| (s, d) <= (src, dst));
        (start, end)
    }

    fn buf_head(&self, src: u8, dst: u8) -> Option<Msg> {
        let (a, b) = self.buf_range(src, dst);
        (a < b).then(|| self.bufs[a].2)
    }

    fn send(&mut self, src: u8, dst: u8, msg: Msg) {
        let (_, end) = self.buf_range(src, dst);
        assert!(!self.bufs.is_full(), "more than {MAX_IN_FLIGHT} messages in flight; lower the bounds");
        self.bufs.insert(end, (src, dst, msg));
    }

    fn pop(&mut self, src: u8, dst: u8) -> Option<Msg> {
        let (a, b) = self.buf_range(src, dst);
        (a < b).then(|| self.bufs.remove(a).2)
    }

    fn buf_op(&mut self, src: u8, dst: u8, op: ChannelOp) -> bool {
        let Some(head) = self.buf_head(src, dst) else {
            return false;
        };
        match op {
            ChannelOp::Drop => {
                self.pop(src, dst);
            }
            ChannelOp::Repeat => self.send(src, dst, head),
            ChannelOp::Reorder => {
                self.pop(src, dst);
                self.send(src, dst, head);
            }
        }
        true
    }

    /// Empties the input slots of `set` and every buffer into or out of it.
    fn clear(&mut self, set: &[u8]) {
        for &s in set {
            self.input[s as usize] = None;
        }
        self.bufs.retain(|(src, dst, _)| !set.contains(src) && !set.contains(dst));
    }

    /// Contents of one buffer, oldest first.
    fn buffer(&self, src: u8, dst: u8) -> Vec<Msg> {
        let (a, b) = self.buf_range(src, dst);
        self.bufs[a..b].iter().map(|x| x.2).collect()
    }
}

/// One model transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    ClientRead { key: u8 },
    ClientWrite { key: u8, value: u8 },
    ClientRcv { from: u8 },
    SwitchRcv { at: u8, from: u8 },
    SwitchProc { at: u8 },
    BufOp { src: u8, dst: u8, op: ChannelOp },
    Fail { at: u8 },
    Recover { at: u8 },
}

fn node(n: u8) -> String {
    if n == CLIENT {
        "client".to_string()
    } else {
        format!("S{n}")
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Step::ClientRead { key } => write!(f, "client sends read of k{key}"),
            Step::ClientWrite { key, value } => write!(f, "client sends write k{key}=v{value}"),
            Step::ClientRcv { from } => write!(f, "client receives from {}", node(from)),
            Step::SwitchRcv { at, from } => write!(f, "S{at} receives from {}", node(from)),
            Step::SwitchProc { at } => write!(f, "S{at} processes"),
            Step::BufOp { src, dst, op } => write!(f, "{op:?} on S{src}->S{dst}"),
            Step::Fail { at } => write!(f, "S{at} fails"),
            Step::Recover { at } => write!(f, "S{at} recovered"),
        }
    }
}

impl fmt::Display for Msg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            Kind::Read => write!(f, "R(k{} @{})", self.key, self.from),
            Kind::Write => write!(f, "W(k{}=v{} {} @{})", self.key, self.val, self.ver, self.from),
            Kind::Reply => write!(f, "A(k{}=v{} {})", self.key, self.val, self.ver),
        }
    }
}

/// The model for one configuration.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ExploreConfig,
    n: u8,
    chain_len: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub invariant: Invariant,
    pub steps: Vec<Step>,
    /// The initial state followed by the state after each step.
    pub states: Vec<String>,
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} violated after {} steps", self.invariant, self.steps.len())?;
        writeln!(f, "  0. initial: {}", self.states[0])?;
        for (i, step) in self.steps.iter().enumerate() {
            writeln!(f, "{:>3}. {step}: {}", i + 1, self.states[i + 1])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    NoViolation { states: u64, transitions: u64, depth: u32 },
    Violation { states: u64, counterexample: Counterexample },
    /// The state cap was reached first; `depth` levels were fully explored.
    BoundsExceeded { states: u64, depth: u32 },
}

impl Outcome {
    pub fn states(&self) -> u64 {
        match self {
            Outcome::NoViolation { states, .. } | Outcome::Violation { states, .. } | Outcome::BoundsExceeded { states, .. } => *states,
        }
    }
}

/// Hasher for fingerprints that are already uniformly distributed.
#[derive(Default)]
struct PassThrough(u64);

impl Hasher for PassThrough {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0 << 8) | u64::from(b);
        }
    }
    fn write_u128(&mut self, v: u128) {
        self.0 = v as u64;
    }
}

/// Hash of the part of a state that can influence later states or later
/// invariant checks. Values never steer a transition and are not looked at
/// by any invariant, the previous observation is overwritten before it is
/// read again, and a failed switch's memory is never read, so states
/// differing only in those have the same futures.
/// Callers check invariants before deduplicating.
fn fingerprint(s: &State) -> u128 {
    fn msg(h: &mut Xxh3, m: &Msg) {
        h.update(&[m.kind as u8, m.key, m.ver.session, m.ver.seq, m.from]);
    }
    let mut h = Xxh3::new();
    // a failed switch never reads its memory again
    for (row, status) in s.mem.iter().zip(&s.status) {
        for c in row.iter().filter(|_| *status == Status::Alive) {
            h.update(&[c.ver.session, c.ver.seq]);
        }
    }
    for i in 0..MAX_SWITCHES {
        match &s.input[i] {
            Some(m) => msg(&mut h, m),
            None => h.update(&[0xff]),
        }
        h.update(&[s.status[i] as u8, s.read_fwd[i], s.write_fwd[i], s.session[i]]);
    }
    h.update(&[s.failed_count, s.buf_ops, s.sessions_issued, s.succession_broken as u8]);
    for c in &s.cur {
        h.update(&[c.ver.session, c.ver.seq]);
    }
    h.update(&[s.bufs.len() as u8]);
    for (src, dst, m) in &s.bufs {
        h.update(&[*src, *dst]);
        msg(&mut h, m);
    }
    h.digest128()
}

impl Model {
    pub fn new(cfg: ExploreConfig) -> Result<Self, ExploreError> {
        let bad = |m: String| Err(ExploreError::BadConfig(m));
        if cfg.switches as usize > MAX_SWITCHES || cfg.switches == 0 {
            return bad(format!("switches must be in 1..={MAX_SWITCHES}"));
        }
        if cfg.keys as usize > MAX_KEYS || cfg.keys == 0 {
            return bad(format!("keys must be in 1..={MAX_KEYS}"));
        }
        if cfg.values > MAX_VALUES || cfg.values == 0 {
            return bad(format!("values must be in 1..={MAX_VALUES}"));
        }
        if cfg.bounds.max_failed >= cfg.switches {
            return bad("the chain needs at least one switch that never fails".into());
        }
        if cfg.bounds.max_version > 200 {
            return bad("max_version must be at most 200".into());
        }
        Ok(Model {
            cfg,
            n: cfg.switches,
            chain_len: cfg.switches - cfg.bounds.max_failed,
        })
    }

    pub fn config(&self) -> &ExploreConfig {
        &self.cfg
    }

    pub fn initial(&self) -> State {
        State::default()
    }

    fn in_chain(&self, s: u8) -> bool {
        s < self.chain_len
    }

    fn next_or_client(&self, s: u8) -> u8 {
        if s + 1 < self.chain_len {
            s + 1
        } else {
            CLIENT
        }
    }

    fn prev_or_client(&self, s: u8) -> u8 {
        if s > 0 && self.in_chain(s) {
            s - 1
        } else {
            CLIENT
        }
    }

    /// The member currently standing for chain switch `s`, or the client if
    /// nobody does.
    fn stand_in(&self, st: &State, s: u8) -> u8 {
        match st.status[s as usize] {
            Status::Alive => s,
            Status::Recovered => st.write_fwd[s as usize],
            Status::Failed => CLIENT,
        }
    }

    fn next_alive_or_client(&self, st: &State, s: u8) -> u8 {
        let next = self.next_or_client(s);
        if next == CLIENT {
            return CLIENT;
        }
        match st.status[next as usize] {
            Status::Alive => next,
            Status::Recovered => st.write_fwd[next as usize],
            Status::Failed => self.next_alive_or_client(st, next),
        }
    }

    fn prev_alive_or_client(&self, st: &State, s: u8) -> u8 {
        let prev = self.prev_or_client(s);
        if prev == CLIENT {
            return CLIENT;
        }
        match st.status[prev as usize] {
            Status::Alive => prev,
            Status::Recovered => st.write_fwd[prev as usize],
            Status::Failed => self.prev_alive_or_client(st, prev),
        }
    }

    /// Every step that could apply to some state, in a fixed order.
    pub fn all_steps(&self) -> Vec<Step> {
        let mut out = Vec::new();
        for key in 0..self.cfg.keys {
            out.push(Step::ClientRead { key });
            for value in 1..=self.cfg.values {
                out.push(Step::ClientWrite { key, value });
            }
        }
        for from in 0..self.n {
            out.push(Step::ClientRcv { from });
        }
        for at in 0..self.n {
            for from in (0..self.n).chain([CLIENT]) {
                if from != at {
                    out.push(Step::SwitchRcv { at, from });
                }
            }
            out.push(Step::SwitchProc { at });
        }
        for src in 0..self.n {
            for dst in 0..self.n {
                if src != dst {
                    for op in ChannelOp::ALL {
                        out.push(Step::BufOp { src, dst, op });
                    }
                }
            }
        }
        for at in 0..self.n {
            out.push(Step::Fail { at });
            out.push(Step::Recover { at });
        }
        out
    }

    /// The state after `step`, or `None` if the step is not enabled.
    pub fn apply(&self, st: &State, step: Step) -> Option<State> {
        let mut s = st.clone();
        match step {
            Step::ClientRead { key } => {
                let tail = self.chain_len - 1;
                let msg = Msg {
                    kind: Kind::Read,
                    key,
                    val: 0,
                    ver: Ver::default(),
                    from: tail,
                };
                s.send(CLIENT, tail, msg);
            }
            Step::ClientWrite { key, value } => {
                let msg = Msg {
                    kind: Kind::Write,
                    key,
                    val: value,
                    ver: Ver::default(),
                    from: 0,
                };
                s.send(CLIENT, 0, msg);
            }
            Step::ClientRcv { from } => {
                let m = s.pop(from, CLIENT)?;
                s.prev = s.cur;
                s.cur[m.key as usize] = Cell { val: m.val, ver: m.ver };
            }
            Step::SwitchRcv { at, from } => {
                if s.input[at as usize].is_some() {
                    return None;
                }
                let m = s.pop(from, at)?;
                s.input[at as usize] = Some(m);
            }
            Step::SwitchProc { at } => {
                let m = s.input[at as usize].take()?;
                if s.status[at as usize] == Status::Alive {
                    self.process_alive(&mut s, at, m);
                } else {
                    self.process_failed(&mut s, at, m);
                }
            }
            Step::BufOp { src, dst, op } => {
                if s.buf_ops >= self.cfg.bounds.max_buf_ops || !s.buf_op(src, dst, op) {
                    return None;
                }
                s.buf_ops += 1;
            }
            Step::Fail { at } => {
                if s.status[at as usize] != Status::Alive || !self.in_chain(at) || s.failed_count >= self.cfg.bounds.max_failed {
                    return None;
                }
                s.status[at as usize] = Status::Failed;
                s.failed_count += 1;
                s.read_fwd[at as usize] = self.prev_or_client(at);
                s.write_fwd[at as usize] = self.next_or_client(at);
                s.clear(&[at]);
                if at == 0 {
                    // the successor starts stamping writes for the chain
                    let next = self.next_alive_or_client(&s, at);
                    if next != CLIENT {
                        s.sessions_issued += 1;
                        s.session[next as usize] = s.sessions_issued;
                    }
                }
            }
            Step::Recover { at } => {
                if s.status[at as usize] != Status::Failed || !self.in_chain(at) {
                    return None;
                }
                let spare = (self.chain_len..self.n).find(|x| !s.write_fwd[..self.n as usize].contains(x))?;
                let reference = if at == self.chain_len - 1 {
                    self.prev_alive_or_client(&s, at)
                } else {
                    self.next_alive_or_client(&s, at)
                };
                if reference == CLIENT {
                    return None;
                }
                if self.cfg.mutation != ModelMutation::ActivateBeforeSync {
                    s.mem[spare as usize] = s.mem[reference as usize];
                }
                s.clear(&[reference, at]);
                s.status[at as usize] = Status::Recovered;
                s.write_fwd[at as usize] = spare;
                s.read_fwd[at as usize] = spare;
                if at == 0 && self.cfg.mutation != ModelMutation::SkipSessionBump {
                    s.sessions_issued += 1;
                    s.session[spare as usize] = s.sessions_issued;
                }
            }
        }
        Some(s)
    }

    fn process_alive(&self, s: &mut State, at: u8, m: Msg) {
        let cell = s.mem[at as usize][m.key as usize];
        match m.kind {
            Kind::Read => s.send(
                at,
                CLIENT,
                Msg {
                    kind: Kind::Reply,
                    key: m.key,
                    val: cell.val,
                    ver: cell.ver,
                    from: 0,
                },
            ),
            Kind::Write => {
                let stamped = m.ver != Ver::default();
                let ver = if stamped {
                    m.ver
                } else {
                    let v = Ver {
                        session: s.session[at as usize],
                        seq: cell.ver.seq + 1,
                    };
                    if v <= self.newest_present(s, m.key) {
                        s.succession_broken = true;
                    }
                    v
                };
                if ver > cell.ver || self.cfg.mutation == ModelMutation::DropSeqGuard {
                    s.mem[at as usize][m.key as usize] = Cell { val: m.val, ver };
                    let next = m.from + 1;
                    if next < self.chain_len {
                        s.send(at, next, Msg { ver, from: next, ..m });
                    } else {
                        s.send(
                            at,
                            CLIENT,
                            Msg {
                                kind: Kind::Reply,
                                ver,
                                from: 0,
                                ..m
                            },
                        );
                    }
                }
            }
            // replies are never addressed to switches
            Kind::Reply => {}
        }
    }

    /// Newest version of `key` held by a live switch, a message or the
    /// client.
    fn newest_present(&self, s: &State, key: u8) -> Ver {
        let k = key as usize;
        let msgs = s.input.iter().flatten().chain(s.bufs.iter().map(|(_, _, m)| m));
        (0..self.n as usize)
            .filter(|&i| s.status[i] == Status::Alive)
            .map(|i| s.mem[i][k].ver)
            .chain(msgs.filter(|m| m.key == key).map(|m| m.ver))
            .chain([s.cur[k].ver])
            .max()
            .unwrap_or_default()
    }

    fn process_failed(&self, s: &mut State, at: u8, m: Msg) {
        let i = at as usize;
        match m.kind {
            Kind::Read => {
                if s.read_fwd[i] != CLIENT {
                    s.send(at, s.read_fwd[i], m);
                }
            }
            Kind::Write => {
                if s.status[i] == Status::Recovered {
                    s.send(at, s.write_fwd[i], m);
                } else if s.write_fwd[i] != CLIENT {
                    s.send(at, s.write_fwd[i], Msg { from: m.from + 1, ..m });
                }
            }
            Kind::Reply => {}
        }
    }

    /// Whether exploration continues past this state.
    pub fn within_bounds(&self, s: &State) -> bool {
        let b = &self.cfg.bounds;
        let mut i = 0;
        while i < s.bufs.len() {
            let (src, dst, _) = s.bufs[i];
            let (_, end) = s.buf_range(src, dst);
            if end - i > b.max_qlen as usize {
                return false;
            }
            i = end;
        }
        let n = self.n as usize;
        let k = self.cfg.keys as usize;
        s.failed_count <= b.max_failed
            && s.buf_ops <= b.max_buf_ops
            && s.cur[..k].iter().all(|c| c.ver.seq <= b.max_version)
            && s.mem[..n].iter().all(|row| row[..k].iter().all(|c| c.ver.seq <= b.max_version))
    }

    /// The first invariant `s` breaks, if any.
    pub fn check(&self, s: &State) -> Option<Invariant> {
        let on = |inv| self.cfg.checked.contains(inv);
        if on(Invariant::TypeInvariant) && !self.type_ok(s) {
            return Some(Invariant::TypeInvariant);
        }
        let k = self.cfg.keys as usize;
        if on(Invariant::Consistency) && (0..k).any(|key| s.prev[key].ver > s.cur[key].ver) {
            return Some(Invariant::Consistency);
        }
        for key in (0..k).filter(|_| on(Invariant::UpdatePropagation)) {
            for s1 in 0..self.chain_len {
                for s2 in s1 + 1..self.chain_len {
                    let (up, down) = (self.stand_in(s, s1), self.stand_in(s, s2));
                    if up != CLIENT && down != CLIENT && s.mem[up as usize][key].ver < s.mem[down as usize][key].ver {
                        return Some(Invariant::UpdatePropagation);
                    }
                }
            }
        }
        if on(Invariant::HeadSuccession) && s.succession_broken {
            return Some(Invariant::HeadSuccession);
        }
        None
    }

    fn type_ok(&self, s: &State) -> bool {
        let n = self.n;
        let node_ok = |x: u8| x < n || x == CLIENT;
        let val_ok = |v: u8| v <= self.cfg.values;
        let msg_ok = |m: &Msg| m.key < self.cfg.keys && val_ok(m.val) && m.from < self.chain_len;
        (0..n as usize).all(|i| {
            node_ok(s.read_fwd[i])
                && node_ok(s.write_fwd[i])
                && s.input[i].as_ref().is_none_or(msg_ok)
                && s.mem[i][..self.cfg.keys as usize].iter().all(|c| val_ok(c.val))
        }) && s.bufs.iter().all(|(src, dst, m)| node_ok(*src) && node_ok(*dst) && src != dst && msg_ok(m))
            && s.cur.iter().chain(&s.prev).all(|c| val_ok(c.val))
    }

    pub fn render(&self, s: &State) -> String {
        let mut out = String::new();
        let k = self.cfg.keys as usize;
        for i in 0..self.n as usize {
            let st = match s.status[i] {
                Status::Alive => String::new(),
                Status::Failed => "!".to_string(),
                Status::Recovered => format!("->S{}", s.write_fwd[i]),
            };
            let cells: Vec<String> = s.mem[i][..k].iter().map(|c| format!("v{}{}", c.val, c.ver)).collect();
            let _ = write!(out, "S{i}{st}[{}] ", cells.join(","));
        }
        let mut pairs: Vec<(u8, u8)> = s.bufs.iter().map(|&(a, b, _)| (a, b)).collect();
        pairs.dedup();
        for (a, b) in pairs {
            let msgs: Vec<String> = s.buffer(a, b).iter().map(|m| m.to_string()).collect();
            let _ = write!(out, "{}->{}:[{}] ", node(a), node(b), msgs.join(" "));
        }
        for i in 0..self.n as usize {
            if let Some(m) = s.input[i] {
                let _ = write!(out, "in S{i}:{m} ");
            }
        }
        let seen: Vec<String> = (0..k).map(|key| format!("k{key} {}<-{}", s.cur[key].ver, s.prev[key].ver)).collect();
        let _ = write!(out, "client {}", seen.join(","));
        out
    }

    /// Applies `steps` from the initial state; `None` if one is not enabled.
    pub fn replay(&self, steps: &[Step]) -> Option<Vec<State>> {
        let mut states = vec![self.initial()];
        for &step in steps {
            let next = self.apply(states.last().expect("nonempty"), step)?;
            states.push(next);
        }
        Some(states)
    }

    /// Breadth-first search over every reachable state within the bounds.
    pub fn explore(&self) -> Outcome {
        type Seen = HashSet<u128, BuildHasherDefault<PassThrough>>;
        let steps = self.all_steps();
        let init = self.initial();
        let mut seen = Seen::default();
        seen.insert(fingerprint(&init));
        // parent index and step for every state except the first
        let mut parents: Vec<(u32, Step)> = vec![(u32::MAX, Step::SwitchProc { at: 0 })];
        if let Some(inv) = self.check(&init) {
            return Outcome::Violation {
                states: 1,
                counterexample: self.counterexample(inv, &parents, 0),
            };
        }
        let mut frontier: Vec<(u32, State)> = vec![(0, init)];
        let mut transitions = 0u64;
        let mut depth = 0u32;
        while !frontier.is_empty() {
            let mut next_frontier = Vec::new();
            for (idx, st) in &frontier {
                for &step in &steps {
                    let Some(succ) = self.apply(st, step) else { continue };
                    transitions += 1;
                    if !self.within_bounds(&succ) {
                        continue;
                    }
                    if let Some(inv) = self.check(&succ) {
                        let new_idx = parents.len() as u32;
                        parents.push((*idx, step));
                        return Outcome::Violation {
                            states: parents.len() as u64,
                            counterexample: self.counterexample(inv, &parents, new_idx),
                        };
                    }
                    if !seen.insert(fingerprint(&succ)) {
                        continue;
                    }
                    let new_idx = parents.len() as u32;
                    parents.push((*idx, step));
                    if parents.len() as u64 >= self.cfg.state_cap {
                        return Outcome::BoundsExceeded {
                            states: parents.len() as u64,
                            depth,
                        };
                    }
                    next_frontier.push((new_idx, succ));
                }
            }
            frontier = next_frontier;
            if !frontier.is_empty() {
                depth += 1;
            }
            log::info!("depth {depth}: {} states, frontier {}", parents.len(), frontier.len());
        }
        Outcome::NoViolation {
            states: parents.len() as u64,
            transitions,
            depth,
        }
    }

    fn counterexample(&self, invariant: Invariant, parents: &[(u32, Step)], mut idx: u32) -> Counterexample {
        let mut steps = Vec::new();
        while idx != 0 {
            let (parent, step) = parents[idx as usize];
            steps.push(step);
            idx = parent;
        }
        steps.reverse();
        let states = self
            .replay(&steps)
            .expect("a discovered path replays")
            .iter()
            .map(|s| self.render(s))
            .collect();
        Counterexample { invariant, steps, states }
    }
}

/// Explores the model for `cfg`.
pub fn explore(cfg: ExploreConfig) -> Result<Outcome, ExploreError> {
    Ok(Model::new(cfg)?.explore())
}
