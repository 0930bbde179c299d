//! Per-switch query processing, chain routing, and failover rule handling.
//!
//! A switch handles two kinds of packet. Packets addressed to it go through
//! [`SwitchState::process`]: reads are answered from the store, writes are
//! ordered by their `(session, seq)` tag and passed down the chain. Packets
//! addressed elsewhere go through [`SwitchState::intercept`], which applies
//! the controller's failover, stop and redirect rules before normal routing.
//!
//! The chain list in a packet never contains the current destination. A hop
//! moves `chain[0]` into the destination and pops it.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::placement::{GroupId, SwitchId};
use crate::store::{Store, StoreError};
use crate::wire::{flags, OpCode, Packet, Version};

/// Held packets beyond this many per switch are dropped.
pub const HOLD_CAPACITY: usize = 64;

/// Rule rewrites one packet may go through at a single switch.
pub const MAX_REWRITES: usize = 16;

pub const PRIORITY_FAILOVER: u8 = 1;
pub const PRIORITY_STOP: u8 = 2;
pub const PRIORITY_REDIRECT: u8 = 3;

/// Client hosts are addressed by their id.
pub fn client_addr(client_id: u32) -> Ipv4Addr {
    Ipv4Addr::from(client_id)
}

/// A packet in flight between two addresses.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Envelope {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub pkt: Packet,
}

impl Envelope {
    pub fn reply_to_client(src: Ipv4Addr, pkt: Packet) -> Self {
        Envelope {
            src,
            dst: client_addr(pkt.client_id),
            pkt,
        }
    }
}

/// Something a switch wants sent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Emit {
    Net(Envelope),
    /// INSERT and DELETE are control-plane work.
    ToController(Packet),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchStatus {
    Alive,
    Failed,
    /// Failed, with its chain roles taken over by replacements.
    Recovered { write_fwd: SwitchId, read_fwd: SwitchId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RuleAction {
    /// Skip the failed destination: move to the next chain entry, or reply
    /// to the client when the chain is exhausted.
    Bypass,
    /// Hold matching packets until the stop is cleared.
    Stop,
    /// Send to the replacement switch; the chain list is left alone.
    Redirect(SwitchId),
}

/// Rules are keyed by destination, optional group, and priority; installing
/// the same key twice replaces the action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Rule {
    pub match_dst: SwitchId,
    pub group: Option<GroupId>,
    pub priority: u8,
    pub action: RuleAction,
}

impl Rule {
    pub fn failover(failed: SwitchId) -> Self {
        Rule {
            match_dst: failed,
            group: None,
            priority: PRIORITY_FAILOVER,
            action: RuleAction::Bypass,
        }
    }

    pub fn stop(failed: SwitchId, group: GroupId) -> Self {
        Rule {
            match_dst: failed,
            group: Some(group),
            priority: PRIORITY_STOP,
            action: RuleAction::Stop,
        }
    }

    pub fn redirect(failed: SwitchId, group: GroupId, to: SwitchId) -> Self {
        Rule {
            match_dst: failed,
            group: Some(group),
            priority: PRIORITY_REDIRECT,
            action: RuleAction::Redirect(to),
        }
    }
}

type RuleKey = (SwitchId, Option<GroupId>, u8);

/// Chain role of the switch for one delivery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Delivery {
    pub is_head: bool,
    pub is_tail: bool,
}

impl Delivery {
    /// Role implied by the packet itself: an unstamped write reaching a
    /// switch makes it the head, and a write with no chain left makes it the
    /// tail.
    pub fn for_packet(pkt: &Packet) -> Self {
        let write = matches!(pkt.op, OpCode::Write | OpCode::Cas);
        Delivery {
            is_head: write && pkt.version().is_zero(),
            is_tail: pkt.chain.is_empty(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub processed: u64,
    pub stale_drops: u64,
    pub not_found: u64,
    pub cas_failures: u64,
    pub intercepted: u64,
    pub held: u64,
    pub hold_overflow: u64,
    pub unroutable_drops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataplaneError {
    #[error("switch {0} is not alive")]
    NotAlive(SwitchId),
    #[error("packet for {dst} delivered to {at}")]
    WrongSwitch { at: SwitchId, dst: SwitchId },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Result of offering a transit packet to the rule table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Intercept {
    /// No rule matched; route the packet normally.
    Pass(Envelope),
    /// A rule rewrote or answered the packet.
    Rewritten(Vec<Emit>),
    /// The packet is buffered behind a stop rule.
    Held,
    /// A stop rule matched but the hold buffer is full.
    Dropped,
}

/// Toggles that deliberately break the protocol, used to show the checkers
/// catch the resulting anomalies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Faults {
    /// Apply every stamped write regardless of its version.
    pub no_seq_guard: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchState {
    pub ip: SwitchId,
    pub store: Store,
    pub status: SwitchStatus,
    pub session: u16,
    pub counters: Counters,
    pub faults: Faults,
    rules: BTreeMap<RuleKey, RuleAction>,
    held: Vec<(Envelope, GroupId)>,
}

impl SwitchState {
    pub fn new(ip: SwitchId) -> Self {
        SwitchState::with_store(ip, Store::default())
    }

    pub fn with_store(ip: SwitchId, store: Store) -> Self {
        SwitchState {
            ip,
            store,
            status: SwitchStatus::Alive,
            session: 0,
            counters: Counters::default(),
            faults: Faults::default(),
            rules: BTreeMap::new(),
            held: Vec::new(),
        }
    }

    pub fn is_alive(&self) -> bool {
        self.status == SwitchStatus::Alive
    }

    /// Handles a packet addressed to this switch.
    pub fn process(&mut self, mut pkt: Packet, role: Delivery) -> Result<Vec<Emit>, DataplaneError> {
        if !self.is_alive() {
            return Err(DataplaneError::NotAlive(self.ip));
        }
        self.counters.processed += 1;
        match pkt.op {
            OpCode::Read => {
                let r = self.read(pkt);
                Ok(vec![self.reply(r)])
            }
            OpCode::Insert | OpCode::Delete => Ok(vec![Emit::ToController(pkt)]),
            // Replies are for hosts; a switch has nothing to do with one.
            OpCode::Reply => Ok(Vec::new()),
            OpCode::Write | OpCode::Cas => {
                let loc = match self.store.lookup(&pkt.key) {
                    Ok(loc) if self.store.slot(loc).is_some_and(|s| s.valid) => loc,
                    _ => {
                        self.counters.not_found += 1;
                        return Ok(vec![self.reply(not_found(pkt))]);
                    }
                };
                let stored = self.store.read_slot(loc)?;
                if role.is_head {
                    if pkt.op == OpCode::Cas {
                        let half = pkt.value.len() / 2;
                        if !pkt.value.len().is_multiple_of(2) || stored.value != pkt.value[..half] {
                            self.counters.cas_failures += 1;
                            let mut r = reply_of(pkt);
                            r.flags |= flags::CAS_FAIL;
                            r.value = stored.value;
                            r.set_version(stored.version);
                            return Ok(vec![self.reply(r)]);
                        }
                        pkt.value.drain(..half);
                    }
                    pkt.set_version(Version::new(self.session, stored.version.seq + 1));
                }
                let stamp = pkt.version();
                if stamp <= stored.version && !self.faults.no_seq_guard {
                    self.counters.stale_drops += 1;
                    return Ok(Vec::new());
                }
                self.store.write_slot(loc, &pkt.value, stamp)?;
                if pkt.chain.is_empty() {
                    return Ok(vec![self.reply(reply_of(pkt))]);
                }
                let next = pkt.chain.remove(0);
                Ok(vec![Emit::Net(Envelope {
                    src: self.ip,
                    dst: next,
                    pkt,
                })])
            }
        }
    }

    fn read(&mut self, pkt: Packet) -> Packet {
        match self.store.get(&pkt.key) {
            Some(slot) if slot.valid => {
                let (value, version) = (slot.value.clone(), slot.version);
                let mut r = reply_of(pkt);
                r.value = value;
                r.set_version(version);
                r
            }
            _ => {
                self.counters.not_found += 1;
                not_found(pkt)
            }
        }
    }

    fn reply(&self, pkt: Packet) -> Emit {
        Emit::Net(Envelope::reply_to_client(self.ip, pkt))
    }

    /// Offers a packet passing through this switch to the rule table.
    pub fn intercept(&mut self, env: Envelope, group: GroupId) -> Intercept {
        let Some(action) = self.matching_rule(env.dst, group) else {
            return Intercept::Pass(env);
        };
        self.counters.intercepted += 1;
        let Envelope { dst, mut pkt, .. } = env;
        match action {
            RuleAction::Stop => {
                if self.held.len() >= HOLD_CAPACITY {
                    self.counters.hold_overflow += 1;
                    return Intercept::Dropped;
                }
                self.counters.held += 1;
                self.held.push((Envelope { src: self.ip, dst, pkt }, group));
                Intercept::Held
            }
            RuleAction::Redirect(to) => Intercept::Rewritten(vec![Emit::Net(Envelope { src: self.ip, dst: to, pkt })]),
            RuleAction::Bypass => {
                if !pkt.chain.is_empty() {
                    let next = pkt.chain.remove(0);
                    return Intercept::Rewritten(vec![Emit::Net(Envelope {
                        src: self.ip,
                        dst: next,
                        pkt,
                    })]);
                }
                // The skipped switch was the last hop. A stamped write has
                // been applied by every live member, so it can be
                // acknowledged; anything else has nowhere to go.
                let stamped_write = matches!(pkt.op, OpCode::Write | OpCode::Cas) && !pkt.version().is_zero();
                if stamped_write {
                    Intercept::Rewritten(vec![self.reply(reply_of(pkt))])
                } else {
                    self.counters.unroutable_drops += 1;
                    Intercept::Rewritten(Vec::new())
                }
            }
        }
    }

    fn matching_rule(&self, dst: SwitchId, group: GroupId) -> Option<RuleAction> {
        self.rules
            .iter()
            .filter(|((d, g, _), _)| *d == dst && g.is_none_or(|g| g == group))
            .max_by_key(|((_, g, p), _)| (*p, g.is_some()))
            .map(|(_, a)| *a)
    }

    pub fn set_status(&mut self, status: SwitchStatus) {
        self.status = status;
        if status == SwitchStatus::Failed {
            self.held.clear();
        }
    }

    pub fn install_rule(&mut self, rule: Rule) {
        self.rules.insert((rule.match_dst, rule.group, rule.priority), rule.action);
    }

    pub fn remove_rule(&mut self, match_dst: SwitchId, group: Option<GroupId>, priority: u8) -> bool {
        self.rules.remove(&(match_dst, group, priority)).is_some()
    }

    pub fn rules(&self) -> impl Iterator<Item = Rule> + '_ {
        self.rules.iter().map(|(&(match_dst, group, priority), &action)| Rule {
            match_dst,
            group,
            priority,
            action,
        })
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    pub fn set_stop(&mut self, failed: SwitchId, group: GroupId) {
        self.install_rule(Rule::stop(failed, group));
    }

    /// Removes the stop rule and hands back the packets it held, for the
    /// caller to offer to the rule table again.
    pub fn clear_stop(&mut self, failed: SwitchId, group: GroupId) -> Vec<Envelope> {
        self.remove_rule(failed, Some(group), PRIORITY_STOP);
        let (released, kept) = std::mem::take(&mut self.held)
            .into_iter()
            .partition(|(env, g)| env.dst == failed && *g == group);
        self.held = kept;
        released.into_iter().map(|(env, _)| env).collect()
    }

    pub fn held_count(&self) -> usize {
        self.held.len()
    }

    /// Raises the session used when this switch acts as head. Never lowers it.
    pub fn bump_session(&mut self, to: u16) {
        self.session = self.session.max(to);
    }
}

fn reply_of(mut pkt: Packet) -> Packet {
    pkt.op = OpCode::Reply;
    pkt.chain.clear();
    pkt
}

fn not_found(pkt: Packet) -> Packet {
    let mut r = reply_of(pkt);
    r.flags |= flags::NOT_FOUND;
    r.value.clear();
    r.set_version(Version::ZERO);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::Key;
    use proptest::prelude::*;

    fn s(i: u8) -> SwitchId {
        Ipv4Addr::new(10, 0, 0, i)
    }

    const CLIENT: u32 = 0xC0A8_0001;

    fn switch_with(ip: SwitchId, key: Key, value: &[u8]) -> SwitchState {
        let mut sw = SwitchState::new(ip);
        sw.store.insert_index(key, value).unwrap();
        sw
    }

    fn write(key: Key, value: &[u8], chain: &[SwitchId]) -> Packet {
        let mut p = Packet::new(OpCode::Write, key);
        p.client_id = CLIENT;
        p.req_id = 1;
        p.value = value.to_vec();
        p.chain = chain.to_vec();
        p
    }

    fn single_net(out: Vec<Emit>) -> Envelope {
        assert_eq!(out.len(), 1, "{out:?}");
        match out.into_iter().next().unwrap() {
            Emit::Net(e) => e,
            other => panic!("unexpected {other:?}"),
        }
    }

    fn deliver(sw: &mut SwitchState, pkt: Packet) -> Vec<Emit> {
        let role = Delivery::for_packet(&pkt);
        sw.process(pkt, role).unwrap()
    }

    #[test]
    fn write_walks_the_chain() {
        let key = Key::from_bytes(b"foo");
        let mut chain: Vec<_> = (0..3).map(|i| switch_with(s(i), key, b"A")).collect();

        let e = single_net(deliver(&mut chain[0], write(key, b"B", &[s(1), s(2)])));
        assert_eq!((e.src, e.dst, e.pkt.chain.clone()), (s(0), s(1), vec![s(2)]));
        assert_eq!(e.pkt.version(), Version::new(0, 1));

        let e = single_net(deliver(&mut chain[1], e.pkt));
        assert_eq!((e.dst, e.pkt.chain.len()), (s(2), 0));

        let e = single_net(deliver(&mut chain[2], e.pkt));
        assert_eq!(e.dst, client_addr(CLIENT));
        assert_eq!(e.pkt.op, OpCode::Reply);
        assert_eq!(e.pkt.value, b"B");
        for sw in &chain {
            let slot = sw.store.get(&key).unwrap();
            assert_eq!((slot.value.as_slice(), slot.version), (&b"B"[..], Version::new(0, 1)));
        }
    }

    #[test]
    fn older_write_is_dropped() {
        let key = Key::from_bytes(b"foo");
        let mut sw = switch_with(s(1), key, b"A");
        let mut w2 = write(key, b"W2", &[s(2)]);
        w2.set_version(Version::new(0, 2));
        let mut w1 = write(key, b"W1", &[s(2)]);
        w1.set_version(Version::new(0, 1));
        assert_eq!(deliver(&mut sw, w2).len(), 1);
        let before = sw.store.clone();
        assert!(deliver(&mut sw, w1).is_empty());
        assert_eq!(sw.store, before);
        assert_eq!(sw.counters.stale_drops, 1);
    }

    #[test]
    fn session_outranks_seq() {
        let key = Key::from_bytes(b"k");
        let mut sw = switch_with(s(1), key, b"A");
        let mut old = write(key, b"old", &[]);
        old.set_version(Version::new(0, 9));
        deliver(&mut sw, old);
        let mut new = write(key, b"new", &[]);
        new.set_version(Version::new(1, 1));
        deliver(&mut sw, new);
        assert_eq!(sw.store.get(&key).unwrap().value, b"new");
    }

    #[test]
    fn read_reply_and_not_found() {
        let key = Key::from_bytes(b"X");
        let mut sw = switch_with(s(2), key, b"A");
        let mut r = Packet::new(OpCode::Read, key);
        r.client_id = CLIENT;
        let e = single_net(deliver(&mut sw, r.clone()));
        assert_eq!((e.pkt.op, e.pkt.value.as_slice(), e.pkt.version()), (OpCode::Reply, &b"A"[..], Version::ZERO));

        r.key = Key::from_bytes(b"missing");
        let e = single_net(deliver(&mut sw, r));
        assert!(e.pkt.not_found());
        assert!(e.pkt.value.is_empty());
    }

    #[test]
    fn write_to_unknown_key_is_not_found() {
        let mut sw = SwitchState::new(s(0));
        let e = single_net(deliver(&mut sw, write(Key::from_bytes(b"nope"), b"v", &[s(1)])));
        assert!(e.pkt.not_found());
        assert_eq!(e.dst, client_addr(CLIENT));
    }

    #[test]
    fn cas_applies_only_on_match() {
        let key = Key::from_bytes(b"lock");
        let mut sw = switch_with(s(0), key, &[0, 0]);
        let mut cas = write(key, &[0, 0, 7, 7], &[s(1)]);
        cas.op = OpCode::Cas;
        let e = single_net(deliver(&mut sw, cas.clone()));
        assert_eq!((e.dst, e.pkt.value.as_slice()), (s(1), &[7, 7][..]));
        assert_eq!(sw.store.get(&key).unwrap().value, vec![7, 7]);

        let e = single_net(deliver(&mut sw, cas));
        assert!(e.pkt.cas_failed());
        assert_eq!(e.pkt.value, vec![7, 7]);
        assert_eq!(e.pkt.version(), Version::new(0, 1));
    }

    #[test]
    fn insert_and_delete_go_to_controller() {
        let mut sw = SwitchState::new(s(0));
        let p = Packet::new(OpCode::Insert, Key::from_bytes(b"k"));
        assert_eq!(deliver(&mut sw, p.clone()), vec![Emit::ToController(p)]);
    }

    fn transit(dst: SwitchId, pkt: Packet) -> Envelope {
        Envelope { src: s(0), dst, pkt }
    }

    #[test]
    fn bypass_skips_failed_middle() {
        let mut n = SwitchState::new(s(3));
        n.install_rule(Rule::failover(s(1)));
        let mut p = write(Key::from_bytes(b"k"), b"v", &[s(2)]);
        p.set_version(Version::new(0, 4));
        let Intercept::Rewritten(out) = n.intercept(transit(s(1), p), 0) else { panic!() };
        let e = single_net(out);
        assert_eq!((e.dst, e.pkt.chain.len()), (s(2), 0));
    }

    #[test]
    fn bypass_at_failed_tail_replies() {
        let mut n = SwitchState::new(s(3));
        n.install_rule(Rule::failover(s(2)));
        let mut p = write(Key::from_bytes(b"k"), b"v", &[]);
        p.set_version(Version::new(0, 4));
        let Intercept::Rewritten(out) = n.intercept(transit(s(2), p), 0) else { panic!() };
        let e = single_net(out);
        assert_eq!((e.dst, e.pkt.op), (client_addr(CLIENT), OpCode::Reply));
        assert_eq!(e.pkt.version(), Version::new(0, 4));
    }

    #[test]
    fn read_at_failed_tail_goes_to_predecessor() {
        let key = Key::from_bytes(b"k");
        let mut n = SwitchState::new(s(3));
        n.install_rule(Rule::failover(s(2)));
        let mut r = Packet::new(OpCode::Read, key);
        r.chain = vec![s(1), s(0)];
        let Intercept::Rewritten(out) = n.intercept(transit(s(2), r), 0) else { panic!() };
        let e = single_net(out);
        assert_eq!((e.dst, e.pkt.chain.clone()), (s(1), vec![s(0)]));
        let mut s1 = switch_with(s(1), key, b"A");
        let reply = single_net(deliver(&mut s1, e.pkt));
        assert_eq!(reply.pkt.value, b"A");
    }

    #[test]
    fn unmatched_packets_pass() {
        let mut n = SwitchState::new(s(3));
        n.install_rule(Rule::failover(s(1)));
        let env = transit(s(2), write(Key::from_bytes(b"k"), b"v", &[]));
        assert_eq!(n.intercept(env.clone(), 0), Intercept::Pass(env));
    }

    #[test]
    fn install_is_idempotent() {
        let mut n = SwitchState::new(s(3));
        n.install_rule(Rule::failover(s(1)));
        n.install_rule(Rule::failover(s(1)));
        assert_eq!(n.rule_count(), 1);
    }

    #[test]
    fn stop_holds_then_redirect_releases() {
        let mut n = SwitchState::new(s(0));
        n.install_rule(Rule::failover(s(1)));
        n.set_stop(s(1), 4);
        let p = write(Key::from_bytes(b"k"), b"v", &[s(2)]);
        assert_eq!(n.intercept(transit(s(1), p.clone()), 4), Intercept::Held);
        // other groups still use the failover rule
        assert!(matches!(n.intercept(transit(s(1), p.clone()), 5), Intercept::Rewritten(_)));
        assert_eq!(n.held_count(), 1);

        n.install_rule(Rule::redirect(s(1), 4, s(3)));
        let released = n.clear_stop(s(1), 4);
        assert_eq!(released.len(), 1);
        let Intercept::Rewritten(out) = n.intercept(released[0].clone(), 4) else { panic!() };
        let e = single_net(out);
        assert_eq!((e.dst, e.pkt.chain.clone()), (s(3), vec![s(2)]));
    }

    #[test]
    fn hold_buffer_is_bounded() {
        let mut n = SwitchState::new(s(0));
        n.set_stop(s(1), 0);
        let p = write(Key::from_bytes(b"k"), b"v", &[]);
        for _ in 0..HOLD_CAPACITY {
            assert_eq!(n.intercept(transit(s(1), p.clone()), 0), Intercept::Held);
        }
        assert_eq!(n.intercept(transit(s(1), p), 0), Intercept::Dropped);
        assert_eq!(n.counters.hold_overflow, 1);
    }

    #[test]
    fn bumped_head_outranks_old_head() {
        let key = Key::from_bytes(b"k");
        let mut old_head = switch_with(s(1), key, b"A");
        for _ in 0..5 {
            deliver(&mut old_head, write(key, b"x", &[]));
        }
        let old_max = old_head.store.version_of(&key).unwrap();
        let mut new_head = switch_with(s(2), key, b"A");
        new_head.bump_session(1);
        let e = single_net(deliver(&mut new_head, write(key, b"y", &[])));
        assert!(e.pkt.version() > old_max);
    }

    #[test]
    fn failed_switch_refuses_packets() {
        let mut sw = SwitchState::new(s(0));
        sw.set_status(SwitchStatus::Failed);
        assert!(sw.process(Packet::new(OpCode::Read, Key::default()), Delivery::default()).is_err());
    }

    fn arb_packet() -> impl Strategy<Value = Packet> {
        (0u8..3, 0u16..3, 0u32..6, 0usize..3, any::<u8>(), any::<bool>()).prop_map(|(k, session, seq, sc, v, cas)| {
            let key = Key::from_index(k as u64);
            let mut p = write(key, &[v], &vec![s(9); sc]);
            if cas {
                p.op = OpCode::Cas;
                p.value = vec![v % 2, v];
            }
            p.set_version(Version::new(session, seq));
            p
        })
    }

    proptest! {
        #[test]
        fn stored_versions_never_decrease(pkts in proptest::collection::vec(arb_packet(), 1..60), session in 0u16..3) {
            let mut sw = SwitchState::new(s(0));
            for k in 0..3 {
                sw.store.insert_index(Key::from_index(k), &[0]).unwrap();
            }
            sw.bump_session(session);
            for p in pkts {
                let before: Vec<_> = (0..3).map(|k| sw.store.version_of(&Key::from_index(k)).unwrap()).collect();
                let again = sw.clone();
                let out = deliver(&mut sw, p.clone());
                // determinism
                let mut twin = again;
                prop_assert_eq!(deliver(&mut twin, p.clone()), out);
                for k in 0..3 {
                    prop_assert!(sw.store.version_of(&Key::from_index(k)).unwrap() >= before[k as usize]);
                }
                // redelivering an applied stamped write changes nothing
                if !p.version().is_zero() {
                    let snapshot = sw.store.clone();
                    deliver(&mut sw, p);
                    prop_assert_eq!(&sw.store, &snapshot);
                }
            }
        }
    }
}
