//! Locks built on compare-and-swap, and a two-phase-locking workload.
//!
//! A lock's value is 8 bytes: the owner's client id followed by a fencing
//! token, both big-endian; all zeros means free. Acquire is
//! `CAS(free -> (me, token))` and release is `CAS((me, token) -> free)`,
//! with a fresh token per acquisition. The token keeps a delayed or
//! duplicated release from an earlier acquisition from freeing a later one.


use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Completion, OpResult, Request};
use crate::wire::Key;

pub const LOCK_LEN: usize = 8;
pub const FREE: [u8; LOCK_LEN] = [0; LOCK_LEN];

pub fn lock_value(owner: u32, token: u32) -> [u8; LOCK_LEN] {
    let mut v = [0u8; LOCK_LEN];
    v[..4].copy_from_slice(&owner.to_be_bytes());
    v[4..].copy_from_slice(&token.to_be_bytes());
    v
}

/// `(owner, token)` of a held lock, `None` if free or malformed.
pub fn holder(value: &[u8]) -> Option<(u32, u32)> {
    if value.len() != LOCK_LEN || value == FREE {
        return None;
    }
    Some((
        u32::from_be_bytes(value[..4].try_into().unwrap()),
        u32::from_be_bytes(value[4..].try_into().unwrap()),
    ))
}

pub fn acquire(key: Key, owner: u32, token: u32) -> Request {
    Request::Cas {
        key,
        expected: FREE.to_vec(),
        new: lock_value(owner, token).to_vec(),
    }
}

pub fn release(key: Key, owner: u32, token: u32) -> Request {
    Request::Cas {
        key,
        expected: lock_value(owner, token).to_vec(),
        new: FREE.to_vec(),
    }
}

/// Only a write acknowledged by the tail wins a lock.
pub fn acquire_succeeded(result: &OpResult) -> bool {
    matches!(result, OpResult::Written { .. })
}

/// Whether the lock may be ours even though the acquire did not report a
/// win: it timed out, or a retry found our own value at the head. The head
/// answers a failed CAS before the earlier attempt has reached the tail,
/// so that value is not committed yet and could still be lost with the
/// head. Either way the caller should release it.
pub fn acquire_uncertain(result: &OpResult, owner: u32, token: u32) -> bool {
    match result {
        OpResult::TimedOut => true,
        OpResult::CasFailed { current, .. } => current.as_slice() == lock_value(owner, token),
        _ => false,
    }
}

/// `held` says whether the caller believed it owned the lock under `token`.
/// An owner whose release fails against some other value has already
/// released it (an earlier attempt landed); a non-owner never succeeds.
pub fn release_succeeded(result: &OpResult, owner: u32, token: u32, held: bool) -> bool {
    match result {
        OpResult::Written { .. } => held,
        OpResult::CasFailed { current, .. } => held && current.as_slice() != lock_value(owner, token),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Acquiring,
    /// Releasing after a commit (`true`) or an abort (`false`).
    Releasing { committed: bool },
}

/// One client running two-phase-locking transactions: acquire one hot lock
/// and some cold ones, then release them all. A failed acquire aborts the
/// transaction, releases what was taken, and retries the same lock set.
#[derive(Debug, Clone)]
pub struct TxnClient {
    owner: u32,
    hot: Vec<Key>,
    cold: Vec<Key>,
    cold_per_txn: usize,
    rng: ChaCha8Rng,
    next_token: u32,
    want: Vec<Key>,
    phase: Phase,
    owned: Vec<(Key, u32)>,
    /// Acquires whose outcome is unknown (timed out); released on abort.
    uncertain: Vec<(Key, u32)>,
    in_flight: Option<(u32, bool)>,
    pub committed: u64,
    pub aborted: u64,
}

impl TxnClient {
    pub fn new(owner: u32, hot: Vec<Key>, cold: Vec<Key>, cold_per_txn: usize, rng: ChaCha8Rng) -> Self {
        assert!(!hot.is_empty() && cold.len() >= cold_per_txn);
        let mut c = TxnClient {
            owner,
            hot,
            cold,
            cold_per_txn,
            rng,
            next_token: 1,
            want: Vec::new(),
            phase: Phase::Acquiring,
            owned: Vec::new(),
            uncertain: Vec::new(),
            in_flight: None,
            committed: 0,
            aborted: 0,
        };
        c.pick_locks();
        c
    }

    fn pick_locks(&mut self) {
        let hot = self.hot[self.rng.gen_range(0..self.hot.len())];
        let cold = sample(&mut self.rng, self.cold.len(), self.cold_per_txn);
        self.want = std::iter::once(hot).chain(cold.into_iter().map(|i| self.cold[i])).collect();
    }

    /// Keys this client currently believes it owns. A key leaves this set
    /// as soon as its release is issued.
    pub fn owned(&self) -> impl Iterator<Item = Key> + '_ {
        self.owned.iter().map(|(k, _)| *k)
    }

    /// The next request to send. Call again only after the previous one
    /// completed.
    pub fn next_request(&mut self) -> Request {
        assert!(self.in_flight.is_none(), "one request at a time");
        if self.phase == Phase::Acquiring {
            let key = self.want[self.owned.len()];
            let token = self.next_token;
            self.next_token += 1;
            self.in_flight = Some((token, false));
            return acquire(key, self.owner, token);
        }
        let ((key, token), held) = match self.owned.pop() {
            Some(o) => (o, true),
            None => (self.uncertain.pop().expect("nothing to release"), false),
        };
        self.in_flight = Some((token, held));
        release(key, self.owner, token)
    }

    pub fn on_complete(&mut self, c: &Completion) {
        let (token, _held) = self.in_flight.take().expect("completion without request");
        match self.phase {
            Phase::Acquiring => {
                if acquire_succeeded(&c.result) {
                    self.owned.push((c.request.key(), token));
                    if self.owned.len() == self.want.len() {
                        self.committed += 1;
                        self.phase = Phase::Releasing { committed: true };
                    }
                    return;
                }
                if acquire_uncertain(&c.result, self.owner, token) {
                    self.uncertain.push((c.request.key(), token));
                }
                self.aborted += 1;
                self.phase = Phase::Releasing { committed: false };
            }
            Phase::Releasing { .. } => {}
        }
        if let Phase::Releasing { committed } = self.phase {
            if self.owned.is_empty() && self.uncertain.is_empty() {
                if committed {
                    self.pick_locks();
                }
                self.phase = Phase::Acquiring;
            }
        }
    }
}

/// Lock count for a contention index: the inverse, rounded up.
pub fn hot_items(contention_index: f64) -> usize {
    assert!(contention_index > 0.0 && contention_index <= 1.0);
    (1.0 / contention_index - 1e-9).ceil().max(1.0) as usize
}
