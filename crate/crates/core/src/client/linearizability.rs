//! Linearizability of a history against single-register semantics, one
//! key at a time.
//!
//! Search follows Wing and Gong with Lowe's memoization: repeatedly pick an
//! operation that no remaining operation finished before, apply it to the
//! register if it is legal there, and remember `(done set, register)`
//! pairs already shown to be dead ends.
//!
//! How history entries become register operations:
//!
//! * a completed read must return the register's value;
//! * a completed write or successful CAS sets the register (the expected
//!   value of a CAS is not recorded in the history, so it is not checked);
//! * a write or CAS without an `ok` completion may take effect at any point
//!   after its invocation, or never;
//! * reads that never completed, failed CAS attempts and `not_found`
//!   results constrain nothing and are left out. A failed CAS is answered
//!   by the head, which can be ahead of the tail.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use super::history::{EventKind, HistoryEvent, Status};
use crate::wire::{Key, OpCode};

/// Histories with more register operations than this per key are refused.
pub const MAX_OPS_PER_KEY: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RegOp {
    Read(Vec<u8>),
    Write(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operation {
    pub client_id: u32,
    pub req_id: u32,
    pub op: RegOp,
    pub invoke_us: u64,
    /// `None` when the operation may still take effect at any later time.
    pub complete_us: Option<u64>,
}

impl Operation {
    pub fn is_required(&self) -> bool {
        self.complete_us.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinearizabilityError {
    #[error("key {key}: no linearization exists for its {ops} operations")]
    NotLinearizable { key: Key, ops: usize },
    #[error("key {key}: {ops} operations exceed the limit of {MAX_OPS_PER_KEY}")]
    TooLarge { key: Key, ops: usize },
    #[error("client {client_id} req {req_id}: completion without an invoke")]
    Unmatched { client_id: u32, req_id: u32 },
}

/// Register operations per key, in invocation order.
pub fn operations(events: &[HistoryEvent]) -> Result<BTreeMap<Key, Vec<Operation>>, LinearizabilityError> {
    let mut invokes: BTreeMap<(u32, u32), &HistoryEvent> = BTreeMap::new();
    let mut completes: BTreeMap<(u32, u32), &HistoryEvent> = BTreeMap::new();
    for e in events {
        let id = (e.client_id, e.req_id);
        match e.kind {
            EventKind::Invoke => {
                invokes.insert(id, e);
            }
            EventKind::Complete => {
                completes.insert(id, e);
            }
        }
    }
    if let Some(&(client_id, req_id)) = completes.keys().find(|id| !invokes.contains_key(id)) {
        return Err(LinearizabilityError::Unmatched { client_id, req_id });
    }
    let mut out: BTreeMap<Key, Vec<Operation>> = BTreeMap::new();
    for (id, inv) in invokes {
        let done = completes.get(&id).filter(|c| c.status == Status::Ok);
        let op = match (inv.op, done) {
            (OpCode::Read, Some(c)) => RegOp::Read(c.value.clone()),
            (OpCode::Read, None) => continue,
            (OpCode::Write | OpCode::Cas, _) => {
                let failed = completes.get(&id).is_some_and(|c| matches!(c.status, Status::CasFail | Status::NotFound));
                if failed {
                    continue;
                }
                RegOp::Write(inv.value.clone())
            }
            _ => continue,
        };
        out.entry(inv.key).or_default().push(Operation {
            client_id: id.0,
            req_id: id.1,
            op,
            invoke_us: inv.time_us,
            complete_us: done.map(|c| c.time_us),
        });
    }
    for ops in out.values_mut() {
        ops.sort_by_key(|o| (o.invoke_us, o.client_id, o.req_id));
    }
    Ok(out)
}

/// Whether `ops` on one register, starting from `initial` (`None` when the
/// initial value is unknown), have a linearization.
pub fn is_linearizable(ops: &[Operation], initial: Option<&[u8]>) -> bool {
    assert!(ops.len() <= MAX_OPS_PER_KEY, "too many operations for one search");
    let required: u128 = ops
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_required())
        .fold(0, |m, (i, _)| m | (1u128 << i));
    let mut search = Search {
        ops,
        required,
        dead: HashSet::new(),
    };
    search.run(0, initial.map(<[u8]>::to_vec))
}

struct Search<'a> {
    ops: &'a [Operation],
    required: u128,
    dead: HashSet<(u128, Option<Vec<u8>>)>,
}

impl Search<'_> {
    fn run(&mut self, done: u128, reg: Option<Vec<u8>>) -> bool {
        if done & self.required == self.required {
            return true;
        }
        if self.dead.contains(&(done, reg.clone())) {
            return false;
        }
        // an operation may go next unless some remaining one finished
        // before it started
        let horizon = self
            .ops
            .iter()
            .enumerate()
            .filter(|(i, _)| done & (1 << i) == 0)
            .filter_map(|(_, o)| o.complete_us)
            .min()
            .unwrap_or(u64::MAX);
        for (i, o) in self.ops.iter().enumerate() {
            if done & (1 << i) != 0 || o.invoke_us > horizon {
                continue;
            }
            let next = match &o.op {
                RegOp::Read(v) => match &reg {
                    Some(cur) if cur != v => continue,
                    _ => Some(v.clone()),
                },
                RegOp::Write(v) => Some(v.clone()),
            };
            if self.run(done | (1 << i), next) {
                return true;
            }
        }
        self.dead.insert((done, reg));
        false
    }
}

/// Checks every key of a history.
pub fn check_linearizable(events: &[HistoryEvent], initial: Option<&[u8]>) -> Result<(), LinearizabilityError> {
    for (key, ops) in operations(events)? {
        if ops.len() > MAX_OPS_PER_KEY {
            return Err(LinearizabilityError::TooLarge { key, ops: ops.len() });
        }
        if !is_linearizable(&ops, initial) {
            return Err(LinearizabilityError::NotLinearizable { key, ops: ops.len() });
        }
    }
    Ok(())
}
