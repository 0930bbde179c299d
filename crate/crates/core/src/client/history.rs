//! Client-observed operation log and its tab-separated file format.
//!
//! One event per line, fields in this order:
//!
//! ```text
//! client_id  req_id  kind  op  key  value  session  seq  status  time_us
//! ```
//!
//! `kind` is `invoke` or `complete`, `key` and `value` are lowercase hex
//! (`-` for an empty value), `status` is one of `pending`, `ok`,
//! `not_found`, `cas_fail`, `timeout`. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::wire::{Key, OpCode, Version};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Invoke,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Pending,
    Ok,
    NotFound,
    CasFail,
    Timeout,
}

impl Status {
    fn name(self) -> &'static str {
        match self {
            Status::Pending => "pending",
            Status::Ok => "ok",
            Status::NotFound => "not_found",
            Status::CasFail => "cas_fail",
            Status::Timeout => "timeout",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "pending" => Status::Pending,
            "ok" => Status::Ok,
            "not_found" => Status::NotFound,
            "cas_fail" => Status::CasFail,
            "timeout" => Status::Timeout,
            _ => return None,
        })
    }

    /// Whether a completion with this status reports the version the
    /// chain committed. A failed CAS is answered by the head before the
    /// tail has caught up, so its version is informational only.
    pub fn observes_version(self) -> bool {
        self == Status::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HistoryEvent {
    pub client_id: u32,
    pub req_id: u32,
    pub kind: EventKind,
    pub op: OpCode,
    pub key: Key,
    /// Invoke: the value to write. Complete: the value read or written.
    pub value: Vec<u8>,
    pub version: Version,
    pub status: Status,
    pub time_us: u64,
}

impl fmt::Display for HistoryEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            EventKind::Invoke => "invoke",
            EventKind::Complete => "complete",
        };
        let value = if self.value.is_empty() { "-".to_string() } else { hex::encode(&self.value) };
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.client_id,
            self.req_id,
            kind,
            self.op,
            self.key.to_hex(),
            value,
            self.version.session,
            self.version.seq,
            self.status.name(),
            self.time_us
        )
    }
}

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HistoryEvent {
    pub fn parse_line(line: &str, lineno: usize) -> Result<Self, HistoryError> {
        let err = |msg: &str| HistoryError::Parse {
            line: lineno,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(err("expected 10 tab-separated fields"));
        }
        let kind = match f[2] {
            "invoke" => EventKind::Invoke,
            "complete" => EventKind::Complete,
            _ => return Err(err("kind must be invoke or complete")),
        };
        let value = if f[5] == "-" {
            Vec::new()
        } else {
            hex::decode(f[5]).map_err(|_| err("value is not hex"))?
        };
        Ok(HistoryEvent {
            client_id: f[0].parse().map_err(|_| err("bad client_id"))?,
            req_id: f[1].parse().map_err(|_| err("bad req_id"))?,
            kind,
            op: OpCode::parse(f[3]).ok_or_else(|| err("bad op"))?,
            key: Key::from_hex(f[4]).ok_or_else(|| err("bad key"))?,
            value,
            version: Version::new(
                f[6].parse().map_err(|_| err("bad session"))?,
                f[7].parse().map_err(|_| err("bad seq"))?,
            ),
            status: Status::parse(f[8]).ok_or_else(|| err("bad status"))?,
            time_us: f[9].parse().map_err(|_| err("bad time"))?,
        })
    }
}

pub fn write_history<W: Write>(mut w: W, events: &[HistoryEvent]) -> io::Result<()> {
    writeln!(w, "# client_id\treq_id\tkind\top\tkey\tvalue\tsession\tseq\tstatus\ttime_us")?;
    for e in events {
        writeln!(w, "{e}")?;
    }
    Ok(())
}

pub fn read_history<R: BufRead>(r: R) -> Result<Vec<HistoryEvent>, HistoryError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(HistoryEvent::parse_line(line, i + 1)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HistoryViolation {
    #[error("client {client_id} saw key {key} go from {earlier} (req {earlier_req}) back to {later} (req {later_req})")]
    VersionWentBack {
        client_id: u32,
        key: Key,
        earlier: Version,
        earlier_req: u32,
        later: Version,
        later_req: u32,
    },
    #[error("client {client_id} req {req_id} completed without an invoke")]
    OrphanComplete { client_id: u32, req_id: u32 },
    #[error("client {client_id} req {req_id} completed twice")]
    DoubleComplete { client_id: u32, req_id: u32 },
}

/// Each client's successive observations of a key must carry non-decreasing
/// versions, and completions must match invocations one to one.
pub fn check_consistency(events: &[HistoryEvent]) -> Result<(), HistoryViolation> {
    let mut invoked: BTreeMap<(u32, u32), bool> = BTreeMap::new();
    let mut last: BTreeMap<(u32, Key), (Version, u32)> = BTreeMap::new();
    for e in events {
        let id = (e.client_id, e.req_id);
        match e.kind {
            EventKind::Invoke => {
                invoked.insert(id, false);
            }
            EventKind::Complete => {
                match invoked.get_mut(&id) {
                    None => {
                        return Err(HistoryViolation::OrphanComplete {
                            client_id: e.client_id,
                            req_id: e.req_id,
                        })
                    }
                    Some(true) => {
                        return Err(HistoryViolation::DoubleComplete {
                            client_id: e.client_id,
                            req_id: e.req_id,
                        })
                    }
                    Some(done) => *done = true,
                }
                if !e.status.observes_version() {
                    continue;
                }
                let slot = last.entry((e.client_id, e.key)).or_insert((Version::ZERO, 0));
                if e.version < slot.0 {
                    return Err(HistoryViolation::VersionWentBack {
                        client_id: e.client_id,
                        key: e.key,
                        earlier: slot.0,
                        earlier_req: slot.1,
                        later: e.version,
                        later_req: e.req_id,
                    });
                }
                *slot = (e.version, e.req_id);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(req: u32, kind: EventKind, op: OpCode, seq: u32) -> HistoryEvent {
        HistoryEvent {
            client_id: 7,
            req_id: req,
            kind,
            op,
            key: Key::from_index(1),
            value: b"v".to_vec(),
            version: Version::new(0, seq),
            status: if kind == EventKind::Invoke { Status::Pending } else { Status::Ok },
            time_us: req as u64 * 10,
        }
    }

    fn read_pair(req: u32, seq: u32) -> [HistoryEvent; 2] {
        [ev(req, EventKind::Invoke, OpCode::Read, 0), ev(req, EventKind::Complete, OpCode::Read, seq)]
    }

    #[test]
    fn repeated_version_is_fine() {
        let h: Vec<_> = read_pair(1, 1).into_iter().chain(read_pair(2, 1)).collect();
        assert_eq!(check_consistency(&h), Ok(()));
    }

    #[test]
    fn decreasing_version_is_caught() {
        let h: Vec<_> = read_pair(1, 2).into_iter().chain(read_pair(2, 1)).collect();
        assert!(matches!(check_consistency(&h), Err(HistoryViolation::VersionWentBack { .. })));
    }

    #[test]
    fn orphan_and_double_completes() {
        let c = ev(1, EventKind::Complete, OpCode::Read, 1);
        assert!(matches!(check_consistency(std::slice::from_ref(&c)), Err(HistoryViolation::OrphanComplete { .. })));
        let h = vec![ev(1, EventKind::Invoke, OpCode::Read, 0), c.clone(), c];
        assert!(matches!(check_consistency(&h), Err(HistoryViolation::DoubleComplete { .. })));
    }

    #[test]
    fn timeouts_carry_no_version() {
        let mut t = ev(2, EventKind::Complete, OpCode::Read, 0);
        t.status = Status::Timeout;
        let h: Vec<_> = read_pair(1, 3)
            .into_iter()
            .chain([ev(2, EventKind::Invoke, OpCode::Read, 0), t])
            .collect();
        assert_eq!(check_consistency(&h), Ok(()));
    }

    #[test]
    fn tsv_round_trip() {
        let mut h: Vec<_> = read_pair(1, 2).into_iter().chain(read_pair(2, 3)).collect();
        h[0].value.clear();
        h[3].status = Status::CasFail;
        let mut buf = Vec::new();
        write_history(&mut buf, &h).unwrap();
        let back = read_history(buf.as_slice()).unwrap();
        assert_eq!(back, h);
        assert!(matches!(read_history(&b"1\t2\n"[..]), Err(HistoryError::Parse { line: 1, .. })));
    }
}
