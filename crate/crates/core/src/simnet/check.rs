//! State and history checkers run by the simulator.

use std::collections::BTreeMap;
use std::fmt;

use crate::dataplane::SwitchStatus;
use crate::placement::{GroupId, SwitchId};
use crate::wire::{Key, Version};

pub use crate::client::history::{check_consistency, HistoryViolation};

/// A broken safety property.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// An upstream member of `key`'s chain holds an older version than a
    /// downstream one.
    UpdatePropagation {
        key: Key,
        chain: Vec<SwitchId>,
        up: SwitchId,
        up_version: Version,
        down: SwitchId,
        down_version: Version,
    },
    /// A client saw a key's version go backwards.
    Consistency(HistoryViolation),
    /// Two clients believed they held the same lock.
    MutualExclusion { key: Key, holders: (u32, u32) },
    /// An acknowledged write is no longer reflected at the tail.
    LostWrite { key: Key, acked: Version, tail: SwitchId, tail_version: Version },
    /// The same version was stamped onto two different values.
    VersionReuse { key: Key, version: Version },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UpdatePropagation {
                key,
                chain,
                up,
                up_version,
                down,
                down_version,
            } => write!(
                f,
                "update propagation: key {key} chain {chain:?}: {up} has {up_version} but downstream {down} has {down_version}"
            ),
            Violation::Consistency(v) => write!(f, "consistency: {v}"),
            Violation::MutualExclusion { key, holders } => {
                write!(f, "mutual exclusion: clients {} and {} both hold {key}", holders.0, holders.1)
            }
            Violation::LostWrite {
                key,
                acked,
                tail,
                tail_version,
            } => write!(f, "lost write: key {key} acknowledged at {acked} but tail {tail} has {tail_version}"),
            Violation::VersionReuse { key, version } => write!(f, "version {version} of key {key} stamped on two values"),
        }
    }
}

/// Members currently serving a chain: live members stay, failed members
/// are replaced by their activated stand-in for `group` or skipped.
pub fn effective_chain(
    chain: &[SwitchId],
    group: GroupId,
    status: impl Fn(SwitchId) -> SwitchStatus,
    activated: &BTreeMap<(SwitchId, GroupId), SwitchId>,
) -> Vec<SwitchId> {
    chain
        .iter()
        .filter_map(|&m| match status(m) {
            SwitchStatus::Alive => Some(m),
            _ => activated.get(&(m, group)).copied(),
        })
        .collect()
}

/// Versions must not increase going down the chain. A member without the
/// key counts as holding the zero version.
pub fn check_update_propagation(key: Key, chain: &[SwitchId], version_at: impl Fn(SwitchId) -> Option<Version>) -> Result<(), Violation> {
    let versions: Vec<Version> = chain.iter().map(|&s| version_at(s).unwrap_or_default()).collect();
    for i in 1..chain.len() {
        if versions[i - 1] < versions[i] {
            // report the first upstream member that is behind
            return Err(Violation::UpdatePropagation {
                key,
                chain: chain.to_vec(),
                up: chain[i - 1],
                up_version: versions[i - 1],
                down: chain[i],
                down_version: versions[i],
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn s(i: u8) -> SwitchId {
        Ipv4Addr::new(10, 0, 0, i)
    }

    #[test]
    fn lagging_downstream_is_fine() {
        let v = BTreeMap::from([(s(0), Version::new(0, 2)), (s(1), Version::new(0, 2)), (s(2), Version::new(0, 1))]);
        assert_eq!(check_update_propagation(Key::default(), &[s(0), s(1), s(2)], |x| v.get(&x).copied()), Ok(()));
    }

    #[test]
    fn downstream_ahead_is_caught() {
        let v = BTreeMap::from([(s(0), Version::new(0, 1)), (s(1), Version::new(0, 3))]);
        let err = check_update_propagation(Key::default(), &[s(0), s(1)], |x| v.get(&x).copied()).unwrap_err();
        assert!(matches!(err, Violation::UpdatePropagation { up, down, .. } if up == s(0) && down == s(1)));
    }

    #[test]
    fn effective_chain_substitutes_and_skips() {
        let status = |x: SwitchId| if x == s(1) || x == s(2) { SwitchStatus::Failed } else { SwitchStatus::Alive };
        let activated = BTreeMap::from([((s(1), 0), s(3))]);
        assert_eq!(effective_chain(&[s(0), s(1), s(2)], 0, status, &activated), vec![s(0), s(3)]);
        assert_eq!(effective_chain(&[s(0), s(1), s(2)], 1, status, &activated), vec![s(0)]);
    }
}
