use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::LedgerError;
use crate::castore::PeerId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyMode {
    AllowList,
    DenyList,
}

/// Read permission for a registered file. Only the smaller of the allowed
/// set and its complement is stored; a tie stores the allow-list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccessPolicy {
    pub mode: PolicyMode,
    pub ids: BTreeSet<PeerId>,
    pub network_size: u16,
}

impl AccessPolicy {
    /// Everyone may read: an empty deny-list.
    pub fn open(network_size: u16) -> Self {
        Self {
            mode: PolicyMode::DenyList,
            ids: BTreeSet::new(),
            network_size,
        }
    }

    pub fn allow_list(
        ids: impl IntoIterator<Item = PeerId>,
        network_size: u16,
    ) -> Result<Self, LedgerError> {
        canonicalize_policy(ids, network_size)
    }

    pub fn permits(&self, peer: PeerId) -> bool {
        match self.mode {
            PolicyMode::AllowList => self.ids.contains(&peer),
            PolicyMode::DenyList => peer < self.network_size && !self.ids.contains(&peer),
        }
    }

    pub fn allowed_count(&self) -> usize {
        match self.mode {
            PolicyMode::AllowList => self.ids.len(),
            PolicyMode::DenyList => usize::from(self.network_size) - self.ids.len(),
        }
    }

    /// True when this is exactly what [`canonicalize_policy`] would produce.
    pub fn is_canonical(&self) -> bool {
        let n = usize::from(self.network_size);
        if self.ids.iter().any(|&id| id >= self.network_size) || 2 * self.ids.len() > n {
            return false;
        }
        match self.mode {
            PolicyMode::AllowList => true,
            // A deny-list of exactly half would be stored as an allow-list.
            PolicyMode::DenyList => 2 * self.ids.len() < n,
        }
    }
}

pub fn canonicalize_policy(
    allowed: impl IntoIterator<Item = PeerId>,
    network_size: u16,
) -> Result<AccessPolicy, LedgerError> {
    let allowed: BTreeSet<PeerId> = allowed.into_iter().collect();
    if let Some(&bad) = allowed.iter().find(|&&id| id >= network_size) {
        return Err(LedgerError::PeerOutOfRange {
            peer: bad,
            network_size,
        });
    }
    if 2 * allowed.len() <= usize::from(network_size) {
        Ok(AccessPolicy {
            mode: PolicyMode::AllowList,
            ids: allowed,
            network_size,
        })
    } else {
        Ok(AccessPolicy {
            mode: PolicyMode::DenyList,
            ids: (0..network_size).filter(|id| !allowed.contains(id)).collect(),
            network_size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn everyone_allowed_is_empty_deny_list() {
        let p = canonicalize_policy(0..10, 10).unwrap();
        assert_eq!(p.mode, PolicyMode::DenyList);
        assert!(p.ids.is_empty());
        assert_eq!(p, AccessPolicy::open(10));
    }

    #[test]
    fn nobody_allowed_is_empty_allow_list() {
        let p = canonicalize_policy([], 10).unwrap();
        assert_eq!(p.mode, PolicyMode::AllowList);
        assert!(p.ids.is_empty());
    }

    #[test]
    fn seven_of_ten_stores_three_denied() {
        let p = canonicalize_policy(0..7, 10).unwrap();
        assert_eq!(p.mode, PolicyMode::DenyList);
        assert_eq!(p.ids, BTreeSet::from([7, 8, 9]));
    }

    #[test]
    fn tie_goes_to_allow_list() {
        let p = canonicalize_policy([1, 3, 5, 7, 9], 10).unwrap();
        assert_eq!(p.mode, PolicyMode::AllowList);
        assert_eq!(p.ids.len(), 5);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            canonicalize_policy([10], 10),
            Err(LedgerError::PeerOutOfRange { peer: 10, .. })
        ));
    }

    #[test]
    fn membership_round_trip_exhaustive() {
        for n in 0u16..=12 {
            for mask in 0u32..(1 << n) {
                let allowed: Vec<u16> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                let p = canonicalize_policy(allowed.iter().copied(), n).unwrap();
                assert!(p.is_canonical());
                assert!(2 * p.ids.len() <= usize::from(n));
                assert_eq!(p.allowed_count(), allowed.len());
                for peer in 0..n {
                    assert_eq!(p.permits(peer), allowed.contains(&peer), "n={n} mask={mask:b}");
                }
            }
        }
    }

    #[test]
    fn non_canonical_detected() {
        let p = AccessPolicy {
            mode: PolicyMode::AllowList,
            ids: (0..6).collect(),
            network_size: 10,
        };
        assert!(!p.is_canonical());
        let p = AccessPolicy {
            mode: PolicyMode::DenyList,
            ids: (0..5).collect(),
            network_size: 10,
        };
        assert!(!p.is_canonical());
    }
}
