//! Round-robin assignment of the Active role.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::VoltChainError;
use crate::castore::PeerId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PuRole {
    Active,
    Dormant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationSchedule {
    order: Vec<PeerId>,
    slot_duration: u64,
    active_count: usize,
}

impl RotationSchedule {
    pub fn new(order: Vec<PeerId>, slot_duration: u64, active_count: usize) -> Result<Self, VoltChainError> {
        let bad = |m: String| Err(VoltChainError::InvalidConfig(m));
        if order.is_empty() {
            return bad("rotation order is empty".into());
        }
        let distinct: HashSet<_> = order.iter().collect();
        if distinct.len() != order.len() {
            return bad("rotation order repeats a peer".into());
        }
        if slot_duration == 0 {
            return bad("slot_duration must be positive".into());
        }
        if active_count == 0 || active_count > order.len() {
            return bad(format!("active_count must be in 1..={}", order.len()));
        }
        Ok(Self {
            order,
            slot_duration,
            active_count,
        })
    }

    /// Peers `0..n` in id order.
    pub fn round_robin(n: u16, slot_duration: u64, active_count: usize) -> Result<Self, VoltChainError> {
        Self::new((0..n).collect(), slot_duration, active_count)
    }

    pub fn order(&self) -> &[PeerId] {
        &self.order
    }

    pub fn slot_duration(&self) -> u64 {
        self.slot_duration
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    /// Ticks after which the assignment repeats.
    pub fn period(&self) -> u64 {
        self.slot_duration * self.order.len() as u64
    }

    fn first_slot(&self, tick: u64) -> usize {
        ((tick / self.slot_duration) % self.order.len() as u64) as usize
    }

    /// The scheduled Active peers at `tick`, in rotation order.
    pub fn actives(&self, tick: u64) -> Vec<PeerId> {
        let start = self.first_slot(tick);
        (0..self.active_count)
            .map(|k| self.order[(start + k) % self.order.len()])
            .collect()
    }

    /// Like [`Self::actives`], but a peer failing `is_live` hands its slot to
    /// the next live peer in rotation order that is not already Active.
    pub fn live_actives(&self, tick: u64, is_live: impl Fn(PeerId) -> bool) -> Vec<PeerId> {
        let n = self.order.len();
        let start = self.first_slot(tick);
        let mut chosen = Vec::with_capacity(self.active_count);
        let mut k = 0;
        while chosen.len() < self.active_count && k < n {
            let p = self.order[(start + k) % n];
            if is_live(p) {
                chosen.push(p);
            }
            k += 1;
        }
        chosen
    }
}

pub fn rotate_roles(schedule: &RotationSchedule, tick: u64) -> BTreeMap<PeerId, PuRole> {
    assign(schedule, &schedule.actives(tick))
}

pub(crate) fn assign(schedule: &RotationSchedule, actives: &[PeerId]) -> BTreeMap<PeerId, PuRole> {
    schedule
        .order
        .iter()
        .map(|&p| {
            let role = if actives.contains(&p) { PuRole::Active } else { PuRole::Dormant };
            (p, role)
        })
        .collect()
}
