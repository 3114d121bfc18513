//! Induced defragmentation: drain partially used partitionable slots so that
//! whole multicore slots reappear for high-priority jobs. Draining is by
//! attrition only; running jobs are never killed.

use serde::{Deserialize, Serialize};

use crate::slot::{whole_machine_count, MachineId, PartitionableSlot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DrainRank {
    /// Most free cores first.
    #[default]
    ClosestToWhole,
    /// Most dynamic slots first.
    MostFragmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefragConfig {
    pub enabled: bool,
    pub interval_s: f64,
    pub max_concurrent_draining: u32,
    pub whole_slot_target: u32,
    pub whole_threshold_cores: u32,
    pub rank: DrainRank,
}

impl Default for DefragConfig {
    fn default() -> Self {
        DefragConfig {
            enabled: false,
            interval_s: 600.0,
            max_concurrent_draining: 2,
            whole_slot_target: 4,
            whole_threshold_cores: 8,
            rank: DrainRank::ClosestToWhole,
        }
    }
}

impl DefragConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.interval_s > 0.0 && self.interval_s.is_finite()) {
            errs.push("interval_s must be positive".to_owned());
        }
        if self.enabled && self.max_concurrent_draining < 1 {
            errs.push("max_concurrent_draining must be at least 1 when enabled".to_owned());
        }
        if self.whole_threshold_cores < 1 {
            errs.push("whole_threshold_cores must be at least 1".to_owned());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DrainAction {
    Drain,
    Undrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefragRecord {
    pub time: f64,
    pub machine: MachineId,
    pub action: DrainAction,
    /// Whole-slot count when the cycle ran.
    pub whole_count: usize,
}

/// One daemon pass over `slots` (those eligible for new work). Either cancels
/// all drains once enough whole slots exist, or starts draining the best
/// candidates up to the concurrency limit.
pub fn defrag_cycle(slots: &mut [&mut PartitionableSlot], config: &DefragConfig, now: f64) -> Vec<DefragRecord> {
    if !config.enabled {
        return Vec::new();
    }
    let threshold = config.whole_threshold_cores;
    let whole = whole_machine_count(slots.iter().map(|s| &**s), threshold);
    let mut out = Vec::new();
    if whole >= config.whole_slot_target as usize {
        for s in slots.iter_mut().filter(|s| s.draining) {
            s.draining = false;
            out.push(DefragRecord {
                time: now,
                machine: s.machine_id.clone(),
                action: DrainAction::Undrain,
                whole_count: whole,
            });
        }
        return out;
    }
    let draining = slots.iter().filter(|s| s.draining).count();
    let budget = (config.max_concurrent_draining as usize).saturating_sub(draining);
    if budget == 0 {
        return out;
    }
    let mut candidates: Vec<usize> = (0..slots.len())
        .filter(|&i| {
            let s = &slots[i];
            !s.draining && s.free_cores < threshold && s.total_cores >= threshold
        })
        .collect();
    candidates.sort_by(|&a, &b| {
        let (sa, sb) = (&slots[a], &slots[b]);
        let key = match config.rank {
            DrainRank::ClosestToWhole => sb.free_cores.cmp(&sa.free_cores),
            DrainRank::MostFragmented => sb.dynamic_slots.len().cmp(&sa.dynamic_slots.len()),
        };
        key.then_with(|| sa.machine_id.cmp(&sb.machine_id))
    });
    for i in candidates.into_iter().take(budget) {
        slots[i].draining = true;
        out.push(DefragRecord {
            time: now,
            machine: slots[i].machine_id.clone(),
            action: DrainAction::Drain,
            whole_count: whole,
        });
    }
    out
}
