//! Machines and partitionable-slot resource arithmetic.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::JobId;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MachineId(pub String);

impl fmt::Display for MachineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for MachineId {
    fn from(s: &str) -> Self {
        MachineId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DynamicSlotId(pub u32);

impl fmt::Display for DynamicSlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "slot1_{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AvailabilityClass {
    /// Dedicated to offline work in every LHC phase.
    Permanent,
    /// Usable only while the LHC is not taking data.
    Opportunistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub id: MachineId,
    pub total_cores: u32,
    pub memory_mb: u64,
    pub site: String,
    /// Stand-in for a working software area; pilots that validate will refuse
    /// to join the pool from a machine where this is false.
    pub cvmfs_healthy: bool,
    pub availability: AvailabilityClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicSlot {
    pub id: DynamicSlotId,
    pub cores: u32,
    pub memory_mb: u64,
    pub claimed_job: Option<JobId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SlotError {
    #[error("insufficient resources: requested {req_cores} cores / {req_memory_mb} MB, free {free_cores} cores / {free_memory_mb} MB")]
    InsufficientResources {
        req_cores: u32,
        req_memory_mb: u64,
        free_cores: u32,
        free_memory_mb: u64,
    },
    #[error("partitionable slot is draining")]
    Draining,
    #[error("request must be at least one core and one MB")]
    EmptyRequest,
    #[error("unknown dynamic slot {0}")]
    UnknownSlot(DynamicSlotId),
}

/// Machine-wide slot from which dynamic slots are carved per job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionableSlot {
    pub machine_id: MachineId,
    pub total_cores: u32,
    pub total_memory_mb: u64,
    pub free_cores: u32,
    pub free_memory_mb: u64,
    pub dynamic_slots: Vec<DynamicSlot>,
    pub draining: bool,
    next_id: u32,
}

/// Outcome of [`PartitionableSlot::release`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Released {
    pub slot: DynamicSlot,
    /// The slot was draining and this release emptied it; draining is now off.
    pub drain_finished: bool,
}

impl PartitionableSlot {
    pub fn new(machine_id: MachineId, total_cores: u32, total_memory_mb: u64) -> Self {
        PartitionableSlot {
            machine_id,
            total_cores,
            total_memory_mb,
            free_cores: total_cores,
            free_memory_mb: total_memory_mb,
            dynamic_slots: Vec::new(),
            draining: false,
            next_id: 1,
        }
    }

    pub fn fits(&self, cores: u32, memory_mb: u64) -> bool {
        !self.draining && cores <= self.free_cores && memory_mb <= self.free_memory_mb
    }

    /// Carves a dynamic slot; on error the partitionable slot is unchanged.
    pub fn carve(&mut self, cores: u32, memory_mb: u64) -> Result<&mut DynamicSlot, SlotError> {
        if self.draining {
            return Err(SlotError::Draining);
        }
        if cores == 0 || memory_mb == 0 {
            return Err(SlotError::EmptyRequest);
        }
        if cores > self.free_cores || memory_mb > self.free_memory_mb {
            return Err(SlotError::InsufficientResources {
                req_cores: cores,
                req_memory_mb: memory_mb,
                free_cores: self.free_cores,
                free_memory_mb: self.free_memory_mb,
            });
        }
        self.free_cores -= cores;
        self.free_memory_mb -= memory_mb;
        let id = DynamicSlotId(self.next_id);
        self.next_id += 1;
        self.dynamic_slots.push(DynamicSlot {
            id,
            cores,
            memory_mb,
            claimed_job: None,
        });
        Ok(self.dynamic_slots.last_mut().expect("just pushed"))
    }

    pub fn release(&mut self, id: DynamicSlotId) -> Result<Released, SlotError> {
        let idx = self
            .dynamic_slots
            .iter()
            .position(|d| d.id == id)
            .ok_or(SlotError::UnknownSlot(id))?;
        let slot = self.dynamic_slots.remove(idx);
        self.free_cores += slot.cores;
        self.free_memory_mb += slot.memory_mb;
        let drain_finished = self.draining && self.dynamic_slots.is_empty();
        if drain_finished {
            self.draining = false;
        }
        Ok(Released { slot, drain_finished })
    }

    pub fn dynamic_slot(&self, id: DynamicSlotId) -> Option<&DynamicSlot> {
        self.dynamic_slots.iter().find(|d| d.id == id)
    }

    pub fn dynamic_slot_mut(&mut self, id: DynamicSlotId) -> Option<&mut DynamicSlot> {
        self.dynamic_slots.iter_mut().find(|d| d.id == id)
    }

    pub fn used_cores(&self) -> u32 {
        self.dynamic_slots.iter().map(|d| d.cores).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.dynamic_slots.is_empty()
    }

    pub fn is_whole(&self, threshold_cores: u32) -> bool {
        !self.draining && self.free_cores >= threshold_cores
    }

    /// Checks that free plus allocated resources add up to the slot totals.
    pub fn check_conservation(&self) -> Result<(), String> {
        let cores: u64 = self.dynamic_slots.iter().map(|d| u64::from(d.cores)).sum();
        let mem: u64 = self.dynamic_slots.iter().map(|d| d.memory_mb).sum();
        if cores + u64::from(self.free_cores) != u64::from(self.total_cores) {
            return Err(format!(
                "{}: free {} + allocated {} cores != total {}",
                self.machine_id, self.free_cores, cores, self.total_cores
            ));
        }
        if mem + self.free_memory_mb != self.total_memory_mb {
            return Err(format!(
                "{}: free {} + allocated {} MB != total {}",
                self.machine_id, self.free_memory_mb, mem, self.total_memory_mb
            ));
        }
        Ok(())
    }
}

/// Number of non-draining slots with at least `threshold_cores` free.
pub fn whole_machine_count<'a>(slots: impl IntoIterator<Item = &'a PartitionableSlot>, threshold_cores: u32) -> usize {
    slots.into_iter().filter(|s| s.is_whole(threshold_cores)).count()
}
