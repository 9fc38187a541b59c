//! Pipeline-parallel schedule simulator: slot tables for the naive and
//! interleaved (fill-drain microbatch) policies, with bubble metrics.
//!
//! Unit-cost forward and backward slots. The naive policy runs one
//! microbatch at a time through all stages, so exactly one stage is active
//! per slot; the interleaved policy pipelines the forward pass across
//! slots 0..M+S-1 and then the backward pass likewise.

use crate::error::{Result, RuntimeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulePolicy {
    Naive,
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    Idle,
    Fwd(usize),
    Bwd(usize),
}

/// A simulated schedule: `slots[t][s]` is stage `s`'s activity in time slot
/// `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSchedule {
    pub stages: usize,
    pub microbatches: usize,
    pub policy: SchedulePolicy,
    pub slots: Vec<Vec<Activity>>,
}

pub fn pipeline_schedule(stages: usize, microbatches: usize, policy: SchedulePolicy) -> PipelineSchedule {
    assert!(stages >= 1 && microbatches >= 1);
    let slots = match policy {
        SchedulePolicy::Naive => {
            // One activity in the whole machine per slot: 2*M*S slots.
            let mut slots = Vec::with_capacity(2 * microbatches * stages);
            for m in 0..microbatches {
                for s in 0..stages {
                    let mut row = vec![Activity::Idle; stages];
                    row[s] = Activity::Fwd(m);
                    slots.push(row);
                }
                for s in (0..stages).rev() {
                    let mut row = vec![Activity::Idle; stages];
                    row[s] = Activity::Bwd(m);
                    slots.push(row);
                }
            }
            slots
        }
        SchedulePolicy::Interleaved => {
            // Fill-drain: Fwd(m) at stage s in slot m+s; Bwd(m) at stage s in
            // slot offset + m + (S-1-s).
            let span = microbatches + stages - 1;
            let mut slots = vec![vec![Activity::Idle; stages]; 2 * span];
            for m in 0..microbatches {
                for s in 0..stages {
                    slots[m + s][s] = Activity::Fwd(m);
                    slots[span + m + (stages - 1 - s)][s] = Activity::Bwd(m);
                }
            }
            slots
        }
    };
    PipelineSchedule { stages, microbatches, policy, slots }
}

impl PipelineSchedule {
    pub fn total_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn active_cells(&self) -> usize {
        self.slots
            .iter()
            .flat_map(|row| row.iter())
            .filter(|a| !matches!(a, Activity::Idle))
            .count()
    }

    pub fn idle_cells(&self) -> usize {
        self.stages * self.total_slots() - self.active_cells()
    }

    /// Idle stage-slots over all stage-slots, as an exact fraction.
    pub fn bubble_ratio(&self) -> (usize, usize) {
        (self.idle_cells(), self.stages * self.total_slots())
    }

    pub fn bubble_fraction(&self) -> f64 {
        let (num, den) = self.bubble_ratio();
        num as f64 / den as f64
    }

    pub fn active_fraction(&self) -> f64 {
        let (idle, total) = self.bubble_ratio();
        (total - idle) as f64 / total as f64
    }

    /// Constraint verifier: per-microbatch forward precedence across stages,
    /// backward in reverse stage order after the forward finishes, exactly
    /// one activity per (microbatch, stage, direction), and one activity per
    /// stage per slot (by construction of the table).
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(RuntimeError::Type(format!("invalid schedule: {msg}")));
        let mut fwd = vec![vec![None; self.stages]; self.microbatches];
        let mut bwd = vec![vec![None; self.stages]; self.microbatches];
        for (t, row) in self.slots.iter().enumerate() {
            if row.len() != self.stages {
                return fail(format!("slot {t} has {} stages", row.len()));
            }
            for (s, activity) in row.iter().enumerate() {
                match activity {
                    Activity::Idle => {}
                    Activity::Fwd(m) => {
                        if fwd[*m][s].replace(t).is_some() {
                            return fail(format!("Fwd({m}) at stage {s} scheduled twice"));
                        }
                    }
                    Activity::Bwd(m) => {
                        if bwd[*m][s].replace(t).is_some() {
                            return fail(format!("Bwd({m}) at stage {s} scheduled twice"));
                        }
                    }
                }
            }
        }
        for m in 0..self.microbatches {
            for s in 0..self.stages {
                let (f, b) = (fwd[m][s], bwd[m][s]);
                if f.is_none() || b.is_none() {
                    return fail(format!("microbatch {m} missing work at stage {s}"));
                }
                if s + 1 < self.stages {
                    if fwd[m][s] >= fwd[m][s + 1] {
                        return fail(format!("Fwd({m}) stage {s} not before stage {}", s + 1));
                    }
                    if bwd[m][s] <= bwd[m][s + 1] {
                        return fail(format!("Bwd({m}) stage {s} not after stage {}", s + 1));
                    }
                }
            }
            if fwd[m][self.stages - 1] >= bwd[m][self.stages - 1] {
                return fail(format!("microbatch {m} backward starts before forward ends"));
            }
        }
        Ok(())
    }
}
