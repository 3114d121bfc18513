//! LHC operating cycle: which phase the accelerator is in, and which machines
//! that leaves available for offline work.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::{JobId, JobState, PoolError};
use crate::provisioning::PilotId;
use crate::sim::Cluster;
use crate::slot::{AvailabilityClass, MachineId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Stable beams: the online farm needs its machines back.
    Fill,
    Interfill,
    TechnicalStop,
}

/// Permanent machines are always available, opportunistic ones only while the
/// LHC is not delivering physics.
pub fn available(class: AvailabilityClass, phase: Phase) -> bool {
    match class {
        AvailabilityClass::Permanent => true,
        AvailabilityClass::Opportunistic => phase != Phase::Fill,
    }
}

/// What a phase change did to the cluster.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseEffects {
    pub withdrawn: Vec<MachineId>,
    pub returned: Vec<MachineId>,
    pub suspended_jobs: Vec<JobId>,
    pub resumed_jobs: Vec<JobId>,
    pub requeued_jobs: Vec<JobId>,
    pub resumed_pilots: Vec<PilotId>,
}

/// Applies the availability policy for `new`. Opportunistic machines being
/// withdrawn have their VM suspended with every job on it; machines coming
/// back resume their jobs, or requeue those suspended for too long.
pub fn on_phase_change(cluster: &mut Cluster, new: Phase, now: f64) -> Result<PhaseEffects, PoolError> {
    let mut fx = PhaseEffects::default();
    cluster.phase = new;
    for i in 0..cluster.machines.len() {
        let m = cluster.machines[i].id.clone();
        let was = cluster.available[i];
        let is = available(cluster.machines[i].availability, new);
        if was == is {
            continue;
        }
        cluster.available[i] = is;
        if !is {
            fx.withdrawn.push(m.clone());
            cluster.provisioner.suspend(&m, now);
            if let Some(slot) = cluster.pools.slot_mut(&m) {
                slot.suspended = true;
            }
            for j in cluster.pools.jobs_on(&m) {
                if cluster.pools.job(j).map(|j| j.state) == Some(JobState::Running) {
                    cluster.pools.suspend_job(j, now)?;
                    fx.suspended_jobs.push(j);
                }
            }
        } else {
            fx.returned.push(m.clone());
            if let Some(p) = cluster.provisioner.resume(&m, now) {
                fx.resumed_pilots.push(p);
            }
            if let Some(slot) = cluster.pools.slot_mut(&m) {
                slot.suspended = false;
            }
            for j in cluster.pools.jobs_on(&m) {
                if cluster.pools.job(j).map(|j| j.state) == Some(JobState::Suspended) {
                    match cluster.pools.resume_or_requeue(j, now)? {
                        JobState::Running => fx.resumed_jobs.push(j),
                        _ => fx.requeued_jobs.push(j),
                    }
                }
            }
        }
        cluster.pools.touch(&m);
    }
    Ok(fx)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("time {0} is before the schedule starts")]
    OutOfRange(f64),
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

/// Parameters of a randomly generated schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedSchedule {
    pub fill_duration_mean_s: f64,
    pub interfill_duration_mean_s: f64,
    /// `[start, end)` windows forced into TechnicalStop.
    #[serde(default)]
    pub technical_stops: Vec<(f64, f64)>,
    #[serde(default = "default_first")]
    pub first_phase: Phase,
}

fn default_first() -> Phase {
    Phase::Interfill
}

/// Ordered phase transitions; the first entry marks the schedule start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LhcSchedule {
    transitions: Vec<(f64, Phase)>,
}

impl LhcSchedule {
    pub fn explicit(transitions: Vec<(f64, Phase)>) -> Result<Self, ScheduleError> {
        let s = LhcSchedule { transitions };
        s.check()?;
        Ok(s)
    }

    /// A schedule that stays in one phase forever.
    pub fn constant(phase: Phase) -> Self {
        LhcSchedule {
            transitions: vec![(0.0, phase)],
        }
    }

    fn check(&self) -> Result<(), ScheduleError> {
        if self.transitions.is_empty() {
            return Err(ScheduleError::Invalid("no transitions".into()));
        }
        for w in self.transitions.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(ScheduleError::Invalid(format!(
                    "transition times must strictly increase ({} then {})",
                    w[0].0, w[1].0
                )));
            }
            if w[1].1 == w[0].1 {
                return Err(ScheduleError::Invalid(format!("{:?} follows itself at {}", w[0].1, w[1].0)));
            }
        }
        if !self.transitions[0].0.is_finite() {
            return Err(ScheduleError::Invalid("start time must be finite".into()));
        }
        Ok(())
    }

    /// Draws alternating Fill/Interfill phases up to `horizon`. Durations are
    /// exponential, redrawn until they fall within half to twice the mean.
    /// Technical-stop windows override whatever was drawn for their span.
    pub fn generate(spec: &GeneratedSchedule, horizon: f64, rng: &mut ChaCha8Rng) -> Result<Self, ScheduleError> {
        for (name, mean) in [
            ("fill_duration_mean_s", spec.fill_duration_mean_s),
            ("interfill_duration_mean_s", spec.interfill_duration_mean_s),
        ] {
            if !(mean > 0.0 && mean.is_finite()) {
                return Err(ScheduleError::Invalid(format!("{name} must be positive")));
            }
        }
        if spec.first_phase == Phase::TechnicalStop {
            return Err(ScheduleError::Invalid("first_phase must be Fill or Interfill".into()));
        }
        let mut stops = spec.technical_stops.clone();
        stops.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (i, (s, e)) in stops.iter().enumerate() {
            if !(e > s) || *s < 0.0 {
                return Err(ScheduleError::Invalid(format!("technical stop {i} must have 0 <= start < end")));
            }
            if i > 0 && *s < stops[i - 1].1 {
                return Err(ScheduleError::Invalid("technical stops overlap".into()));
            }
        }

        let mut out: Vec<(f64, Phase)> = Vec::new();
        let push = |t: f64, p: Phase, out: &mut Vec<(f64, Phase)>| match out.last_mut() {
            Some(last) if last.0 == t => last.1 = p,
            Some(last) if last.1 == p => {}
            _ => out.push((t, p)),
        };
        let mut t = 0.0;
        let mut phase = spec.first_phase;
        let mut stop_iter = stops.iter().peekable();
        while t < horizon {
            if let Some(&&(s, e)) = stop_iter.peek() {
                if s <= t {
                    push(t, Phase::TechnicalStop, &mut out);
                    t = e;
                    stop_iter.next();
                    // beams are recommissioned after a stop
                    phase = Phase::Fill;
                    continue;
                }
            }
            let mean = match phase {
                Phase::Fill => spec.fill_duration_mean_s,
                _ => spec.interfill_duration_mean_s,
            };
            let d = truncated_exp(mean, rng);
            push(t, phase, &mut out);
            let next_stop = stop_iter.peek().map(|s| s.0).unwrap_or(f64::INFINITY);
            t = (t + d).min(next_stop);
            phase = if phase == Phase::Fill { Phase::Interfill } else { Phase::Fill };
        }
        if out.is_empty() {
            out.push((0.0, spec.first_phase));
        }
        LhcSchedule::explicit(out)
    }

    pub fn transitions(&self) -> &[(f64, Phase)] {
        &self.transitions
    }

    pub fn start(&self) -> f64 {
        self.transitions[0].0
    }

    /// Phase in force at `now`; a transition time belongs to the new phase.
    pub fn advance(&self, now: f64) -> Result<Phase, ScheduleError> {
        if now < self.start() || now.is_nan() {
            return Err(ScheduleError::OutOfRange(now));
        }
        let idx = self.transitions.partition_point(|(t, _)| *t <= now);
        Ok(self.transitions[idx - 1].1)
    }
}

fn truncated_exp(mean: f64, rng: &mut ChaCha8Rng) -> f64 {
    let exp = Exp::new(1.0 / mean).expect("positive rate");
    for _ in 0..1000 {
        let d: f64 = exp.sample(rng);
        if d >= 0.5 * mean && d <= 2.0 * mean {
            return d;
        }
    }
    // acceptance probability is ~0.47, so this is unreachable in practice
    rng.random_range(0.5 * mean..=2.0 * mean)
}
