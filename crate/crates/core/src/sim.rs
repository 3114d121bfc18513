//! Deterministic discrete-event engine. Events are ordered by time, then by
//! the order in which they were scheduled; randomness comes from per-purpose
//! ChaCha8 streams derived from the scenario seed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classad::Expr;
use crate::defrag::{defrag_cycle, DefragRecord};
use crate::lhc::{self, LhcSchedule, Phase};
use crate::pool::{
    FailureReason, JobAd, JobClass, JobId, JobState, JobTransition, PoolEvent, PoolId, Pools, TransitionReason,
};
use crate::provisioning::{
    Frontend, PilotId, PilotState, PilotTransition, ProvisioningModel, Provisioner, SlotUsage, StaticImage,
    TickAction,
};
use crate::scenario::{Action, ArrivalSpec, Scenario, WorkSpec};
use crate::slot::{Machine, MachineId};
use crate::telemetry::{MetricsSeries, Sample, Summary};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario:\n{}", .0.join("\n"))]
    ScenarioInvalid(Vec<String>),
    #[error("invariant violated at t={time} while handling {event}: {detail}")]
    InvariantViolation { time: f64, event: String, detail: String },
}

/// Independent random stream for one purpose; streams with different labels
/// do not influence each other.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Everything the event handlers act on.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub machines: Vec<Machine>,
    pub available: Vec<bool>,
    pub pools: Pools,
    pub provisioner: Provisioner,
    pub phase: Phase,
    index: BTreeMap<MachineId, usize>,
}

impl Cluster {
    pub fn machine_index(&self, id: &MachineId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn machine(&self, id: &MachineId) -> Option<&Machine> {
        self.machine_index(id).map(|i| &self.machines[i])
    }

    pub fn total_cores(&self) -> u64 {
        self.machines.iter().map(|m| u64::from(m.total_cores)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum TraceRecord {
    Job(JobTransition),
    Pilot(PilotTransition),
    Defrag(DefragRecord),
    DrainFinished { time: f64, machine: MachineId },
    Phase { time: f64, phase: Phase },
    Availability { time: f64, machine: MachineId, available: bool },
    WrapperPublished { time: f64, version: u32 },
    ImageRebuild { time: f64, version: u32, effective_at: f64 },
    SiteMigrated { time: f64, site: String, from: PoolId, to: PoolId, slots_moved: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: JobId,
    pub class: JobClass,
    pub pool: PoolId,
    pub state: JobState,
    pub work_seconds: f64,
    pub submit_time: f64,
    pub start_time: Option<f64>,
    pub last_start: Option<f64>,
    pub end_time: Option<f64>,
    pub suspended_total: f64,
    pub hibernation_timeouts: u32,
    pub preemptions: u32,
    pub failure: Option<FailureReason>,
    pub last_machine: Option<MachineId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotRecord {
    pub id: PilotId,
    pub machine: MachineId,
    pub model: ProvisioningModel,
    pub wrapper_version: u32,
    pub state: PilotState,
    pub launch_time: f64,
    pub end_time: Option<f64>,
    pub active_lifetime: f64,
    pub suspended_total: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: MetricsSeries,
    pub summary: Summary,
    pub trace: Vec<TraceRecord>,
    pub jobs: Vec<JobRecord>,
    pub pilots: Vec<PilotRecord>,
}

impl RunOutput {
    /// The trace as JSON lines.
    pub fn trace_jsonl(&self) -> String {
        trace_jsonl(&self.trace)
    }
}

pub fn trace_jsonl(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
        out.push('\n');
    }
    out
}

pub fn trace_digest(trace: &[TraceRecord]) -> String {
    hex::encode(Sha256::digest(trace_jsonl(trace).as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Arrival(usize),
    Negotiate(PoolId),
    /// A launcher check; periodic ones reschedule themselves.
    Launch { machine: usize, periodic: bool },
    PilotTick(PilotId),
    JobEnd { job: JobId, epoch: u32 },
    Defrag,
    PhaseChange(Phase),
    Act(usize),
    ImageEffective,
    Sample(u64),
}

impl EventKind {
    fn label(&self) -> String {
        match self {
            EventKind::Arrival(i) => format!("arrival #{i}"),
            EventKind::Negotiate(p) => format!("negotiation cycle in {p}"),
            EventKind::Launch { machine, .. } => format!("launcher check on machine #{machine}"),
            EventKind::PilotTick(p) => format!("{p} tick"),
            EventKind::JobEnd { job, .. } => format!("end of {job}"),
            EventKind::Defrag => "defrag cycle".into(),
            EventKind::PhaseChange(p) => format!("change to {p:?}"),
            EventKind::Act(i) => format!("action #{i}"),
            EventKind::ImageEffective => "image roll-out".into(),
            EventKind::Sample(k) => format!("metrics sample #{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone)]
struct PendingJob {
    time: f64,
    workload: usize,
    work: f64,
}

/// Arrival times of one workload stream within `[0, horizon]`.
pub fn arrival_times(spec: &ArrivalSpec, horizon: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match spec {
        ArrivalSpec::Poisson {
            mean_interarrival_s,
            start_s,
            end_s,
            max_jobs,
        } => {
            let exp = Exp::new(1.0 / mean_interarrival_s).expect("validated positive");
            let end = end_s.unwrap_or(horizon).min(horizon);
            let mut out = Vec::new();
            let mut t = *start_s;
            loop {
                t += exp.sample(rng);
                if t > end || max_jobs.is_some_and(|m| out.len() as u64 >= m) {
                    break;
                }
                out.push(t);
            }
            out
        }
        ArrivalSpec::Explicit { times } => {
            let mut v: Vec<f64> = times.iter().copied().filter(|t| *t <= horizon).collect();
            v.sort_by(f64::total_cmp);
            v
        }
        ArrivalSpec::Burst { at_s, count } => {
            if *at_s <= horizon {
                vec![*at_s; *count as usize]
            } else {
                Vec::new()
            }
        }
    }
}

pub fn draw_work(spec: &WorkSpec, rng: &mut ChaCha8Rng) -> f64 {
    match spec {
        WorkSpec::Fixed { seconds } => *seconds,
        WorkSpec::Exponential { mean_s } => {
            // a zero-length job is not a job
            let exp = Exp::new(1.0 / mean_s).expect("validated positive");
            exp.sample(rng).max(1.0)
        }
        WorkSpec::Uniform { min_s, max_s } => {
            if min_s == max_s {
                *min_s
            } else {
                rng.random_range(*min_s..=*max_s)
            }
        }
    }
}

pub struct Simulation {
    scenario: Scenario,
    cluster: Cluster,
    queue: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    arrivals: Vec<PendingJob>,
    epochs: BTreeMap<JobId, u32>,
    pending_ticks: BTreeSet<(PilotId, u64)>,
    last_machine: BTreeMap<JobId, MachineId>,
    trace: Vec<TraceRecord>,
    samples: Vec<Sample>,
    static_start: Expr,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        let issues = scenario.validate();
        if !issues.is_empty() {
            return Err(SimError::ScenarioInvalid(issues));
        }
        let seed = scenario.seed;

        let mut machines = Vec::new();
        for g in &scenario.machines {
            for id in scenario.group_ids(g) {
                machines.push(Machine {
                    id: MachineId(id),
                    total_cores: g.cores as u32,
                    memory_mb: g.memory_mb as u64,
                    site: g.site.clone(),
                    cvmfs_healthy: true,
                    availability: g.availability,
                });
            }
        }
        let broken = (scenario.unhealthy_fraction * machines.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..machines.len()).collect();
        order.shuffle(&mut stream(seed, "health"));
        for &i in &order[..broken] {
            machines[i].cvmfs_healthy = false;
        }

        let schedule: LhcSchedule = scenario
            .lhc_schedule(&mut stream(seed, "lhc"))
            .map_err(|e| SimError::ScenarioInvalid(vec![e]))?;
        let phase = schedule.advance(0.0).map_err(|e| SimError::ScenarioInvalid(vec![e.to_string()]))?;

        let mut pools = Pools::new(
            PoolId::GlobalPool,
            [PoolId::GlobalPool, PoolId::CERNPool].map(|p| (p, scenario.pool_config(p).clone())),
        );
        for g in &scenario.machines {
            pools.set_route(&g.site, g.pool);
        }
        let static_start = scenario.launcher.static_start_expr.clone();
        let mut image_config = scenario.glidein.clone();
        image_config.start_expr = static_start.clone();
        let provisioner = Provisioner::new(
            scenario.provisioning_model,
            Frontend::new(scenario.glidein.clone()),
            StaticImage::new(1, image_config, scenario.launcher.image_rebuild_delay_s),
            scenario.launcher.validation_retry_s,
        );
        let available = machines.iter().map(|m| lhc::available(m.availability, phase)).collect();
        let index = machines.iter().enumerate().map(|(i, m)| (m.id.clone(), i)).collect();
        let cluster = Cluster {
            machines,
            available,
            pools,
            provisioner,
            phase,
            index,
        };

        let horizon = scenario.duration_s;
        let mut arrivals = Vec::new();
        for (i, w) in scenario.workload.iter().enumerate() {
            let times = arrival_times(&w.arrivals, horizon, &mut stream(seed, &format!("arrivals/{i}")));
            let mut work_rng = stream(seed, &format!("work/{i}"));
            for t in times {
                arrivals.push(PendingJob {
                    time: t,
                    workload: i,
                    work: draw_work(&w.work, &mut work_rng),
                });
            }
        }
        // stable: ties keep workload order, then stream order
        arrivals.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.workload.cmp(&b.workload)));

        let mut sim = Simulation {
            scenario,
            cluster,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            arrivals,
            epochs: BTreeMap::new(),
            pending_ticks: BTreeSet::new(),
            last_machine: BTreeMap::new(),
            trace: Vec::new(),
            samples: Vec::new(),
            static_start,
        };
        sim.trace.push(TraceRecord::Phase { time: 0.0, phase });

        for i in 0..sim.arrivals.len() {
            sim.push(sim.arrivals[i].time, EventKind::Arrival(i));
        }
        for &(t, p) in schedule.transitions() {
            if t > 0.0 && t <= horizon {
                sim.push(t, EventKind::PhaseChange(p));
            }
        }
        for (i, a) in sim.scenario.actions.clone().iter().enumerate() {
            if a.at() <= horizon {
                sim.push(a.at(), EventKind::Act(i));
            }
        }
        let interval = sim.scenario.launcher.interval_s;
        let mut jitter = stream(seed, "launcher");
        for i in 0..sim.cluster.machines.len() {
            let t = jitter.random_range(0.0..interval);
            sim.push(t, EventKind::Launch { machine: i, periodic: true });
        }
        for p in [PoolId::GlobalPool, PoolId::CERNPool] {
            sim.push(0.0, EventKind::Negotiate(p));
        }
        if sim.scenario.defrag.enabled {
            sim.push(sim.scenario.defrag.interval_s, EventKind::Defrag);
        }
        sim.push(0.0, EventKind::Sample(0));
        Ok(sim)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.queue.push(Event {
            time,
            seq: self.seq,
            kind,
        });
        self.seq += 1;
    }

    fn schedule(&mut self, time: f64, kind: EventKind) -> Result<(), String> {
        if time < self.now || time.is_nan() {
            return Err(format!("{} scheduled at {time}, in the past", kind.label()));
        }
        self.push(time, kind);
        Ok(())
    }

    /// Processes every event with time at most `until`.
    pub fn run_until(&mut self, until: f64) -> Result<(), SimError> {
        while let Some(ev) = self.queue.peek().copied() {
            if ev.time > until {
                break;
            }
            self.queue.pop();
            self.now = ev.time;
            let violation = |detail: String| SimError::InvariantViolation {
                time: ev.time,
                event: ev.kind.label(),
                detail,
            };
            self.handle(ev.kind).map_err(violation)?;
            self.settle().map_err(violation)?;
            self.cluster.pools.check_touched().map_err(violation)?;
        }
        Ok(())
    }

    pub fn run(scenario: Scenario) -> Result<RunOutput, SimError> {
        let mut sim = Simulation::new(scenario)?;
        sim.run_until(sim.scenario.duration_s)?;
        Ok(sim.finish())
    }

    fn handle(&mut self, kind: EventKind) -> Result<(), String> {
        let now = self.now;
        match kind {
            EventKind::Arrival(i) => {
                let p = self.arrivals[i].clone();
                let w = &self.scenario.workload[p.workload];
                let id = JobId(i as u64 + 1);
                let mut job = JobAd::new(id, w.class, w.cores as u32, w.memory_mb as u64, p.work)
                    .with_requirements(Scenario::requirements_for(w));
                if let Some(s) = &w.desired_sites {
                    job = job.with_desired_sites(s);
                }
                if let Some(a) = &w.agent_name {
                    job = job.with_agent_name(a);
                }
                let (pool, schedd) = (w.pool, w.schedd.clone());
                self.cluster.pools.submit(pool, &schedd, job, now).map_err(|e| e.to_string())?;
            }
            EventKind::Negotiate(pool) => {
                self.cluster.pools.negotiation_cycle(pool, now);
                let next = now + self.scenario.pool_config(pool).cycle_interval_s;
                self.schedule(next, EventKind::Negotiate(pool))?;
            }
            EventKind::Launch { machine, periodic } => {
                if periodic {
                    self.schedule(now + self.scenario.launcher.interval_s, kind)?;
                }
                self.launch(machine)?;
            }
            EventKind::PilotTick(id) => {
                self.pending_ticks.remove(&(id, now.to_bits()));
                self.pilot_tick(id)?;
            }
            EventKind::JobEnd { job, epoch } => {
                let current = self.epochs.get(&job).copied();
                let Some(j) = self.cluster.pools.job(job) else {
                    return Err(format!("completion for unknown {job}"));
                };
                if current != Some(epoch) || j.state != JobState::Running {
                    return Ok(());
                }
                let on_broken = j
                    .claim
                    .as_ref()
                    .and_then(|c| self.cluster.machine(&c.machine))
                    .is_some_and(|m| !m.cvmfs_healthy);
                let r = if on_broken {
                    self.cluster.pools.fail_job(job, FailureReason::ValidationGap, now)
                } else {
                    self.cluster.pools.complete_job(job, now)
                };
                r.map_err(|e| e.to_string())?;
            }
            EventKind::Defrag => {
                let cfg = self.scenario.defrag.clone();
                let mut slots: Vec<_> = self
                    .cluster
                    .pools
                    .slots_mut()
                    .filter(|(_, s)| s.accepting && !s.suspended)
                    .map(|(_, s)| &mut s.pslot)
                    .collect();
                let records = defrag_cycle(&mut slots, &cfg, now);
                for r in records {
                    self.cluster.pools.touch(&r.machine);
                    self.trace.push(TraceRecord::Defrag(r));
                }
                self.schedule(now + cfg.interval_s, EventKind::Defrag)?;
            }
            EventKind::PhaseChange(phase) => {
                self.trace.push(TraceRecord::Phase { time: now, phase });
                let fx = lhc::on_phase_change(&mut self.cluster, phase, now).map_err(|e| e.to_string())?;
                for m in &fx.withdrawn {
                    self.trace.push(TraceRecord::Availability {
                        time: now,
                        machine: m.clone(),
                        available: false,
                    });
                }
                for m in &fx.returned {
                    self.trace.push(TraceRecord::Availability {
                        time: now,
                        machine: m.clone(),
                        available: true,
                    });
                    let idx = self.cluster.machine_index(m).expect("known machine");
                    self.schedule(now, EventKind::Launch { machine: idx, periodic: false })?;
                }
                for p in fx.resumed_pilots {
                    self.schedule_pilot_tick(p)?;
                }
            }
            EventKind::Act(i) => match self.scenario.actions[i].clone() {
                Action::FrontendReconfigure { glidein, .. } => {
                    let version = self.cluster.provisioner.frontend.reconfigure(glidein);
                    self.trace.push(TraceRecord::WrapperPublished { time: now, version });
                }
                Action::ImageRebuild { .. } => {
                    let effective_at = self.cluster.provisioner.rebuild_image(&self.static_start, now);
                    let version = self.cluster.provisioner.frontend.wrapper_version;
                    self.trace.push(TraceRecord::ImageRebuild {
                        time: now,
                        version,
                        effective_at,
                    });
                    if effective_at <= self.scenario.duration_s {
                        self.schedule(effective_at, EventKind::ImageEffective)?;
                    }
                }
                Action::MigrateSite { from, to, site, .. } => {
                    let slots_moved = self
                        .cluster
                        .pools
                        .migrate_site(from, to, &site)
                        .map_err(|e| e.to_string())?;
                    self.trace.push(TraceRecord::SiteMigrated {
                        time: now,
                        site,
                        from,
                        to,
                        slots_moved,
                    });
                }
            },
            EventKind::ImageEffective => {
                for id in self.cluster.provisioner.roll_out_image(now) {
                    let p = self.cluster.provisioner.pilot(id).expect("rolled-out pilot exists");
                    let (m, v, start) = (p.machine_id.clone(), p.wrapper_version, p.config.start_expr.clone());
                    if let Some(slot) = self.cluster.pools.slot_mut(&m) {
                        slot.ad.set("GLIDEIN_Wrapper_Version", i64::from(v));
                        slot.start = start;
                    }
                }
            }
            EventKind::Sample(k) => {
                self.cluster.pools.check_invariants()?;
                let s = Sample::capture(&self.cluster, self.scenario.defrag.whole_threshold_cores, now)?;
                self.samples.push(s);
                let next = (k + 1) as f64 * self.scenario.metrics_interval_s;
                if next <= self.scenario.duration_s {
                    self.schedule(next, EventKind::Sample(k + 1))?;
                }
            }
        }
        Ok(())
    }

    fn launch(&mut self, idx: usize) -> Result<(), String> {
        let now = self.now;
        let machine = self.cluster.machines[idx].clone();
        let available = self.cluster.available[idx];
        let Some(id) = self.cluster.provisioner.launcher_tick(&machine, available, now) else {
            return Ok(());
        };
        if self.cluster.provisioner.model == ProvisioningModel::VacuumGlidein
            && self.cluster.provisioner.validate(id, &machine, now) == crate::provisioning::Validation::Fail
        {
            return Ok(());
        }
        let slot = self.cluster.provisioner.slot_for(id, &machine);
        self.cluster.pools.register_slot(slot).map_err(|e| e.to_string())?;
        self.schedule_pilot_tick(id)
    }

    fn usage(&self, machine: &MachineId) -> SlotUsage {
        SlotUsage {
            has_claims: self.cluster.pools.slot(machine).is_some_and(|s| !s.pslot.is_empty()),
        }
    }

    fn pilot_tick(&mut self, id: PilotId) -> Result<(), String> {
        let now = self.now;
        let Some(p) = self.cluster.provisioner.pilot(id) else {
            return Ok(());
        };
        if !p.is_live() {
            return Ok(());
        }
        let m = p.machine_id.clone();
        let usage = self.usage(&m);
        match self.cluster.provisioner.pilot_tick(id, usage, now) {
            TickAction::Nothing => self.schedule_pilot_tick(id)?,
            TickAction::Retire => {
                if let Some(s) = self.cluster.pools.slot_mut(&m) {
                    s.accepting = false;
                }
                self.cluster.pools.touch(&m);
                self.schedule_pilot_tick(id)?;
            }
            TickAction::Terminate => self.withdraw(&m)?,
            TickAction::PreemptAndTerminate => {
                for j in self.cluster.pools.jobs_on(&m) {
                    self.cluster
                        .pools
                        .requeue_job(j, FailureReason::PilotPreempted, now)
                        .map_err(|e| e.to_string())?;
                }
                self.withdraw(&m)?;
            }
        }
        Ok(())
    }

    /// Removes a terminated pilot's slot and has the launcher replace it.
    fn withdraw(&mut self, m: &MachineId) -> Result<(), String> {
        if self.cluster.pools.slot(m).is_some() {
            self.cluster.pools.deregister_slot(m).map_err(|e| e.to_string())?;
        }
        let idx = self.cluster.machine_index(m).expect("known machine");
        self.schedule(self.now, EventKind::Launch { machine: idx, periodic: false })
    }

    fn schedule_pilot_tick(&mut self, id: PilotId) -> Result<(), String> {
        let Some(d) = self.cluster.provisioner.pilot(id).and_then(|p| p.next_deadline()) else {
            return Ok(());
        };
        let t = d.max(self.now);
        if self.pending_ticks.insert((id, t.to_bits())) {
            self.schedule(t, EventKind::PilotTick(id))?;
        }
        Ok(())
    }

    fn schedule_job_end(&mut self, job: JobId) -> Result<(), String> {
        let j = self.cluster.pools.job(job).expect("job exists");
        let mut remaining = j.remaining_work;
        let broken = j
            .claim
            .as_ref()
            .and_then(|c| self.cluster.machine(&c.machine))
            .is_some_and(|m| !m.cvmfs_healthy);
        if broken {
            // fails once it reaches the part of its work needing the software area
            remaining -= (1.0 - self.scenario.launcher.gap_failure_point) * j.work_seconds;
        }
        let epoch = self.epochs.entry(job).or_insert(0);
        *epoch += 1;
        let epoch = *epoch;
        self.schedule(self.now + remaining.max(0.0), EventKind::JobEnd { job, epoch })
    }

    /// Moves logged transitions into the trace and reacts to them until the
    /// state is quiescent: running jobs get a completion event, and pilots
    /// see the new occupancy of their slot.
    fn settle(&mut self) -> Result<(), String> {
        loop {
            let pool_events = self.cluster.pools.take_events();
            let pilot_events = self.cluster.provisioner.take_events();
            if pool_events.is_empty() && pilot_events.is_empty() {
                return Ok(());
            }
            self.trace.extend(pilot_events.into_iter().map(TraceRecord::Pilot));
            let mut touched = BTreeSet::new();
            for e in pool_events {
                match e {
                    PoolEvent::Job(t) => {
                        if let Some(m) = &t.machine {
                            touched.insert(m.clone());
                            if t.reason == TransitionReason::Matched {
                                self.last_machine.insert(t.job, m.clone());
                            }
                        }
                        if t.new == JobState::Running {
                            self.schedule_job_end(t.job)?;
                        }
                        self.trace.push(TraceRecord::Job(t));
                    }
                    PoolEvent::DrainFinished { time, machine } => {
                        self.trace.push(TraceRecord::DrainFinished { time, machine })
                    }
                }
            }
            for m in touched {
                self.refresh_pilot(&m)?;
            }
        }
    }

    fn refresh_pilot(&mut self, m: &MachineId) -> Result<(), String> {
        let Some(p) = self.cluster.provisioner.live_pilot_on(m) else {
            return Ok(());
        };
        if p.suspended_since.is_some() || p.state == PilotState::Validating {
            return Ok(());
        }
        let (id, state) = (p.id, p.state);
        let usage = self.usage(m);
        if state == PilotState::Retiring && !usage.has_claims {
            return self.pilot_tick(id);
        }
        self.cluster.provisioner.note_usage(id, usage, self.now);
        self.schedule_pilot_tick(id)
    }

    /// Final records and summary.
    pub fn finish(self) -> RunOutput {
        let now = self.now.max(self.scenario.duration_s);
        let jobs: Vec<JobRecord> = self
            .cluster
            .pools
            .jobs()
            .map(|j| JobRecord {
                id: j.id,
                class: j.class,
                pool: j.pool,
                state: j.state,
                work_seconds: j.work_seconds,
                submit_time: j.submit_time,
                start_time: j.start_time,
                last_start: j.last_start,
                end_time: j.end_time,
                suspended_total: j.suspended_total,
                hibernation_timeouts: j.hibernation_timeouts,
                preemptions: j.preemptions,
                failure: j.failure,
                last_machine: self.last_machine.get(&j.id).cloned(),
            })
            .collect();
        let pilots: Vec<PilotRecord> = self
            .cluster
            .provisioner
            .pilots()
            .map(|p| PilotRecord {
                id: p.id,
                machine: p.machine_id.clone(),
                model: p.model,
                wrapper_version: p.wrapper_version,
                state: p.state,
                launch_time: p.launch_time,
                end_time: p.end_time,
                active_lifetime: p.active_lifetime(now),
                suspended_total: p.suspended_total,
            })
            .collect();
        let metrics = MetricsSeries {
            total_cores: self.cluster.total_cores(),
            samples: self.samples,
        };
        let summary = Summary::build(&self.scenario, &metrics, &jobs, &pilots, &self.trace);
        RunOutput {
            metrics,
            summary,
            trace: self.trace,
            jobs,
            pilots,
        }
    }
}

pub fn run(scenario: Scenario) -> Result<RunOutput, SimError> {
    Simulation::run(scenario)
}
