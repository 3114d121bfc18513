//! Collector, negotiator and schedd queues.
//!
//! [`Pools`] holds every pool of the federation together with a single slot
//! registry, so a slot ad is registered in exactly one pool by construction.
//! Jobs live in the pool they were submitted to; a claim may outlive a site
//! migration, in which case the job keeps running on a slot now advertised in
//! the other pool.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Bound;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classad::{self, AttributeSet, Expr};
use crate::provisioning::PilotId;
use crate::slot::{DynamicSlotId, MachineId, PartitionableSlot, SlotError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "job{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobClass {
    Tier0,
    Production,
    Analysis,
}

impl JobClass {
    pub const ALL: [JobClass; 3] = [JobClass::Tier0, JobClass::Production, JobClass::Analysis];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for JobClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobState {
    Idle,
    Running,
    Suspended,
    Completed,
    Failed,
    Removed,
}

impl JobState {
    fn may_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Idle, Running)
                | (Running, Suspended | Completed | Failed | Idle)
                | (Suspended, Running | Idle | Removed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureReason {
    /// Job landed on a machine whose software area was broken.
    ValidationGap,
    PilotPreempted,
    HibernationTimeout,
    Other,
}

/// Why a job changed state; carried on trace records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TransitionReason {
    Submitted,
    Matched,
    Finished,
    Suspended,
    Resumed,
    Removed,
    Failure(FailureReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PoolId {
    GlobalPool,
    CERNPool,
}

impl fmt::Display for PoolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PackPolicy {
    /// Smallest sufficient free core count.
    #[default]
    BestFit,
    /// Largest free core count.
    WorstFit,
    /// Lowest machine id that fits.
    FirstFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegotiatorConfig {
    pub cycle_interval_s: f64,
    pub class_priority_order: Vec<JobClass>,
    pub pack_policy: PackPolicy,
    /// How long a suspended job keeps its claim.
    pub max_hibernation_s: f64,
}

impl Default for NegotiatorConfig {
    fn default() -> Self {
        NegotiatorConfig {
            cycle_interval_s: 60.0,
            class_priority_order: JobClass::ALL.to_vec(),
            pack_policy: PackPolicy::BestFit,
            max_hibernation_s: 86_400.0,
        }
    }
}

impl NegotiatorConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.cycle_interval_s > 0.0 && self.cycle_interval_s.is_finite()) {
            errs.push("cycle_interval_s must be a positive number".to_owned());
        }
        let set: BTreeSet<_> = self.class_priority_order.iter().collect();
        if self.class_priority_order.len() != 3 || set.len() != 3 {
            errs.push("class_priority_order must be a permutation of Tier0, Production, Analysis".to_owned());
        }
        if !(self.max_hibernation_s >= 0.0) {
            errs.push("max_hibernation_s must be non-negative".to_owned());
        }
        errs
    }
}

/// Where a running or suspended job sits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub machine: MachineId,
    pub slot: DynamicSlotId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobAd {
    pub id: JobId,
    pub class: JobClass,
    pub request_cores: u32,
    pub request_memory_mb: u64,
    /// Full service demand; a requeued job starts over from this.
    pub work_seconds: f64,
    pub remaining_work: f64,
    pub attributes: AttributeSet,
    pub requirements: Expr,
    pub state: JobState,
    pub submit_time: f64,
    /// First time the job started running.
    pub start_time: Option<f64>,
    /// Start of the current uninterrupted run.
    pub run_since: Option<f64>,
    /// Start of the most recent run; kept after the job ends.
    pub last_start: Option<f64>,
    pub suspend_time: Option<f64>,
    pub end_time: Option<f64>,
    /// Seconds spent suspended and later resumed.
    pub suspended_total: f64,
    pub hibernation_timeouts: u32,
    pub preemptions: u32,
    pub failure: Option<FailureReason>,
    pub claim: Option<Claim>,
    pub pool: PoolId,
    pub schedd: String,
    submit_seq: u64,
    /// Everything matchmaking looks at; jobs sharing it match identically.
    signature: String,
}

pub const AGENT_NAME_ATTR: &str = "WMAgent_AgentName";
pub const DESIRED_SITES_ATTR: &str = "DESIRED_Sites";
pub const SITE_ATTR: &str = "GLIDEIN_CMSSite";

impl JobAd {
    /// Builds an idle job. Tier-0 and Production jobs carry an agent name,
    /// Analysis jobs never do.
    pub fn new(id: JobId, class: JobClass, request_cores: u32, request_memory_mb: u64, work_seconds: f64) -> Self {
        let mut attributes = AttributeSet::new()
            .with("RequestCpus", i64::from(request_cores))
            .with("RequestMemory", request_memory_mb as i64)
            .with("JobClass", class.to_string());
        match class {
            JobClass::Tier0 => attributes.set(AGENT_NAME_ATTR, "t0agent"),
            JobClass::Production => attributes.set(AGENT_NAME_ATTR, "wmagent"),
            JobClass::Analysis => {}
        }
        JobAd {
            id,
            class,
            request_cores,
            request_memory_mb,
            work_seconds,
            remaining_work: work_seconds,
            attributes,
            requirements: classad::parse(classad::DESIRED_SITES_EXPR).expect("built-in expression parses"),
            state: JobState::Idle,
            submit_time: 0.0,
            start_time: None,
            run_since: None,
            last_start: None,
            suspend_time: None,
            end_time: None,
            suspended_total: 0.0,
            hibernation_timeouts: 0,
            preemptions: 0,
            failure: None,
            claim: None,
            pool: PoolId::GlobalPool,
            schedd: String::new(),
            submit_seq: 0,
            signature: String::new(),
        }
    }

    pub fn with_desired_sites(mut self, sites: &str) -> Self {
        self.attributes.set(DESIRED_SITES_ATTR, sites);
        self
    }

    pub fn with_agent_name(mut self, name: &str) -> Self {
        self.attributes.set(AGENT_NAME_ATTR, name);
        self
    }

    pub fn with_requirements(mut self, requirements: Expr) -> Self {
        self.requirements = requirements;
        self
    }

    /// Remaining work at `now`, accounting for the current run.
    pub fn remaining_at(&self, now: f64) -> f64 {
        match (self.state, self.run_since) {
            (JobState::Running, Some(since)) => self.remaining_work - (now - since),
            _ => self.remaining_work,
        }
    }
}

/// A startd's slot ad together with its resources.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredSlot {
    pub pilot: PilotId,
    pub site: String,
    pub ad: AttributeSet,
    pub start: Expr,
    pub pslot: PartitionableSlot,
    /// False once the pilot is retiring.
    pub accepting: bool,
    /// The hosting VM is suspended.
    pub suspended: bool,
    pub pool: PoolId,
}

impl RegisteredSlot {
    pub fn new(pilot: PilotId, site: &str, start: Expr, pslot: PartitionableSlot) -> Self {
        let ad = AttributeSet::new()
            .with(SITE_ATTR, site)
            .with("Machine", pslot.machine_id.0.clone())
            .with("Cpus", i64::from(pslot.total_cores))
            .with("Memory", pslot.total_memory_mb as i64);
        RegisteredSlot {
            pilot,
            site: site.to_owned(),
            ad,
            start,
            pslot,
            accepting: true,
            suspended: false,
            pool: PoolId::GlobalPool,
        }
    }

    fn open_for_matches(&self) -> bool {
        self.accepting && !self.suspended && !self.pslot.draining
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTransition {
    pub time: f64,
    pub job: JobId,
    pub old: Option<JobState>,
    pub new: JobState,
    pub machine: Option<MachineId>,
    pub reason: TransitionReason,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PoolEvent {
    Job(JobTransition),
    /// A draining slot emptied and stopped draining.
    DrainFinished { time: f64, machine: MachineId },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error("duplicate job id {0}")]
    DuplicateId(JobId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("unknown pool {0}")]
    UnknownPool(PoolId),
    #[error("job {job}: invalid transition {from:?} -> {to:?}")]
    InvalidTransition { job: JobId, from: JobState, to: JobState },
    #[error("invalid job ad: {0}")]
    InvalidJob(String),
    #[error("machine {0} already has a registered slot")]
    AlreadyRegistered(MachineId),
    #[error("no registered slot for machine {0}")]
    UnknownMachine(MachineId),
    #[error("slot on {0} still holds claims")]
    SlotBusy(MachineId),
    #[error("cannot migrate a site onto the pool it is already in")]
    SamePool,
    #[error(transparent)]
    Slot(#[from] SlotError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueKey(f64, u64, JobId);

impl Eq for QueueKey {}

impl PartialOrd for QueueKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .total_cmp(&other.0)
            .then(self.1.cmp(&other.1))
            .then(self.2.cmp(&other.2))
    }
}

#[derive(Debug, Clone)]
pub struct Pool {
    pub id: PoolId,
    pub config: NegotiatorConfig,
    /// Job ids per schedd, in submission order.
    pub schedds: BTreeMap<String, Vec<JobId>>,
    idle: [BTreeSet<QueueKey>; 3],
}

impl Pool {
    pub fn new(id: PoolId, config: NegotiatorConfig) -> Self {
        Pool {
            id,
            config,
            schedds: BTreeMap::new(),
            idle: Default::default(),
        }
    }

    pub fn idle_count(&self, class: JobClass) -> usize {
        self.idle[class.index()].len()
    }
}

/// A matchmaking decision made during a negotiation cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Match {
    pub job: JobId,
    pub machine: MachineId,
    pub slot: DynamicSlotId,
}

#[derive(Debug, Clone)]
pub struct Pools {
    pools: BTreeMap<PoolId, Pool>,
    jobs: BTreeMap<JobId, JobAd>,
    slots: BTreeMap<MachineId, RegisteredSlot>,
    site_routes: BTreeMap<String, PoolId>,
    default_pool: PoolId,
    next_seq: u64,
    events: Vec<PoolEvent>,
    claims_held: usize,
    dirty: BTreeSet<MachineId>,
}

impl Pools {
    pub fn new(default_pool: PoolId, configs: impl IntoIterator<Item = (PoolId, NegotiatorConfig)>) -> Self {
        let pools: BTreeMap<_, _> = configs.into_iter().map(|(id, c)| (id, Pool::new(id, c))).collect();
        Pools {
            pools,
            jobs: BTreeMap::new(),
            slots: BTreeMap::new(),
            site_routes: BTreeMap::new(),
            default_pool,
            next_seq: 0,
            events: Vec::new(),
            claims_held: 0,
            dirty: BTreeSet::new(),
        }
    }

    /// Pool into which newly registering slots of `site` go.
    pub fn set_route(&mut self, site: &str, pool: PoolId) {
        self.site_routes.insert(site.to_owned(), pool);
    }

    pub fn route(&self, site: &str) -> PoolId {
        self.site_routes.get(site).copied().unwrap_or(self.default_pool)
    }

    pub fn pool(&self, id: PoolId) -> Option<&Pool> {
        self.pools.get(&id)
    }

    pub fn pool_ids(&self) -> impl Iterator<Item = PoolId> + '_ {
        self.pools.keys().copied()
    }

    pub fn job(&self, id: JobId) -> Option<&JobAd> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobAd> {
        self.jobs.values()
    }

    pub fn slot(&self, machine: &MachineId) -> Option<&RegisteredSlot> {
        self.slots.get(machine)
    }

    pub fn slot_mut(&mut self, machine: &MachineId) -> Option<&mut RegisteredSlot> {
        self.slots.get_mut(machine)
    }

    pub fn slots(&self) -> impl Iterator<Item = (&MachineId, &RegisteredSlot)> {
        self.slots.iter()
    }

    pub fn slots_mut(&mut self) -> impl Iterator<Item = (&MachineId, &mut RegisteredSlot)> {
        self.slots.iter_mut()
    }

    pub fn slots_in(&self, pool: PoolId) -> impl Iterator<Item = (&MachineId, &RegisteredSlot)> {
        self.slots.iter().filter(move |(_, s)| s.pool == pool)
    }

    /// Drains the log of transitions recorded since the last call.
    pub fn take_events(&mut self) -> Vec<PoolEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn submit(&mut self, pool: PoolId, schedd: &str, mut job: JobAd, now: f64) -> Result<JobId, PoolError> {
        let p = self.pools.get_mut(&pool).ok_or(PoolError::UnknownPool(pool))?;
        if self.jobs.contains_key(&job.id) {
            return Err(PoolError::DuplicateId(job.id));
        }
        if job.state != JobState::Idle {
            return Err(PoolError::InvalidTransition {
                job: job.id,
                from: job.state,
                to: JobState::Idle,
            });
        }
        if job.request_cores == 0 || job.request_memory_mb == 0 {
            return Err(PoolError::InvalidJob("request must be at least one core and one MB".into()));
        }
        if !(job.work_seconds > 0.0) {
            return Err(PoolError::InvalidJob("work_seconds must be positive".into()));
        }
        if job.attributes.contains(AGENT_NAME_ATTR) == (job.class == JobClass::Analysis) {
            return Err(PoolError::InvalidJob(format!(
                "{AGENT_NAME_ATTR} must be present exactly for Tier0 and Production jobs"
            )));
        }
        job.submit_time = now;
        job.submit_seq = self.next_seq;
        job.pool = pool;
        job.schedd = schedd.to_owned();
        job.signature = format!("{}|{}|{}", job.request_cores, job.request_memory_mb, job.requirements);
        for (k, v) in job.attributes.iter() {
            job.signature.push_str(&format!("|{}={v}", k.to_ascii_lowercase()));
        }
        self.next_seq += 1;
        let id = job.id;
        p.schedds.entry(schedd.to_owned()).or_default().push(id);
        p.idle[job.class.index()].insert(QueueKey(job.submit_time, job.submit_seq, id));
        self.events.push(PoolEvent::Job(JobTransition {
            time: now,
            job: id,
            old: None,
            new: JobState::Idle,
            machine: None,
            reason: TransitionReason::Submitted,
        }));
        self.jobs.insert(id, job);
        Ok(id)
    }

    /// One matchmaking pass over the idle jobs of `pool`. Classes are scanned
    /// in priority order and jobs FIFO within a class; a job that cannot be
    /// placed does not block the ones behind it.
    pub fn negotiation_cycle(&mut self, pool: PoolId, now: f64) -> Vec<Match> {
        let Some(p) = self.pools.get(&pool) else {
            return Vec::new();
        };
        let policy = p.config.pack_policy;
        let order = p.config.class_priority_order.clone();
        // (machine, free cores, free memory), kept in step with carving
        let mut cands: Vec<(MachineId, u32, u64)> = self
            .slots
            .iter()
            .filter(|(_, s)| s.pool == pool && s.open_for_matches())
            .map(|(m, s)| (m.clone(), s.pslot.free_cores, s.pslot.free_memory_mb))
            .collect();
        let mut out = Vec::new();
        // free resources only shrink during a cycle, so a signature that
        // found no slot will not find one later in the same cycle
        let mut unmatched: BTreeSet<String> = BTreeSet::new();
        'classes: for class in order {
            let mut cursor: Option<QueueKey> = None;
            loop {
                let idle = &self.pools[&pool].idle[class.index()];
                let next = match cursor {
                    None => idle.iter().next(),
                    Some(c) => idle.range((Bound::Excluded(c), Bound::Unbounded)).next(),
                };
                let Some(&key) = next else { break };
                cursor = Some(key);
                let job_id = key.2;
                let max_free = cands.iter().map(|c| c.1).max().unwrap_or(0);
                if max_free == 0 {
                    break 'classes;
                }
                let job = &self.jobs[&job_id];
                if job.request_cores > max_free || unmatched.contains(&job.signature) {
                    continue;
                }
                let chosen = cands
                    .iter()
                    .enumerate()
                    .filter(|(_, (m, cores, mem))| {
                        *cores >= job.request_cores && *mem >= job.request_memory_mb && {
                            let s = &self.slots[m];
                            classad::matches(&job.requirements, &s.start, &job.attributes, &s.ad)
                        }
                    })
                    .min_by(|(_, a), (_, b)| {
                        let by_fit = match policy {
                            PackPolicy::BestFit => a.1.cmp(&b.1),
                            PackPolicy::WorstFit => b.1.cmp(&a.1),
                            PackPolicy::FirstFit => Ordering::Equal,
                        };
                        by_fit.then_with(|| a.0.cmp(&b.0))
                    })
                    .map(|(i, _)| i);
                match chosen {
                    Some(i) => {
                        let machine = cands[i].0.clone();
                        let slot = self
                            .start_on(job_id, &machine, now)
                            .expect("candidate was checked to fit");
                        let p = &self.slots[&machine].pslot;
                        cands[i].1 = p.free_cores;
                        cands[i].2 = p.free_memory_mb;
                        out.push(Match {
                            job: job_id,
                            machine,
                            slot,
                        });
                    }
                    None => {
                        unmatched.insert(job.signature.clone());
                    }
                }
            }
        }
        out
    }

    fn start_on(&mut self, job_id: JobId, machine: &MachineId, now: f64) -> Result<DynamicSlotId, PoolError> {
        let job = self.jobs.get_mut(&job_id).ok_or(PoolError::UnknownJob(job_id))?;
        check(job, JobState::Running)?;
        let slot = self.slots.get_mut(machine).ok_or_else(|| PoolError::UnknownMachine(machine.clone()))?;
        let d = slot.pslot.carve(job.request_cores, job.request_memory_mb)?;
        d.claimed_job = Some(job_id);
        let dyn_id = d.id;
        self.pools
            .get_mut(&job.pool)
            .expect("job pool exists")
            .idle[job.class.index()]
            .remove(&QueueKey(job.submit_time, job.submit_seq, job_id));
        job.state = JobState::Running;
        job.start_time.get_or_insert(now);
        job.run_since = Some(now);
        job.last_start = Some(now);
        job.claim = Some(Claim {
            machine: machine.clone(),
            slot: dyn_id,
        });
        self.claims_held += 1;
        self.dirty.insert(machine.clone());
        self.events.push(PoolEvent::Job(JobTransition {
            time: now,
            job: job_id,
            old: Some(JobState::Idle),
            new: JobState::Running,
            machine: Some(machine.clone()),
            reason: TransitionReason::Matched,
        }));
        Ok(dyn_id)
    }

    /// Moves a job out of its claim: the dynamic slot is released and the
    /// job transitions to `to`.
    fn leave_slot(&mut self, job_id: JobId, to: JobState, reason: TransitionReason, now: f64) -> Result<(), PoolError> {
        let job = self.jobs.get_mut(&job_id).ok_or(PoolError::UnknownJob(job_id))?;
        check(job, to)?;
        let from = job.state;
        let claim = job.claim.take();
        if let Some(c) = &claim {
            self.claims_held -= 1;
            self.dirty.insert(c.machine.clone());
            if let Some(slot) = self.slots.get_mut(&c.machine) {
                let released = slot.pslot.release(c.slot)?;
                if released.drain_finished {
                    self.events.push(PoolEvent::DrainFinished {
                        time: now,
                        machine: c.machine.clone(),
                    });
                }
            }
        }
        if from == JobState::Running {
            if let Some(since) = job.run_since {
                job.remaining_work -= now - since;
            }
        }
        job.run_since = None;
        job.suspend_time = None;
        job.state = to;
        match to {
            JobState::Idle => {
                job.remaining_work = job.work_seconds;
                self.pools
                    .get_mut(&job.pool)
                    .expect("job pool exists")
                    .idle[job.class.index()]
                    .insert(QueueKey(job.submit_time, job.submit_seq, job_id));
            }
            _ => job.end_time = Some(now),
        }
        if let TransitionReason::Failure(r) = reason {
            job.failure = Some(r);
            match r {
                FailureReason::HibernationTimeout => job.hibernation_timeouts += 1,
                FailureReason::PilotPreempted => job.preemptions += 1,
                _ => {}
            }
        }
        self.events.push(PoolEvent::Job(JobTransition {
            time: now,
            job: job_id,
            old: Some(from),
            new: to,
            machine: claim.map(|c| c.machine),
            reason,
        }));
        Ok(())
    }

    pub fn complete_job(&mut self, job: JobId, now: f64) -> Result<JobState, PoolError> {
        self.require_state(job, JobState::Running, JobState::Completed)?;
        self.leave_slot(job, JobState::Completed, TransitionReason::Finished, now)?;
        Ok(JobState::Completed)
    }

    pub fn fail_job(&mut self, job: JobId, reason: FailureReason, now: f64) -> Result<JobState, PoolError> {
        self.require_state(job, JobState::Running, JobState::Failed)?;
        self.leave_slot(job, JobState::Failed, TransitionReason::Failure(reason), now)?;
        Ok(JobState::Failed)
    }

    /// Evicts a job back to the idle queue; its progress is lost.
    pub fn requeue_job(&mut self, job: JobId, reason: FailureReason, now: f64) -> Result<JobState, PoolError> {
        self.leave_slot(job, JobState::Idle, TransitionReason::Failure(reason), now)?;
        Ok(JobState::Idle)
    }

    pub fn remove_job(&mut self, job: JobId, now: f64) -> Result<JobState, PoolError> {
        self.require_state(job, JobState::Suspended, JobState::Removed)?;
        self.leave_slot(job, JobState::Removed, TransitionReason::Removed, now)?;
        Ok(JobState::Removed)
    }

    pub fn suspend_job(&mut self, job_id: JobId, now: f64) -> Result<JobState, PoolError> {
        let job = self.jobs.get_mut(&job_id).ok_or(PoolError::UnknownJob(job_id))?;
        if job.state != JobState::Running {
            return Err(PoolError::InvalidTransition {
                job: job_id,
                from: job.state,
                to: JobState::Suspended,
            });
        }
        if let Some(since) = job.run_since.take() {
            job.remaining_work -= now - since;
        }
        job.state = JobState::Suspended;
        job.suspend_time = Some(now);
        self.events.push(PoolEvent::Job(JobTransition {
            time: now,
            job: job_id,
            old: Some(JobState::Running),
            new: JobState::Suspended,
            machine: job.claim.as_ref().map(|c| c.machine.clone()),
            reason: TransitionReason::Suspended,
        }));
        Ok(JobState::Suspended)
    }

    /// Resumes a suspended job on its original slot if it has been suspended
    /// for at most the pool's hibernation limit; otherwise the claim is
    /// dropped and the job goes back to the idle queue with its full demand.
    pub fn resume_or_requeue(&mut self, job_id: JobId, now: f64) -> Result<JobState, PoolError> {
        let job = self.jobs.get(&job_id).ok_or(PoolError::UnknownJob(job_id))?;
        if job.state != JobState::Suspended {
            return Err(PoolError::InvalidTransition {
                job: job_id,
                from: job.state,
                to: JobState::Running,
            });
        }
        let limit = self.pools[&job.pool].config.max_hibernation_s;
        let since = job.suspend_time.expect("suspended job has suspend_time");
        if now - since <= limit {
            let job = self.jobs.get_mut(&job_id).expect("checked above");
            job.suspended_total += now - since;
            job.suspend_time = None;
            job.run_since = Some(now);
            job.state = JobState::Running;
            self.events.push(PoolEvent::Job(JobTransition {
                time: now,
                job: job_id,
                old: Some(JobState::Suspended),
                new: JobState::Running,
                machine: job.claim.as_ref().map(|c| c.machine.clone()),
                reason: TransitionReason::Resumed,
            }));
            Ok(JobState::Running)
        } else {
            self.requeue_job(job_id, FailureReason::HibernationTimeout, now)
        }
    }

    fn require_state(&self, job: JobId, want: JobState, to: JobState) -> Result<(), PoolError> {
        let j = self.jobs.get(&job).ok_or(PoolError::UnknownJob(job))?;
        if j.state != want {
            return Err(PoolError::InvalidTransition {
                job,
                from: j.state,
                to,
            });
        }
        Ok(())
    }

    /// Jobs holding a claim on `machine`, in id order.
    pub fn jobs_on(&self, machine: &MachineId) -> Vec<JobId> {
        let Some(slot) = self.slots.get(machine) else {
            return Vec::new();
        };
        let mut ids: Vec<_> = slot.pslot.dynamic_slots.iter().filter_map(|d| d.claimed_job).collect();
        ids.sort();
        ids
    }

    /// Registers a slot in the pool its site currently routes to.
    pub fn register_slot(&mut self, mut slot: RegisteredSlot) -> Result<PoolId, PoolError> {
        let machine = slot.pslot.machine_id.clone();
        if self.slots.contains_key(&machine) {
            return Err(PoolError::AlreadyRegistered(machine));
        }
        slot.pool = self.route(&slot.site);
        let pool = slot.pool;
        self.dirty.insert(machine.clone());
        self.slots.insert(machine, slot);
        Ok(pool)
    }

    pub fn deregister_slot(&mut self, machine: &MachineId) -> Result<RegisteredSlot, PoolError> {
        let slot = self.slots.get(machine).ok_or_else(|| PoolError::UnknownMachine(machine.clone()))?;
        if !slot.pslot.is_empty() {
            return Err(PoolError::SlotBusy(machine.clone()));
        }
        self.dirty.insert(machine.clone());
        Ok(self.slots.remove(machine).expect("checked above"))
    }

    /// Re-registers every slot of `site` from `from` into `to` and routes
    /// future registrations of that site to `to`.
    pub fn migrate_site(&mut self, from: PoolId, to: PoolId, site: &str) -> Result<usize, PoolError> {
        if from == to {
            return Err(PoolError::SamePool);
        }
        for p in [from, to] {
            if !self.pools.contains_key(&p) {
                return Err(PoolError::UnknownPool(p));
            }
        }
        let mut moved = 0;
        for slot in self.slots.values_mut() {
            let slot_site = classad::evaluate(
                &Expr::attr(SITE_ATTR),
                &slot.ad,
                &AttributeSet::new(),
            );
            if slot.pool == from && slot_site.as_str() == Some(site) {
                slot.pool = to;
                moved += 1;
            }
        }
        if self.route(site) == from {
            self.set_route(site, to);
        }
        Ok(moved)
    }

    /// Marks a machine for the next incremental invariant check; callers
    /// that edit a slot through [`Pools::slot_mut`] should use this.
    pub fn touch(&mut self, machine: &MachineId) {
        self.dirty.insert(machine.clone());
    }

    /// Checks the slots touched since the last call, plus the global claim
    /// count. Untouched slots cannot have changed, so this is equivalent to
    /// [`Pools::check_invariants`] when run after every mutation.
    pub fn check_touched(&mut self) -> Result<(), String> {
        let dirty = std::mem::take(&mut self.dirty);
        for m in &dirty {
            if let Some(s) = self.slots.get(m) {
                self.check_slot(m, s)?;
            }
        }
        self.check_claim_count()
    }

    /// Slot conservation plus the job/dynamic-slot claim bijection, over
    /// every slot and job.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (m, s) in &self.slots {
            self.check_slot(m, s)?;
        }
        self.check_claim_count()?;
        for j in self.jobs.values() {
            let running = matches!(j.state, JobState::Running | JobState::Suspended);
            if running != j.claim.is_some() {
                return Err(format!("{} in state {:?} with claim {:?}", j.id, j.state, j.claim));
            }
        }
        Ok(())
    }

    fn check_claim_count(&self) -> Result<(), String> {
        let claimed: usize = self.slots.values().map(|s| s.pslot.dynamic_slots.len()).sum();
        if claimed != self.claims_held {
            return Err(format!(
                "{} jobs hold claims but {claimed} dynamic slots exist",
                self.claims_held
            ));
        }
        Ok(())
    }

    /// Every dynamic slot is claimed by a job whose claim points back at it.
    /// Together with the global count this makes claims a bijection.
    fn check_slot(&self, m: &MachineId, s: &RegisteredSlot) -> Result<(), String> {
        s.pslot.check_conservation()?;
        for d in &s.pslot.dynamic_slots {
            let Some(j) = d.claimed_job else {
                return Err(format!("{m}/{}: dynamic slot without a claim", d.id));
            };
            let job = self.jobs.get(&j).ok_or_else(|| format!("{m}/{}: claimed by unknown {j}", d.id))?;
            let expected = Claim {
                machine: m.clone(),
                slot: d.id,
            };
            if job.claim.as_ref() != Some(&expected) {
                return Err(format!("{m}/{}: claimed by {j} whose claim is {:?}", d.id, job.claim));
            }
            if !matches!(job.state, JobState::Running | JobState::Suspended) {
                return Err(format!("{j} holds a claim in state {:?}", job.state));
            }
        }
        Ok(())
    }
}

fn check(job: &JobAd, to: JobState) -> Result<(), PoolError> {
    if job.state.may_become(to) {
        Ok(())
    } else {
        Err(PoolError::InvalidTransition {
            job: job.id,
            from: job.state,
            to,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classad::P5_START_EXPR;

    const P5: &str = "T2_CH_CERN_P5";

    fn pools() -> Pools {
        Pools::new(
            PoolId::GlobalPool,
            [
                (PoolId::GlobalPool, NegotiatorConfig::default()),
                (PoolId::CERNPool, NegotiatorConfig::default()),
            ],
        )
    }

    fn p5_slot(p: &mut Pools, machine: &str, cores: u32) {
        let pslot = PartitionableSlot::new(machine.into(), cores, u64::from(cores) * 2000);
        let start = classad::parse(P5_START_EXPR).unwrap();
        p.register_slot(RegisteredSlot::new(PilotId(0), P5, start, pslot)).unwrap();
    }

    fn job(id: u64, class: JobClass, cores: u32) -> JobAd {
        JobAd::new(JobId(id), class, cores, u64::from(cores) * 2000, 3600.0).with_desired_sites(P5)
    }

    fn running(p: &Pools, id: u64) -> bool {
        p.job(JobId(id)).unwrap().state == JobState::Running
    }

    #[test]
    fn submit_enqueues_idle() {
        let mut p = pools();
        p.submit(PoolId::CERNPool, "t0", job(1, JobClass::Tier0, 8), 10.0).unwrap();
        assert_eq!(p.pool(PoolId::CERNPool).unwrap().idle_count(JobClass::Tier0), 1);
        assert_eq!(p.job(JobId(1)).unwrap().submit_time, 10.0);
    }

    #[test]
    fn duplicate_submit() {
        let mut p = pools();
        p.submit(PoolId::CERNPool, "s", job(1, JobClass::Tier0, 8), 0.0).unwrap();
        assert_eq!(
            p.submit(PoolId::CERNPool, "s", job(1, JobClass::Production, 1), 0.0),
            Err(PoolError::DuplicateId(JobId(1)))
        );
    }

    #[test]
    fn analysis_submit_accepted_but_never_matched() {
        let mut p = pools();
        p.set_route(P5, PoolId::CERNPool);
        p5_slot(&mut p, "m1", 16);
        p.submit(PoolId::CERNPool, "crab", job(1, JobClass::Analysis, 1), 0.0).unwrap();
        assert!(p.negotiation_cycle(PoolId::CERNPool, 60.0).is_empty());
        assert_eq!(p.job(JobId(1)).unwrap().state, JobState::Idle);
    }

    #[test]
    fn agent_name_invariant_enforced() {
        let mut p = pools();
        let bad = job(1, JobClass::Analysis, 1).with_agent_name("x");
        assert!(matches!(p.submit(PoolId::GlobalPool, "s", bad, 0.0), Err(PoolError::InvalidJob(_))));
        let mut bad = job(2, JobClass::Tier0, 1);
        bad.attributes.remove(AGENT_NAME_ATTR);
        assert!(matches!(p.submit(PoolId::GlobalPool, "s", bad, 0.0), Err(PoolError::InvalidJob(_))));
    }

    #[test]
    fn tier0_matches_vacuum_slot() {
        let mut p = pools();
        p5_slot(&mut p, "m1", 16);
        p.submit(PoolId::GlobalPool, "t0", job(1, JobClass::Tier0, 8), 0.0).unwrap();
        let m = p.negotiation_cycle(PoolId::GlobalPool, 60.0);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].machine, MachineId::from("m1"));
        assert!(running(&p, 1));
        assert_eq!(p.slot(&"m1".into()).unwrap().pslot.free_cores, 8);
        p.check_invariants().unwrap();
    }

    #[test]
    fn best_fit_packs_smallest() {
        let mut p = pools();
        p5_slot(&mut p, "a", 16);
        p5_slot(&mut p, "b", 16);
        // leave 2 free cores on b
        p.submit(PoolId::GlobalPool, "s", job(100, JobClass::Production, 14), 0.0).unwrap();
        p.negotiation_cycle(PoolId::GlobalPool, 0.0);
        assert_eq!(p.job(JobId(100)).unwrap().claim.as_ref().unwrap().machine, MachineId::from("a"));
        // a now has 2 free, b 16
        p.submit(PoolId::GlobalPool, "s", job(1, JobClass::Production, 1), 1.0).unwrap();
        p.submit(PoolId::GlobalPool, "s", job(2, JobClass::Production, 1), 2.0).unwrap();
        p.negotiation_cycle(PoolId::GlobalPool, 60.0);
        for id in [1, 2] {
            assert_eq!(p.job(JobId(id)).unwrap().claim.as_ref().unwrap().machine, MachineId::from("a"));
        }
    }

    #[test]
    fn worst_and_first_fit() {
        for (policy, expect) in [(PackPolicy::WorstFit, "b"), (PackPolicy::FirstFit, "a")] {
            let cfg = NegotiatorConfig {
                pack_policy: policy,
                ..Default::default()
            };
            let mut p = Pools::new(PoolId::GlobalPool, [(PoolId::GlobalPool, cfg)]);
            p5_slot(&mut p, "a", 4);
            p5_slot(&mut p, "b", 16);
            p.submit(PoolId::GlobalPool, "s", job(1, JobClass::Production, 1), 0.0).unwrap();
            p.negotiation_cycle(PoolId::GlobalPool, 0.0);
            assert_eq!(p.job(JobId(1)).unwrap().claim.as_ref().unwrap().machine, MachineId::from(expect));
        }
    }

    #[test]
    fn class_priority_and_no_head_of_line_blocking() {
        let mut p = pools();
        p5_slot(&mut p, "m", 4);
        p.submit(PoolId::GlobalPool, "s", job(1, JobClass::Production, 1), 0.0).unwrap();
        p.submit(PoolId::GlobalPool, "s", job(2, JobClass::Tier0, 8), 1.0).unwrap();
        p.submit(PoolId::GlobalPool, "s", job(3, JobClass::Tier0, 2), 2.0).unwrap();
        let m = p.negotiation_cycle(PoolId::GlobalPool, 60.0);
        let order: Vec<_> = m.iter().map(|m| m.job.0).collect();
        assert_eq!(order, vec![3, 1]);
        assert!(!running(&p, 2));
    }

    #[test]
    fn fifo_within_class() {
        let mut p = pools();
        p5_slot(&mut p, "m", 1);
        p.submit(PoolId::GlobalPool, "s", job(9, JobClass::Production, 1), 0.0).unwrap();
        p.submit(PoolId::GlobalPool, "s", job(3, JobClass::Production, 1), 5.0).unwrap();
        p.negotiation_cycle(PoolId::GlobalPool, 60.0);
        assert!(running(&p, 9));
        assert!(!running(&p, 3));
    }

    #[test]
    fn complete_and_fail() {
        let mut p = pools();
        p5_slot(&mut p, "m", 16);
        p.submit(PoolId::GlobalPool, "s", job(1, JobClass::Production, 1), 0.0).unwrap();
        p.submit(PoolId::GlobalPool, "s", job(2, JobClass::Production, 1), 0.0).unwrap();
        p.submit(PoolId::GlobalPool, "s", job(3, JobClass::Production, 1), 0.0).unwrap();
        assert!(matches!(
            p.fail_job(JobId(3), FailureReason::Other, 0.0),
            Err(PoolError::InvalidTransition { .. })
        ));
        p.negotiation_cycle(PoolId::GlobalPool, 0.0);
        assert_eq!(p.complete_job(JobId(1), 3600.0), Ok(JobState::Completed));
        assert_eq!(p.fail_job(JobId(2), FailureReason::ValidationGap, 100.0), Ok(JobState::Failed));
        assert_eq!(p.job(JobId(2)).unwrap().failure, Some(FailureReason::ValidationGap));
        assert_eq!(p.slot(&"m".into()).unwrap().pslot.free_cores, 15);
        p.check_invariants().unwrap();
    }

    #[test]
    fn hibernation_resume_and_timeout() {
        let mut p = pools();
        p5_slot(&mut p, "m", 16);
        for id in 1..=3 {
            p.submit(PoolId::GlobalPool, "s", job(id, JobClass::Production, 1), 0.0).unwrap();
        }
        p.negotiation_cycle(PoolId::GlobalPool, 0.0);
        for id in 1..=3 {
            p.suspend_job(JobId(id), 1000.0).unwrap();
        }
        assert!(matches!(p.suspend_job(JobId(1), 1000.0), Err(PoolError::InvalidTransition { .. })));

        assert_eq!(p.resume_or_requeue(JobId(1), 1000.0 + 3600.0), Ok(JobState::Running));
        let j = p.job(JobId(1)).unwrap();
        assert_eq!(j.remaining_work, 2600.0);
        assert_eq!(j.claim.as_ref().unwrap().machine, MachineId::from("m"));

        // exactly at the limit is still a resume
        assert_eq!(p.resume_or_requeue(JobId(2), 1000.0 + 86_400.0), Ok(JobState::Running));

        assert_eq!(p.resume_or_requeue(JobId(3), 1000.0 + 90_000.0), Ok(JobState::Idle));
        let j = p.job(JobId(3)).unwrap();
        assert_eq!(j.remaining_work, 3600.0);
        assert_eq!(j.hibernation_timeouts, 1);
        assert!(j.claim.is_none());
        p.check_invariants().unwrap();
    }

    #[test]
    fn hibernation_boundary_epsilon() {
        let mut p = pools();
        p5_slot(&mut p, "m", 16);
        p.submit(PoolId::GlobalPool, "s", job(1, JobClass::Production, 1), 0.0).unwrap();
        p.negotiation_cycle(PoolId::GlobalPool, 0.0);
        p.suspend_job(JobId(1), 0.0).unwrap();
        let just_over = 86_400.0_f64.next_up();
        assert_eq!(p.resume_or_requeue(JobId(1), just_over), Ok(JobState::Idle));
    }

    #[test]
    fn migrate_moves_site_slots() {
        let mut p = pools();
        for i in 0..10 {
            p5_slot(&mut p, &format!("p5-{i:02}"), 16);
        }
        assert_eq!(p.migrate_site(PoolId::GlobalPool, PoolId::CERNPool, P5), Ok(10));
        assert_eq!(p.migrate_site(PoolId::GlobalPool, PoolId::CERNPool, "T2_NOWHERE"), Ok(0));
        assert_eq!(p.route(P5), PoolId::CERNPool);
        p.submit(PoolId::GlobalPool, "s", job(1, JobClass::Production, 1), 0.0).unwrap();
        assert!(p.negotiation_cycle(PoolId::GlobalPool, 60.0).is_empty());
        p.submit(PoolId::CERNPool, "s", job(2, JobClass::Production, 1), 0.0).unwrap();
        assert_eq!(p.negotiation_cycle(PoolId::CERNPool, 60.0).len(), 1);
    }

    #[test]
    fn draining_slot_not_matched_and_drain_finish_reported() {
        let mut p = pools();
        p5_slot(&mut p, "m", 4);
        p.submit(PoolId::GlobalPool, "s", job(1, JobClass::Production, 1), 0.0).unwrap();
        p.negotiation_cycle(PoolId::GlobalPool, 0.0);
        p.slot_mut(&"m".into()).unwrap().pslot.draining = true;
        p.submit(PoolId::GlobalPool, "s", job(2, JobClass::Production, 1), 0.0).unwrap();
        assert!(p.negotiation_cycle(PoolId::GlobalPool, 60.0).is_empty());
        p.take_events();
        p.complete_job(JobId(1), 100.0).unwrap();
        let ev = p.take_events();
        assert!(ev.iter().any(|e| matches!(e, PoolEvent::DrainFinished { .. })));
        assert_eq!(p.negotiation_cycle(PoolId::GlobalPool, 120.0).len(), 1);
    }

    #[test]
    fn deregister_requires_empty() {
        let mut p = pools();
        p5_slot(&mut p, "m", 4);
        p.submit(PoolId::GlobalPool, "s", job(1, JobClass::Production, 1), 0.0).unwrap();
        p.negotiation_cycle(PoolId::GlobalPool, 0.0);
        assert_eq!(p.deregister_slot(&"m".into()).unwrap_err(), PoolError::SlotBusy("m".into()));
        p.requeue_job(JobId(1), FailureReason::PilotPreempted, 10.0).unwrap();
        assert_eq!(p.job(JobId(1)).unwrap().state, JobState::Idle);
        assert!(p.deregister_slot(&"m".into()).is_ok());
    }

    #[test]
    fn negotiator_config_validation() {
        assert!(NegotiatorConfig::default().validate().is_empty());
        let bad = NegotiatorConfig {
            class_priority_order: vec![JobClass::Tier0, JobClass::Tier0, JobClass::Analysis],
            cycle_interval_s: 0.0,
            ..Default::default()
        };
        assert_eq!(bad.validate().len(), 2);
    }
}
