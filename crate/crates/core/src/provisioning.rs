//! The two ways machines join the pool: long-lived static startds baked into
//! the VM image, and short-lived vacuum glideins started by a per-machine
//! launcher that pulls the current wrapper from the frontend.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classad::{self, Expr};
use crate::pool::RegisteredSlot;
use crate::slot::{Machine, MachineId, PartitionableSlot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PilotId(pub u64);

impl fmt::Display for PilotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pilot{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProvisioningModel {
    StaticStartd,
    VacuumGlidein,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GlideinCpus {
    #[default]
    WholeNode,
    Fixed(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlideinConfig {
    pub max_idle_s: f64,
    pub max_walltime_s: f64,
    pub cpus: GlideinCpus,
    pub retire_grace_s: f64,
    pub start_expr: Expr,
}

impl Default for GlideinConfig {
    fn default() -> Self {
        GlideinConfig {
            max_idle_s: 3600.0,
            max_walltime_s: 172_800.0,
            cpus: GlideinCpus::WholeNode,
            retire_grace_s: 3600.0,
            start_expr: classad::parse(classad::P5_START_EXPR).expect("built-in expression parses"),
        }
    }
}

impl GlideinConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("max_idle_s", self.max_idle_s),
            ("max_walltime_s", self.max_walltime_s),
            ("retire_grace_s", self.retire_grace_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be a non-negative number"));
            }
        }
        if self.max_idle_s > self.max_walltime_s {
            errs.push("max_idle_s must not exceed max_walltime_s".to_owned());
        }
        if self.cpus == GlideinCpus::Fixed(0) {
            errs.push("cpus must be at least 1".to_owned());
        }
        errs
    }
}

/// Publishes the wrapper and glidein configuration; every reconfiguration
/// bumps the wrapper version.
#[derive(Debug, Clone, PartialEq)]
pub struct Frontend {
    pub wrapper_version: u32,
    pub published_config: GlideinConfig,
}

impl Frontend {
    pub fn new(config: GlideinConfig) -> Self {
        Frontend {
            wrapper_version: 1,
            published_config: config,
        }
    }

    pub fn reconfigure(&mut self, config: Option<GlideinConfig>) -> u32 {
        if let Some(c) = config {
            self.published_config = c;
        }
        self.wrapper_version += 1;
        self.wrapper_version
    }
}

/// Wrapper and configuration frozen into the VM image used by static startds.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticImage {
    pub wrapper_version: u32,
    pub config: GlideinConfig,
    /// A rebuild in progress: (version, config, time it takes effect).
    pub pending: Option<(u32, GlideinConfig, f64)>,
    pub rebuild_delay_s: f64,
}

impl StaticImage {
    pub fn new(wrapper_version: u32, config: GlideinConfig, rebuild_delay_s: f64) -> Self {
        StaticImage {
            wrapper_version,
            config,
            pending: None,
            rebuild_delay_s,
        }
    }

    /// Starts an image rebuild from the frontend's current state. A rebuild
    /// requested while another is pending replaces it.
    pub fn rebuild(&mut self, frontend: &Frontend, static_start: &Expr, now: f64) -> f64 {
        let mut config = frontend.published_config.clone();
        config.start_expr = static_start.clone();
        let effective = now + self.rebuild_delay_s;
        self.pending = Some((frontend.wrapper_version, config, effective));
        effective
    }

    /// Image contents at `now`, applying a finished rebuild.
    pub fn current(&mut self, now: f64) -> (u32, &GlideinConfig) {
        if let Some((_, _, at)) = &self.pending {
            if *at <= now {
                let (v, c, _) = self.pending.take().expect("checked");
                self.wrapper_version = v;
                self.config = c;
            }
        }
        (self.wrapper_version, &self.config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PilotState {
    Validating,
    Registered,
    Retiring,
    Terminated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pilot {
    pub id: PilotId,
    pub machine_id: MachineId,
    pub model: ProvisioningModel,
    pub wrapper_version: u32,
    pub state: PilotState,
    pub launch_time: f64,
    /// Set while the pilot's slot holds no claims.
    pub idle_since: Option<f64>,
    pub config: GlideinConfig,
    pub retire_deadline: Option<f64>,
    pub suspended_since: Option<f64>,
    /// Seconds the hosting VM spent suspended; the pilot's own timers do not
    /// advance while frozen.
    pub suspended_total: f64,
    pub end_time: Option<f64>,
}

impl Pilot {
    pub fn is_live(&self) -> bool {
        self.state != PilotState::Terminated
    }

    /// Seconds the pilot has been alive, not counting suspension.
    pub fn active_lifetime(&self, now: f64) -> f64 {
        let end = self.end_time.unwrap_or(now);
        let frozen = self.suspended_since.map_or(0.0, |s| end - s);
        end - self.launch_time - self.suspended_total - frozen
    }

    pub fn walltime_deadline(&self) -> Option<f64> {
        match self.model {
            ProvisioningModel::VacuumGlidein => {
                Some(self.launch_time + self.suspended_total + self.config.max_walltime_s)
            }
            ProvisioningModel::StaticStartd => None,
        }
    }

    /// Earliest time at which [`Provisioner::pilot_tick`] may change state.
    pub fn next_deadline(&self) -> Option<f64> {
        if self.model == ProvisioningModel::StaticStartd || self.suspended_since.is_some() {
            return None;
        }
        match self.state {
            PilotState::Registered => {
                let wall = self.walltime_deadline();
                let idle = self.idle_since.map(|t| t + self.config.max_idle_s);
                [wall, idle].into_iter().flatten().min_by(f64::total_cmp)
            }
            PilotState::Retiring => self.retire_deadline,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotTransition {
    pub time: f64,
    pub pilot: PilotId,
    pub machine: MachineId,
    pub model: ProvisioningModel,
    pub old: Option<PilotState>,
    pub new: PilotState,
    pub wrapper_version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    Pass,
    Fail,
}

/// What the caller must do to the pool after a pilot tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickAction {
    Nothing,
    /// Stop accepting new matches.
    Retire,
    /// Withdraw the (empty) slot.
    Terminate,
    /// Requeue whatever still runs, then withdraw the slot.
    PreemptAndTerminate,
}

/// Live state of the machine's slot as seen by [`Provisioner::pilot_tick`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotUsage {
    pub has_claims: bool,
}

#[derive(Debug, Clone)]
pub struct Provisioner {
    pub model: ProvisioningModel,
    pub frontend: Frontend,
    pub image: StaticImage,
    pub validation_retry_s: f64,
    pilots: BTreeMap<PilotId, Pilot>,
    live: BTreeMap<MachineId, PilotId>,
    retry_after: BTreeMap<MachineId, f64>,
    next_id: u64,
    events: Vec<PilotTransition>,
}

impl Provisioner {
    pub fn new(model: ProvisioningModel, frontend: Frontend, image: StaticImage, validation_retry_s: f64) -> Self {
        Provisioner {
            model,
            frontend,
            image,
            validation_retry_s,
            pilots: BTreeMap::new(),
            live: BTreeMap::new(),
            retry_after: BTreeMap::new(),
            next_id: 1,
            events: Vec::new(),
        }
    }

    pub fn pilot(&self, id: PilotId) -> Option<&Pilot> {
        self.pilots.get(&id)
    }

    pub fn pilots(&self) -> impl Iterator<Item = &Pilot> {
        self.pilots.values()
    }

    pub fn live_pilot_on(&self, machine: &MachineId) -> Option<&Pilot> {
        self.live.get(machine).map(|id| &self.pilots[id])
    }

    pub fn live_pilots(&self) -> impl Iterator<Item = &Pilot> {
        self.live.values().map(|id| &self.pilots[id])
    }

    pub fn take_events(&mut self) -> Vec<PilotTransition> {
        std::mem::take(&mut self.events)
    }

    fn record(&mut self, id: PilotId, old: Option<PilotState>, new: PilotState, now: f64) {
        let p = &self.pilots[&id];
        self.events.push(PilotTransition {
            time: now,
            pilot: id,
            machine: p.machine_id.clone(),
            model: p.model,
            old,
            new,
            wrapper_version: p.wrapper_version,
        });
    }

    fn set_state(&mut self, id: PilotId, new: PilotState, now: f64) {
        let p = self.pilots.get_mut(&id).expect("known pilot");
        let old = p.state;
        p.state = new;
        if new == PilotState::Terminated {
            p.end_time = Some(now);
            let m = p.machine_id.clone();
            self.live.remove(&m);
        }
        self.record(id, Some(old), new, now);
    }

    /// Starts a pilot on an available machine that has none. Vacuum pilots
    /// snapshot the frontend's wrapper and begin validating; static startds
    /// take the image's frozen wrapper and register straight away.
    pub fn launcher_tick(&mut self, machine: &Machine, available: bool, now: f64) -> Option<PilotId> {
        if !available || self.live.contains_key(&machine.id) {
            return None;
        }
        if self.retry_after.get(&machine.id).is_some_and(|t| now < *t) {
            return None;
        }
        let (version, config, state) = match self.model {
            ProvisioningModel::VacuumGlidein => (
                self.frontend.wrapper_version,
                self.frontend.published_config.clone(),
                PilotState::Validating,
            ),
            ProvisioningModel::StaticStartd => {
                let (v, c) = self.image.current(now);
                (v, c.clone(), PilotState::Registered)
            }
        };
        let id = PilotId(self.next_id);
        self.next_id += 1;
        self.pilots.insert(
            id,
            Pilot {
                id,
                machine_id: machine.id.clone(),
                model: self.model,
                wrapper_version: version,
                state,
                launch_time: now,
                idle_since: Some(now),
                config,
                retire_deadline: None,
                suspended_since: None,
                suspended_total: 0.0,
                end_time: None,
            },
        );
        self.live.insert(machine.id.clone(), id);
        self.record(id, None, state, now);
        Some(id)
    }

    /// Host probe run by a validating pilot before it contacts the pool.
    pub fn validate(&mut self, id: PilotId, machine: &Machine, now: f64) -> Validation {
        let Some(p) = self.pilots.get(&id) else {
            return Validation::Fail;
        };
        if p.state != PilotState::Validating {
            return Validation::Fail;
        }
        if machine.cvmfs_healthy {
            self.set_state(id, PilotState::Registered, now);
            if let Some(p) = self.pilots.get_mut(&id) {
                p.idle_since = Some(now);
            }
            Validation::Pass
        } else {
            self.set_state(id, PilotState::Terminated, now);
            self.retry_after.insert(machine.id.clone(), now + self.validation_retry_s);
            Validation::Fail
        }
    }

    /// Slot ad a registered pilot advertises.
    pub fn slot_for(&self, id: PilotId, machine: &Machine) -> RegisteredSlot {
        let p = &self.pilots[&id];
        let cores = match p.config.cpus {
            GlideinCpus::WholeNode => machine.total_cores,
            GlideinCpus::Fixed(n) => n.min(machine.total_cores),
        };
        let memory = machine.memory_mb * u64::from(cores) / u64::from(machine.total_cores);
        let pslot = PartitionableSlot::new(machine.id.clone(), cores, memory.max(1));
        let mut slot = RegisteredSlot::new(id, &machine.site, p.config.start_expr.clone(), pslot);
        slot.ad.set("GLIDEIN_Wrapper_Version", i64::from(p.wrapper_version));
        slot.ad.set(
            "IS_GLIDEIN",
            p.model == ProvisioningModel::VacuumGlidein,
        );
        slot
    }

    /// Keeps the idle clock in step with the slot's claims.
    pub fn note_usage(&mut self, id: PilotId, usage: SlotUsage, now: f64) {
        if let Some(p) = self.pilots.get_mut(&id) {
            if usage.has_claims {
                p.idle_since = None;
            } else if p.idle_since.is_none() {
                p.idle_since = Some(now);
            }
        }
    }

    /// Lifetime bookkeeping for a vacuum pilot. Static startds never retire
    /// or time out.
    pub fn pilot_tick(&mut self, id: PilotId, usage: SlotUsage, now: f64) -> TickAction {
        self.note_usage(id, usage, now);
        let Some(p) = self.pilots.get(&id) else {
            return TickAction::Nothing;
        };
        if p.model == ProvisioningModel::StaticStartd || p.suspended_since.is_some() {
            return TickAction::Nothing;
        }
        match p.state {
            PilotState::Registered => {
                let wall = p.walltime_deadline().expect("vacuum pilots have a walltime");
                let idle_expired = p.idle_since.is_some_and(|t| now >= t + p.config.max_idle_s);
                if idle_expired {
                    self.set_state(id, PilotState::Terminated, now);
                    TickAction::Terminate
                } else if now >= wall {
                    let grace = p.config.retire_grace_s;
                    self.pilots.get_mut(&id).expect("known").retire_deadline = Some(now + grace);
                    self.set_state(id, PilotState::Retiring, now);
                    if usage.has_claims {
                        TickAction::Retire
                    } else {
                        self.set_state(id, PilotState::Terminated, now);
                        TickAction::Terminate
                    }
                } else {
                    TickAction::Nothing
                }
            }
            PilotState::Retiring => {
                if !usage.has_claims {
                    self.set_state(id, PilotState::Terminated, now);
                    TickAction::Terminate
                } else if p.retire_deadline.is_some_and(|d| now >= d) {
                    self.set_state(id, PilotState::Terminated, now);
                    TickAction::PreemptAndTerminate
                } else {
                    TickAction::Nothing
                }
            }
            _ => TickAction::Nothing,
        }
    }

    /// Freezes the pilot with its VM.
    pub fn suspend(&mut self, machine: &MachineId, now: f64) -> Option<PilotId> {
        let id = *self.live.get(machine)?;
        let p = self.pilots.get_mut(&id).expect("live pilot");
        if p.suspended_since.is_none() {
            p.suspended_since = Some(now);
        }
        Some(id)
    }

    /// Thaws the pilot; its timers are shifted by the time spent frozen.
    pub fn resume(&mut self, machine: &MachineId, now: f64) -> Option<PilotId> {
        let id = *self.live.get(machine)?;
        let p = self.pilots.get_mut(&id).expect("live pilot");
        if let Some(since) = p.suspended_since.take() {
            let frozen = now - since;
            p.suspended_total += frozen;
            if let Some(t) = p.idle_since.as_mut() {
                *t += frozen;
            }
            if let Some(d) = p.retire_deadline.as_mut() {
                *d += frozen;
            }
        }
        Some(id)
    }

    /// Starts a static image rebuild; vacuum pilots are unaffected.
    pub fn rebuild_image(&mut self, static_start: &Expr, now: f64) -> f64 {
        self.image.rebuild(&self.frontend, static_start, now)
    }

    /// Redeploys live static startds from the image once a rebuild has taken
    /// effect. Returns the pilots whose wrapper changed.
    pub fn roll_out_image(&mut self, now: f64) -> Vec<PilotId> {
        let (version, config) = {
            let (v, c) = self.image.current(now);
            (v, c.clone())
        };
        let stale: Vec<PilotId> = self
            .live
            .values()
            .copied()
            .filter(|id| {
                let p = &self.pilots[id];
                p.model == ProvisioningModel::StaticStartd && p.wrapper_version != version
            })
            .collect();
        for id in &stale {
            let p = self.pilots.get_mut(id).expect("live pilot");
            p.wrapper_version = version;
            p.config = config.clone();
            let state = p.state;
            self.record(*id, Some(state), state, now);
        }
        stale
    }

    /// Largest wrapper-version lag among live pilots of `model`.
    pub fn max_staleness(&self, model: ProvisioningModel) -> u32 {
        self.live_pilots()
            .filter(|p| p.model == model)
            .map(|p| self.frontend.wrapper_version.saturating_sub(p.wrapper_version))
            .max()
            .unwrap_or(0)
    }

    pub fn count_by_state(&self) -> BTreeMap<PilotState, usize> {
        let mut out = BTreeMap::new();
        for p in self.pilots.values() {
            *out.entry(p.state).or_insert(0) += 1;
        }
        out
    }
}
