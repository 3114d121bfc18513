//! Scenario files: a strict TOML description of the machines, provisioning
//! model, negotiator, LHC schedule, workload and timed operator actions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classad::{self, Expr};
use crate::defrag::DefragConfig;
use crate::lhc::{GeneratedSchedule, LhcSchedule, Phase};
use crate::pool::{JobClass, NegotiatorConfig, PoolId};
use crate::provisioning::{GlideinConfig, ProvisioningModel};
use crate::slot::AvailabilityClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_metrics_interval")]
    pub metrics_interval_s: f64,
    pub provisioning_model: ProvisioningModel,
    /// Share of machines whose software area is broken.
    #[serde(default)]
    pub unhealthy_fraction: f64,
    pub machines: Vec<MachineGroup>,
    #[serde(default)]
    pub glidein: GlideinConfig,
    #[serde(default)]
    pub launcher: LauncherConfig,
    #[serde(default)]
    pub negotiator: NegotiatorConfig,
    /// Per-pool negotiator settings replacing `negotiator` for that pool.
    #[serde(default)]
    pub pool_overrides: BTreeMap<PoolId, NegotiatorConfig>,
    #[serde(default)]
    pub defrag: DefragConfig,
    #[serde(default)]
    pub lhc: LhcSpec,
    #[serde(default)]
    pub workload: Vec<WorkloadSpec>,
    #[serde(default)]
    pub actions: Vec<Action>,
}

fn default_metrics_interval() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineGroup {
    pub count: i64,
    /// Machine ids are the prefix followed by a 1-based, zero-padded index.
    pub prefix: String,
    pub cores: i64,
    pub memory_mb: i64,
    pub site: String,
    #[serde(default = "default_availability")]
    pub availability: AvailabilityClass,
    /// Pool the site's slots initially report to.
    #[serde(default = "default_pool")]
    pub pool: PoolId,
}

fn default_availability() -> AvailabilityClass {
    AvailabilityClass::Permanent
}

fn default_pool() -> PoolId {
    PoolId::GlobalPool
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LauncherConfig {
    /// Period of each machine's launcher check.
    pub interval_s: f64,
    /// Back-off after a failed host validation.
    pub validation_retry_s: f64,
    pub image_rebuild_delay_s: f64,
    /// START expression baked into static images.
    pub static_start_expr: Expr,
    /// Fraction of its work after which a job on a broken machine fails.
    pub gap_failure_point: f64,
}

impl Default for LauncherConfig {
    fn default() -> Self {
        LauncherConfig {
            interval_s: 300.0,
            validation_retry_s: 1800.0,
            image_rebuild_delay_s: 7.0 * 86_400.0,
            static_start_expr: Expr::literal(true),
            gap_failure_point: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LhcSpec {
    Constant { phase: Phase },
    Explicit { transitions: Vec<(f64, Phase)> },
    Generated(GeneratedSchedule),
}

impl Default for LhcSpec {
    fn default() -> Self {
        LhcSpec::Constant {
            phase: Phase::Interfill,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub class: JobClass,
    #[serde(default = "default_pool")]
    pub pool: PoolId,
    #[serde(default = "default_schedd")]
    pub schedd: String,
    pub cores: i64,
    pub memory_mb: i64,
    /// Comma-separated site list published as `DESIRED_Sites`.
    #[serde(default)]
    pub desired_sites: Option<String>,
    /// Overrides the class's default agent name.
    #[serde(default)]
    pub agent_name: Option<String>,
    /// Overrides the default desired-sites requirement.
    #[serde(default)]
    pub requirements: Option<Expr>,
    pub arrivals: ArrivalSpec,
    pub work: WorkSpec,
}

fn default_schedd() -> String {
    "schedd".to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalSpec {
    Poisson {
        mean_interarrival_s: f64,
        #[serde(default)]
        start_s: f64,
        #[serde(default)]
        end_s: Option<f64>,
        #[serde(default)]
        max_jobs: Option<u64>,
    },
    Explicit {
        times: Vec<f64>,
    },
    Burst {
        at_s: f64,
        count: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkSpec {
    Fixed { seconds: f64 },
    Exponential { mean_s: f64 },
    Uniform { min_s: f64, max_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Action {
    /// Publish a new wrapper (and optionally a new glidein configuration).
    FrontendReconfigure {
        at_s: f64,
        #[serde(default)]
        glidein: Option<GlideinConfig>,
    },
    /// Start rebuilding the static VM image from the frontend's state.
    ImageRebuild { at_s: f64 },
    MigrateSite {
        at_s: f64,
        from: PoolId,
        to: PoolId,
        site: String,
    },
}

impl Action {
    pub fn at(&self) -> f64 {
        match self {
            Action::FrontendReconfigure { at_s, .. } | Action::ImageRebuild { at_s } | Action::MigrateSite { at_s, .. } => {
                *at_s
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{origin}:{line}:{column}: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no scenario file or preset named {0:?}")]
    UnknownPreset(String),
}

/// Built-in scenarios, by name.
pub const PRESETS: [(&str, &str); 4] = [
    ("hlt_run2_static", include_str!("../presets/hlt_run2_static.toml")),
    ("p5_vacuum", include_str!("../presets/p5_vacuum.toml")),
    ("t0_commissioning", include_str!("../presets/t0_commissioning.toml")),
    ("interfill_opportunistic", include_str!("../presets/interfill_opportunistic.toml")),
];

pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ScenarioError::UnknownPreset(name.to_owned()))?;
    Scenario::from_toml(text, name)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_toml(&text, &path.display().to_string())
}

/// A path if one exists, otherwise a preset name.
pub fn resolve(spec: &str) -> Result<Scenario, ScenarioError> {
    if Path::new(spec).exists() {
        load_scenario(spec)
    } else if PRESETS.iter().any(|(n, _)| *n == spec) {
        preset(spec)
    } else {
        Err(ScenarioError::UnknownPreset(spec.to_owned()))
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

impl Scenario {
    /// Parses and validates a scenario; `origin` names it in error messages.
    pub fn from_toml(text: &str, origin: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            ScenarioError::Parse {
                origin: origin.to_owned(),
                line,
                column,
                message: e.message().to_owned(),
            }
        })?;
        let issues = scenario.validate();
        if issues.is_empty() {
            Ok(scenario)
        } else {
            Err(ScenarioError::Validation(issues))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn pool_config(&self, pool: PoolId) -> &NegotiatorConfig {
        self.pool_overrides.get(&pool).unwrap_or(&self.negotiator)
    }

    pub fn sites(&self) -> BTreeSet<&str> {
        self.machines.iter().map(|g| g.site.as_str()).collect()
    }

    /// The LHC schedule; generated schedules draw from `rng`.
    pub fn lhc_schedule(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Result<LhcSchedule, String> {
        let s = match &self.lhc {
            LhcSpec::Constant { phase } => Ok(LhcSchedule::constant(*phase)),
            LhcSpec::Explicit { transitions } => LhcSchedule::explicit(transitions.clone()),
            LhcSpec::Generated(g) => LhcSchedule::generate(g, self.duration_s, rng),
        }
        .map_err(|e| e.to_string())?;
        if s.start() > 0.0 {
            return Err(format!("LHC schedule starts at {} but the run starts at 0", s.start()));
        }
        Ok(s)
    }

    /// Every problem with the scenario, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.duration_s) {
            errs.push("duration_s must be positive".to_owned());
        }
        if !positive(self.metrics_interval_s) {
            errs.push("metrics_interval_s must be positive".to_owned());
        }
        if !(0.0..=1.0).contains(&self.unhealthy_fraction) {
            errs.push("unhealthy_fraction must lie in [0, 1]".to_owned());
        }

        if self.machines.is_empty() {
            errs.push("at least one machine group is required".to_owned());
        }
        let mut ids = BTreeSet::new();
        let mut site_pool: BTreeMap<&str, PoolId> = BTreeMap::new();
        let mut max_cores = 0;
        for (i, g) in self.machines.iter().enumerate() {
            let at = format!("machines[{i}]");
            if g.count < 1 {
                errs.push(format!("{at}.count must be at least 1, got {}", g.count));
            }
            if g.cores < 1 || g.cores > i64::from(u32::MAX) {
                errs.push(format!("{at}.cores must be a positive core count, got {}", g.cores));
            }
            if g.memory_mb < 1 {
                errs.push(format!("{at}.memory_mb must be positive, got {}", g.memory_mb));
            }
            if g.site.trim().is_empty() || g.site.contains(',') {
                errs.push(format!("{at}.site must be a non-empty name without commas"));
            }
            max_cores = max_cores.max(g.cores);
            for id in self.group_ids(g) {
                if !ids.insert(id.clone()) {
                    errs.push(format!("{at}: machine id {id} is used twice"));
                    break;
                }
            }
            match site_pool.insert(&g.site, g.pool) {
                Some(p) if p != g.pool => {
                    errs.push(format!("{at}: site {} is placed in both {p} and {}", g.site, g.pool))
                }
                _ => {}
            }
        }

        errs.extend(self.glidein.validate().into_iter().map(|e| format!("glidein.{e}")));
        let l = &self.launcher;
        for (name, v) in [
            ("interval_s", l.interval_s),
            ("validation_retry_s", l.validation_retry_s),
            ("image_rebuild_delay_s", l.image_rebuild_delay_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) || (name == "interval_s" && v == 0.0) {
                errs.push(format!("launcher.{name} must be a non-negative number (interval positive)"));
            }
        }
        if !(l.gap_failure_point > 0.0 && l.gap_failure_point <= 1.0) {
            errs.push("launcher.gap_failure_point must lie in (0, 1]".to_owned());
        }
        errs.extend(self.negotiator.validate().into_iter().map(|e| format!("negotiator.{e}")));
        for (p, c) in &self.pool_overrides {
            errs.extend(c.validate().into_iter().map(|e| format!("pool_overrides.{p}.{e}")));
        }
        errs.extend(self.defrag.validate().into_iter().map(|e| format!("defrag.{e}")));

        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        if let Err(e) = self.lhc_schedule(&mut rng) {
            errs.push(format!("lhc: {e}"));
        }

        let sites = self.sites();
        for (i, w) in self.workload.iter().enumerate() {
            let at = format!("workload[{i}]");
            if w.cores < 1 {
                errs.push(format!("{at}.cores must be at least 1, got {}", w.cores));
            } else if w.cores > max_cores {
                errs.push(format!("{at}.cores = {} exceeds every machine ({max_cores})", w.cores));
            }
            if w.memory_mb < 1 {
                errs.push(format!("{at}.memory_mb must be positive, got {}", w.memory_mb));
            }
            if let Some(list) = &w.desired_sites {
                for site in list.split(',').map(str::trim) {
                    if !sites.contains(site) {
                        errs.push(format!("{at}.desired_sites names unknown site {site:?}"));
                    }
                }
            }
            if w.class == JobClass::Analysis && w.agent_name.is_some() {
                errs.push(format!("{at}: Analysis jobs carry no agent name"));
            }
            match &w.arrivals {
                ArrivalSpec::Poisson {
                    mean_interarrival_s,
                    start_s,
                    end_s,
                    ..
                } => {
                    if !positive(*mean_interarrival_s) {
                        errs.push(format!("{at}.arrivals.mean_interarrival_s must be positive"));
                    }
                    if !(*start_s >= 0.0) || end_s.is_some_and(|e| !(e >= *start_s)) {
                        errs.push(format!("{at}.arrivals needs 0 <= start_s <= end_s"));
                    }
                }
                ArrivalSpec::Explicit { times } => {
                    if times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
                        errs.push(format!("{at}.arrivals.times must be non-negative"));
                    }
                }
                ArrivalSpec::Burst { at_s, .. } => {
                    if !(*at_s >= 0.0 && at_s.is_finite()) {
                        errs.push(format!("{at}.arrivals.at_s must be non-negative"));
                    }
                }
            }
            let work_ok = match &w.work {
                WorkSpec::Fixed { seconds } => positive(*seconds),
                WorkSpec::Exponential { mean_s } => positive(*mean_s),
                WorkSpec::Uniform { min_s, max_s } => positive(*min_s) && max_s >= min_s && max_s.is_finite(),
            };
            if !work_ok {
                errs.push(format!("{at}.work must describe positive durations"));
            }
        }

        for (i, a) in self.actions.iter().enumerate() {
            let at = format!("actions[{i}]");
            if !(a.at() >= 0.0 && a.at().is_finite()) {
                errs.push(format!("{at}.at_s must be non-negative"));
            }
            match a {
                Action::FrontendReconfigure { glidein: Some(g), .. } => {
                    errs.extend(g.validate().into_iter().map(|e| format!("{at}.glidein.{e}")));
                }
                Action::MigrateSite { from, to, site, .. } => {
                    if from == to {
                        errs.push(format!("{at}: cannot migrate from {from} to itself"));
                    }
                    if !sites.contains(site.as_str()) {
                        errs.push(format!("{at}: unknown site {site:?}"));
                    }
                }
                _ => {}
            }
        }
        errs
    }

    pub(crate) fn group_ids(&self, g: &MachineGroup) -> Vec<String> {
        (1..=g.count.max(0)).map(|i| format!("{}{i:03}", g.prefix)).collect()
    }

    /// Job requirements for a workload stream.
    pub(crate) fn requirements_for(w: &WorkloadSpec) -> Expr {
        w.requirements
            .clone()
            .unwrap_or_else(|| classad::parse(classad::DESIRED_SITES_EXPR).expect("built-in expression parses"))
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml())
    }
}
