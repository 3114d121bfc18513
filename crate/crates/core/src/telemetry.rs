//! Metrics sampling, run summaries, export and scenario comparison.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pool::{FailureReason, JobClass, JobState};
use crate::provisioning::PilotState;
use crate::scenario::Scenario;
use crate::sim::{self, Cluster, JobRecord, PilotRecord, RunOutput, SimError, TraceRecord};

/// One row of the time series. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time: f64,
    pub running_tier0: u64,
    pub running_production: u64,
    pub running_analysis: u64,
    /// Cores not running or holding anything, including those of machines
    /// without a pilot.
    pub cores_free: u64,
    pub cores_suspended: u64,
    pub cores_draining_idle: u64,
    pub whole_slots: u64,
    pub idle_tier0: u64,
    pub idle_production: u64,
    pub idle_analysis: u64,
    pub live_pilots: u64,
    pub wrapper_staleness: u64,
}

pub const COLUMNS: [&str; 13] = [
    "time",
    "running_tier0",
    "running_production",
    "running_analysis",
    "cores_free",
    "cores_suspended",
    "cores_draining_idle",
    "whole_slots",
    "idle_tier0",
    "idle_production",
    "idle_analysis",
    "live_pilots",
    "wrapper_staleness",
];

impl Sample {
    /// Reads the cluster state, checking that every core is accounted for
    /// exactly once.
    pub fn capture(cluster: &Cluster, whole_threshold: u32, now: f64) -> Result<Sample, String> {
        let mut running = [0u64; 3];
        let mut suspended = 0u64;
        let mut draining_idle = 0u64;
        let mut free = 0u64;
        let mut whole = 0u64;
        for m in &cluster.machines {
            let Some(slot) = cluster.pools.slot(&m.id) else {
                free += u64::from(m.total_cores);
                continue;
            };
            let p = &slot.pslot;
            // cores a fixed-size glidein leaves outside its slot
            free += u64::from(m.total_cores.saturating_sub(p.total_cores));
            if p.draining {
                draining_idle += u64::from(p.free_cores);
            } else {
                free += u64::from(p.free_cores);
            }
            if slot.accepting && !slot.suspended && !p.draining && p.is_whole(whole_threshold) {
                whole += 1;
            }
            for d in &p.dynamic_slots {
                let job = d
                    .claimed_job
                    .and_then(|j| cluster.pools.job(j))
                    .ok_or_else(|| format!("{}/{} has no job", m.id, d.id))?;
                match job.state {
                    JobState::Running => running[job.class.index()] += u64::from(d.cores),
                    JobState::Suspended => suspended += u64::from(d.cores),
                    s => return Err(format!("{} holds cores on {} in state {s:?}", job.id, m.id)),
                }
            }
        }
        let idle = |c: JobClass| -> u64 {
            cluster
                .pools
                .pool_ids()
                .filter_map(|p| cluster.pools.pool(p))
                .map(|p| p.idle_count(c) as u64)
                .sum()
        };
        let s = Sample {
            time: now,
            running_tier0: running[0],
            running_production: running[1],
            running_analysis: running[2],
            cores_free: free,
            cores_suspended: suspended,
            cores_draining_idle: draining_idle,
            whole_slots: whole,
            idle_tier0: idle(JobClass::Tier0),
            idle_production: idle(JobClass::Production),
            idle_analysis: idle(JobClass::Analysis),
            live_pilots: cluster.provisioner.live_pilots().count() as u64,
            wrapper_staleness: u64::from(cluster.provisioner.max_staleness(cluster.provisioner.model)),
        };
        let total = cluster.total_cores();
        if s.accounted() != total {
            return Err(format!("core accounting: {} of {total} cores at t={now}", s.accounted()));
        }
        Ok(s)
    }

    /// Running + free + suspended + draining-idle.
    pub fn accounted(&self) -> u64 {
        self.running_tier0
            + self.running_production
            + self.running_analysis
            + self.cores_free
            + self.cores_suspended
            + self.cores_draining_idle
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub total_cores: u64,
    pub samples: Vec<Sample>,
}

impl MetricsSeries {
    /// Every sample accounts for every core.
    pub fn conserved(&self) -> bool {
        self.samples.iter().all(|s| s.accounted() == self.total_cores)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub started: u64,
    pub p50_s: Option<f64>,
    pub p95_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub jobs_submitted: u64,
    pub jobs_by_state: BTreeMap<JobState, u64>,
    /// Submit-to-first-start latency.
    pub latency: BTreeMap<JobClass, LatencyStats>,
    /// Failures and evictions, by reason.
    pub failures: BTreeMap<FailureReason, u64>,
    pub pilots_by_state: BTreeMap<PilotState, u64>,
    pub max_wrapper_staleness: u64,
    /// Whole-slot statistics cover `loaded_window` only.
    pub whole_slots_mean: f64,
    pub whole_slots_max: u64,
    pub whole_slot_target: u64,
    pub whole_target_reached: bool,
    pub trace_digest: String,
}

/// Nearest-rank quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Samples from the first moment the farm ran out of whole slots. A fresh
/// farm is all whole slots, which says nothing about fragmentation under
/// load; if whole slots never run out, the whole series is used.
pub fn loaded_window(samples: &[Sample]) -> &[Sample] {
    let Some(first) = samples.iter().position(|s| s.whole_slots > 0) else {
        return samples;
    };
    match samples[first..].iter().position(|s| s.whole_slots == 0) {
        Some(i) => &samples[first + i..],
        None => samples,
    }
}

impl Summary {
    pub fn build(
        scenario: &Scenario,
        metrics: &MetricsSeries,
        jobs: &[JobRecord],
        pilots: &[PilotRecord],
        trace: &[TraceRecord],
    ) -> Summary {
        let mut jobs_by_state = BTreeMap::new();
        let mut waits: BTreeMap<JobClass, Vec<f64>> = BTreeMap::new();
        for j in jobs {
            *jobs_by_state.entry(j.state).or_insert(0) += 1;
            if let Some(s) = j.start_time {
                waits.entry(j.class).or_default().push(s - j.submit_time);
            }
        }
        let latency = JobClass::ALL
            .iter()
            .map(|c| {
                let mut v = waits.remove(c).unwrap_or_default();
                v.sort_by(f64::total_cmp);
                let stats = LatencyStats {
                    started: v.len() as u64,
                    p50_s: quantile(&v, 0.5),
                    p95_s: quantile(&v, 0.95),
                };
                (*c, stats)
            })
            .collect();
        let mut failures = BTreeMap::new();
        for r in trace {
            if let TraceRecord::Job(t) = r {
                if let crate::pool::TransitionReason::Failure(f) = t.reason {
                    *failures.entry(f).or_insert(0) += 1;
                }
            }
        }
        let mut pilots_by_state = BTreeMap::new();
        for p in pilots {
            *pilots_by_state.entry(p.state).or_insert(0) += 1;
        }
        let loaded = loaded_window(&metrics.samples);
        let n = loaded.len().max(1) as f64;
        let whole_slots_mean = loaded.iter().map(|s| s.whole_slots as f64).sum::<f64>() / n;
        let whole_slots_max = loaded.iter().map(|s| s.whole_slots).max().unwrap_or(0);
        let target = u64::from(scenario.defrag.whole_slot_target);
        Summary {
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            duration_s: scenario.duration_s,
            jobs_submitted: jobs.len() as u64,
            jobs_by_state,
            latency,
            failures,
            pilots_by_state,
            max_wrapper_staleness: metrics.samples.iter().map(|s| s.wrapper_staleness).max().unwrap_or(0),
            whole_slots_mean,
            whole_slots_max,
            whole_slot_target: target,
            whole_target_reached: whole_slots_max >= target,
            trace_digest: sim::trace_digest(trace),
        }
    }

    pub fn failures_of(&self, reason: FailureReason) -> u64 {
        self.failures.get(&reason).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// The JSON export: series plus summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub series: MetricsSeries,
    pub summary: Summary,
}

pub fn write_csv<W: Write>(samples: &[Sample], w: W) -> io::Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(COLUMNS)?;
    for s in samples {
        wr.serialize(s).map_err(io::Error::other)?;
    }
    wr.flush()
}

pub fn read_csv<R: Read>(r: R) -> io::Result<Vec<Sample>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<Result<Vec<Sample>, _>>()
        .map_err(io::Error::other)
}

pub fn write_json<W: Write>(report: &Report, w: W) -> io::Result<()> {
    serde_json::to_writer_pretty(w, report).map_err(io::Error::other)
}

pub fn read_json<R: Read>(r: R) -> io::Result<Report> {
    serde_json::from_reader(r).map_err(io::Error::other)
}

/// Writes metrics (CSV or JSON), the summary and the JSON-lines trace into
/// `dir`; returns the files written.
pub fn export(out: &RunOutput, dir: &Path, format: Format) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        Format::Csv => {
            let p = dir.join("metrics.csv");
            write_csv(&out.metrics.samples, io::BufWriter::new(fs::File::create(&p)?))?;
            written.push(p);
            let p = dir.join("summary.json");
            fs::write(&p, serde_json::to_string_pretty(&out.summary).map_err(io::Error::other)?)?;
            written.push(p);
        }
        Format::Json => {
            let p = dir.join("metrics.json");
            let report = Report {
                series: out.metrics.clone(),
                summary: out.summary.clone(),
            };
            write_json(&report, io::BufWriter::new(fs::File::create(&p)?))?;
            written.push(p);
        }
    }
    let p = dir.join("trace.jsonl");
    fs::write(&p, out.trace_jsonl())?;
    written.push(p);
    Ok(written)
}

/// Differences `b - a` between two runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub latency_p50_s: BTreeMap<JobClass, Option<f64>>,
    pub latency_p95_s: BTreeMap<JobClass, Option<f64>>,
    pub failures: BTreeMap<FailureReason, i64>,
    pub whole_slots_mean: f64,
    pub whole_slots_max: i64,
    pub max_wrapper_staleness: i64,
}

impl Deltas {
    pub fn between(a: &Summary, b: &Summary) -> Deltas {
        let lat = |f: fn(&LatencyStats) -> Option<f64>| {
            JobClass::ALL
                .iter()
                .map(|c| {
                    let d = match (a.latency.get(c).and_then(f), b.latency.get(c).and_then(f)) {
                        (Some(x), Some(y)) => Some(y - x),
                        _ => None,
                    };
                    (*c, d)
                })
                .collect()
        };
        let reasons = [
            FailureReason::ValidationGap,
            FailureReason::PilotPreempted,
            FailureReason::HibernationTimeout,
            FailureReason::Other,
        ];
        Deltas {
            latency_p50_s: lat(|l| l.p50_s),
            latency_p95_s: lat(|l| l.p95_s),
            failures: reasons
                .iter()
                .map(|r| (*r, b.failures_of(*r) as i64 - a.failures_of(*r) as i64))
                .collect(),
            whole_slots_mean: b.whole_slots_mean - a.whole_slots_mean,
            whole_slots_max: b.whole_slots_max as i64 - a.whole_slots_max as i64,
            max_wrapper_staleness: b.max_wrapper_staleness as i64 - a.max_wrapper_staleness as i64,
        }
    }

    /// True when the two runs agree on every compared quantity.
    pub fn is_zero(&self) -> bool {
        self.latency_p50_s.values().chain(self.latency_p95_s.values()).all(|d| d.is_none_or(|x| x == 0.0))
            && self.failures.values().all(|d| *d == 0)
            && self.whole_slots_mean == 0.0
            && self.whole_slots_max == 0
            && self.max_wrapper_staleness == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: Summary,
    pub b: Summary,
    pub deltas: Deltas,
}

/// Runs both scenarios under the same seed, concurrently.
pub fn compare(mut a: Scenario, mut b: Scenario, seed: u64) -> Result<Comparison, SimError> {
    a.seed = seed;
    b.seed = seed;
    let (ra, rb) = std::thread::scope(|s| {
        let ha = s.spawn(|| sim::run(a));
        let hb = s.spawn(|| sim::run(b));
        (ha.join().expect("run a panicked"), hb.join().expect("run b panicked"))
    });
    let (ra, rb) = (ra?, rb?);
    let deltas = Deltas::between(&ra.summary, &rb.summary);
    Ok(Comparison {
        a: ra.summary,
        b: rb.summary,
        deltas,
    })
}

impl Comparison {
    /// Plain-text table of the headline numbers.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{x:.0}"));
        let mut out = format!("{:<34} {:>14} {:>14} {:>14}\n", "metric", "a", "b", "b - a");
        for c in JobClass::ALL {
            for (name, get) in [
                ("p50", (|l: &LatencyStats| l.p50_s) as fn(&LatencyStats) -> Option<f64>),
                ("p95", |l: &LatencyStats| l.p95_s),
            ] {
                let (x, y) = (self.a.latency[&c].clone(), self.b.latency[&c].clone());
                let d = if name == "p50" {
                    self.deltas.latency_p50_s[&c]
                } else {
                    self.deltas.latency_p95_s[&c]
                };
                out += &format!(
                    "{:<34} {:>14} {:>14} {:>14}\n",
                    format!("{c} latency {name} (s)"),
                    fmt(get(&x)),
                    fmt(get(&y)),
                    fmt(d)
                );
            }
        }
        for (r, d) in &self.deltas.failures {
            out += &format!(
                "{:<34} {:>14} {:>14} {:>14}\n",
                format!("failures {r:?}"),
                self.a.failures_of(*r),
                self.b.failures_of(*r),
                d
            );
        }
        out += &format!(
            "{:<34} {:>14.2} {:>14.2} {:>14.2}\n",
            "whole slots (mean)", self.a.whole_slots_mean, self.b.whole_slots_mean, self.deltas.whole_slots_mean
        );
        out += &format!(
            "{:<34} {:>14} {:>14} {:>14}\n",
            "whole slots (max)", self.a.whole_slots_max, self.b.whole_slots_max, self.deltas.whole_slots_max
        );
        out += &format!(
            "{:<34} {:>14} {:>14} {:>14}\n",
            "max wrapper staleness",
            self.a.max_wrapper_staleness,
            self.b.max_wrapper_staleness,
            self.deltas.max_wrapper_staleness
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.5), Some(10.0));
        assert_eq!(quantile(&v, 0.95), Some(19.0));
        assert_eq!(quantile(&[7.0], 0.95), Some(7.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn csv_header_matches_columns() {
        let s = Sample {
            time: 0.0,
            running_tier0: 1,
            running_production: 2,
            running_analysis: 3,
            cores_free: 4,
            cores_suspended: 5,
            cores_draining_idle: 6,
            whole_slots: 7,
            idle_tier0: 8,
            idle_production: 9,
            idle_analysis: 10,
            live_pilots: 11,
            wrapper_staleness: 12,
        };
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&s), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header, COLUMNS.join(","));
        assert_eq!(read_csv(&buf[..]).unwrap(), vec![s]);
    }
}
