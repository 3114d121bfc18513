//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::thread;

use vacsim::classad::{self, AttributeSet, Value};
use vacsim::pool::{FailureReason, JobClass, JobState};
use vacsim::scenario::{self, Scenario};
use vacsim::sim::{JobRecord, RunOutput, Simulation};
use vacsim::telemetry::{self, quantile};

type Outcome = Result<String, String>;

fn scenario(toml: &str) -> Scenario {
    Scenario::from_toml(toml, "acceptance").unwrap_or_else(|e| panic!("{e}"))
}

fn run(s: Scenario) -> RunOutput {
    vacsim::run(s).unwrap_or_else(|e| panic!("{e}"))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn a1() -> Outcome {
    let req = classad::parse(classad::DESIRED_SITES_EXPR).map_err(|e| e.to_string())?;
    let start = classad::parse(classad::P5_START_EXPR).map_err(|e| e.to_string())?;
    let slot = AttributeSet::new().with("GLIDEIN_CMSSite", "T2_CH_CERN_P5");

    // (desired sites, agent name present, requirements value, start value, match)
    let undef = Value::Undefined;
    let (t, f) = (Value::Boolean(true), Value::Boolean(false));
    let table = [
        (None, true, &undef, &t, false),
        (None, false, &undef, &f, false),
        (Some("T2_CH_CERN_P5"), true, &t, &t, true),
        (Some("T2_CH_CERN_P5"), false, &t, &f, false),
        (Some("T1_US_FNAL_Disk"), true, &f, &t, false),
        (Some("T1_US_FNAL_Disk"), false, &f, &f, false),
        (Some("T1_US_FNAL_Disk,T2_CH_CERN_P5"), true, &t, &t, true),
        (Some("T1_US_FNAL_Disk,T2_CH_CERN_P5"), false, &t, &f, false),
    ];
    for (sites, agent, want_req, want_start, want_match) in table {
        let mut job = AttributeSet::new();
        if let Some(s) = sites {
            job.set("DESIRED_Sites", s);
        }
        if agent {
            job.set("WMAgent_AgentName", "wmagent");
        }
        let case = format!("sites={sites:?} agent={agent}");
        let r = classad::evaluate(&req, &job, &slot);
        let s = classad::evaluate(&start, &slot, &job);
        let m = classad::matches(&req, &start, &job, &slot);
        ensure(r.identical(want_req), || format!("{case}: requirements gave {r}"))?;
        ensure(s.identical(want_start), || format!("{case}: START gave {s}"))?;
        ensure(m == want_match, || format!("{case}: match gave {m}"))?;
    }

    // Real job ads: Analysis never matches, whatever it desires.
    let p5 = |class, sites: &str| vacsim::pool::JobAd::new(vacsim::pool::JobId(1), class, 1, 2000, 1.0).with_desired_sites(sites);
    for (class, want) in [
        (JobClass::Tier0, true),
        (JobClass::Production, true),
        (JobClass::Analysis, false),
    ] {
        let job = p5(class, "T2_CH_CERN_P5");
        let m = classad::matches(&job.requirements, &start, &job.attributes, &slot);
        ensure(m == want, || format!("{class:?} job vs P5 slot: match gave {m}"))?;
    }
    Ok("8-case truth table and per-class matches exact".into())
}

fn hibernation_case(fill_end: f64, duration: f64) -> (Vec<JobRecord>, f64) {
    let s = scenario(&format!(
        r#"
seed = 5
duration_s = {duration}
provisioning_model = "StaticStartd"

[[machines]]
count = 2
prefix = "op-"
cores = 16
memory_mb = 32000
site = "T2_CH_CERN_P5"
availability = "Opportunistic"

[lhc]
kind = "explicit"
transitions = [[0.0, "Interfill"], [20000.0, "Fill"], [{fill_end:.1}, "Interfill"]]

[[workload]]
class = "Production"
cores = 1
memory_mb = 2000
desired_sites = "T2_CH_CERN_P5"
arrivals = {{ kind = "explicit", times = [100.0, 250.0, 900.0, 5000.0, 12345.0] }}
work = {{ kind = "fixed", seconds = 36000.0 }}
"#
    ));
    (run(s).jobs, fill_end - 20000.0)
}

fn a2() -> Outcome {
    let (jobs, fill) = hibernation_case(34400.0, 100000.0);
    ensure(jobs.len() == 5, || format!("expected 5 jobs, got {}", jobs.len()))?;
    for j in &jobs {
        let id = j.id.0;
        let start = j.start_time.ok_or(format!("short fill: job {id} never started"))?;
        let end = j.end_time.ok_or(format!("short fill: job {id} never ended"))?;
        ensure(j.state == JobState::Completed, || format!("short fill: job {id} is {:?}", j.state))?;
        ensure(j.suspended_total == fill, || format!("short fill: job {id} suspended {}", j.suspended_total))?;
        ensure(j.hibernation_timeouts == 0, || format!("short fill: job {id} timed out"))?;
        let wall = end - j.submit_time;
        let want = (start - j.submit_time) + j.work_seconds + fill;
        ensure(wall == want, || format!("short fill: job {id} wall {wall} != {want}"))?;
    }

    let (jobs, _) = hibernation_case(110000.0, 200000.0);
    for j in &jobs {
        let id = j.id.0;
        ensure(j.hibernation_timeouts == 1, || format!("long fill: job {id} timeouts {}", j.hibernation_timeouts))?;
        ensure(j.state == JobState::Completed, || format!("long fill: job {id} is {:?}", j.state))?;
        let restart = j.last_start.ok_or(format!("long fill: job {id} has no restart"))?;
        ensure(restart >= 110000.0, || format!("long fill: job {id} restarted at {restart}"))?;
        let end = j.end_time.unwrap_or(f64::NAN);
        ensure(end - restart == j.work_seconds, || format!("long fill: job {id} ran {} after restart", end - restart))?;
    }
    Ok(format!("{fill} s fill resumes exactly; 90000 s fill requeues all from zero"))
}

fn starvation_toml(model: &str, defrag: bool) -> String {
    format!(
        r#"
seed = 24
duration_s = 604800
provisioning_model = "{model}"

[[machines]]
count = 100
prefix = "hlt-"
cores = 16
memory_mb = 32000
site = "T2_CH_CERN_P5"

[defrag]
enabled = {defrag}

[[workload]]
class = "Production"
cores = 1
memory_mb = 2000
desired_sites = "T2_CH_CERN_P5"
arrivals = {{ kind = "poisson", mean_interarrival_s = 15.0 }}
work = {{ kind = "exponential", mean_s = 43200.0 }}

[[workload]]
class = "Tier0"
cores = 8
memory_mb = 16000
desired_sites = "T2_CH_CERN_P5"
arrivals = {{ kind = "explicit", times = [86400.0] }}
work = {{ kind = "fixed", seconds = 28800.0 }}
"#
    )
}

fn tier0(out: &RunOutput) -> Result<&JobRecord, String> {
    let mut t0 = out.jobs.iter().filter(|j| j.class == JobClass::Tier0);
    match (t0.next(), t0.next()) {
        (Some(j), None) => Ok(j),
        _ => Err("expected exactly one Tier0 job".into()),
    }
}

fn a3() -> Outcome {
    let (off, on) = thread::scope(|s| {
        let off = s.spawn(|| run(scenario(&starvation_toml("StaticStartd", false))));
        let on = s.spawn(|| run(scenario(&starvation_toml("StaticStartd", true))));
        (off.join().unwrap(), on.join().unwrap())
    });
    let j = tier0(&off)?;
    ensure(j.state == JobState::Idle && j.start_time.is_none(), || {
        format!("defrag off: Tier0 job is {:?}", j.state)
    })?;
    let j = tier0(&on)?;
    let started = j.start_time.ok_or("defrag on: Tier0 job never started")?;
    ensure(started < 604800.0, || format!("defrag on: started at {started}"))?;
    Ok(format!("defrag off: Tier0 Idle at horizon; defrag on: Tier0 started {} s after submission", started - j.submit_time))
}

fn gap_toml(model: &str) -> String {
    format!(
        r#"
seed = 20
duration_s = 259200
provisioning_model = "{model}"
unhealthy_fraction = 0.2

[[machines]]
count = 100
prefix = "hlt-"
cores = 16
memory_mb = 32000
site = "T2_CH_CERN_P5"

[[workload]]
class = "Production"
cores = 1
memory_mb = 2000
desired_sites = "T2_CH_CERN_P5"
arrivals = {{ kind = "burst", at_s = 0.0, count = 2000 }}
work = {{ kind = "exponential", mean_s = 7200.0 }}
"#
    )
}

fn a4() -> Outcome {
    let static_run = || -> Result<(u64, u64, u64), String> {
        let mut sim = Simulation::new(scenario(&gap_toml("StaticStartd"))).map_err(|e| e.to_string())?;
        sim.run_until(259200.0).map_err(|e| e.to_string())?;
        let unhealthy: std::collections::BTreeSet<_> =
            sim.cluster().machines.iter().filter(|m| !m.cvmfs_healthy).map(|m| m.id.clone()).collect();
        let out = sim.finish();
        let started = out.jobs.iter().filter(|j| j.start_time.is_some()).count() as u64;
        let on_unhealthy = out
            .jobs
            .iter()
            .filter(|j| j.last_machine.as_ref().is_some_and(|m| unhealthy.contains(m)))
            .count() as u64;
        Ok((out.summary.failures_of(FailureReason::ValidationGap), started, on_unhealthy))
    };
    let (stat, vac) = thread::scope(|s| {
        let a = s.spawn(static_run);
        let b = s.spawn(|| run(scenario(&gap_toml("VacuumGlidein"))));
        (a.join().unwrap(), b.join().unwrap())
    });
    let (f, n, routed) = stat?;
    ensure(n == 2000, || format!("static: only {n} of 2000 jobs started"))?;
    ensure(f >= 1, || "static: no ValidationGap failures".into())?;
    ensure(f == routed, || format!("static: {f} failures but {routed} jobs routed to unhealthy machines"))?;
    let (mean, sigma) = (0.2 * n as f64, (n as f64 * 0.2 * 0.8).sqrt());
    ensure((f as f64 - mean).abs() <= 3.0 * sigma, || {
        format!("static: {f} failures outside {mean} ± {:.1}", 3.0 * sigma)
    })?;
    let vf = vac.summary.failures_of(FailureReason::ValidationGap);
    ensure(vf == 0, || format!("vacuum: {vf} ValidationGap failures"))?;
    Ok(format!("static {f}/{n} failed (expected {mean} ± {:.1}); vacuum 0", 3.0 * sigma))
}

fn a5() -> Outcome {
    let s = scenario(&starvation_toml("VacuumGlidein", false));
    let bound = s.glidein.max_walltime_s + s.glidein.retire_grace_s + s.negotiator.cycle_interval_s;
    let out = run(s);
    let j = tier0(&out)?;
    let started = j.start_time.ok_or("Tier0 job never started")?;
    let waited = started - j.submit_time;
    ensure(waited <= bound, || format!("Tier0 waited {waited} s > {bound} s"))?;
    Ok(format!("Tier0 waited {waited} s <= {bound} s"))
}

fn staleness_toml(model: &str) -> String {
    format!(
        r#"
seed = 6
duration_s = 345600
provisioning_model = "{model}"

[[machines]]
count = 100
prefix = "p5-"
cores = 16
memory_mb = 32000
site = "T2_CH_CERN_P5"

[[workload]]
class = "Production"
cores = 1
memory_mb = 2000
desired_sites = "T2_CH_CERN_P5"
arrivals = {{ kind = "poisson", mean_interarrival_s = 20.0 }}
work = {{ kind = "exponential", mean_s = 21600.0 }}

[[actions]]
kind = "FrontendReconfigure"
at_s = 86400.0
"#
    )
}

fn a6() -> Outcome {
    let vac = || -> Result<(usize, u32), String> {
        let s = scenario(&staleness_toml("VacuumGlidein"));
        let by = 86400.0 + s.glidein.max_walltime_s + s.glidein.retire_grace_s;
        let mut sim = Simulation::new(s).map_err(|e| e.to_string())?;
        sim.run_until(by).map_err(|e| e.to_string())?;
        let p = &sim.cluster().provisioner;
        let want = p.frontend.wrapper_version;
        let live: Vec<_> = p.live_pilots().collect();
        ensure(want == 2, || format!("vacuum: frontend at version {want}"))?;
        ensure(!live.is_empty(), || "vacuum: no live pilots".into())?;
        let stale = live.iter().filter(|p| p.wrapper_version != want).count();
        ensure(stale == 0, || format!("vacuum: {stale}/{} live pilots stale at t={by}", live.len()))?;
        Ok((live.len(), want))
    };
    let stat = || -> Result<usize, String> {
        let mut sim = Simulation::new(scenario(&staleness_toml("StaticStartd"))).map_err(|e| e.to_string())?;
        sim.run_until(345600.0).map_err(|e| e.to_string())?;
        let p = &sim.cluster().provisioner;
        ensure(p.frontend.wrapper_version == 2, || "static: frontend never reconfigured".into())?;
        let live: Vec<_> = p.live_pilots().collect();
        ensure(!live.is_empty(), || "static: no live pilots".into())?;
        let fresh = live.iter().filter(|p| p.wrapper_version != 1).count();
        ensure(fresh == 0, || format!("static: {fresh} live pilots left version 1"))?;
        Ok(live.len())
    };
    let (v, s) = thread::scope(|sc| {
        let v = sc.spawn(vac);
        let s = sc.spawn(stat);
        (v.join().unwrap(), s.join().unwrap())
    });
    let ((nv, ver), ns) = (v?, s?);
    Ok(format!("{nv} vacuum pilots at v{ver}; {ns} static pilots still at v1"))
}

fn a7() -> Outcome {
    let results: Vec<Result<String, String>> = thread::scope(|s| {
        let handles: Vec<_> = scenario::PRESETS
            .iter()
            .map(|(name, _)| {
                s.spawn(move || -> Result<String, String> {
                    let csv = |out: &RunOutput| {
                        let mut buf = Vec::new();
                        telemetry::write_csv(&out.metrics.samples, &mut buf).map(|_| buf)
                    };
                    let a = run(scenario::preset(name).map_err(|e| e.to_string())?);
                    let b = run(scenario::preset(name).map_err(|e| e.to_string())?);
                    let (ca, cb) = (csv(&a).map_err(|e| e.to_string())?, csv(&b).map_err(|e| e.to_string())?);
                    ensure(ca == cb, || format!("{name}: CSV differs between runs"))?;
                    let rows = a.metrics.samples.len();
                    ensure(rows >= 2000, || format!("{name}: only {rows} samples"))?;
                    let total = a.metrics.total_cores;
                    if let Some(bad) = a.metrics.samples.iter().find(|x| x.accounted() != total) {
                        return Err(format!("{name}: {} cores accounted of {total} at t={}", bad.accounted(), bad.time));
                    }
                    Ok(format!("{name} {rows}"))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let ok = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(format!("byte-identical and conserved: {}", ok.join(", ")))
}

fn isolation_toml(global_cycle: f64) -> String {
    format!(
        r#"
seed = 8
duration_s = 604800
provisioning_model = "VacuumGlidein"

[[machines]]
count = 50
prefix = "p5-"
cores = 16
memory_mb = 32000
site = "T2_CH_CERN_P5"

[[machines]]
count = 50
prefix = "fnal-"
cores = 16
memory_mb = 32000
site = "T1_US_FNAL_Disk"

[pool_overrides.GlobalPool]
cycle_interval_s = {global_cycle:.1}
class_priority_order = ["Tier0", "Production", "Analysis"]
pack_policy = "BestFit"
max_hibernation_s = 86400.0

[[workload]]
class = "Tier0"
pool = "CERNPool"
schedd = "t0schedd"
cores = 8
memory_mb = 16000
desired_sites = "T2_CH_CERN_P5"
arrivals = {{ kind = "poisson", mean_interarrival_s = 1800.0 }}
work = {{ kind = "exponential", mean_s = 14400.0 }}

[[workload]]
class = "Production"
cores = 1
memory_mb = 2000
desired_sites = "T1_US_FNAL_Disk"
arrivals = {{ kind = "poisson", mean_interarrival_s = 20.0 }}
work = {{ kind = "exponential", mean_s = 21600.0 }}

[[actions]]
kind = "MigrateSite"
at_s = 0.0
from = "GlobalPool"
to = "CERNPool"
site = "T2_CH_CERN_P5"
"#
    )
}

fn a8() -> Outcome {
    let (base, stalled) = thread::scope(|s| {
        let a = s.spawn(|| run(scenario(&isolation_toml(60.0))));
        let b = s.spawn(|| run(scenario(&isolation_toml(6000.0))));
        (a.join().unwrap(), b.join().unwrap())
    });
    let series = |out: &RunOutput, pool, class| -> Vec<(u64, f64)> {
        out.jobs
            .iter()
            .filter(|j| j.pool == pool && j.class == class)
            .filter_map(|j| j.start_time.map(|t| (j.id.0, t - j.submit_time)))
            .collect()
    };
    use vacsim::pool::PoolId::{CERNPool, GlobalPool};
    let (a, b) = (series(&base, CERNPool, JobClass::Tier0), series(&stalled, CERNPool, JobClass::Tier0));
    ensure(!a.is_empty(), || "no CERNPool Tier0 job started".into())?;
    ensure(a == b, || format!("CERNPool Tier0 latency series differ ({} vs {} starts)", a.len(), b.len()))?;
    let p95 = |s: &[(u64, f64)]| {
        let mut v: Vec<f64> = s.iter().map(|x| x.1).collect();
        v.sort_by(f64::total_cmp);
        quantile(&v, 0.95)
    };
    ensure(p95(&a) == p95(&b), || "p95 differs".into())?;
    // The stall must actually bite, or the comparison proves nothing.
    let (ga, gb) = (
        series(&base, GlobalPool, JobClass::Production),
        series(&stalled, GlobalPool, JobClass::Production),
    );
    ensure(ga != gb, || "GlobalPool stall changed nothing".into())?;
    Ok(format!("{} Tier0 starts identical, p95 {:?} s", a.len(), p95(&a)))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
    ];
    let results: Vec<_> = thread::scope(|s| {
        let handles: Vec<_> = criteria.iter().map(|(n, f)| (*n, s.spawn(f))).collect();
        handles
            .into_iter()
            .map(|(n, h)| {
                let r = h.join().unwrap_or_else(|p| {
                    let msg = p
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_default();
                    Err(format!("panicked: {msg}"))
                });
                (n, r)
            })
            .collect()
    });
    let mut failed = 0;
    for (name, r) in results {
        match r {
            Ok(detail) => println!("{name} PASS {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{name} FAIL {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
