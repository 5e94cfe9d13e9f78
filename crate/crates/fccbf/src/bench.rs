//! Batch execution and artifacts. A scenario expands into run plans, the
//! runs execute (in parallel when allowed), and everything lands on disk as
//! one CSV per run plus a `summary.json` that echoes the scenario, the
//! design record, and per-run outcome fields sufficient to recompute each
//! verdict. Exports are byte-reproducible: numbers are printed with a fixed
//! 12-significant-digit rule and run order is the plan order regardless of
//! thread count.
//!
//! `verify_outputs` closes the loop: it re-reads an output directory and
//! re-derives every checkable fact — geometry values from logged states,
//! envelope bounds, event times, verdicts — reporting every mismatch.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{GoalKind, RunPlan, Scenario};
use crate::sim::{self, EventKind, TrajectoryLog};
use crate::qp::QpStatus;

/// Safety floor for logged barrier values in a passing run.
pub const BARRIER_TOL: f64 = 1e-6;
/// Permitted excess of a logged control over its bounds.
pub const BOUND_TOL: f64 = 1e-9;
/// Relative headroom allowed above the exponential envelope.
pub const ENVELOPE_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "pass")]
    Pass,
    #[serde(rename = "fail")]
    Fail,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(if *self == Verdict::Pass { "pass" } else { "fail" })
    }
}

/// Outcome fields of one run, sufficient to recompute its verdict.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    pub init_index: usize,
    pub controller: GoalKind,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    pub goal_reached_time: Option<f64>,
    pub safety_violated_time: Option<f64>,
    pub h_at_tf: Option<f64>,
    pub min_b: Option<f64>,
    pub control_bound_max_violation: Option<f64>,
    pub qp_relaxed_count: Option<usize>,
    pub qp_infeasible_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DesignRecord {
    pub interval: Option<crate::design::KInterval>,
    pub report: Option<crate::design::FeasibilityReport>,
    pub reference_init: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: Scenario,
    pub design: DesignRecord,
    pub runs: Vec<RunRecord>,
    pub verdict: Verdict,
}

pub struct BatchResult {
    /// One entry per plan, in plan order; `None` when that run errored.
    pub logs: Vec<Option<TrajectoryLog>>,
    pub summary: Summary,
}

/// What a run must achieve to pass. The exponential controller is judged on
/// its claims — the deadline is met and safety holds; the fractional-power
/// controller is judged only on respecting the bounds, since running out of
/// actuation (and then violating safety) is its documented failure mode and
/// the very thing the comparison exhibits.
fn run_verdict(rec: &RunRecord) -> Verdict {
    if rec.error.is_some() {
        return Verdict::Fail;
    }
    let bounds_ok = rec.control_bound_max_violation.is_some_and(|v| v <= BOUND_TOL);
    if !bounds_ok {
        return Verdict::Fail;
    }
    match rec.controller {
        GoalKind::Fccbf => {
            let converged = rec.h_at_tf.is_some_and(|h| h >= 0.0);
            let safe = rec.min_b.map_or(true, |b| b >= -BARRIER_TOL);
            if converged && safe {
                Verdict::Pass
            } else {
                Verdict::Fail
            }
        }
        GoalKind::Clbf => Verdict::Pass,
    }
}

/// Parse a thread cap from the `FCCBF_THREADS` value.
fn parse_thread_cap(raw: Option<&str>) -> Result<Option<usize>> {
    match raw {
        None => Ok(None),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "FCCBF_THREADS must be a positive integer, got \"{s}\""
            ))),
        },
    }
}

/// Execute every plan of a scenario. Runs are independent and execute on a
/// rayon pool capped by `FCCBF_THREADS`; results are collected in plan
/// order, so the artifacts do not depend on the thread count. A failing run
/// is recorded (with its verdict set to fail) and the batch continues.
pub fn run_batch(scenario: &Scenario) -> Result<BatchResult> {
    let resolved = scenario.resolve()?;
    let cap = parse_thread_cap(std::env::var("FCCBF_THREADS").ok().as_deref())?;

    let execute = || -> Vec<std::result::Result<TrajectoryLog, Error>> {
        resolved
            .plans
            .par_iter()
            .map(|plan| sim::run(&plan.ctrl, &resolved.sys, &resolved.bounds, &plan.x0, &resolved.sim))
            .collect()
    };
    let outcomes = match cap {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot build a {n}-thread pool: {e}")))?
            .install(execute),
        None => execute(),
    };

    let tf_index = index_at(scenario.t_f, resolved.sim.dt, resolved.sim.steps());
    let mut logs = Vec::with_capacity(outcomes.len());
    let mut runs = Vec::with_capacity(outcomes.len());
    for (plan, outcome) in resolved.plans.iter().zip(outcomes) {
        let mut rec = base_record(plan);
        match outcome {
            Ok(log) => {
                rec.goal_reached_time = log.event(EventKind::GoalReached).map(|e| e.time);
                rec.safety_violated_time = log.event(EventKind::SafetyViolated).map(|e| e.time);
                rec.h_at_tf = log.h.as_ref().map(|h| h[tf_index]);
                rec.min_b = (!log.barriers.is_empty()).then(|| log.min_barrier());
                rec.control_bound_max_violation = Some(log.bound_violation(&resolved.bounds));
                rec.qp_relaxed_count = Some(log.qp_relaxed_count());
                rec.qp_infeasible_count = Some(log.qp_infeasible_count());
                rec.verdict = run_verdict(&rec);
                logs.push(Some(log));
            }
            Err(e) => {
                rec.error = Some(e.to_string());
                rec.verdict = Verdict::Fail;
                logs.push(None);
            }
        }
        runs.push(rec);
    }

    let verdict = if runs.iter().all(|r| r.verdict == Verdict::Pass) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    let summary = Summary {
        scenario: scenario.clone(),
        design: DesignRecord {
            interval: resolved.design_interval,
            report: resolved.design_report,
            reference_init: resolved.reference_init.map(|x| x.iter().copied().collect()),
        },
        runs,
        verdict,
    };
    Ok(BatchResult { logs, summary })
}

fn base_record(plan: &RunPlan) -> RunRecord {
    RunRecord {
        index: plan.index,
        init_index: plan.init_index,
        controller: plan.controller,
        x0: plan.x0.iter().copied().collect(),
        r: plan.r,
        k: plan.k,
        p: plan.p,
        goal_reached_time: None,
        safety_violated_time: None,
        h_at_tf: None,
        min_b: None,
        control_bound_max_violation: None,
        qp_relaxed_count: None,
        qp_infeasible_count: None,
        error: None,
        verdict: Verdict::Fail,
    }
}

/// Grid index of time `t`, clamped to the log.
fn index_at(t: f64, dt: f64, steps: usize) -> usize {
    ((t / dt).round() as usize).min(steps)
}

// ─── number formatting ───────────────────────────────────────────────────

/// Print with 12 significant digits, trailing zeros stripped, switching to
/// scientific notation for very small or very large magnitudes — the classic
/// `%.12g`. Keeps files compact and hides float dust (0.060000000000000005
/// prints as 0.06) while staying well above f64 round-trip noise for the
/// magnitudes logged here.
pub fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    let sci = format!("{:.11e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("numeric exponent");
    if exp < -4 || exp >= 12 {
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{}e{}{:02}", mantissa, if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (11 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    }
}

// ─── export ──────────────────────────────────────────────────────────────

fn run_csv_name(index: usize) -> String {
    format!("run_{index}.csv")
}

fn csv_header(n: usize, q: usize, barrier_names: &[String]) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("x{i}")));
    cols.extend((1..=q).map(|i| format!("u{i}")));
    cols.push("h".into());
    cols.push("V".into());
    cols.extend(barrier_names.iter().cloned());
    cols.push("qp_status".into());
    cols.push("slack_total".into());
    cols.join(",")
}

/// One CSV row per logged time. Interval quantities (control, QP status,
/// slack) are per-interval; the final row repeats the last interval's values
/// under the zero-order hold.
fn write_run_csv(log: &TrajectoryLog, path: &Path) -> Result<()> {
    let n = log.states[0].len();
    let q = log.controls.first().map_or(0, |u| u.len());
    let h = log
        .h
        .as_ref()
        .ok_or_else(|| Error::Config("cannot export a run without a goal constraint".into()))?;
    let v = log.v_env.as_ref().expect("V series accompanies h");
    let names: Vec<String> = log.barriers.iter().map(|(name, _)| name.clone()).collect();

    let mut out = String::new();
    out.push_str(&csv_header(n, q, &names));
    out.push('\n');
    let last_interval = log.controls.len().saturating_sub(1);
    for w in 0..log.times.len() {
        let iv = w.min(last_interval);
        let mut cols: Vec<String> = Vec::with_capacity(n + q + names.len() + 4);
        cols.push(fmt_g(log.times[w]));
        cols.extend(log.states[w].iter().map(|x| fmt_g(*x)));
        cols.extend(log.controls[iv].iter().map(|u| fmt_g(*u)));
        cols.push(fmt_g(h[w]));
        cols.push(fmt_g(v[w]));
        for (_, series) in &log.barriers {
            cols.push(fmt_g(series[w]));
        }
        cols.push(log.qp_statuses[iv].to_string());
        cols.push(fmt_g(log.slack_totals[iv]));
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::Config(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

/// Write every artifact of a batch into `out_dir`: `run_<idx>.csv`,
/// `summary.json`, and the plot-data companions.
pub fn export(result: &BatchResult, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Config(format!("creating {}: {e}", out_dir.display())))?;

    for (rec, log) in result.summary.runs.iter().zip(&result.logs) {
        if let Some(log) = log {
            write_run_csv(log, &out_dir.join(run_csv_name(rec.index)))?;
        }
    }

    let json = serde_json::to_string_pretty(&result.summary)
        .map_err(|e| Error::Config(format!("encoding summary: {e}")))?;
    fs::write(out_dir.join("summary.json"), json + "\n")
        .map_err(|e| Error::Config(format!("writing summary.json: {e}")))?;

    write_plotdata(result, out_dir)
}

fn write_plotdata(result: &BatchResult, out_dir: &Path) -> Result<()> {
    let scenario = &result.summary.scenario;
    let n = scenario.system.build().state_dim;

    let mut traj = String::from("run,t");
    for i in 1..=n {
        traj.push_str(&format!(",x{i}"));
    }
    traj.push('\n');
    let mut prof = String::from("run,t,h,V,min_b,slack_total\n");
    for (rec, log) in result.summary.runs.iter().zip(&result.logs) {
        let Some(log) = log else { continue };
        let last_interval = log.controls.len().saturating_sub(1);
        for w in 0..log.times.len() {
            traj.push_str(&rec.index.to_string());
            traj.push(',');
            traj.push_str(&fmt_g(log.times[w]));
            for x in log.states[w].iter() {
                traj.push(',');
                traj.push_str(&fmt_g(*x));
            }
            traj.push('\n');

            let min_b = log
                .barriers
                .iter()
                .map(|(_, series)| series[w])
                .fold(f64::INFINITY, f64::min);
            prof.push_str(&format!(
                "{},{},{},{},{},{}\n",
                rec.index,
                fmt_g(log.times[w]),
                log.h.as_ref().map_or_else(String::new, |h| fmt_g(h[w])),
                log.v_env.as_ref().map_or_else(String::new, |v| fmt_g(v[w])),
                if min_b.is_finite() { fmt_g(min_b) } else { String::new() },
                fmt_g(log.slack_totals[w.min(last_interval)]),
            ));
        }
    }

    let mut geom = String::from("kind,name,cx,cy,radius\n");
    geom.push_str(&format!(
        "goal,goal,{},{},{}\n",
        fmt_g(scenario.goal.center[0]),
        fmt_g(scenario.goal.center[1]),
        fmt_g(scenario.goal.radius)
    ));
    for (i, obs) in scenario.obstacles.iter().enumerate() {
        geom.push_str(&format!(
            "obstacle,b_{},{},{},{}\n",
            i + 1,
            fmt_g(obs.center[0]),
            fmt_g(obs.center[1]),
            fmt_g(obs.radius)
        ));
    }

    for (name, body) in [
        ("plotdata_trajectories.csv", traj),
        ("plotdata_profiles.csv", prof),
        ("plotdata_geometry.csv", geom),
    ] {
        fs::write(out_dir.join(name), body)
            .map_err(|e| Error::Config(format!("writing {name}: {e}")))?;
    }
    Ok(())
}

// ─── verification ────────────────────────────────────────────────────────

struct ParsedCsv {
    header: String,
    rows: Vec<Vec<String>>,
}

fn read_csv(path: &Path) -> Result<ParsedCsv> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Verification(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Verification(format!("{} is empty", path.display())))?
        .to_string();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok(ParsedCsv { header, rows })
}

fn parse_field(row: &[String], col: usize) -> Result<f64> {
    row[col]
        .parse::<f64>()
        .map_err(|_| Error::Verification(format!("unparseable number \"{}\"", row[col])))
}

/// Re-derive every checkable fact from an exported output directory and
/// collect mismatches. The directory must contain `summary.json`; each
/// non-errored run must have a CSV consistent with the scenario echo:
/// correct shape and time grid, bounds-respecting controls, geometry values
/// matching the logged states, envelope compliance for exponential runs,
/// and summary fields that re-derive from the raw data.
pub fn verify_outputs(out_dir: &Path) -> Result<usize> {
    let summary_path = out_dir.join("summary.json");
    let text = fs::read_to_string(&summary_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", summary_path.display())))?;
    let summary: Summary = serde_json::from_str(&text)
        .map_err(|e| Error::Verification(format!("summary.json does not parse: {e}")))?;

    let mut issues: Vec<String> = Vec::new();
    let scenario = &summary.scenario;
    if let Err(e) = scenario.validate() {
        return Err(Error::Verification(format!("scenario echo is invalid: {e}")));
    }
    let sys = scenario.system.build();
    let bounds = scenario.control_bounds();
    let goal = scenario.goal_constraint();
    let obstacles: Vec<_> = scenario
        .obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| {
            crate::model::circle_obstacle(format!("b_{}", i + 1), [o.center[0], o.center[1]], o.radius)
        })
        .collect();
    let cfg = scenario.sim_config();
    let steps = cfg.steps();
    let n = sys.state_dim;
    let q = sys.control_dim;
    let barrier_names: Vec<String> = obstacles.iter().map(|o| o.name.clone()).collect();
    let expected_header = csv_header(n, q, &barrier_names);

    // Column layout.
    let col_x = 1;
    let col_u = col_x + n;
    let col_h = col_u + q;
    let col_v = col_h + 1;
    let col_b = col_v + 1;
    let col_status = col_b + obstacles.len();
    let col_slack = col_status + 1;
    let ncols = col_slack + 1;

    let mut checked = 0usize;
    for rec in &summary.runs {
        let label = format!("run {}", rec.index);
        if run_verdict(rec) != rec.verdict {
            issues.push(format!("{label}: stored verdict {} does not re-derive", rec.verdict));
        }
        if rec.error.is_some() {
            continue;
        }
        checked += 1;
        let path = out_dir.join(run_csv_name(rec.index));
        let csv = match read_csv(&path) {
            Ok(c) => c,
            Err(e) => {
                issues.push(format!("{label}: {e}"));
                continue;
            }
        };
        if csv.header != expected_header {
            issues.push(format!(
                "{label}: header mismatch\n  expected {expected_header}\n  found    {}",
                csv.header
            ));
            continue;
        }
        if csv.rows.len() != steps + 1 {
            issues.push(format!("{label}: {} rows, expected {}", csv.rows.len(), steps + 1));
            continue;
        }
        if let Some(bad) = csv.rows.iter().position(|r| r.len() != ncols) {
            issues.push(format!("{label}: row {bad} has {} fields, expected {ncols}", csv.rows[bad].len()));
            continue;
        }

        let mut h_series = Vec::with_capacity(steps + 1);
        let mut v0 = 0.0;
        let mut min_b = f64::INFINITY;
        let mut max_bound_violation: f64 = 0.0;
        let mut relaxed = 0usize;
        let mut infeasible = 0usize;
        let mut barrier_series: Vec<Vec<f64>> = vec![Vec::with_capacity(steps + 1); obstacles.len()];
        let mut row_issue = false;

        for (w, row) in csv.rows.iter().enumerate() {
            let mut parse_all = || -> Result<()> {
                let t = parse_field(row, 0)?;
                if (t - w as f64 * cfg.dt).abs() > 1e-9 {
                    return Err(Error::Verification(format!(
                        "row {w}: t = {t}, expected {}",
                        w as f64 * cfg.dt
                    )));
                }
                let x = nalgebra::DVector::from_fn(n, |i, _| {
                    row[col_x + i].parse::<f64>().unwrap_or(f64::NAN)
                });
                if x.iter().any(|v| v.is_nan()) {
                    return Err(Error::Verification(format!("row {w}: unparseable state")));
                }
                let u = nalgebra::DVector::from_fn(q, |i, _| {
                    row[col_u + i].parse::<f64>().unwrap_or(f64::NAN)
                });
                if u.iter().any(|v| v.is_nan()) {
                    return Err(Error::Verification(format!("row {w}: unparseable control")));
                }
                max_bound_violation = max_bound_violation.max(bounds.violation(&u));

                let h_col = parse_field(row, col_h)?;
                let h_re = goal.value(&x);
                if (h_col - h_re).abs() > 1e-8 * (1.0 + h_re.abs()) {
                    return Err(Error::Verification(format!(
                        "row {w}: h = {h_col} but the state gives {h_re}"
                    )));
                }
                h_series.push(h_col);

                let v_col = parse_field(row, col_v)?;
                let v_expected = match rec.controller {
                    GoalKind::Fccbf => {
                        let r = rec.r.ok_or_else(|| {
                            Error::Verification("record lacks r for an fccbf run".into())
                        })?;
                        r - h_col
                    }
                    GoalKind::Clbf => -h_col,
                };
                if (v_col - v_expected).abs() > 1e-8 * (1.0 + v_expected.abs()) {
                    return Err(Error::Verification(format!(
                        "row {w}: V = {v_col}, expected {v_expected}"
                    )));
                }
                if w == 0 {
                    v0 = v_col;
                }
                if rec.controller == GoalKind::Fccbf {
                    let k = rec
                        .k
                        .ok_or_else(|| Error::Verification("record lacks k for an fccbf run".into()))?;
                    let cap = v0 * (-k * t).exp() * (1.0 + ENVELOPE_TOL) + 1e-9;
                    if v_col > cap {
                        return Err(Error::Verification(format!(
                            "row {w}: V = {v_col} breaks the envelope cap {cap}"
                        )));
                    }
                }

                for (i, obs) in obstacles.iter().enumerate() {
                    let b_col = parse_field(row, col_b + i)?;
                    let b_re = obs.value(&x);
                    if (b_col - b_re).abs() > 1e-8 * (1.0 + b_re.abs()) {
                        return Err(Error::Verification(format!(
                            "row {w}: {} = {b_col} but the state gives {b_re}",
                            obs.name
                        )));
                    }
                    min_b = min_b.min(b_col);
                    barrier_series[i].push(b_col);
                }

                let status = QpStatus::parse(&row[col_status]).ok_or_else(|| {
                    Error::Verification(format!("row {w}: unknown qp_status \"{}\"", row[col_status]))
                })?;
                let slack = parse_field(row, col_slack)?;
                if slack < 0.0 {
                    return Err(Error::Verification(format!("row {w}: negative slack {slack}")));
                }
                if status == QpStatus::Optimal && slack != 0.0 {
                    return Err(Error::Verification(format!(
                        "row {w}: optimal status with slack {slack}"
                    )));
                }
                // The final row repeats the last interval; count intervals only.
                if w < steps {
                    match status {
                        QpStatus::Relaxed => relaxed += 1,
                        QpStatus::InfeasibleHard => infeasible += 1,
                        QpStatus::Optimal => {}
                    }
                }
                Ok(())
            };
            if let Err(e) = parse_all() {
                issues.push(format!("{label}: {e}"));
                row_issue = true;
                break;
            }
        }
        if row_issue {
            continue;
        }

        // Summary fields re-derived from the raw columns.
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        let tf_index = index_at(scenario.t_f, cfg.dt, steps);
        match rec.h_at_tf {
            Some(h) if close(h, h_series[tf_index]) => {}
            other => issues.push(format!(
                "{label}: h_at_tf {:?} vs recomputed {}",
                other, h_series[tf_index]
            )),
        }
        if !obstacles.is_empty() {
            match rec.min_b {
                Some(b) if close(b, min_b) => {}
                other => issues.push(format!("{label}: min_b {other:?} vs recomputed {min_b}")),
            }
        }
        match rec.control_bound_max_violation {
            Some(v) if (v - max_bound_violation).abs() <= 1e-9 => {}
            other => issues.push(format!(
                "{label}: control_bound_max_violation {other:?} vs recomputed {max_bound_violation}"
            )),
        }
        if rec.qp_relaxed_count != Some(relaxed) {
            issues.push(format!(
                "{label}: qp_relaxed_count {:?} vs recomputed {relaxed}",
                rec.qp_relaxed_count
            ));
        }
        if rec.qp_infeasible_count != Some(infeasible) {
            issues.push(format!(
                "{label}: qp_infeasible_count {:?} vs recomputed {infeasible}",
                rec.qp_infeasible_count
            ));
        }

        let times: Vec<f64> = (0..=steps).map(|w| w as f64 * cfg.dt).collect();
        let event_close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, None) => true,
            (Some(a), Some(b)) => (a - b).abs() <= cfg.event_tol + 1e-9,
            _ => false,
        };
        let goal_time = first_upward(&times, &h_series, 0.0, cfg.event_tol);
        if !event_close(rec.goal_reached_time, goal_time) {
            issues.push(format!(
                "{label}: goal_reached_time {:?} vs recomputed {goal_time:?}",
                rec.goal_reached_time
            ));
        }
        let viol_time = barrier_series
            .iter()
            .filter_map(|series| first_downward(&times, series, -cfg.constraint_tol, cfg.event_tol))
            .fold(None::<f64>, |acc, t| Some(acc.map_or(t, |a| a.min(t))));
        if !event_close(rec.safety_violated_time, viol_time) {
            issues.push(format!(
                "{label}: safety_violated_time {:?} vs recomputed {viol_time:?}",
                rec.safety_violated_time
            ));
        }
    }

    let overall = if summary.runs.iter().all(|r| r.verdict == Verdict::Pass) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    if overall != summary.verdict {
        issues.push(format!(
            "overall verdict {} does not re-derive from the runs",
            summary.verdict
        ));
    }

    if issues.is_empty() {
        Ok(checked)
    } else {
        Err(Error::Verification(issues.join("\n")))
    }
}

fn first_upward(times: &[f64], series: &[f64], threshold: f64, tol: f64) -> Option<f64> {
    first_event(times, series, tol, |v| v >= threshold, threshold)
}

fn first_downward(times: &[f64], series: &[f64], threshold: f64, tol: f64) -> Option<f64> {
    first_event(times, series, tol, |v| v < threshold, threshold)
}

fn first_event(
    times: &[f64],
    series: &[f64],
    tol: f64,
    hit: impl Fn(f64) -> bool,
    threshold: f64,
) -> Option<f64> {
    if hit(series[0]) {
        return Some(times[0]);
    }
    for i in 1..series.len() {
        if hit(series[i]) {
            let (a, b) = (series[i - 1], series[i]);
            let frac =
                if (b - a).abs() < f64::MIN_POSITIVE { 1.0 } else { (threshold - a) / (b - a) };
            let t = times[i - 1] + frac.clamp(0.0, 1.0) * (times[i] - times[i - 1]);
            return Some((t / tol).round() * tol);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;

    #[test]
    fn fmt_g_matches_the_reference_rule() {
        let cases = [
            (0.0, "0"),
            (-0.0, "0"),
            (1.0, "1"),
            (-2.0, "-2"),
            (0.01, "0.01"),
            (0.060000000000000005, "0.06"),
            (1234.5, "1234.5"),
            (1.0 / 3.0, "0.333333333333"),
            (-18.0, "-18"),
            (1e-5, "1e-05"),
            (2.5e-13, "2.5e-13"),
            (123456789012.0, "123456789012"),
            (1234567890123.0, "1.23456789012e+12"),
            (1e100, "1e+100"),
            (0.0001, "0.0001"),
            (9.999999999996e-5, "0.0001"),
            (3.0000000001e-5, "3.0000000001e-05"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g(x), want, "formatting {x:e}");
        }
    }

    #[test]
    fn fmt_g_round_trips_through_parse() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let x: f64 = rng.random_range(-50.0..50.0);
            let back: f64 = fmt_g(x).parse().unwrap();
            assert!((back - x).abs() <= 1e-11 * (1.0 + x.abs()), "{x} vs {back}");
        }
    }

    #[test]
    fn thread_cap_parsing() {
        assert_eq!(parse_thread_cap(None).unwrap(), None);
        assert_eq!(parse_thread_cap(Some("4")).unwrap(), Some(4));
        assert_eq!(parse_thread_cap(Some(" 2 ")).unwrap(), Some(2));
        assert!(parse_thread_cap(Some("0")).is_err());
        assert!(parse_thread_cap(Some("-3")).is_err());
        assert!(parse_thread_cap(Some("many")).is_err());
    }

    fn small_scenario() -> Scenario {
        Scenario::from_toml_str(
            r#"
            schema_version = 1
            name = "roundtrip"
            system = "single-integrator-2d"
            t_f = 6.0
            horizon = 6.0

            [goal]
            center = [0.0, 0.0]
            radius = 1.0

            [[obstacles]]
            center = [2.0, 2.5]
            radius = 1.0

            [bounds]
            lower = [-2.0, -2.0]
            upper = [2.0, 2.0]

            [controller]
            kind = "fccbf"
            r = 1.0
            k = 0.9
            design_check = "initial-state"

            [init]
            kind = "fixed"
            state = [-3.0, -3.0]

            [sim]
            dt = 0.05
            "#,
        )
        .unwrap()
    }

    #[test]
    fn export_then_verify_round_trips() {
        let scenario = small_scenario();
        let result = run_batch(&scenario).unwrap();
        assert_eq!(result.summary.runs.len(), 1);
        assert_eq!(result.summary.runs[0].verdict, Verdict::Pass);
        assert_eq!(result.summary.verdict, Verdict::Pass);

        let dir = tempfile::tempdir().unwrap();
        export(&result, dir.path()).unwrap();
        assert!(dir.path().join("run_0.csv").exists());
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("plotdata_geometry.csv").exists());

        let checked = verify_outputs(dir.path()).unwrap();
        assert_eq!(checked, 1);
    }

    #[test]
    fn verify_catches_tampering() {
        let scenario = small_scenario();
        let result = run_batch(&scenario).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&result, dir.path()).unwrap();

        let path = dir.path().join("run_0.csv");
        let text = std::fs::read_to_string(&path).unwrap();
        // Bump one h value in the middle of the file.
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut fields: Vec<String> = lines[40].split(',').map(str::to_string).collect();
        let h_col = 1 + 2 + 2; // t, states, controls
        fields[h_col] = fmt_g(fields[h_col].parse::<f64>().unwrap() + 0.5);
        lines[40] = fields.join(",");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();

        let err = verify_outputs(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Verification(_)));
        assert!(err.to_string().contains("h ="), "unexpected message: {err}");
    }

    #[test]
    fn verify_catches_a_forged_verdict() {
        let scenario = small_scenario();
        let result = run_batch(&scenario).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&result, dir.path()).unwrap();

        let path = dir.path().join("summary.json");
        let text = std::fs::read_to_string(&path).unwrap();
        let forged = text.replacen("\"verdict\": \"pass\"", "\"verdict\": \"fail\"", 1);
        assert_ne!(text, forged);
        std::fs::write(&path, forged).unwrap();

        assert!(verify_outputs(dir.path()).is_err());
    }

    #[test]
    fn exports_are_byte_identical_across_batches() {
        let scenario = small_scenario();
        let a = run_batch(&scenario).unwrap();
        let b = run_batch(&scenario).unwrap();
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        export(&a, da.path()).unwrap();
        export(&b, db.path()).unwrap();
        for name in ["run_0.csv", "summary.json", "plotdata_profiles.csv"] {
            let x = std::fs::read(da.path().join(name)).unwrap();
            let y = std::fs::read(db.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between identical batches");
        }
    }

    #[test]
    fn empty_batch_is_design_only() {
        let toml = r#"
            schema_version = 1
            name = "empty"
            system = "single-integrator-2d"
            t_f = 6.0
            horizon = 6.0

            [goal]
            center = [0.0, 0.0]
            radius = 1.0

            [bounds]
            lower = [-2.0, -2.0]
            upper = [2.0, 2.0]

            [controller]
            kind = "fccbf"
            r = "auto"
            k = "auto"
            design_check = "initial-state"

            [init]
            kind = "random"
            count = 0
            seed = 1
            region = [[-4.0, -4.0], [4.0, 4.0]]
        "#;
        let scenario = Scenario::from_toml_str(toml).unwrap();
        let result = run_batch(&scenario).unwrap();
        assert!(result.logs.is_empty());
        assert_eq!(result.summary.verdict, Verdict::Pass);
        assert!(result.summary.design.interval.is_some());
        assert!(result.summary.design.report.is_some());

        let dir = tempfile::tempdir().unwrap();
        export(&result, dir.path()).unwrap();
        assert_eq!(verify_outputs(dir.path()).unwrap(), 0);
    }
}
