//! Discretized closed loop: at each control instant assemble the barrier
//! rows at the current state, solve the filter QP, hold the control for one
//! interval, and integrate the dynamics with fixed-step RK4. Everything is
//! logged densely so events (goal reached, safety violated, QP degraded) can
//! be located afterwards by interpolation, and so exports can be rebuilt
//! bit-identically from the log alone.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::barriers::{build_clbf, build_fccbf, build_hocbf, ClbfSpec, FccbfSpec, HocbfSpec, LinearControlConstraint};
use crate::error::{Error, Result};
use crate::model::{ConstraintFunction, ControlBounds, ControlVector, StateVector, SystemModel};
use crate::qp::{QpSolution, QpSolver, QpStatus};

#[derive(Clone, Copy, Debug)]
pub struct SimConfig {
    /// Control interval (zero-order hold length), seconds.
    pub dt: f64,
    /// Total simulated time, seconds; must be an integer multiple of `dt`.
    pub horizon: f64,
    /// Integrator steps per control interval.
    pub substeps: usize,
    /// A barrier dipping below `-constraint_tol` counts as a violation.
    pub constraint_tol: f64,
    /// Resolution of reported event times.
    pub event_tol: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { dt: 0.01, horizon: 6.0, substeps: 1, constraint_tol: 1e-6, event_tol: 1e-6 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= self.dt) || !self.horizon.is_finite() {
            return Err(Error::Config(format!(
                "horizon must be at least one interval, got {} with dt {}",
                self.horizon, self.dt
            )));
        }
        let steps = (self.horizon / self.dt).round();
        if (steps * self.dt - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(Error::Config(format!(
                "horizon {} is not an integer multiple of dt {}",
                self.horizon, self.dt
            )));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        if !(self.constraint_tol > 0.0) || !(self.event_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// The convergence half of the controller: exactly one formulation.
#[derive(Clone, Debug)]
pub enum GoalFormulation {
    Fccbf(FccbfSpec),
    Clbf(ClbfSpec),
}

impl GoalFormulation {
    pub fn constraint(&self) -> &ConstraintFunction {
        match self {
            GoalFormulation::Fccbf(s) => &s.constraint,
            GoalFormulation::Clbf(s) => &s.constraint,
        }
    }

    /// Convergence gap logged as V: distance of h to the strengthened
    /// target for the exponential formulation, remaining violation for the
    /// fractional-power one.
    pub fn gap(&self, h: f64) -> f64 {
        match self {
            GoalFormulation::Fccbf(s) => s.r - h,
            GoalFormulation::Clbf(_) => -h,
        }
    }

    fn row(&self, sys: &SystemModel, x: &StateVector) -> LinearControlConstraint {
        match self {
            GoalFormulation::Fccbf(s) => build_fccbf(s, sys, x),
            GoalFormulation::Clbf(s) => build_clbf(s, sys, x),
        }
    }
}

/// Everything the per-step QP needs besides the state: an optional goal row,
/// the safety rows in logging order, and the control cost.
#[derive(Clone, Debug)]
pub struct ControllerSpec {
    pub goal: Option<GoalFormulation>,
    pub safety: Vec<HocbfSpec>,
    pub hessian: DMatrix<f64>,
}

impl ControllerSpec {
    /// Rows at state `x`: goal first (when present), then safety rows in
    /// declaration order.
    pub fn rows(&self, sys: &SystemModel, x: &StateVector) -> Result<Vec<LinearControlConstraint>> {
        let mut rows = Vec::with_capacity(self.safety.len() + 1);
        if let Some(goal) = &self.goal {
            rows.push(goal.row(sys, x));
        }
        for spec in &self.safety {
            rows.push(build_hocbf(spec, sys, x)?);
        }
        Ok(rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    #[serde(rename = "goal-reached")]
    GoalReached,
    #[serde(rename = "safety-violated")]
    SafetyViolated,
    #[serde(rename = "qp-relaxed")]
    QpRelaxed,
    #[serde(rename = "qp-infeasible-hard")]
    QpInfeasibleHard,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::GoalReached => "goal-reached",
            EventKind::SafetyViolated => "safety-violated",
            EventKind::QpRelaxed => "qp-relaxed",
            EventKind::QpInfeasibleHard => "qp-infeasible-hard",
        })
    }
}

/// First occurrence of each event kind, chronological order.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub time: f64,
}

/// Dense record of one run. Per-time vectors have `steps + 1` entries;
/// per-interval vectors (`controls`, `qp_statuses`, `slack_totals`) have
/// `steps`.
#[derive(Clone, Debug)]
pub struct TrajectoryLog {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub controls: Vec<ControlVector>,
    /// Goal constraint value per time; absent for pure safety filtering.
    pub h: Option<Vec<f64>>,
    /// Convergence gap V per time; absent alongside `h`.
    pub v_env: Option<Vec<f64>>,
    /// Safety constraint values per time, one series per constraint,
    /// keyed by constraint name in declaration order.
    pub barriers: Vec<(String, Vec<f64>)>,
    pub qp_statuses: Vec<QpStatus>,
    pub slack_totals: Vec<f64>,
    pub events: Vec<Event>,
}

impl TrajectoryLog {
    pub fn event(&self, kind: EventKind) -> Option<Event> {
        self.events.iter().copied().find(|e| e.kind == kind)
    }

    pub fn qp_relaxed_count(&self) -> usize {
        self.qp_statuses.iter().filter(|s| **s == QpStatus::Relaxed).count()
    }

    pub fn qp_infeasible_count(&self) -> usize {
        self.qp_statuses.iter().filter(|s| **s == QpStatus::InfeasibleHard).count()
    }

    /// Smallest safety value over all constraints and times; +inf when the
    /// run has no safety constraints.
    pub fn min_barrier(&self) -> f64 {
        self.barriers
            .iter()
            .flat_map(|(_, series)| series.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest excess of any logged control over the bounds.
    pub fn bound_violation(&self, bounds: &ControlBounds) -> f64 {
        self.controls.iter().map(|u| bounds.violation(u)).fold(0.0, f64::max)
    }
}

/// One control decision at state `x`.
pub fn step(
    ctrl: &ControllerSpec,
    sys: &SystemModel,
    bounds: &ControlBounds,
    x: &StateVector,
    solver: &mut QpSolver,
) -> Result<(ControlVector, QpSolution)> {
    let rows = ctrl.rows(sys, x)?;
    // Barrier rows are soft, bounds are hard: when everything conflicts the
    // controller must still emit an admissible control.
    let relax_tags = rows.iter().map(|r| r.tag.clone()).collect();
    let problem = crate::qp::QpProblem::new(ctrl.hessian.clone(), rows, bounds.clone(), relax_tags)?;
    let sol = solver.solve(&problem)?;
    Ok((sol.u.clone(), sol))
}

/// Zero-order-hold integration over one control interval with classical RK4
/// in `substeps` uniform pieces.
pub fn integrate(
    sys: &SystemModel,
    x: &StateVector,
    u: &ControlVector,
    dt: f64,
    substeps: usize,
) -> Result<StateVector> {
    if !(dt > 0.0) || substeps == 0 {
        return Err(Error::Config(format!("bad integration step: dt {dt}, substeps {substeps}")));
    }
    let h = dt / substeps as f64;
    let deriv = |y: &StateVector| sys.drift(y) + sys.actuation(y) * u;
    let mut y = x.clone();
    for _ in 0..substeps {
        let k1 = deriv(&y);
        let k2 = deriv(&(&y + &k1 * (h / 2.0)));
        let k3 = deriv(&(&y + &k2 * (h / 2.0)));
        let k4 = deriv(&(&y + &k3 * h));
        y += (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (h / 6.0);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "state became non-finite during integration from {x} with control {u}"
        )));
    }
    Ok(y)
}

/// Full closed-loop run over `[0, horizon]`.
///
/// Validation happens up front: dimensions, the goal being unmet at the
/// start, and — for the exponential formulation — the deadline condition
/// `r >= (r - h(x0)) e^{-k t_f}`, without which the gain cannot meet `t_f`.
/// The run never aborts on a safety violation; it is recorded as an event
/// and the loop continues, so comparison plots cover the whole horizon.
pub fn run(
    ctrl: &ControllerSpec,
    sys: &SystemModel,
    bounds: &ControlBounds,
    x0: &StateVector,
    cfg: &SimConfig,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    if x0.len() != sys.state_dim {
        return Err(Error::Dimension(format!(
            "initial state has {} component(s), system '{}' expects {}",
            x0.len(),
            sys.name,
            sys.state_dim
        )));
    }
    if bounds.dim() != sys.control_dim {
        return Err(Error::Dimension(format!(
            "bounds cover {} channel(s), system '{}' has {}",
            bounds.dim(),
            sys.name,
            sys.control_dim
        )));
    }
    if ctrl.hessian.nrows() != sys.control_dim || ctrl.hessian.ncols() != sys.control_dim {
        return Err(Error::Dimension(format!(
            "cost matrix is {}x{}, system '{}' has {} control(s)",
            ctrl.hessian.nrows(),
            ctrl.hessian.ncols(),
            sys.name,
            sys.control_dim
        )));
    }
    if let Some(goal) = &ctrl.goal {
        let h0 = goal.constraint().value(x0);
        if h0 >= 0.0 {
            return Err(Error::Domain(format!(
                "goal constraint already satisfied at the initial state (h = {h0})"
            )));
        }
        if let GoalFormulation::Fccbf(spec) = goal {
            if !spec.finite_time_ok(h0) {
                return Err(Error::Domain(format!(
                    "gain k = {} cannot close a gap of {} within t_f = {}: \
                     the exponential envelope ends above the strengthened set",
                    spec.k,
                    spec.r - h0,
                    spec.t_f
                )));
            }
        }
    }

    let steps = cfg.steps();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    let mut h_series = ctrl.goal.as_ref().map(|_| Vec::with_capacity(steps + 1));
    let mut v_series = ctrl.goal.as_ref().map(|_| Vec::with_capacity(steps + 1));
    let mut barriers: Vec<(String, Vec<f64>)> = ctrl
        .safety
        .iter()
        .map(|s| (s.constraint.name.clone(), Vec::with_capacity(steps + 1)))
        .collect();
    let mut statuses = Vec::with_capacity(steps);
    let mut slack_totals = Vec::with_capacity(steps);

    let mut solver = QpSolver::new();
    let mut x = x0.clone();
    for w in 0..=steps {
        times.push(w as f64 * cfg.dt);
        if let Some(goal) = &ctrl.goal {
            let hv = goal.constraint().value(&x);
            h_series.as_mut().unwrap().push(hv);
            v_series.as_mut().unwrap().push(goal.gap(hv));
        }
        for (spec, (_, series)) in ctrl.safety.iter().zip(barriers.iter_mut()) {
            series.push(spec.constraint.value(&x));
        }
        states.push(x.clone());
        if w == steps {
            break;
        }
        let (u, sol) = step(ctrl, sys, bounds, &x, &mut solver)?;
        statuses.push(sol.status);
        slack_totals.push(sol.slacks.iter().sum());
        x = integrate(sys, &x, &u, cfg.dt, cfg.substeps)?;
        controls.push(u);
    }

    let mut log = TrajectoryLog {
        times,
        states,
        controls,
        h: h_series,
        v_env: v_series,
        barriers,
        qp_statuses: statuses,
        slack_totals,
        events: Vec::new(),
    };
    log.events = extract_events(&log, cfg);
    Ok(log)
}

/// First crossing of `threshold` in the given direction, located by linear
/// interpolation between the bracketing samples and snapped to `tol`.
fn first_crossing(times: &[f64], series: &[f64], threshold: f64, upward: bool, tol: f64) -> Option<f64> {
    let hit = |v: f64| if upward { v >= threshold } else { v < threshold };
    if hit(series[0]) {
        return Some(times[0]);
    }
    for i in 1..series.len() {
        if hit(series[i]) {
            let (a, b) = (series[i - 1], series[i]);
            let frac = if (b - a).abs() < f64::MIN_POSITIVE { 1.0 } else { (threshold - a) / (b - a) };
            let t = times[i - 1] + frac.clamp(0.0, 1.0) * (times[i] - times[i - 1]);
            return Some((t / tol).round() * tol);
        }
    }
    None
}

fn extract_events(log: &TrajectoryLog, cfg: &SimConfig) -> Vec<Event> {
    let mut events = Vec::new();
    if let Some(h) = &log.h {
        if let Some(t) = first_crossing(&log.times, h, 0.0, true, cfg.event_tol) {
            events.push(Event { kind: EventKind::GoalReached, time: t });
        }
    }
    // Earliest violation over all safety constraints.
    let mut violation: Option<f64> = None;
    for (_, series) in &log.barriers {
        if let Some(t) = first_crossing(&log.times, series, -cfg.constraint_tol, false, cfg.event_tol)
        {
            violation = Some(violation.map_or(t, |prev: f64| prev.min(t)));
        }
    }
    if let Some(t) = violation {
        events.push(Event { kind: EventKind::SafetyViolated, time: t });
    }
    // QP degradations are discrete decisions; no interpolation.
    for (kind, status) in [
        (EventKind::QpRelaxed, QpStatus::Relaxed),
        (EventKind::QpInfeasibleHard, QpStatus::InfeasibleHard),
    ] {
        if let Some(w) = log.qp_statuses.iter().position(|s| *s == status) {
            events.push(Event { kind, time: log.times[w] });
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    events
}
