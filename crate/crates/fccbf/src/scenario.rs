//! Scenario files: the reproduction contract. A scenario fixes the system,
//! the goal disk, the obstacle field, the control box, the controller
//! formulation and its parameters (possibly `"auto"`), the initial states
//! (fixed or seeded-random), and the discretization. Resolution turns one
//! file into a list of fully concrete run plans plus a one-off design record.
//!
//! Parameters marked `"auto"` are resolved per initial state, because the
//! admissible gain window depends on how far out the run starts: `r`
//! defaults to a quarter of the squared goal radius and `k` to the midpoint
//! of the feasible interval at that start (an empty interval is an error
//! naming the offending start). The fractional-power gain `p` is sized so
//! its nominal settling time equals the deadline.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barriers::{ClbfSpec, FccbfSpec, HocbfSpec};
use crate::design::{
    check_validity_initial, check_validity_sampled, feasible_k_interval, reachable_set, CheckMode,
    FeasibilityReport, KInterval,
};
use crate::error::{Error, Result};
use crate::model::{
    circle_obstacle, double_integrator_1d, goal_disk, single_integrator_2d, ConstraintFunction,
    ControlBounds, StateVector, SystemModel,
};
use crate::sim::{ControllerSpec, GoalFormulation, SimConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Clearance added to the goal and obstacle radii when rejecting random
/// initial states, so every accepted start has a strict margin.
const INIT_CLEARANCE: f64 = 0.1;

/// A scenario parameter that is either given or derived at resolution time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AutoOr {
    Auto,
    Value(f64),
}

impl AutoOr {
    fn resolve(self, auto: impl FnOnce() -> Result<f64>) -> Result<f64> {
        match self {
            AutoOr::Auto => auto(),
            AutoOr::Value(v) => Ok(v),
        }
    }
}

impl<'de> Deserialize<'de> for AutoOr {
    fn deserialize<D>(d: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(AutoOr::Value(v)),
            Raw::Text(s) if s == "auto" => Ok(AutoOr::Auto),
            Raw::Text(s) => {
                Err(serde::de::Error::custom(format!("expected a number or \"auto\", got \"{s}\"")))
            }
        }
    }
}

impl Serialize for AutoOr {
    fn serialize<S>(&self, s: S) -> std::result::Result<S::Ok, S::Error>
    where
        S: serde::Serializer,
    {
        match self {
            AutoOr::Auto => s.serialize_str("auto"),
            AutoOr::Value(v) => s.serialize_f64(*v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemKind {
    #[serde(rename = "single-integrator-2d")]
    SingleIntegrator2d,
    #[serde(rename = "double-integrator-1d")]
    DoubleIntegrator1d,
}

impl SystemKind {
    pub fn build(&self) -> SystemModel {
        match self {
            SystemKind::SingleIntegrator2d => single_integrator_2d(),
            SystemKind::DoubleIntegrator1d => double_integrator_1d(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerKind {
    #[serde(rename = "fccbf")]
    Fccbf,
    #[serde(rename = "clbf")]
    Clbf,
    /// Run both formulations from each initial state, exponential first.
    #[serde(rename = "compare")]
    Compare,
}

/// Which formulation one concrete run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalKind {
    #[serde(rename = "fccbf")]
    Fccbf,
    #[serde(rename = "clbf")]
    Clbf,
}

impl std::fmt::Display for GoalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GoalKind::Fccbf => "fccbf",
            GoalKind::Clbf => "clbf",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiskSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

fn default_safety_slope() -> f64 {
    2.0
}

fn default_design_check() -> CheckMode {
    CheckMode::Sampled
}

fn default_design_samples() -> usize {
    10_000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<AutoOr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<AutoOr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<AutoOr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_exp: Option<f64>,
    /// Linear class-K slope applied to every obstacle row.
    #[serde(default = "default_safety_slope")]
    pub safety_slope: f64,
    /// How the one-off design record is produced. `initial-state` is the
    /// fast path and is only sound when the scenario's geometry makes the
    /// start the worst case; declaring it is the author's assertion.
    #[serde(default = "default_design_check")]
    pub design_check: CheckMode,
    /// Sampling box for the `sampled` design check; defaults to the square
    /// bounding the reachable band of the goal disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design_bbox: Option<[Vec<f64>; 2]>,
    #[serde(default = "default_design_samples")]
    pub design_samples: usize,
    #[serde(default)]
    pub design_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    #[serde(rename = "fixed")]
    Fixed,
    #[serde(rename = "random")]
    Random,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub kind: InitKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<[Vec<f64>; 2]>,
}

fn default_dt() -> f64 {
    0.01
}

fn default_substeps() -> usize {
    1
}

fn default_tol() -> f64 {
    1e-6
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub dt: f64,
    pub substeps: usize,
    pub constraint_tol: f64,
    pub event_tol: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            dt: default_dt(),
            substeps: default_substeps(),
            constraint_tol: default_tol(),
            event_tol: default_tol(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub system: SystemKind,
    pub t_f: f64,
    pub horizon: f64,
    pub goal: DiskSpec,
    #[serde(default)]
    pub obstacles: Vec<DiskSpec>,
    pub bounds: BoundsSpec,
    pub controller: ControllerConfig,
    pub init: InitSpec,
    #[serde(default)]
    pub sim: SimSettings,
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
    let scenario: Scenario = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("scenario {}: {e}", path.display())))?;
    scenario.validate()?;
    Ok(scenario)
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Scenario> {
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Replace the random seed (CLI `--seed`). Rejected for fixed starts:
    /// there is nothing for the seed to vary.
    pub fn set_seed(&mut self, seed: u64) -> Result<()> {
        if self.init.kind != InitKind::Random {
            return Err(Error::Config(
                "--seed only applies to scenarios with random initial states".into(),
            ));
        }
        self.init.seed = Some(seed);
        Ok(())
    }

    /// Replace the control interval (CLI `--dt`).
    pub fn set_dt(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("--dt must be positive, got {dt}")));
        }
        self.sim.dt = dt;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} not supported; this build reads version {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        let sys = self.system.build();
        let n = sys.state_dim;
        let q = sys.control_dim;

        if !(self.t_f > 0.0) || !self.t_f.is_finite() {
            return Err(Error::Config(format!("t_f must be positive, got {}", self.t_f)));
        }
        if self.t_f > self.horizon {
            return Err(Error::Config(format!(
                "t_f = {} exceeds the horizon {}; the deadline would never be logged",
                self.t_f, self.horizon
            )));
        }

        let check_disk = |label: &str, d: &DiskSpec| -> Result<()> {
            if d.center.len() != n {
                return Err(Error::Config(format!(
                    "{label}.center has {} component(s), the state has {n}",
                    d.center.len()
                )));
            }
            if !(d.radius > 0.0) || !d.radius.is_finite() {
                return Err(Error::Config(format!("{label}.radius must be positive, got {}", d.radius)));
            }
            if d.center.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{label}.center must be finite")));
            }
            Ok(())
        };
        check_disk("goal", &self.goal)?;
        for (i, obs) in self.obstacles.iter().enumerate() {
            check_disk(&format!("obstacles[{i}]"), obs)?;
        }

        if self.bounds.lower.len() != q || self.bounds.upper.len() != q {
            return Err(Error::Config(format!(
                "bounds cover {}/{} channel(s), the system has {q}",
                self.bounds.lower.len(),
                self.bounds.upper.len()
            )));
        }
        if self.bounds.lower.iter().chain(&self.bounds.upper).any(|v| !v.is_finite()) {
            return Err(Error::Config("scenario bounds must be finite".into()));
        }
        ControlBounds::new(
            DVector::from_vec(self.bounds.lower.clone()),
            DVector::from_vec(self.bounds.upper.clone()),
        )?;

        self.validate_controller()?;
        self.validate_init(n)?;

        let cfg = self.sim_config();
        cfg.validate()?;
        Ok(())
    }

    fn validate_controller(&self) -> Result<()> {
        let c = &self.controller;
        let wants_fccbf = matches!(c.kind, ControllerKind::Fccbf | ControllerKind::Compare);
        let wants_clbf = matches!(c.kind, ControllerKind::Clbf | ControllerKind::Compare);

        if wants_fccbf {
            if c.r.is_none() || c.k.is_none() {
                return Err(Error::Config(
                    "controller.r and controller.k are required (use \"auto\" to derive them)"
                        .into(),
                ));
            }
        } else if c.r.is_some() || c.k.is_some() {
            return Err(Error::Config(
                "controller.r / controller.k have no meaning for kind = \"clbf\"".into(),
            ));
        }
        if wants_clbf {
            if c.p.is_none() {
                return Err(Error::Config(
                    "controller.p is required (use \"auto\" to derive it)".into(),
                ));
            }
            let q = c.q_exp.unwrap_or(1.0 / 3.0);
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::Config(format!(
                    "controller.q_exp must lie strictly between 0 and 1, got {q}"
                )));
            }
        } else if c.p.is_some() || c.q_exp.is_some() {
            return Err(Error::Config(
                "controller.p / controller.q_exp have no meaning for kind = \"fccbf\"".into(),
            ));
        }
        if let Some(AutoOr::Value(v)) = c.r {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("controller.r must be positive, got {v}")));
            }
        }
        if let Some(AutoOr::Value(v)) = c.k {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("controller.k must be positive, got {v}")));
            }
        }
        if let Some(AutoOr::Value(v)) = c.p {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("controller.p must be positive, got {v}")));
            }
        }
        if !(c.safety_slope > 0.0) || !c.safety_slope.is_finite() {
            return Err(Error::Config(format!(
                "controller.safety_slope must be positive, got {}",
                c.safety_slope
            )));
        }
        if c.design_samples == 0 {
            return Err(Error::Config("controller.design_samples must be at least 1".into()));
        }
        if let Some([lo, hi]) = &c.design_bbox {
            if lo.len() != hi.len() {
                return Err(Error::Config("controller.design_bbox halves differ in length".into()));
            }
            if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                return Err(Error::Config(
                    "controller.design_bbox must satisfy lower < upper".into(),
                ));
            }
        }
        Ok(())
    }

    fn validate_init(&self, n: usize) -> Result<()> {
        match self.init.kind {
            InitKind::Fixed => {
                let state = self
                    .init
                    .state
                    .as_ref()
                    .ok_or_else(|| Error::Config("init.state is required for kind = \"fixed\"".into()))?;
                if state.len() != n {
                    return Err(Error::Config(format!(
                        "init.state has {} component(s), the state has {n}",
                        state.len()
                    )));
                }
                if state.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("init.state must be finite".into()));
                }
                if self.init.count.is_some() || self.init.seed.is_some() || self.init.region.is_some()
                {
                    return Err(Error::Config(
                        "init.count/seed/region have no meaning for kind = \"fixed\"".into(),
                    ));
                }
            }
            InitKind::Random => {
                if self.init.state.is_some() {
                    return Err(Error::Config(
                        "init.state has no meaning for kind = \"random\"".into(),
                    ));
                }
                if self.init.count.is_none() {
                    return Err(Error::Config("init.count is required for kind = \"random\"".into()));
                }
                if self.init.seed.is_none() {
                    return Err(Error::Config("init.seed is required for kind = \"random\"".into()));
                }
                let region = self.init.region.as_ref().ok_or_else(|| {
                    Error::Config("init.region is required for kind = \"random\"".into())
                })?;
                let [lo, hi] = region;
                if lo.len() != n || hi.len() != n {
                    return Err(Error::Config(format!(
                        "init.region must be two {n}-component corners"
                    )));
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
                    return Err(Error::Config(
                        "init.region must be finite with lower < upper".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt: self.sim.dt,
            horizon: self.horizon,
            substeps: self.sim.substeps,
            constraint_tol: self.sim.constraint_tol,
            event_tol: self.sim.event_tol,
        }
    }

    pub fn goal_constraint(&self) -> ConstraintFunction {
        goal_disk([self.goal.center[0], self.goal.center[1]], self.goal.radius)
    }

    pub fn safety_specs(&self) -> Result<Vec<HocbfSpec>> {
        self.obstacles
            .iter()
            .enumerate()
            .map(|(i, obs)| {
                HocbfSpec::new(
                    circle_obstacle(
                        format!("b_{}", i + 1),
                        [obs.center[0], obs.center[1]],
                        obs.radius,
                    ),
                    vec![self.controller.safety_slope],
                )
            })
            .collect()
    }

    pub fn control_bounds(&self) -> ControlBounds {
        // Validated in validate(); safe to unwrap here.
        ControlBounds::new(
            DVector::from_vec(self.bounds.lower.clone()),
            DVector::from_vec(self.bounds.upper.clone()),
        )
        .unwrap()
    }

    fn generate_inits(&self) -> Result<Vec<StateVector>> {
        match self.init.kind {
            InitKind::Fixed => {
                Ok(vec![DVector::from_row_slice(self.init.state.as_ref().unwrap())])
            }
            InitKind::Random => {
                let count = self.init.count.unwrap();
                let seed = self.init.seed.unwrap();
                let [lo, hi] = self.init.region.as_ref().unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut out = Vec::with_capacity(count);
                let max_attempts = 10_000 + 1_000 * count;
                let mut attempts = 0;
                while out.len() < count {
                    attempts += 1;
                    if attempts > max_attempts {
                        return Err(Error::Config(format!(
                            "could not draw {count} clear initial state(s) from init.region \
                             after {max_attempts} attempts; the region is mostly covered"
                        )));
                    }
                    let x = DVector::from_fn(lo.len(), |i, _| rng.random_range(lo[i]..hi[i]));
                    if self.init_is_clear(&x) {
                        out.push(x);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Outside the goal disk and every obstacle, each inflated by the
    /// clearance, so h(x) < 0 and b_i(x) > 0 hold with margin.
    fn init_is_clear(&self, x: &StateVector) -> bool {
        let clear_of = |d: &DiskSpec| {
            let c = DVector::from_row_slice(&d.center);
            (x - c).norm() > d.radius + INIT_CLEARANCE
        };
        clear_of(&self.goal) && self.obstacles.iter().all(clear_of)
    }

    /// The corner of the random-init region farthest from the goal center:
    /// the most demanding start any seed can produce, used as the reference
    /// state for the one-off design record.
    fn reference_init(&self, inits: &[StateVector]) -> Option<StateVector> {
        match self.init.kind {
            InitKind::Fixed => inits.first().cloned(),
            InitKind::Random => {
                let [lo, hi] = self.init.region.as_ref().unwrap();
                let c = &self.goal.center;
                Some(DVector::from_fn(lo.len(), |i, _| {
                    if (lo[i] - c[i]).abs() >= (hi[i] - c[i]).abs() {
                        lo[i]
                    } else {
                        hi[i]
                    }
                }))
            }
        }
    }

    pub fn resolve(&self) -> Result<ResolvedScenario> {
        self.validate()?;
        let sys = self.system.build();
        let bounds = self.control_bounds();
        let sim = self.sim_config();
        let goal = self.goal_constraint();
        let safety = self.safety_specs()?;
        let inits = self.generate_inits()?;
        let hessian = DMatrix::identity(sys.control_dim, sys.control_dim);

        let mut plans = Vec::new();
        for (init_index, x0) in inits.iter().enumerate() {
            let kinds: &[GoalKind] = match self.controller.kind {
                ControllerKind::Fccbf => &[GoalKind::Fccbf],
                ControllerKind::Clbf => &[GoalKind::Clbf],
                ControllerKind::Compare => &[GoalKind::Fccbf, GoalKind::Clbf],
            };
            for kind in kinds {
                let index = plans.len();
                let plan = match kind {
                    GoalKind::Fccbf => {
                        let (r, k) = self.resolve_fccbf_params(&goal, &sys, &bounds, x0)?;
                        let spec = FccbfSpec::new(goal.clone(), r, k, self.t_f)?;
                        RunPlan {
                            index,
                            init_index,
                            controller: GoalKind::Fccbf,
                            ctrl: ControllerSpec {
                                goal: Some(GoalFormulation::Fccbf(spec)),
                                safety: safety.clone(),
                                hessian: hessian.clone(),
                            },
                            x0: x0.clone(),
                            r: Some(r),
                            k: Some(k),
                            p: None,
                        }
                    }
                    GoalKind::Clbf => {
                        let q_exp = self.controller.q_exp.unwrap_or(1.0 / 3.0);
                        let p = self.controller.p.unwrap().resolve(|| {
                            ClbfSpec::p_for_deadline(goal.value(x0), q_exp, self.t_f)
                        })?;
                        let spec = ClbfSpec::new(goal.clone(), p, q_exp)?;
                        RunPlan {
                            index,
                            init_index,
                            controller: GoalKind::Clbf,
                            ctrl: ControllerSpec {
                                goal: Some(GoalFormulation::Clbf(spec)),
                                safety: safety.clone(),
                                hessian: hessian.clone(),
                            },
                            x0: x0.clone(),
                            r: None,
                            k: None,
                            p: Some(p),
                        }
                    }
                };
                plans.push(plan);
            }
        }

        let (design_interval, design_report, reference_init) = self.design_record(
            &goal,
            &sys,
            &bounds,
            self.reference_init(&inits).as_ref(),
        )?;

        Ok(ResolvedScenario {
            sys,
            bounds,
            sim,
            goal,
            safety,
            inits,
            plans,
            design_interval,
            design_report,
            reference_init,
        })
    }

    fn resolve_fccbf_params(
        &self,
        goal: &ConstraintFunction,
        sys: &SystemModel,
        bounds: &ControlBounds,
        x0: &StateVector,
    ) -> Result<(f64, f64)> {
        let r = self
            .controller
            .r
            .unwrap()
            .resolve(|| Ok(0.25 * self.goal.radius * self.goal.radius))?;
        let k = self.controller.k.unwrap().resolve(|| {
            let iv = feasible_k_interval(goal, sys, bounds, x0, r, self.t_f)?;
            if !iv.nonempty {
                return Err(Error::Domain(format!(
                    "no gain meets the deadline within the control bounds from start {}: \
                     the feasible interval [{}, {}] is empty",
                    x0.transpose(),
                    iv.k_min,
                    iv.k_max
                )));
            }
            if !iv.k_max.is_finite() {
                return Err(Error::Domain(
                    "the feasible gain interval is unbounded; set controller.k explicitly".into(),
                ));
            }
            Ok(iv.midpoint())
        })?;
        Ok((r, k))
    }

    /// One-off design record at the reference start, for the summary and
    /// the `design` subcommand. Only meaningful for the exponential
    /// formulation.
    fn design_record(
        &self,
        goal: &ConstraintFunction,
        sys: &SystemModel,
        bounds: &ControlBounds,
        reference: Option<&StateVector>,
    ) -> Result<(Option<KInterval>, Option<FeasibilityReport>, Option<StateVector>)> {
        if self.controller.kind == ControllerKind::Clbf {
            return Ok((None, None, None));
        }
        let Some(x0) = reference else {
            return Ok((None, None, None));
        };
        let h0 = goal.value(x0);
        if h0 >= 0.0 {
            // Reference start already satisfied; nothing to design against.
            return Ok((None, None, Some(x0.clone())));
        }
        let r = self
            .controller
            .r
            .unwrap()
            .resolve(|| Ok(0.25 * self.goal.radius * self.goal.radius))?;
        let interval = feasible_k_interval(goal, sys, bounds, x0, r, self.t_f)?;
        let k = match self.controller.k.unwrap() {
            AutoOr::Value(v) => v,
            AutoOr::Auto => {
                if interval.nonempty && interval.k_max.is_finite() {
                    interval.midpoint()
                } else {
                    interval.k_min
                }
            }
        };
        let spec = FccbfSpec::new(goal.clone(), r, k, self.t_f)?;
        let report = match self.controller.design_check {
            CheckMode::InitialState => check_validity_initial(&spec, sys, bounds, x0),
            CheckMode::Sampled => {
                let (lo, hi) = self.design_box(x0, h0)?;
                let reach = reachable_set(goal, x0, &lo, &hi)?;
                check_validity_sampled(
                    &spec,
                    sys,
                    bounds,
                    &reach,
                    self.controller.design_samples,
                    self.controller.design_seed,
                )?
            }
        };
        Ok((Some(interval), Some(report), Some(x0.clone())))
    }

    /// Sampling box for the design sweep: explicit if given, else the square
    /// that bounds the goal-disk band `h in [h0, 0]`.
    fn design_box(&self, x0: &StateVector, h0: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if let Some([lo, hi]) = &self.controller.design_bbox {
            if lo.len() != x0.len() {
                return Err(Error::Config(format!(
                    "controller.design_bbox is {}-dimensional, the state has {}",
                    lo.len(),
                    x0.len()
                )));
            }
            return Ok((lo.clone(), hi.clone()));
        }
        let reach_radius = (self.goal.radius * self.goal.radius - h0).sqrt();
        let lo = self.goal.center.iter().map(|c| c - reach_radius).collect();
        let hi = self.goal.center.iter().map(|c| c + reach_radius).collect();
        Ok((lo, hi))
    }
}

/// One fully concrete run.
#[derive(Clone, Debug)]
pub struct RunPlan {
    pub index: usize,
    pub init_index: usize,
    pub controller: GoalKind,
    pub ctrl: ControllerSpec,
    pub x0: StateVector,
    pub r: Option<f64>,
    pub k: Option<f64>,
    pub p: Option<f64>,
}

/// A scenario after parameter resolution: everything the batch runner needs.
#[derive(Clone, Debug)]
pub struct ResolvedScenario {
    pub sys: SystemModel,
    pub bounds: ControlBounds,
    pub sim: SimConfig,
    pub goal: ConstraintFunction,
    pub safety: Vec<HocbfSpec>,
    pub inits: Vec<StateVector>,
    pub plans: Vec<RunPlan>,
    pub design_interval: Option<KInterval>,
    pub design_report: Option<FeasibilityReport>,
    pub reference_init: Option<StateVector>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case_study_toml() -> String {
        r#"
            schema_version = 1
            name = "case-study"
            system = "single-integrator-2d"
            t_f = 6.0
            horizon = 6.0

            [goal]
            center = [0.0, 0.0]
            radius = 1.0

            [[obstacles]]
            center = [2.0, 2.5]
            radius = 1.0

            [[obstacles]]
            center = [-2.0, 2.5]
            radius = 1.0

            [[obstacles]]
            center = [2.0, -2.5]
            radius = 1.0

            [[obstacles]]
            center = [-2.0, -2.5]
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
            count = 10
            seed = 42
            region = [[-4.0, -4.0], [4.0, 4.0]]
        "#
        .to_string()
    }

    fn fixed_toml(kind: &str, extra: &str) -> String {
        format!(
            r#"
            schema_version = 1
            name = "fixed"
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
            kind = "{kind}"
            {extra}

            [init]
            kind = "fixed"
            state = [-3.0, -3.0]
        "#
        )
    }

    #[test]
    fn parses_the_case_study_shape() {
        let s = Scenario::from_toml_str(&case_study_toml()).unwrap();
        assert_eq!(s.name, "case-study");
        assert_eq!(s.system, SystemKind::SingleIntegrator2d);
        assert_eq!(s.obstacles.len(), 4);
        assert_eq!(s.controller.kind, ControllerKind::Fccbf);
        assert_eq!(s.controller.r, Some(AutoOr::Auto));
        assert_eq!(s.controller.safety_slope, 2.0);
        assert_eq!(s.sim.dt, 0.01);
        assert_eq!(s.init.count, Some(10));
    }

    #[test]
    fn random_inits_are_clear_and_deterministic() {
        let s = Scenario::from_toml_str(&case_study_toml()).unwrap();
        let resolved = s.resolve().unwrap();
        assert_eq!(resolved.inits.len(), 10);
        assert_eq!(resolved.plans.len(), 10);
        for x0 in &resolved.inits {
            assert!(x0.iter().all(|v| (-4.0..4.0).contains(v)));
            assert!(x0.norm() > 1.1, "inside the inflated goal: {x0}");
            for obs in &s.obstacles {
                let c = DVector::from_row_slice(&obs.center);
                assert!((x0 - c).norm() > 1.1, "inside an inflated obstacle: {x0}");
            }
        }
        let again = s.resolve().unwrap();
        for (a, b) in resolved.inits.iter().zip(&again.inits) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(a[1].to_bits(), b[1].to_bits());
        }

        let mut reseeded = s.clone();
        reseeded.set_seed(43).unwrap();
        let other = reseeded.resolve().unwrap();
        assert!(resolved.inits.iter().zip(&other.inits).any(|(a, b)| a != b));
    }

    #[test]
    fn auto_parameters_resolve_per_start() {
        let s = Scenario::from_toml_str(&case_study_toml()).unwrap();
        let resolved = s.resolve().unwrap();
        for plan in &resolved.plans {
            let r = plan.r.unwrap();
            let k = plan.k.unwrap();
            assert_eq!(r, 0.25);
            let iv = feasible_k_interval(
                &resolved.goal,
                &resolved.sys,
                &resolved.bounds,
                &plan.x0,
                r,
                s.t_f,
            )
            .unwrap();
            assert!(iv.nonempty);
            assert!((k - iv.midpoint()).abs() < 1e-12);
        }
        // Starts differ, so the derived gains differ too.
        let ks: Vec<f64> = resolved.plans.iter().map(|p| p.k.unwrap()).collect();
        assert!(ks.iter().any(|k| (k - ks[0]).abs() > 1e-9));
    }

    #[test]
    fn design_record_uses_the_declared_fast_path() {
        let s = Scenario::from_toml_str(&case_study_toml()).unwrap();
        let resolved = s.resolve().unwrap();
        let report = resolved.design_report.unwrap();
        assert_eq!(report.mode, CheckMode::InitialState);
        assert!(report.pointwise_pass);
        // Reference start: the region corner farthest from the goal.
        let reference = resolved.reference_init.unwrap();
        assert_eq!(reference.norm_squared(), 32.0);
        let iv = resolved.design_interval.unwrap();
        assert!(iv.nonempty);
    }

    #[test]
    fn compare_kind_expands_to_paired_plans() {
        let toml = fixed_toml("compare", "r = 1.0\nk = 1.0\np = \"auto\"");
        let s = Scenario::from_toml_str(&toml).unwrap();
        let resolved = s.resolve().unwrap();
        assert_eq!(resolved.plans.len(), 2);
        assert_eq!(resolved.plans[0].controller, GoalKind::Fccbf);
        assert_eq!(resolved.plans[1].controller, GoalKind::Clbf);
        assert_eq!(resolved.plans[0].init_index, 0);
        assert_eq!(resolved.plans[1].init_index, 0);
        // Deadline-sized fractional gain: |h0|^{2/3} / (t_f * 2/3).
        let p = resolved.plans[1].p.unwrap();
        let expected = 17f64.powf(2.0 / 3.0) / (6.0 * (2.0 / 3.0));
        assert!((p - expected).abs() < 1e-12);
    }

    #[test]
    fn rejections() {
        let bad_version = case_study_toml().replace("schema_version = 1", "schema_version = 2");
        assert!(Scenario::from_toml_str(&bad_version).is_err());

        let bad_radius = case_study_toml().replace("radius = 1.0", "radius = -1.0");
        assert!(Scenario::from_toml_str(&bad_radius).is_err());

        let bad_tf = case_study_toml().replace("t_f = 6.0", "t_f = 0.0");
        assert!(Scenario::from_toml_str(&bad_tf).is_err());

        let unknown = case_study_toml().replace("[controller]", "[controller]\nwarp = 9\n");
        assert!(Scenario::from_toml_str(&unknown).is_err());

        // Horizon off the dt grid.
        let off_grid = case_study_toml().replace("horizon = 6.0", "horizon = 6.003");
        assert!(Scenario::from_toml_str(&off_grid).is_err());

        // clbf kind with fccbf parameters.
        let mixed = fixed_toml("clbf", "p = \"auto\"\nk = 1.0");
        assert!(Scenario::from_toml_str(&mixed).is_err());

        // fccbf missing its parameters.
        let missing = fixed_toml("fccbf", "");
        assert!(Scenario::from_toml_str(&missing).is_err());

        // q_exp out of range.
        let bad_q = fixed_toml("clbf", "p = \"auto\"\nq_exp = 1.5");
        assert!(Scenario::from_toml_str(&bad_q).is_err());

        // Random init without a seed.
        let no_seed = case_study_toml().replace("seed = 42\n", "");
        assert!(Scenario::from_toml_str(&no_seed).is_err());

        // "auto" misspelled.
        let typo = case_study_toml().replace("r = \"auto\"", "r = \"anto\"");
        assert!(Scenario::from_toml_str(&typo).is_err());
    }

    #[test]
    fn seed_override_rejected_for_fixed_starts() {
        let toml = fixed_toml("fccbf", "r = 1.0\nk = 1.0");
        let mut s = Scenario::from_toml_str(&toml).unwrap();
        assert!(s.set_seed(7).is_err());
        assert!(s.set_dt(0.02).is_ok());
        assert!(s.set_dt(-0.01).is_err());
    }

    #[test]
    fn double_integrator_scenario_resolves() {
        let toml = r#"
            schema_version = 1
            name = "braking"
            system = "double-integrator-1d"
            t_f = 4.0
            horizon = 4.0

            [goal]
            center = [0.0, 0.0]
            radius = 0.5

            [bounds]
            lower = [-2.0]
            upper = [2.0]

            [controller]
            kind = "fccbf"
            r = 0.5
            k = "auto"

            [init]
            kind = "fixed"
            state = [3.0, -1.0]
        "#;
        // The start must carry velocity: the phase-space goal disk has
        // L_g h = -2v, so a standstill start has no instantaneous authority
        // over h and the feasible gain interval collapses.
        let s = Scenario::from_toml_str(toml).unwrap();
        let resolved = s.resolve().unwrap();
        assert_eq!(resolved.sys.control_dim, 1);
        assert_eq!(resolved.plans.len(), 1);
        let k = resolved.plans[0].k.unwrap();
        let interval = resolved.design_interval.clone().unwrap();
        assert!(interval.nonempty);
        assert!((interval.k_min - (10.25f64 / 0.5).ln() / 4.0).abs() < 1e-12);
        assert!((interval.k_max - 10.0 / 10.25).abs() < 1e-12);
        assert!((k - interval.midpoint()).abs() < 1e-12);
    }

    #[test]
    fn scenario_round_trips_through_serialization() {
        let s = Scenario::from_toml_str(&case_study_toml()).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"r\":\"auto\""));
        let back: Scenario = serde_json::from_str(&json).unwrap();
        assert_eq!(back.name, s.name);
        assert_eq!(back.controller.r, Some(AutoOr::Auto));
        assert_eq!(back.obstacles.len(), 4);
    }
}
