//! Feasibility design for the convergence gain.
//!
//! A strengthened constraint `s = h - r` with gain `k` is only useful if the
//! control box can actually honor it everywhere the closed loop may go. Two
//! questions are answered here:
//!
//! * which `k` meet the deadline — `k >= ln((r - h0)/r) / t_f` makes the
//!   envelope `V(t) <= V(0) e^{-kt}` reach `V(t_f) <= r`, i.e. `h(t_f) >= 0`;
//! * which `k` stay within actuation — the row `L_f s + k s + L_g s . u >= 0`
//!   must admit a `u` in the box at every state of the sub-level band
//!   `{ y : h(x0) <= h(y) <= 0 }` the loop can visit while `h` increases.
//!
//! The actuation side is answered two ways: a cheap initial-state bound
//! (valid when the worst case is at the start, which the caller must judge),
//! and a seeded Monte-Carlo sweep of the band, reported both in the
//! conservative decoupled form (min of the drift side vs. max of the
//! actuation side) and as an exact per-sample test. A sampled pass is
//! evidence, not a certificate.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barriers::FccbfSpec;
use crate::error::{Error, Result};
use crate::model::{lie_f, lie_g, ConstraintFunction, ControlBounds, StateVector, SystemModel};

/// Closed interval of admissible gains.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KInterval {
    pub k_min: f64,
    pub k_max: f64,
    pub nonempty: bool,
}

impl KInterval {
    pub fn new(k_min: f64, k_max: f64) -> Self {
        KInterval { k_min, k_max, nonempty: k_min <= k_max }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.k_min + self.k_max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckMode {
    #[serde(rename = "initial-state")]
    InitialState,
    #[serde(rename = "sampled")]
    Sampled,
}

/// Outcome of a validity check. `margin` is the smallest value of
/// `L_f s + k s + max_u L_g s . u` seen; negative means some visited state
/// has no admissible control for the strengthened row alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub mode: CheckMode,
    pub decoupled_pass: bool,
    pub pointwise_pass: bool,
    pub worst_state: Vec<f64>,
    pub margin: f64,
    pub samples: usize,
}

/// Smallest gain meeting the deadline: `ln((r - h0)/r) / t_f`.
pub fn k_lower_bound(r: f64, h0: f64, t_f: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain(format!("strengthening margin r must be positive, got {r}")));
    }
    if !(h0 < 0.0) {
        return Err(Error::Domain(format!(
            "initial constraint value must be negative (not yet satisfied), got {h0}"
        )));
    }
    if !(t_f > 0.0) || !t_f.is_finite() {
        return Err(Error::Domain(format!("deadline must be positive, got {t_f}")));
    }
    Ok(((r - h0) / r).ln() / t_f)
}

/// Largest gain whose row is satisfiable by the box at the initial state:
/// `(L_f s(x0) + max_u L_g s(x0) . u) / (r - h(x0))`.
///
/// Sound as an upper bound over the whole band only when the geometry makes
/// the initial state the worst case; use the sampled check otherwise.
/// Returns +inf when `s(x0) >= 0` (the row binds nothing at the start) or
/// when the box is unbounded in a direction the row can use.
pub fn k_upper_bound_initial(
    h: &ConstraintFunction,
    sys: &SystemModel,
    bounds: &ControlBounds,
    x0: &StateVector,
    r: f64,
) -> f64 {
    let s0 = h.value(x0) - r;
    if s0 >= 0.0 {
        return f64::INFINITY;
    }
    let supply = bounds.support(&lie_g(h, sys, x0));
    (lie_f(h, sys, x0) + supply) / (-s0)
}

/// Both bounds combined at the initial state.
pub fn feasible_k_interval(
    h: &ConstraintFunction,
    sys: &SystemModel,
    bounds: &ControlBounds,
    x0: &StateVector,
    r: f64,
    t_f: f64,
) -> Result<KInterval> {
    let h0 = h.value(x0);
    let k_min = k_lower_bound(r, h0, t_f)?;
    let k_max = k_upper_bound_initial(h, sys, bounds, x0, r);
    Ok(KInterval::new(k_min, k_max))
}

/// The band of states the closed loop can visit while the constraint value
/// rises from `h(x0)` to 0, with a rejection sampler over `bbox`.
#[derive(Clone)]
pub struct ReachableSet {
    constraint: ConstraintFunction,
    pub h_lower: f64,
    pub h_upper: f64,
    bbox_lower: DVector<f64>,
    bbox_upper: DVector<f64>,
}

impl std::fmt::Debug for ReachableSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReachableSet")
            .field("constraint", &self.constraint.name)
            .field("h_lower", &self.h_lower)
            .field("h_upper", &self.h_upper)
            .finish()
    }
}

pub fn reachable_set(
    h: &ConstraintFunction,
    x0: &StateVector,
    bbox_lower: &[f64],
    bbox_upper: &[f64],
) -> Result<ReachableSet> {
    let h0 = h.value(x0);
    if h0 >= 0.0 {
        return Err(Error::Domain(format!(
            "constraint already satisfied at the initial state (h = {h0}); nothing to design"
        )));
    }
    if bbox_lower.len() != x0.len() || bbox_upper.len() != x0.len() {
        return Err(Error::Dimension(format!(
            "bounding box is {}/{}-dimensional but the state has {} component(s)",
            bbox_lower.len(),
            bbox_upper.len(),
            x0.len()
        )));
    }
    if bbox_lower.iter().zip(bbox_upper).any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::Config("bounding box must be finite with lower <= upper".into()));
    }
    Ok(ReachableSet {
        constraint: h.clone(),
        h_lower: h0,
        h_upper: 0.0,
        bbox_lower: DVector::from_row_slice(bbox_lower),
        bbox_upper: DVector::from_row_slice(bbox_upper),
    })
}

impl ReachableSet {
    pub fn contains(&self, y: &StateVector) -> bool {
        let v = self.constraint.value(y);
        self.h_lower <= v && v <= self.h_upper
    }

    /// `n` member states by rejection from the bounding box; the sequence is
    /// a pure function of the seed.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<StateVector>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.bbox_lower.len();
        let mut out = Vec::with_capacity(n);
        let max_attempts = 10_000 + 1_000 * n;
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Domain(format!(
                    "rejection sampler exhausted after {max_attempts} attempts ({} of {n} \
                     accepted); the bounding box barely intersects the band",
                    out.len()
                )));
            }
            let y = DVector::from_fn(dim, |i, _| {
                let (lo, hi) = (self.bbox_lower[i], self.bbox_upper[i]);
                if lo == hi { lo } else { rng.random_range(lo..hi) }
            });
            if self.contains(&y) {
                out.push(y);
            }
        }
        Ok(out)
    }
}

/// Sweep the band with `n_samples` states and test the strengthened row
/// against the box both ways. The decoupled test compares the worst drift
/// side against the worst actuation side taken over *different* states, so
/// it can only be harder than the per-sample test.
pub fn check_validity_sampled(
    spec: &FccbfSpec,
    sys: &SystemModel,
    bounds: &ControlBounds,
    reach: &ReachableSet,
    n_samples: usize,
    seed: u64,
) -> Result<FeasibilityReport> {
    if n_samples == 0 {
        return Err(Error::Config("validity check needs at least one sample".into()));
    }
    let samples = reach.sample(n_samples, seed)?;

    let mut min_drift = f64::INFINITY; // min over samples of L_f s + k s
    let mut max_demand = f64::NEG_INFINITY; // max over samples of -supply
    let mut margin = f64::INFINITY;
    let mut pointwise_pass = true;
    let mut worst = samples[0].clone();

    for y in &samples {
        let s = spec.constraint.value(y) - spec.r;
        let drift = lie_f(&spec.constraint, sys, y) + spec.k * s;
        let supply = bounds.support(&lie_g(&spec.constraint, sys, y));
        min_drift = min_drift.min(drift);
        max_demand = max_demand.max(-supply);
        let m = drift + supply;
        if m < 0.0 {
            pointwise_pass = false;
        }
        if m < margin {
            margin = m;
            worst = y.clone();
        }
    }

    Ok(FeasibilityReport {
        mode: CheckMode::Sampled,
        decoupled_pass: min_drift >= max_demand,
        pointwise_pass,
        worst_state: worst.iter().copied().collect(),
        margin,
        samples: n_samples,
    })
}

/// Fast path: test the row only at the initial state. Sound exactly when the
/// initial state is the worst case of the band, which is a property of the
/// geometry the caller asserts, not something checked here.
pub fn check_validity_initial(
    spec: &FccbfSpec,
    sys: &SystemModel,
    bounds: &ControlBounds,
    x0: &StateVector,
) -> FeasibilityReport {
    let s = spec.constraint.value(x0) - spec.r;
    let drift = lie_f(&spec.constraint, sys, x0) + spec.k * s;
    let supply = bounds.support(&lie_g(&spec.constraint, sys, x0));
    let margin = drift + supply;
    let pass = margin >= 0.0;
    FeasibilityReport {
        mode: CheckMode::InitialState,
        decoupled_pass: pass,
        pointwise_pass: pass,
        worst_state: x0.iter().copied().collect(),
        margin,
        samples: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{goal_disk, single_integrator_2d};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn case_study() -> (ConstraintFunction, SystemModel, ControlBounds, StateVector) {
        (
            goal_disk([0.0, 0.0], 1.0),
            single_integrator_2d(),
            ControlBounds::symmetric(&[2.0, 2.0]).unwrap(),
            DVector::from_vec(vec![-3.0, -3.0]),
        )
    }

    fn spec_with_k(h: &ConstraintFunction, r: f64, k: f64) -> FccbfSpec {
        FccbfSpec::new(h.clone(), r, k, 6.0).unwrap()
    }

    /// Quadrant slice of the case-study band: radii in [1, sqrt(18)],
    /// both coordinates nonpositive.
    fn quadrant_band() -> ReachableSet {
        let (h, _, _, x0) = case_study();
        let lim = 18f64.sqrt();
        reachable_set(&h, &x0, &[-lim, -lim], &[0.0, 0.0]).unwrap()
    }

    #[test]
    fn deadline_bound_closed_forms() {
        assert_relative_eq!(k_lower_bound(1.0, -1.0, 6.0).unwrap(), 2f64.ln() / 6.0, epsilon = 1e-12);
        assert_relative_eq!(k_lower_bound(1.0, -17.0, 6.0).unwrap(), 18f64.ln() / 6.0, epsilon = 1e-12);
        // As the initial violation vanishes, so does the required gain.
        assert!(k_lower_bound(1.0, -1e-12, 6.0).unwrap() < 1e-9);
    }

    #[test]
    fn deadline_bound_matches_envelope_integration() {
        // Independent check: integrate the envelope dV/dt = -kV from
        // V(0) = r - h0 with k at the bound; V(t_f) must land on r.
        let (r, h0, t_f) = (1.0, -17.0, 6.0);
        let k = k_lower_bound(r, h0, t_f).unwrap();
        let mut v: f64 = r - h0;
        let dt = 1e-4;
        let steps = (t_f / dt) as usize;
        for _ in 0..steps {
            // RK4 on the scalar linear ODE.
            let f = |v: f64| -k * v;
            let k1 = f(v);
            let k2 = f(v + 0.5 * dt * k1);
            let k3 = f(v + 0.5 * dt * k2);
            let k4 = f(v + dt * k3);
            v += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert_relative_eq!(v, r, epsilon = 1e-6);
    }

    #[test]
    fn deadline_bound_rejects_bad_domains() {
        assert!(k_lower_bound(0.0, -1.0, 6.0).is_err());
        assert!(k_lower_bound(-1.0, -1.0, 6.0).is_err());
        assert!(k_lower_bound(1.0, 0.0, 6.0).is_err());
        assert!(k_lower_bound(1.0, 1.0, 6.0).is_err());
        assert!(k_lower_bound(1.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn actuation_bound_at_the_case_study_start() {
        let (h, sys, bounds, x0) = case_study();
        let k_max = k_upper_bound_initial(&h, &sys, &bounds, &x0, 1.0);
        // Row gradient (6, 6), box corner worth 24, violation depth 18.
        assert_relative_eq!(k_max, 4.0 / 3.0, epsilon = 1e-12);

        let unbounded = ControlBounds::unbounded(2);
        assert!(k_upper_bound_initial(&h, &sys, &unbounded, &x0, 1.0).is_infinite());

        // Starting inside the strengthened set there is nothing to bound.
        let inside = DVector::from_vec(vec![0.0, 0.0]);
        assert!(k_upper_bound_initial(&h, &sys, &bounds, &inside, 1.0).is_infinite());
    }

    #[test]
    fn no_control_authority_empties_the_interval() {
        use crate::model::ConstraintFunction;
        // Gradient vanishing at the start with zero drift: no gain works.
        let flat = ConstraintFunction::degree_one(
            "dome",
            |x: &StateVector| -x.norm_squared() - 1.0,
            |x: &StateVector| -2.0 * x,
        );
        let sys = single_integrator_2d();
        let bounds = ControlBounds::symmetric(&[2.0, 2.0]).unwrap();
        let x0 = DVector::zeros(2);
        let iv = feasible_k_interval(&flat, &sys, &bounds, &x0, 1.0, 6.0).unwrap();
        assert_eq!(iv.k_max, 0.0);
        assert!(!iv.nonempty);
    }

    #[test]
    fn case_study_interval() {
        let (h, sys, bounds, x0) = case_study();
        let iv = feasible_k_interval(&h, &sys, &bounds, &x0, 1.0, 6.0).unwrap();
        assert_relative_eq!(iv.k_min, 18f64.ln() / 6.0, epsilon = 1e-9);
        assert_relative_eq!(iv.k_max, 4.0 / 3.0, epsilon = 1e-9);
        assert!(iv.nonempty);
        assert!(iv.midpoint() > iv.k_min && iv.midpoint() < iv.k_max);

        // A quarter of the actuation empties it: 6/18 < ln(18)/6.
        let weak = ControlBounds::symmetric(&[0.5, 0.5]).unwrap();
        let iv = feasible_k_interval(&h, &sys, &weak, &x0, 1.0, 6.0).unwrap();
        assert_relative_eq!(iv.k_max, 1.0 / 3.0, epsilon = 1e-12);
        assert!(!iv.nonempty);

        // An instantaneous deadline cannot be met.
        let iv = feasible_k_interval(&h, &sys, &bounds, &x0, 1.0, 1e-9).unwrap();
        assert!(!iv.nonempty);
    }

    #[test]
    fn deadline_bound_decreases_in_r() {
        let mut prev = f64::INFINITY;
        for r in [0.5, 1.0, 1.5, 2.0, 3.0] {
            let k = k_lower_bound(r, -17.0, 6.0).unwrap();
            assert!(k < prev, "bound must fall as the margin grows");
            prev = k;
        }
    }

    #[test]
    fn band_membership() {
        let (h, _, _, x0) = case_study();
        let set = reachable_set(&h, &x0, &[-5.0, -5.0], &[5.0, 5.0]).unwrap();
        assert_eq!(set.h_lower, -17.0);
        assert_eq!(set.h_upper, 0.0);
        assert!(set.contains(&x0));
        // Goal interior (h = 1 > 0) and far field (h < -17) are out.
        assert!(!set.contains(&DVector::from_vec(vec![0.0, 0.0])));
        assert!(!set.contains(&DVector::from_vec(vec![4.0, 4.0])));
        // Ring radius 3: h = -8, inside the band.
        assert!(set.contains(&DVector::from_vec(vec![3.0, 0.0])));

        let inside = DVector::from_vec(vec![0.1, 0.0]);
        assert!(reachable_set(&h, &inside, &[-5.0, -5.0], &[5.0, 5.0]).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_in_set() {
        let set = quadrant_band();
        let a = set.sample(200, 9).unwrap();
        let b = set.sample(200, 9).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p[0].to_bits(), q[0].to_bits());
            assert_eq!(p[1].to_bits(), q[1].to_bits());
        }
        assert!(a.iter().all(|y| set.contains(y)));
        let c = set.sample(200, 10).unwrap();
        assert!(a.iter().zip(&c).any(|(p, q)| p != q));
    }

    #[test]
    fn sampler_exhausts_on_disjoint_box() {
        let (h, _, _, x0) = case_study();
        let set = reachable_set(&h, &x0, &[10.0, 10.0], &[11.0, 11.0]).unwrap();
        assert!(set.sample(5, 0).is_err());
    }

    #[test]
    fn sampled_check_on_the_quadrant_band() {
        // Geometry of the quadrant band for the goal disk: with gain k the
        // per-sample margin at radius rho and direction cosines summing to c
        // is 4*rho*c - k*rho^2 (c in [1, sqrt(2)]).
        let (h, sys, bounds, _) = case_study();
        let set = quadrant_band();

        // k = 0.22 clears even the decoupled test: the drift side is at
        // worst -18k = -3.96, actuation supply is at least 4 everywhere.
        let ok = check_validity_sampled(&spec_with_k(&h, 1.0, 0.22), &sys, &bounds, &set, 10_000, 7)
            .unwrap();
        assert!(ok.decoupled_pass);
        assert!(ok.pointwise_pass);
        assert!(ok.margin > 0.0);
        assert_eq!(ok.mode, CheckMode::Sampled);
        assert_eq!(ok.samples, 10_000);

        // k = 0.4 fails decoupled (-7.2 < -4) yet passes everywhere
        // pointwise: 4*rho*c - 0.4*rho^2 > 0 for rho <= sqrt(18), c >= 1.
        let gap = check_validity_sampled(&spec_with_k(&h, 1.0, 0.4), &sys, &bounds, &set, 10_000, 7)
            .unwrap();
        assert!(!gap.decoupled_pass);
        assert!(gap.pointwise_pass);

        // k = 1 fails pointwise near the axes at large radius, where the
        // margin bottoms out at 4*sqrt(18) - 18 ~ -1.03; the sampled minimum
        // lands close to that.
        let bad = check_validity_sampled(&spec_with_k(&h, 1.0, 1.0), &sys, &bounds, &set, 10_000, 7)
            .unwrap();
        assert!(!bad.pointwise_pass);
        assert!(!bad.decoupled_pass);
        assert!(bad.margin > -1.0295 && bad.margin < -0.2, "margin = {}", bad.margin);
        let w = DVector::from_row_slice(&bad.worst_state);
        assert!(w.norm_squared() > 14.0, "worst state sits at large radius, got {w}");
        assert!(w[0].abs().min(w[1].abs()) < 1.3, "worst state hugs an axis, got {w}");
    }

    #[test]
    fn unbounded_control_always_passes() {
        let (h, sys, _, _) = case_study();
        let set = quadrant_band();
        let free = ControlBounds::unbounded(2);
        let rep =
            check_validity_sampled(&spec_with_k(&h, 1.0, 50.0), &sys, &free, &set, 500, 3).unwrap();
        assert!(rep.decoupled_pass && rep.pointwise_pass);
    }

    #[test]
    fn initial_check_brackets_the_fast_path_bound() {
        let (h, sys, bounds, x0) = case_study();
        let k_max = k_upper_bound_initial(&h, &sys, &bounds, &x0, 1.0);

        let at = |k: f64| check_validity_initial(&spec_with_k(&h, 1.0, k), &sys, &bounds, &x0);
        let tight = at(k_max);
        assert!(tight.pointwise_pass);
        assert!(tight.margin.abs() < 1e-9);
        assert_eq!(tight.mode, CheckMode::InitialState);

        let under = at(0.999 * k_max);
        assert!(under.pointwise_pass && under.decoupled_pass);

        let over = at(1.01 * k_max);
        assert!(!over.pointwise_pass);
        // Margin overshoot: 0.01 * k_max * 18 = 0.24 past the boundary.
        assert_relative_eq!(over.margin, -0.24, epsilon = 1e-9);
        assert_eq!(over.worst_state, vec![-3.0, -3.0]);
    }

    #[test]
    fn fast_path_brackets_hold_over_random_starts() {
        use rand::Rng;
        use rand::SeedableRng;
        let (h, sys, bounds, _) = case_study();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut tested = 0;
        while tested < 100 {
            let x0 = DVector::from_vec(vec![
                rng.random_range(-18f64.sqrt()..0.0),
                rng.random_range(-18f64.sqrt()..0.0),
            ]);
            let hv = h.value(&x0);
            if !(-17.0..0.0).contains(&hv) {
                continue;
            }
            tested += 1;
            let k_max = k_upper_bound_initial(&h, &sys, &bounds, &x0, 1.0);
            assert!(k_max.is_finite() && k_max > 0.0);
            let under =
                check_validity_initial(&spec_with_k(&h, 1.0, 0.999 * k_max), &sys, &bounds, &x0);
            assert!(under.pointwise_pass, "at {x0}");
            let over =
                check_validity_initial(&spec_with_k(&h, 1.0, 1.01 * k_max), &sys, &bounds, &x0);
            assert!(!over.pointwise_pass, "at {x0}");
        }
    }

    #[test]
    fn report_serializes_snake_case() {
        let (h, sys, bounds, x0) = case_study();
        let rep = check_validity_initial(&spec_with_k(&h, 1.0, 1.0), &sys, &bounds, &x0);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"mode\":\"initial-state\""));
        assert!(json.contains("\"decoupled_pass\""));
        assert!(json.contains("\"pointwise_pass\""));
        let back: FeasibilityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.samples, 1);
    }

    proptest! {
        // On a shared sample set the decoupled test can never pass where
        // the pointwise one fails: min drift >= max demand forces
        // drift(y) + supply(y) >= 0 at each y.
        #[test]
        fn decoupled_pass_implies_pointwise_pass(
            k in 0.05f64..2.0,
            r in 0.1f64..2.0,
            seed in 0u64..500,
        ) {
            let (h, sys, bounds, _) = case_study();
            let set = quadrant_band();
            let spec = spec_with_k(&h, r, k);
            let rep = check_validity_sampled(&spec, &sys, &bounds, &set, 400, seed).unwrap();
            if rep.decoupled_pass {
                prop_assert!(rep.pointwise_pass);
            }
        }
    }
}
