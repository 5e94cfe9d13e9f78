//! Barrier-row construction.
//!
//! Every builder reduces a state constraint to the same normal form on the
//! control at the current state,
//!
//! ```text
//!     coeff . u + offset >= 0,
//! ```
//!
//! so the per-step QP treats goal rows and safety rows identically. Four
//! constructions are provided:
//!
//! * [`build_cbf`] — linear class-K barrier for relative degree one,
//!   `L_f b + L_g b . u + slope * b >= 0`;
//! * [`build_hocbf`] — the recursive high-order extension with one linear
//!   gain per degree, collapsing to `build_cbf` at degree one;
//! * [`build_clbf`] — fractional-power convergence row
//!   `L_f h + L_g h . u + p * sign(h)|h|^q >= 0`;
//! * [`build_fccbf`] — shifted linear row `L_f s + L_g s . u + k s >= 0`
//!   with `s = h - r`, which drives `h` above `r > 0` (strictly inside the
//!   goal set) along an exponential envelope and therefore reaches `h >= 0`
//!   in finite time whenever `r >= (r - h(x0)) exp(-k t_f)`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{lie_f, lie_g, ConstraintFunction, StateVector, SystemModel};

/// A linear constraint `coeff . u + offset >= 0` on the control.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearControlConstraint {
    pub coeff: DVector<f64>,
    pub offset: f64,
    /// Label used for relaxation policy and reporting ("goal", obstacle
    /// names, ...).
    pub tag: String,
}

/// High-order barrier description: one positive linear gain per relative
/// degree.
#[derive(Clone, Debug)]
pub struct HocbfSpec {
    pub constraint: ConstraintFunction,
    pub slopes: Vec<f64>,
}

impl HocbfSpec {
    pub fn new(constraint: ConstraintFunction, slopes: Vec<f64>) -> Result<Self> {
        if slopes.len() != constraint.relative_degree {
            return Err(Error::Config(format!(
                "constraint '{}' has relative degree {} but {} slope(s) were given",
                constraint.name,
                constraint.relative_degree,
                slopes.len()
            )));
        }
        if slopes.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::Config("barrier slopes must be positive and finite".into()));
        }
        Ok(HocbfSpec { constraint, slopes })
    }
}

/// Fractional-power convergence row parameters; requires `p > 0` and
/// `0 < q_exp < 1`.
#[derive(Clone, Debug)]
pub struct ClbfSpec {
    pub constraint: ConstraintFunction,
    pub p: f64,
    pub q_exp: f64,
}

impl ClbfSpec {
    pub fn new(constraint: ConstraintFunction, p: f64, q_exp: f64) -> Result<Self> {
        if constraint.relative_degree != 1 {
            return Err(Error::Config(format!(
                "convergence rows need relative degree one, '{}' has {}",
                constraint.name, constraint.relative_degree
            )));
        }
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::Config(format!("p must be positive and finite, got {p}")));
        }
        if !(q_exp.is_finite() && q_exp > 0.0 && q_exp < 1.0) {
            return Err(Error::Config(format!("q_exp must lie in (0, 1), got {q_exp}")));
        }
        Ok(ClbfSpec { constraint, p, q_exp })
    }

    /// Upper bound on the time to reach `h >= 0` from `h0 < 0` under the
    /// row: `|h0|^(1-q) / (p (1-q))`.
    pub fn settling_time(&self, h0: f64) -> f64 {
        h0.abs().powf(1.0 - self.q_exp) / (self.p * (1.0 - self.q_exp))
    }

    /// `p` that makes the settling-time bound equal `t_f` from `h0`.
    pub fn p_for_deadline(h0: f64, q_exp: f64, t_f: f64) -> Result<f64> {
        if !(h0 < 0.0) {
            return Err(Error::Domain(format!("initial value must be negative, got {h0}")));
        }
        if !(q_exp > 0.0 && q_exp < 1.0) {
            return Err(Error::Domain(format!("q_exp must lie in (0, 1), got {q_exp}")));
        }
        if !(t_f > 0.0) {
            return Err(Error::Domain(format!("t_f must be positive, got {t_f}")));
        }
        Ok(h0.abs().powf(1.0 - q_exp) / (t_f * (1.0 - q_exp)))
    }
}

/// Shifted-boundary finite-time row parameters; requires `r > 0`, `k > 0`,
/// `t_f > 0`.
#[derive(Clone, Debug)]
pub struct FccbfSpec {
    pub constraint: ConstraintFunction,
    /// Interior margin: the row drives `h` toward `r`, strictly inside the
    /// goal set.
    pub r: f64,
    /// Exponential rate of the envelope `r - h(t) <= (r - h(0)) exp(-k t)`.
    pub k: f64,
    /// Deadline the finite-time condition is checked against.
    pub t_f: f64,
}

impl FccbfSpec {
    pub fn new(constraint: ConstraintFunction, r: f64, k: f64, t_f: f64) -> Result<Self> {
        if constraint.relative_degree != 1 {
            return Err(Error::Config(format!(
                "finite-time rows need relative degree one, '{}' has {}",
                constraint.name, constraint.relative_degree
            )));
        }
        for (label, v) in [("r", r), ("k", k), ("t_f", t_f)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{label} must be positive and finite, got {v}")));
            }
        }
        Ok(FccbfSpec { constraint, r, k, t_f })
    }

    /// Finite-time reachability from `h0`: `r >= (r - h0) exp(-k t_f)`.
    /// Guarantees `h(t_f) >= 0` along any trajectory satisfying the row.
    pub fn finite_time_ok(&self, h0: f64) -> bool {
        self.r >= (self.r - h0) * (-self.k * self.t_f).exp() - 1e-12
    }
}

/// `sign(v) |v|^q`; the odd extension of the fractional power, so negative
/// constraint values produce negative restoring terms instead of NaN.
pub fn signed_pow(v: f64, q: f64) -> f64 {
    v.signum() * v.abs().powf(q)
}

/// Linear class-K barrier row for a relative-degree-one constraint:
/// `L_g b . u + (L_f b + slope * b) >= 0`.
pub fn build_cbf(
    c: &ConstraintFunction,
    slope: f64,
    sys: &SystemModel,
    x: &StateVector,
) -> Result<LinearControlConstraint> {
    if c.relative_degree != 1 {
        return Err(Error::Config(format!(
            "build_cbf needs relative degree one, '{}' has {}",
            c.name, c.relative_degree
        )));
    }
    if !(slope.is_finite() && slope > 0.0) {
        return Err(Error::Config(format!("slope must be positive and finite, got {slope}")));
    }
    Ok(LinearControlConstraint {
        coeff: lie_g(c, sys, x),
        offset: lie_f(c, sys, x) + slope * c.value(x),
        tag: c.name.clone(),
    })
}

/// High-order barrier row. With linear gains the recursion
/// `psi_i = psi_{i-1}' + a_i psi_{i-1}` keeps every intermediate function a
/// linear combination of the drift derivatives `L_f^j b`, so the final row
/// is assembled from the constraint's chain evaluators:
/// `L_g psi_{m-1} . u + (L_f psi_{m-1} + a_m psi_{m-1}) >= 0`.
pub fn build_hocbf(
    spec: &HocbfSpec,
    sys: &SystemModel,
    x: &StateVector,
) -> Result<LinearControlConstraint> {
    let c = &spec.constraint;
    let m = c.relative_degree;

    // weights[j] multiplies L_f^j b inside psi_{m-1}; applying
    // (d/dt + a_i) shifts every term up one drift level and adds the scaled
    // copy. Terms below the last level carry no control, which is exactly
    // the relative-degree assumption.
    let mut weights = vec![0.0; m];
    weights[0] = 1.0;
    for &a in &spec.slopes[..m - 1] {
        let mut next = vec![0.0; m];
        for j in 0..m - 1 {
            next[j + 1] += weights[j];
            next[j] += a * weights[j];
        }
        next[m - 1] += a * weights[m - 1];
        weights = next;
    }

    let mut psi = 0.0;
    let mut grad_psi = DVector::zeros(sys.state_dim);
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        psi += w * c.lie_value(j, x);
        grad_psi += w * c.lie_gradient(j, x);
    }

    let lf_psi = grad_psi.dot(&sys.drift(x));
    let lg_psi = sys.actuation(x).transpose() * grad_psi;
    Ok(LinearControlConstraint {
        coeff: lg_psi,
        offset: lf_psi + spec.slopes[m - 1] * psi,
        tag: c.name.clone(),
    })
}

/// Fractional-power convergence row:
/// `L_g h . u + (L_f h + p sign(h)|h|^q) >= 0`.
pub fn build_clbf(
    spec: &ClbfSpec,
    sys: &SystemModel,
    x: &StateVector,
) -> LinearControlConstraint {
    let c = &spec.constraint;
    LinearControlConstraint {
        coeff: lie_g(c, sys, x),
        offset: lie_f(c, sys, x) + spec.p * signed_pow(c.value(x), spec.q_exp),
        tag: c.name.clone(),
    }
}

/// Finite-time row on the shifted constraint `s = h - r`:
/// `L_g s . u + (L_f s + k s) >= 0`. The shift leaves derivatives untouched,
/// so the row is assembled directly from `h`.
pub fn build_fccbf(
    spec: &FccbfSpec,
    sys: &SystemModel,
    x: &StateVector,
) -> LinearControlConstraint {
    let c = &spec.constraint;
    LinearControlConstraint {
        coeff: lie_g(c, sys, x),
        offset: lie_f(c, sys, x) + spec.k * (c.value(x) - spec.r),
        tag: c.name.clone(),
    }
}
