//! Control-affine system models and state constraints.
//!
//! A [`SystemModel`] describes dynamics `x' = f(x) + g(x) u`. A
//! [`ConstraintFunction`] is a scalar function of the state whose
//! nonnegative set is the region of interest (safe set or goal set). Both
//! carry exact derivative evaluators, so nothing in the control path falls
//! back to numerical differentiation. Constraints of relative degree two or
//! higher additionally carry the drift-derivative chain `L_f^i` that the
//! high-order barrier construction consumes.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type StateVector = DVector<f64>;
pub type ControlVector = DVector<f64>;

type ScalarFn = Arc<dyn Fn(&StateVector) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&StateVector) -> DVector<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&StateVector) -> DMatrix<f64> + Send + Sync>;

/// Control-affine dynamics `x' = f(x) + g(x) u`.
#[derive(Clone)]
pub struct SystemModel {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    drift: VectorFn,
    actuation: MatrixFn,
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        drift: impl Fn(&StateVector) -> DVector<f64> + Send + Sync + 'static,
        actuation: impl Fn(&StateVector) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        SystemModel {
            name: name.into(),
            state_dim,
            control_dim,
            drift: Arc::new(drift),
            actuation: Arc::new(actuation),
        }
    }

    /// `f(x)`. Panics on a state of the wrong dimension (programmer error).
    pub fn drift(&self, x: &StateVector) -> DVector<f64> {
        assert_eq!(x.len(), self.state_dim, "state dimension mismatch");
        let f = (self.drift)(x);
        debug_assert_eq!(f.len(), self.state_dim);
        f
    }

    /// `g(x)` as an `n x q` matrix.
    pub fn actuation(&self, x: &StateVector) -> DMatrix<f64> {
        assert_eq!(x.len(), self.state_dim, "state dimension mismatch");
        let g = (self.actuation)(x);
        debug_assert_eq!((g.nrows(), g.ncols()), (self.state_dim, self.control_dim));
        g
    }
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .finish()
    }
}

/// One level of the drift-derivative chain: `L_f^i value` and its gradient.
#[derive(Clone)]
pub struct LieLevel {
    value: ScalarFn,
    gradient: VectorFn,
}

impl LieLevel {
    pub fn new(
        value: impl Fn(&StateVector) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&StateVector) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        LieLevel { value: Arc::new(value), gradient: Arc::new(gradient) }
    }
}

/// Scalar state constraint with exact derivatives; `value(x) >= 0` is the
/// set the constraint protects or targets.
#[derive(Clone)]
pub struct ConstraintFunction {
    pub name: String,
    /// Number of derivatives along the dynamics before the control appears.
    pub relative_degree: usize,
    value: ScalarFn,
    gradient: VectorFn,
    /// `L_f^i value` for `i = 1..relative_degree - 1`; empty at degree one.
    lie_chain: Vec<LieLevel>,
}

impl ConstraintFunction {
    /// Relative-degree-one constraint: the control acts on the first
    /// derivative directly.
    pub fn degree_one(
        name: impl Into<String>,
        value: impl Fn(&StateVector) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&StateVector) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        ConstraintFunction {
            name: name.into(),
            relative_degree: 1,
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            lie_chain: Vec::new(),
        }
    }

    /// Higher relative degree; `lie_chain[i]` must evaluate `L_f^{i+1}` of
    /// the value, up to level `relative_degree - 1`.
    pub fn with_lie_chain(
        name: impl Into<String>,
        relative_degree: usize,
        value: impl Fn(&StateVector) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&StateVector) -> DVector<f64> + Send + Sync + 'static,
        lie_chain: Vec<LieLevel>,
    ) -> Result<Self> {
        if relative_degree == 0 {
            return Err(Error::Config("relative degree must be at least one".into()));
        }
        if lie_chain.len() + 1 != relative_degree {
            return Err(Error::Config(format!(
                "relative degree {} needs {} chain level(s), got {}",
                relative_degree,
                relative_degree - 1,
                lie_chain.len()
            )));
        }
        Ok(ConstraintFunction {
            name: name.into(),
            relative_degree,
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            lie_chain,
        })
    }

    pub fn value(&self, x: &StateVector) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &StateVector) -> DVector<f64> {
        (self.gradient)(x)
    }

    /// `L_f^level value`; level 0 is the value itself. Panics above
    /// `relative_degree - 1` (the chain is not defined there).
    pub fn lie_value(&self, level: usize, x: &StateVector) -> f64 {
        if level == 0 {
            return self.value(x);
        }
        (self.lie_chain[level - 1].value)(x)
    }

    /// Gradient of `L_f^level value`.
    pub fn lie_gradient(&self, level: usize, x: &StateVector) -> DVector<f64> {
        if level == 0 {
            return self.gradient(x);
        }
        (self.lie_chain[level - 1].gradient)(x)
    }
}

impl fmt::Debug for ConstraintFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintFunction")
            .field("name", &self.name)
            .field("relative_degree", &self.relative_degree)
            .finish()
    }
}

/// Drift derivative `L_f c(x) = grad c(x) . f(x)`.
pub fn lie_f(c: &ConstraintFunction, sys: &SystemModel, x: &StateVector) -> f64 {
    c.gradient(x).dot(&sys.drift(x))
}

/// Actuation derivative `L_g c(x) = g(x)^T grad c(x)`, one entry per control
/// channel. A zero gradient yields the zero row; callers decide whether that
/// is degenerate.
pub fn lie_g(c: &ConstraintFunction, sys: &SystemModel, x: &StateVector) -> DVector<f64> {
    sys.actuation(x).transpose() * c.gradient(x)
}

/// Confirms the declared relative degree on the given samples: the control
/// must stay invisible on every chain level below the last
/// (`|L_g L_f^i c| <= 1e-9`) and must act on the last level at every sample.
/// A sample where the last level vanishes (a degenerate point such as a
/// gradient zero) makes the check return `false` rather than an error.
pub fn check_relative_degree(
    c: &ConstraintFunction,
    sys: &SystemModel,
    samples: &[StateVector],
) -> Result<bool> {
    if samples.is_empty() {
        return Err(Error::Config("check_relative_degree needs at least one sample".into()));
    }
    const TOL: f64 = 1e-9;
    for x in samples {
        for level in 0..c.relative_degree {
            let row = sys.actuation(x).transpose() * c.lie_gradient(level, x);
            let mag = row.amax();
            let last = level + 1 == c.relative_degree;
            if last && mag <= TOL {
                return Ok(false);
            }
            if !last && mag > TOL {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Componentwise box on the control; entries may be infinite.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlBounds {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl ControlBounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension(format!(
                "control bounds lengths differ: {} vs {}",
                lower.len(),
                upper.len()
            )));
        }
        for j in 0..lower.len() {
            if lower[j].is_nan() || upper[j].is_nan() || lower[j] > upper[j] {
                return Err(Error::Config(format!(
                    "invalid control bounds on channel {}: [{}, {}]",
                    j, lower[j], upper[j]
                )));
            }
        }
        Ok(ControlBounds { lower, upper })
    }

    /// Symmetric box `|u_j| <= magnitudes[j]`.
    pub fn symmetric(magnitudes: &[f64]) -> Result<Self> {
        let upper = DVector::from_row_slice(magnitudes);
        ControlBounds::new(-&upper, upper)
    }

    pub fn unbounded(dim: usize) -> Self {
        ControlBounds {
            lower: DVector::from_element(dim, f64::NEG_INFINITY),
            upper: DVector::from_element(dim, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// Largest bound excess over all channels; zero inside the box.
    pub fn violation(&self, u: &ControlVector) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.dim() {
            worst = worst.max(self.lower[j] - u[j]).max(u[j] - self.upper[j]);
        }
        worst
    }

    pub fn contains(&self, u: &ControlVector, tol: f64) -> bool {
        self.violation(u) <= tol
    }

    pub fn clamp(&self, u: &ControlVector) -> ControlVector {
        DVector::from_fn(self.dim(), |j, _| u[j].clamp(self.lower[j], self.upper[j]))
    }

    /// Support function `max { c . u : u in box }`, attained componentwise
    /// at a vertex. Zero coefficients contribute nothing even on unbounded
    /// channels.
    pub fn support(&self, c: &DVector<f64>) -> f64 {
        assert_eq!(c.len(), self.dim(), "coefficient dimension mismatch");
        let mut total = 0.0;
        for j in 0..self.dim() {
            if c[j] > 0.0 {
                total += c[j] * self.upper[j];
            } else if c[j] < 0.0 {
                total += c[j] * self.lower[j];
            }
        }
        total
    }
}

/// Planar single integrator `x' = u`.
pub fn single_integrator_2d() -> SystemModel {
    SystemModel::new(
        "single-integrator-2d",
        2,
        2,
        |_| DVector::zeros(2),
        |_| DMatrix::identity(2, 2),
    )
}

/// One-dimensional double integrator with state `(position, velocity)` and
/// acceleration input.
pub fn double_integrator_1d() -> SystemModel {
    SystemModel::new(
        "double-integrator-1d",
        2,
        1,
        |x| DVector::from_vec(vec![x[1], 0.0]),
        |_| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
    )
}

/// Disk obstacle `b(x) = ||x - center||^2 - radius^2`, nonnegative outside
/// the disk.
pub fn circle_obstacle(name: impl Into<String>, center: [f64; 2], radius: f64) -> ConstraintFunction {
    let [cx, cy] = center;
    ConstraintFunction::degree_one(
        name,
        move |x| (x[0] - cx).powi(2) + (x[1] - cy).powi(2) - radius * radius,
        move |x| DVector::from_vec(vec![2.0 * (x[0] - cx), 2.0 * (x[1] - cy)]),
    )
}

/// Goal disk `h(x) = radius^2 - ||x - center||^2`, nonnegative inside.
pub fn goal_disk(center: [f64; 2], radius: f64) -> ConstraintFunction {
    let [cx, cy] = center;
    ConstraintFunction::degree_one(
        "goal",
        move |x| radius * radius - (x[0] - cx).powi(2) - (x[1] - cy).powi(2),
        move |x| DVector::from_vec(vec![-2.0 * (x[0] - cx), -2.0 * (x[1] - cy)]),
    )
}

/// Floor constraint `b(x) = position - floor` for the 1-D double
/// integrator; the control only appears in the second derivative.
pub fn position_wall(floor: f64) -> ConstraintFunction {
    ConstraintFunction::with_lie_chain(
        "wall",
        2,
        move |x| x[0] - floor,
        |_| DVector::from_vec(vec![1.0, 0.0]),
        vec![LieLevel::new(|x| x[1], |_| DVector::from_vec(vec![0.0, 1.0]))],
    )
    .expect("chain length matches degree")
}
