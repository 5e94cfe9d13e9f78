//! Per-step control filter: a small dense strictly convex QP
//!
//! ```text
//!     minimize   u' H u
//!     subject to coeff_i . u + offset_i >= 0   (barrier rows)
//!                lower <= u <= upper           (control bounds)
//! ```
//!
//! solved by a dual active-set method. Iterates start at the unconstrained
//! minimum and pull in one violated constraint at a time, staying optimal
//! for the current working set; primal infeasibility surfaces as an
//! unbounded dual step, so the certificate is exact and no phase-1 solve is
//! needed. Problems here are tiny (a couple of controls, a handful of
//! rows), so every working-set change simply refactors dense matrices.
//!
//! When the strict problem is infeasible, rows whose tags are listed as
//! relaxable get a quadratic slack (`coeff . u + offset + d >= 0`, `d >= 0`)
//! penalized by [`RELAXATION_WEIGHT`]; bounds are never relaxed. If even the
//! relaxed problem is infeasible the solution degrades to a clamped fallback
//! control with status [`QpStatus::InfeasibleHard`].

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};
use serde::{Deserialize, Serialize};

use crate::barriers::LinearControlConstraint;
use crate::error::{Error, Result};
use crate::model::{ControlBounds, ControlVector};

/// Quadratic penalty weight on relaxation slacks.
pub const RELAXATION_WEIGHT: f64 = 1e6;

/// A constraint residual smaller than this counts as satisfied inside the
/// active-set loop. Final solutions are validated to 1e-9.
const FEAS_TOL: f64 = 1e-10;
/// Threshold below which a projected step direction counts as zero.
const STEP_TOL: f64 = 1e-13;
/// Threshold for a multiplier update direction to block a dual step.
const DUAL_TOL: f64 = 1e-12;
/// Row residual below which the row is reported active.
const ACTIVE_TOL: f64 = 1e-9;
/// Residual guard for the slack-extended solve. Its Hessian mixes unit-scale
/// curvature with the 1e6 penalty, so residuals carry the conditioning.
const RELAXED_GUARD_TOL: f64 = 1e-6;
/// A slack above this makes the solution count as relaxed.
const SLACK_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    #[serde(rename = "optimal")]
    Optimal,
    #[serde(rename = "relaxed")]
    Relaxed,
    #[serde(rename = "infeasible-hard")]
    InfeasibleHard,
}

impl fmt::Display for QpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Relaxed => "relaxed",
            QpStatus::InfeasibleHard => "infeasible-hard",
        })
    }
}

impl QpStatus {
    pub fn parse(s: &str) -> Option<QpStatus> {
        match s {
            "optimal" => Some(QpStatus::Optimal),
            "relaxed" => Some(QpStatus::Relaxed),
            "infeasible-hard" => Some(QpStatus::InfeasibleHard),
            _ => None,
        }
    }
}

/// Validated problem data. Construction checks symmetry and positive
/// definiteness of the Hessian and dimensional consistency of every row.
#[derive(Clone, Debug)]
pub struct QpProblem {
    hessian: DMatrix<f64>,
    rows: Vec<LinearControlConstraint>,
    bounds: ControlBounds,
    relax_tags: Vec<String>,
}

impl QpProblem {
    pub fn new(
        hessian: DMatrix<f64>,
        rows: Vec<LinearControlConstraint>,
        bounds: ControlBounds,
        relax_tags: Vec<String>,
    ) -> Result<Self> {
        let q = bounds.dim();
        if hessian.nrows() != q || hessian.ncols() != q {
            return Err(Error::Dimension(format!(
                "hessian is {}x{} but the control has {} channel(s)",
                hessian.nrows(),
                hessian.ncols(),
                q
            )));
        }
        if hessian.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("hessian entries must be finite".into()));
        }
        let asym = (&hessian - hessian.transpose()).amax();
        if asym > 1e-12 * (1.0 + hessian.amax()) {
            return Err(Error::Config("hessian must be symmetric".into()));
        }
        if Cholesky::new(hessian.clone()).is_none() {
            return Err(Error::Config("hessian must be positive definite".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.coeff.len() != q {
                return Err(Error::Dimension(format!(
                    "row {} ('{}') has {} coefficient(s), expected {}",
                    i,
                    row.tag,
                    row.coeff.len(),
                    q
                )));
            }
            if row.coeff.iter().any(|v| !v.is_finite()) || !row.offset.is_finite() {
                return Err(Error::Config(format!("row {} ('{}') has non-finite data", i, row.tag)));
            }
        }
        Ok(QpProblem { hessian, rows, bounds, relax_tags })
    }

    pub fn control_dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn rows(&self) -> &[LinearControlConstraint] {
        &self.rows
    }

    pub fn bounds(&self) -> &ControlBounds {
        &self.bounds
    }

    pub fn relax_tags(&self) -> &[String] {
        &self.relax_tags
    }

    /// Indices of rows eligible for relaxation, in row order.
    fn relaxable_rows(&self) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, row)| self.relax_tags.iter().any(|t| t == &row.tag))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub status: QpStatus,
    pub u: ControlVector,
    /// One entry per row; zero everywhere except relaxed rows.
    pub slacks: Vec<f64>,
    /// `u' H u` at the returned control (slack penalty excluded).
    pub objective: f64,
    /// Indices of rows active at the solution (residual within 1e-9,
    /// including any slack), ascending.
    pub active_set: Vec<usize>,
}

/// Stateless full pipeline: strict solve, then relaxation of eligible rows,
/// then the clamped-zero fallback. See [`QpSolver`] for the variant that
/// remembers the previous control for the fallback.
pub fn solve(p: &QpProblem) -> Result<QpSolution> {
    solve_with_fallback(p, None)
}

/// Relaxation stage of [`solve`]. The strict problem is attempted first so
/// that a feasible problem passes through untouched (identical control,
/// zero slacks); callers normally reach this only after `solve` has
/// determined strict infeasibility.
pub fn solve_relaxed(p: &QpProblem) -> Result<QpSolution> {
    solve_with_fallback(p, None)
}

/// Per-simulation solver handle. Solves are pure functions of the problem;
/// the handle only remembers the last successful control so that an
/// infeasible-hard step can fall back to its clamp instead of zero.
#[derive(Debug, Default)]
pub struct QpSolver {
    previous: Option<ControlVector>,
}

impl QpSolver {
    pub fn new() -> Self {
        QpSolver { previous: None }
    }

    pub fn solve(&mut self, p: &QpProblem) -> Result<QpSolution> {
        let sol = solve_with_fallback(p, self.previous.as_ref())?;
        if sol.status != QpStatus::InfeasibleHard {
            self.previous = Some(sol.u.clone());
        }
        Ok(sol)
    }
}

// ─── internal solver ─────────────────────────────────────────────────────

/// Normalized linear constraint `normal . v >= rhs` on the solver variable.
#[derive(Clone, Debug)]
struct NormConstraint {
    normal: DVector<f64>,
    rhs: f64,
}

enum GiOutcome {
    Optimal { v: DVector<f64> },
    Infeasible,
}

/// Solve `W y = b` by Cholesky (LU fallback) with one iterative-refinement
/// pass; `W` is the working-set Gram matrix and is often nearly singular
/// when two constraint normals are close to antiparallel.
fn refined_solve(w: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(w.clone());
    let direct = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
        match &chol {
            Some(c) => Some(c.solve(rhs)),
            None => w.clone().lu().solve(rhs),
        }
    };
    let mut y =
        direct(b).ok_or_else(|| Error::Numerical("working set became singular".into()))?;
    if let Some(dy) = direct(&(b - w * &y)) {
        y += dy;
    }
    Ok(y)
}

/// Dual active-set loop for `min 1/2 v' G v` subject to the constraint set.
/// `G` must be positive definite; normals must be unit length.
fn gi_solve(g: &DMatrix<f64>, constraints: &[NormConstraint]) -> Result<GiOutcome> {
    let chol = Cholesky::new(g.clone())
        .ok_or_else(|| Error::Numerical("solver Hessian lost positive definiteness".into()))?;
    let mut v: DVector<f64> = DVector::zeros(g.nrows());
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();

    let max_iter = 100 * (constraints.len() + 1);
    let mut iter = 0;
    let mut corrections = 0;

    'outer: loop {
        // Most violated constraint outside the working set; ties go to the
        // lowest index so the arithmetic path is deterministic.
        let mut worst: Option<(usize, f64)> = None;
        for (i, c) in constraints.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let s = c.normal.dot(&v) - c.rhs;
            if s < -FEAS_TOL && worst.map_or(true, |(_, w)| s < w) {
                worst = Some((i, s));
            }
        }
        let Some((p_idx, _)) = worst else {
            // Steps keep active rows on their boundaries only in exact
            // arithmetic; with an ill-conditioned working set the drift
            // reaches well past the feasibility tolerance. Project back
            // onto the working-set boundaries and rescan before accepting.
            if !active.is_empty() {
                let cols: Vec<DVector<f64>> =
                    active.iter().map(|&i| constraints[i].normal.clone()).collect();
                let nmat = DMatrix::from_columns(&cols);
                let res = DVector::from_fn(active.len(), |row, _| {
                    constraints[active[row]].rhs - nmat.column(row).dot(&v)
                });
                if res.amax() > FEAS_TOL {
                    if corrections >= 4 {
                        return Err(Error::Numerical(
                            "working-set drift correction did not converge".into(),
                        ));
                    }
                    corrections += 1;
                    let ginv_n = chol.solve(&nmat);
                    let w = nmat.transpose() * &ginv_n;
                    let mu = refined_solve(&w, &res)?;
                    v += &ginv_n * &mu;
                    for (pos, m) in mu.iter().enumerate() {
                        lambda[pos] = (lambda[pos] + m).max(0.0);
                    }
                    continue 'outer;
                }
            }
            return Ok(GiOutcome::Optimal { v });
        };
        let n_p = constraints[p_idx].normal.clone();
        let mut lam_p = 0.0;

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::Numerical("active-set iteration limit exceeded".into()));
            }

            // Step direction z in primal space and multiplier direction r.
            let ginv_np = chol.solve(&n_p);
            let (z, r) = if active.is_empty() {
                (ginv_np.clone(), DVector::zeros(0))
            } else {
                let cols: Vec<DVector<f64>> =
                    active.iter().map(|&i| constraints[i].normal.clone()).collect();
                let nmat = DMatrix::from_columns(&cols);
                let ginv_n = chol.solve(&nmat);
                let w = nmat.transpose() * &ginv_n;
                let rhs = nmat.transpose() * &ginv_np;
                let r = refined_solve(&w, &rhs)?;
                let z = &ginv_np - &ginv_n * &r;
                (z, r)
            };

            let zdotn = z.dot(&n_p);
            let s_p = n_p.dot(&v) - constraints[p_idx].rhs;
            // Full step reaches the violated boundary; partial step is
            // blocked by the first active multiplier driven to zero. The
            // zero test on z scales with the multipliers, which set the
            // round-off floor when z is an exact zero in real arithmetic.
            let r_scale = 1.0 + r.iter().map(|x| x.abs()).sum::<f64>();
            let full =
                if zdotn > STEP_TOL * r_scale { -s_p / zdotn } else { f64::INFINITY };
            let mut partial = f64::INFINITY;
            let mut drop_pos = usize::MAX;
            for (pos, &rj) in r.iter().enumerate() {
                if rj > DUAL_TOL {
                    let ratio = lambda[pos] / rj;
                    if ratio < partial {
                        partial = ratio;
                        drop_pos = pos;
                    }
                }
            }

            if full.is_infinite() && partial.is_infinite() {
                // No primal progress possible and no constraint to trade
                // away: the dual is unbounded, the primal empty.
                return Ok(GiOutcome::Infeasible);
            }

            if full <= partial {
                v += full * &z;
                for (pos, &rj) in r.iter().enumerate() {
                    lambda[pos] -= full * rj;
                }
                lam_p += full;
                active.push(p_idx);
                lambda.push(lam_p);
                continue 'outer;
            }

            // Partial step: move as far as the blocking constraint allows
            // (not at all when z = 0), drop it, and retry the violated one.
            if full.is_finite() {
                v += partial * &z;
            }
            for (pos, &rj) in r.iter().enumerate() {
                lambda[pos] -= partial * rj;
            }
            lam_p += partial;
            active.remove(drop_pos);
            lambda.remove(drop_pos);
        }
    }
}

/// Exhaustive active-set fallback for instances the iterative solver cannot
/// finish accurately, typically when two working-set normals are nearly
/// antiparallel. Every candidate active set is solved in one shot from the
/// original data through its KKT system, so residuals stay at round-off even
/// where the set is badly conditioned. Problems here are small by
/// construction (a handful of controls plus slacks), so the sweep is cheap.
fn enumerate_solve(g: &DMatrix<f64>, constraints: &[NormConstraint]) -> GiOutcome {
    let dim = g.nrows();
    let n = constraints.len();
    if n > 20 {
        return GiOutcome::Infeasible;
    }
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << n) {
        let m = mask.count_ones() as usize;
        if m > dim {
            continue;
        }
        let sel: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let size = dim + m;
        let mut kkt = DMatrix::zeros(size, size);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(g);
        let mut rhs = DVector::zeros(size);
        for (pos, &i) in sel.iter().enumerate() {
            let c = &constraints[i];
            for row in 0..dim {
                kkt[(row, dim + pos)] = -c.normal[row];
                kkt[(dim + pos, row)] = c.normal[row];
            }
            rhs[dim + pos] = c.rhs;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let v = DVector::from_fn(dim, |j, _| sol[j]);
        if (0..m).any(|pos| sol[dim + pos] < -ACTIVE_TOL) {
            continue;
        }
        if constraints.iter().any(|c| c.normal.dot(&v) - c.rhs < -ACTIVE_TOL) {
            continue;
        }
        let obj = 0.5 * v.dot(&(g * &v));
        if best.as_ref().map_or(true, |(b, _)| obj < *b - 1e-12) {
            best = Some((obj, v));
        }
    }
    match best {
        Some((_, v)) => GiOutcome::Optimal { v },
        None => GiOutcome::Infeasible,
    }
}

/// Iterative solve with the exhaustive sweep as a rescue for numerically
/// degenerate instances.
fn gi_or_enumerate(g: &DMatrix<f64>, constraints: &[NormConstraint]) -> Result<GiOutcome> {
    match gi_solve(g, constraints) {
        Ok(GiOutcome::Optimal { v }) => {
            if max_violation(constraints, &v) > ACTIVE_TOL {
                Ok(enumerate_solve(g, constraints))
            } else {
                Ok(GiOutcome::Optimal { v })
            }
        }
        Ok(GiOutcome::Infeasible) => Ok(GiOutcome::Infeasible),
        Err(_) => Ok(enumerate_solve(g, constraints)),
    }
}

/// Constraint set of the strict problem over `u` alone. Rows with a
/// numerically zero normal cannot influence the control: satisfied ones are
/// dropped, violated ones make the strict problem infeasible outright.
fn strict_constraints(p: &QpProblem) -> (Vec<NormConstraint>, bool) {
    let q = p.control_dim();
    let mut cons = Vec::new();
    let mut impossible = false;
    for row in &p.rows {
        let norm = row.coeff.norm();
        if norm <= 1e-14 {
            if row.offset < -FEAS_TOL {
                impossible = true;
            }
            continue;
        }
        cons.push(NormConstraint { normal: &row.coeff / norm, rhs: -row.offset / norm });
    }
    push_box_faces(&mut cons, p.bounds(), q, q);
    (cons, impossible)
}

/// Box faces of the first `q` variables in a `dim`-dimensional solver
/// variable; infinite bounds contribute nothing.
fn push_box_faces(cons: &mut Vec<NormConstraint>, bounds: &ControlBounds, q: usize, dim: usize) {
    for j in 0..q {
        let lo = bounds.lower()[j];
        if lo.is_finite() {
            let mut n = DVector::zeros(dim);
            n[j] = 1.0;
            cons.push(NormConstraint { normal: n, rhs: lo });
        }
        let hi = bounds.upper()[j];
        if hi.is_finite() {
            let mut n = DVector::zeros(dim);
            n[j] = -1.0;
            cons.push(NormConstraint { normal: n, rhs: -hi });
        }
    }
}

/// Constraint set and extended Hessian of the relaxed problem over
/// `(u, slacks)`; `relaxable` maps slack position to row index.
fn relaxed_problem(p: &QpProblem, relaxable: &[usize]) -> (DMatrix<f64>, Vec<NormConstraint>) {
    let q = p.control_dim();
    let dim = q + relaxable.len();

    let mut g = DMatrix::zeros(dim, dim);
    g.view_mut((0, 0), (q, q)).copy_from(&(2.0 * p.hessian()));
    for s in 0..relaxable.len() {
        g[(q + s, q + s)] = 2.0 * RELAXATION_WEIGHT;
    }

    let mut cons = Vec::new();
    for (i, row) in p.rows.iter().enumerate() {
        let mut n = DVector::zeros(dim);
        n.rows_mut(0, q).copy_from(&row.coeff);
        if let Some(slot) = relaxable.iter().position(|&r| r == i) {
            n[q + slot] = 1.0;
        }
        let norm = n.norm();
        if norm <= 1e-14 {
            // Zero row that is not relaxable; feasibility was already
            // decided by the strict pass, so skip it here.
            continue;
        }
        cons.push(NormConstraint { normal: &n / norm, rhs: -row.offset / norm });
    }
    for s in 0..relaxable.len() {
        let mut n = DVector::zeros(dim);
        n[q + s] = 1.0;
        cons.push(NormConstraint { normal: n, rhs: 0.0 });
    }
    push_box_faces(&mut cons, p.bounds(), q, dim);
    (g, cons)
}

fn max_violation(cons: &[NormConstraint], v: &DVector<f64>) -> f64 {
    cons.iter().map(|c| c.rhs - c.normal.dot(v)).fold(0.0, f64::max)
}

/// Row indices whose residual (including slack) vanishes at the solution.
fn active_rows(p: &QpProblem, u: &ControlVector, slacks: &[f64]) -> Vec<usize> {
    p.rows
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let res = row.coeff.dot(u) + row.offset + slacks[*i];
            res.abs() <= ACTIVE_TOL * (1.0 + row.coeff.norm())
        })
        .map(|(i, _)| i)
        .collect()
}

fn solve_with_fallback(p: &QpProblem, previous: Option<&ControlVector>) -> Result<QpSolution> {
    let q = p.control_dim();
    let g = 2.0 * p.hessian();
    let (cons, impossible) = strict_constraints(p);

    if !impossible {
        if let GiOutcome::Optimal { v } = gi_or_enumerate(&g, &cons)? {
            let worst = max_violation(&cons, &v);
            if worst > ACTIVE_TOL {
                return Err(Error::Numerical(format!(
                    "strict solution violates a constraint by {worst:.3e}"
                )));
            }
            // The box is hard everywhere downstream; snap residual dust.
            let v = p.bounds().clamp(&v);
            let slacks = vec![0.0; p.rows.len()];
            let active_set = active_rows(p, &v, &slacks);
            let objective = v.dot(&(p.hessian() * &v));
            return Ok(QpSolution { status: QpStatus::Optimal, u: v, slacks, objective, active_set });
        }
    }

    let relaxable = p.relaxable_rows();
    if !relaxable.is_empty() {
        let (g_ext, cons_ext) = relaxed_problem(p, &relaxable);
        if let GiOutcome::Optimal { v } = gi_or_enumerate(&g_ext, &cons_ext)? {
            let worst = max_violation(&cons_ext, &v);
            if worst > RELAXED_GUARD_TOL {
                return Err(Error::Numerical(format!(
                    "relaxed solution violates a constraint by {worst:.3e}"
                )));
            }
            let u = p.bounds().clamp(&DVector::from_fn(q, |j, _| v[j]));
            let mut slacks = vec![0.0; p.rows.len()];
            for (slot, &row_idx) in relaxable.iter().enumerate() {
                slacks[row_idx] = v[q + slot].max(0.0);
            }
            let status = if slacks.iter().any(|&d| d > SLACK_TOL) {
                QpStatus::Relaxed
            } else {
                // The strict pass said infeasible, so some slack must be
                // engaged; zero slacks here would be a solver defect.
                return Err(Error::Numerical(
                    "relaxation engaged without positive slack on a strictly infeasible problem"
                        .into(),
                ));
            };
            let active_set = active_rows(p, &u, &slacks);
            let objective = u.dot(&(p.hessian() * &u));
            return Ok(QpSolution { status, u, slacks, objective, active_set });
        }
    }

    // Even the relaxed problem is empty (or nothing was relaxable): hold a
    // clamp of the previous control.
    let zero = DVector::zeros(q);
    let u = p.bounds().clamp(previous.unwrap_or(&zero));
    let objective = u.dot(&(p.hessian() * &u));
    Ok(QpSolution {
        status: QpStatus::InfeasibleHard,
        u,
        slacks: vec![0.0; p.rows.len()],
        objective,
        active_set: Vec::new(),
    })
}

/// Independent optimality check: primal feasibility, stationarity with
/// multipliers recovered by least squares on the active constraints, and
/// multiplier signs, all within 1e-7. Relaxed solutions are checked on the
/// slack-extended problem they actually solve.
pub fn kkt_check(p: &QpProblem, s: &QpSolution) -> bool {
    const TOL: f64 = 1e-7;
    let q = p.control_dim();
    if s.u.len() != q || s.slacks.len() != p.rows.len() {
        return false;
    }
    let (g, cons, v) = match s.status {
        QpStatus::InfeasibleHard => return false,
        QpStatus::Optimal => {
            let (cons, impossible) = strict_constraints(p);
            if impossible {
                return false;
            }
            (2.0 * p.hessian(), cons, s.u.clone())
        }
        QpStatus::Relaxed => {
            let relaxable = p.relaxable_rows();
            if relaxable.is_empty() {
                return false;
            }
            let (g, cons) = relaxed_problem(p, &relaxable);
            let mut v = DVector::zeros(q + relaxable.len());
            v.rows_mut(0, q).copy_from(&s.u);
            for (slot, &row_idx) in relaxable.iter().enumerate() {
                v[q + slot] = s.slacks[row_idx];
            }
            (g, cons, v)
        }
    };

    if cons.iter().any(|c| c.normal.dot(&v) - c.rhs < -TOL) {
        return false;
    }

    let gv = &g * &v;
    let act: Vec<&NormConstraint> =
        cons.iter().filter(|c| (c.normal.dot(&v) - c.rhs).abs() <= TOL).collect();
    if act.is_empty() {
        return gv.norm() <= TOL * (1.0 + v.norm() * g.amax());
    }

    let cols: Vec<DVector<f64>> = act.iter().map(|c| c.normal.clone()).collect();
    let nmat = DMatrix::from_columns(&cols);
    let svd = SVD::<f64, Dyn, Dyn>::new(nmat.clone(), true, true);
    let lam = match svd.solve(&gv, 1e-12) {
        Ok(l) => l,
        Err(_) => return false,
    };
    let residual = (&nmat * &lam - &gv).norm();
    residual <= TOL * (1.0 + gv.norm()) && lam.iter().all(|&l| l >= -TOL)
}
