//! Brute-force reference solver for tiny QPs, written independently of the
//! library's active-set iteration so the two can cross-check each other.

use nalgebra::{DMatrix, DVector};

/// One inequality `a . u >= b`.
#[derive(Clone, Debug)]
pub struct Ineq {
    pub a: [f64; 2],
    pub b: f64,
}

/// Gaussian elimination with partial pivoting for systems up to 4x4; returns
/// `None` when a pivot collapses (singular active set — skip the candidate).
fn gauss_solve(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// Minimize `0.5 u' H u` over `{ u : a_i . u >= b_i }` for a 2-dimensional
/// control by enumerating every candidate active subset of size 0, 1, or 2,
/// solving its equality-constrained KKT system, and keeping the candidates
/// whose multipliers are nonnegative and whose point is feasible. `None`
/// means no candidate qualified (the polyhedron is empty).
pub fn enumerate_qp(h: &DMatrix<f64>, cons: &[Ineq]) -> Option<DVector<f64>> {
    const TOL: f64 = 1e-8;
    let n = cons.len();
    let mut best: Option<(f64, DVector<f64>)> = None;

    let mut try_active = |active: &[usize]| {
        let m = active.len();
        let size = 2 + m;
        let mut mat = vec![vec![0.0; size]; size];
        let mut rhs = vec![0.0; size];
        for r in 0..2 {
            for c in 0..2 {
                mat[r][c] = h[(r, c)];
            }
        }
        for (slot, &i) in active.iter().enumerate() {
            for r in 0..2 {
                mat[r][2 + slot] = -cons[i].a[r];
                mat[2 + slot][r] = cons[i].a[r];
            }
            rhs[2 + slot] = cons[i].b;
        }
        let Some(sol) = gauss_solve(mat, rhs) else { return };
        if sol[2..].iter().any(|&lambda| lambda < -TOL) {
            return;
        }
        let u = DVector::from_vec(vec![sol[0], sol[1]]);
        if cons.iter().any(|c| c.a[0] * u[0] + c.a[1] * u[1] - c.b < -TOL) {
            return;
        }
        let obj = 0.5 * u.dot(&(h * &u));
        if best.as_ref().map_or(true, |(prev, _)| obj < prev - 1e-12) {
            best = Some((obj, u));
        }
    };

    try_active(&[]);
    for i in 0..n {
        try_active(&[i]);
        for j in i + 1..n {
            try_active(&[i, j]);
        }
    }
    best.map(|(_, u)| u)
}
