//! Discrete optimal transport between two equal-size batches: the
//! Hungarian algorithm with dual potentials, and a brute-force oracle.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Optimal assignment of a square cost matrix with its dual certificate:
/// `u[i] + v[j] ≤ c[i][j]` everywhere, with equality on the assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<usize>,
    pub cost: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Shortest-augmenting-path Hungarian algorithm, `O(m³)`.
pub fn hungarian(cost: &ArrayView2<f64>) -> Result<Assignment> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::shape("square cost matrix", format!("{:?}", cost.dim())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerics("non-finite transport cost".into()));
    }
    // One-based potentials and matching; column 0 is a virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    let total = row_to_col.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok(Assignment {
        row_to_col,
        cost: total,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    })
}

/// Minimum-cost permutation by enumeration (Heap's algorithm). Only for
/// small `m`.
pub fn brute_force_assignment(cost: &ArrayView2<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>();
    let mut best = (perm.clone(), eval(&perm));
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let value = eval(&perm);
            if value < best.1 {
                best = (perm.clone(), value);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// `K‖x_i − v_j‖²` for every pair.
pub fn quadratic_cost(xs: &ArrayView2<f64>, vs: &ArrayView2<f64>, k: f64) -> Result<Array2<f64>> {
    if xs.ncols() != vs.ncols() {
        return Err(Error::shape(xs.ncols(), vs.ncols()));
    }
    let mut out = Array2::zeros((xs.nrows(), vs.nrows()));
    for (i, x) in xs.outer_iter().enumerate() {
        for (j, v) in vs.outer_iter().enumerate() {
            out[[i, j]] = k * x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(out)
}

/// Kantorovich potentials of a batch assignment, gauge-fixed so the
/// `v`-side potentials sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub hx: Vec<f64>,
    pub hv: Vec<f64>,
    /// `x_to_v[i]` is the generated vector matched to real vector `i`.
    pub x_to_v: Vec<usize>,
    /// `v_to_x[j]` is the real vector matched to generated vector `j`.
    pub v_to_x: Vec<usize>,
    pub cost: f64,
}

pub fn solve_dual_potentials(xs: &ArrayView2<f64>, vs: &ArrayView2<f64>, k: f64) -> Result<DualPotentials> {
    if xs.nrows() != vs.nrows() {
        return Err(Error::shape(format!("{} generated vectors", xs.nrows()), vs.nrows()));
    }
    let c = quadratic_cost(xs, vs, k)?;
    let a = hungarian(&c.view())?;
    let shift = a.v.iter().sum::<f64>() / a.v.len().max(1) as f64;
    let mut v_to_x = vec![0; a.row_to_col.len()];
    for (i, &j) in a.row_to_col.iter().enumerate() {
        v_to_x[j] = i;
    }
    Ok(DualPotentials {
        hx: a.u.iter().map(|u| u + shift).collect(),
        hv: a.v.iter().map(|v| v - shift).collect(),
        x_to_v: a.row_to_col,
        v_to_x,
        cost: a.cost,
    })
}

/// Checks `hx[i] + hv[j] ≤ c[i][j] + tol` for all pairs and equality
/// within `tol` on the matching.
pub fn check_duals(cost: &ArrayView2<f64>, duals: &DualPotentials, tol: f64) -> Result<()> {
    for i in 0..cost.nrows() {
        for j in 0..cost.ncols() {
            let slack = cost[[i, j]] - duals.hx[i] - duals.hv[j];
            if slack < -tol {
                return Err(Error::Numerics(format!(
                    "dual infeasible at ({i}, {j}): slack {slack:e}"
                )));
            }
        }
        let j = duals.x_to_v[i];
        let slack = cost[[i, j]] - duals.hx[i] - duals.hv[j];
        if slack.abs() > tol {
            return Err(Error::Numerics(format!(
                "complementary slackness fails at ({i}, {j}): slack {slack:e}"
            )));
        }
    }
    Ok(())
}
