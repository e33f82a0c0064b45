//! Per-regime polynomial least squares, the projection engine of the
//! backward (least-squares Monte Carlo) solvers.
//!
//! Conditional expectations `E[target | x_n, α_n = e_i]` are approximated by
//! regressing targets on a polynomial basis of the state, separately for
//! each regime cell. The design is built once per (time step, regime) and
//! its factorization is reused across every target column — the backward
//! sweep projects `y`, `z` and `κ` targets against the same basis.
//!
//! Numerical safeguards, all reported as flags rather than errors: each
//! state coordinate is standardized within its group before the basis is
//! evaluated (same polynomial span, but monomials of a barely-diffused state
//! are otherwise nearly collinear and any ridge would shrink exactly the
//! slopes that the martingale extraction reads off); columns are
//! equilibrated to unit max-norm; exactly constant non-intercept columns are
//! dropped; a failed Cholesky factorization retries with a ridge
//! `λ = 1e-8·tr(G)/n` (escalating by 100× twice); groups with fewer rows
//! than twice the basis size fall back to the plain group mean.
//!
//! Because the basis always contains an intercept, fitted values preserve
//! group means exactly: the mean of predictions over a regime cell equals
//! the mean of the targets there. Downstream, this makes centered
//! martingale-increment projections unbiased within cells.

use crate::error::{CoreError, Result};
use ndarray::{Array2, ArrayView2};

/// Monomial basis of total degree ≤ `degree` in `l` variables, intercept
/// first, then graded lexicographic order.
#[derive(Clone, Debug)]
pub struct PolyBasis {
    pub l: usize,
    pub degree: usize,
    /// Exponent vector of each basis function.
    exponents: Vec<Vec<u8>>,
}

impl PolyBasis {
    pub fn new(l: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        let mut current = vec![0u8; l];
        for total in 0..=degree {
            enumerate_exponents(&mut current, 0, total as u8, &mut exponents);
        }
        Self { l, degree, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Evaluates the basis at `x` into `out` (length [`Self::len`]).
    pub fn fill(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.l);
        debug_assert_eq!(out.len(), self.exponents.len());
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (xi, &p) in x.iter().zip(e) {
                for _ in 0..p {
                    v *= xi;
                }
            }
            *o = v;
        }
    }
}

fn enumerate_exponents(current: &mut Vec<u8>, dim: usize, remaining: u8, out: &mut Vec<Vec<u8>>) {
    if dim + 1 == current.len() {
        current[dim] = remaining;
        out.push(current.clone());
        current[dim] = 0;
        return;
    }
    for p in (0..=remaining).rev() {
        current[dim] = p;
        enumerate_exponents(current, dim + 1, remaining - p, out);
        current[dim] = 0;
    }
}

/// In-place lower Cholesky factorization; `false` when not numerically
/// positive definite. A pivot that survives elimination with less than
/// `1e-10` of its original mass marks a column that is (up to rounding) a
/// linear combination of its predecessors; accepting it would let rounding
/// noise drive the solve, so it is treated as a failure and left to the
/// ridge retry.
fn cholesky_in_place(a: &mut Array2<f64>) -> bool {
    let n = a.nrows();
    for j in 0..n {
        let d0 = a[[j, j]];
        let mut diag = d0;
        for k in 0..j {
            diag -= a[[j, k]] * a[[j, k]];
        }
        if !(diag > 1e-10 * d0) || !diag.is_finite() {
            return false;
        }
        let dsqrt = diag.sqrt();
        a[[j, j]] = dsqrt;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / dsqrt;
        }
    }
    // Zero the strict upper triangle for cleanliness.
    for i in 0..n {
        for j in (i + 1)..n {
            a[[i, j]] = 0.0;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` in place given the lower factor.
fn cholesky_solve(l: &Array2<f64>, b: &mut [f64]) {
    let n = l.nrows();
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[[i, k]] * b[k];
        }
        b[i] = v / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= l[[k, i]] * b[k];
        }
        b[i] = v / l[[i, i]];
    }
}

struct GroupDesign {
    rows: Vec<usize>,
    /// Equilibrated basis values, `rows.len() × active.len()`; empty for
    /// intercept-only groups.
    phi: Array2<f64>,
    /// Lower Cholesky factor of `φᵀφ (+ ridge)`.
    chol: Option<Array2<f64>>,
}

/// Per-regime design matrices with shared factorizations.
pub struct Design {
    n_rows: usize,
    groups: Vec<GroupDesign>,
    /// Some group required a ridge to factorize.
    pub ridge_used: bool,
    /// Number of groups that fell back to the plain group mean.
    pub intercept_only_groups: usize,
}

impl Design {
    /// Builds per-regime designs from `states` (`K×L`) and group labels.
    ///
    /// Groups with fewer than `2 × basis size` rows use the group mean.
    pub fn new(
        states: ArrayView2<f64>,
        labels: &[u8],
        num_groups: usize,
        degree: usize,
    ) -> Result<Design> {
        let k_rows = states.nrows();
        if labels.len() != k_rows {
            return Err(CoreError::DimensionMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                k_rows
            )));
        }
        if k_rows == 0 {
            return Err(CoreError::InvalidInput("regression needs at least one row".into()));
        }
        let l = states.ncols();
        let basis = PolyBasis::new(l, degree);
        let nf = basis.len();
        let mut row_lists: Vec<Vec<usize>> = vec![Vec::new(); num_groups];
        for (r, &g) in labels.iter().enumerate() {
            let g = g as usize;
            if g >= num_groups {
                return Err(CoreError::InvalidInput(format!(
                    "group label {g} out of range ({num_groups})"
                )));
            }
            row_lists[g].push(r);
        }

        let mut groups = Vec::with_capacity(num_groups);
        let mut ridge_used = false;
        let mut intercept_only = 0;
        let mut feat = vec![0.0; nf];
        for rows in row_lists {
            let kg = rows.len();
            if kg < 2 * nf {
                if kg > 0 {
                    intercept_only += 1;
                }
                groups.push(GroupDesign {
                    rows,
                    phi: Array2::zeros((0, 0)),
                    chol: None,
                });
                continue;
            }
            // Standardize each coordinate within the group, then build the
            // raw basis from the standardized states.
            let mut mu = vec![0.0; l];
            let mut sd = vec![0.0; l];
            for &r in &rows {
                for c in 0..l {
                    mu[c] += states[[r, c]];
                }
            }
            for m in mu.iter_mut() {
                *m /= kg as f64;
            }
            for &r in &rows {
                for c in 0..l {
                    let d = states[[r, c]] - mu[c];
                    sd[c] += d * d;
                }
            }
            for s in sd.iter_mut() {
                *s = (*s / kg as f64).sqrt();
                if !s.is_finite() || *s == 0.0 {
                    *s = 1.0;
                }
            }
            let mut raw = Array2::<f64>::zeros((kg, nf));
            for (ri, &r) in rows.iter().enumerate() {
                let x: Vec<f64> = (0..l).map(|c| (states[[r, c]] - mu[c]) / sd[c]).collect();
                basis.fill(&x, &mut feat);
                for (ci, &v) in feat.iter().enumerate() {
                    raw[[ri, ci]] = v;
                }
            }
            // Equilibrate and drop exactly-constant non-intercept columns.
            let mut active: Vec<usize> = Vec::with_capacity(nf);
            let mut scales: Vec<f64> = Vec::with_capacity(nf);
            for c in 0..nf {
                let col_max = (0..kg).map(|r| raw[[r, c]].abs()).fold(0.0, f64::max);
                if c == 0 {
                    active.push(c);
                    scales.push(1.0); // intercept column is already all ones
                    continue;
                }
                let first = raw[[0, c]];
                let constant = (0..kg).all(|r| raw[[r, c]] == first);
                if col_max == 0.0 || constant {
                    continue; // carried by the intercept
                }
                active.push(c);
                scales.push(col_max);
            }
            let na = active.len();
            let mut phi = Array2::<f64>::zeros((kg, na));
            for (ci, (&c, &s)) in active.iter().zip(&scales).enumerate() {
                for r in 0..kg {
                    phi[[r, ci]] = raw[[r, c]] / s;
                }
            }
            // Normal matrix and (possibly ridged) Cholesky factorization.
            let gmat = phi.t().dot(&phi);
            let trace: f64 = (0..na).map(|i| gmat[[i, i]]).sum();
            let mut chol = None;
            let mut lambda = 0.0;
            for attempt in 0..4 {
                let mut m = gmat.clone();
                if attempt > 0 {
                    lambda = if attempt == 1 {
                        1e-8 * trace / na as f64
                    } else {
                        lambda * 100.0
                    };
                    for i in 0..na {
                        m[[i, i]] += lambda;
                    }
                    ridge_used = true;
                }
                if cholesky_in_place(&mut m) {
                    chol = Some(m);
                    break;
                }
            }
            if chol.is_none() {
                intercept_only += 1;
                groups.push(GroupDesign {
                    rows,
                    phi: Array2::zeros((0, 0)),
                    chol: None,
                });
                continue;
            }
            groups.push(GroupDesign { rows, phi, chol });
        }
        Ok(Design {
            n_rows: k_rows,
            groups,
            ridge_used,
            intercept_only_groups: intercept_only,
        })
    }

    /// Fits every target column within each group and returns fitted values
    /// (`K×q`, rows aligned with the states passed to [`Design::new`]).
    pub fn fit_predict(&self, targets: ArrayView2<f64>) -> Result<Array2<f64>> {
        if targets.nrows() != self.n_rows {
            return Err(CoreError::DimensionMismatch(format!(
                "{} target rows for {} design rows",
                targets.nrows(),
                self.n_rows
            )));
        }
        let q = targets.ncols();
        let mut out = Array2::<f64>::zeros((self.n_rows, q));
        for group in &self.groups {
            let kg = group.rows.len();
            if kg == 0 {
                continue;
            }
            match &group.chol {
                None => {
                    // Group mean per target column.
                    for c in 0..q {
                        let mean: f64 =
                            group.rows.iter().map(|&r| targets[[r, c]]).sum::<f64>() / kg as f64;
                        for &r in &group.rows {
                            out[[r, c]] = mean;
                        }
                    }
                }
                Some(chol) => {
                    let na = group.phi.ncols();
                    let mut rhs = vec![0.0; na];
                    for c in 0..q {
                        for (ci, v) in rhs.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for (ri, &r) in group.rows.iter().enumerate() {
                                acc += group.phi[[ri, ci]] * targets[[r, c]];
                            }
                            *v = acc;
                        }
                        cholesky_solve(chol, &mut rhs);
                        for (ri, &r) in group.rows.iter().enumerate() {
                            let mut pred = 0.0;
                            for (ci, &b) in rhs.iter().enumerate() {
                                pred += group.phi[[ri, ci]] * b;
                            }
                            out[[r, c]] = pred;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
