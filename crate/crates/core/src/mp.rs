//! Stochastic-maximum-principle machinery for the classical control problem:
//! the Hamiltonian, the first- and second-order adjoint backward equations,
//! and the pointwise minimum-condition check.
//!
//! Under a candidate policy `ū` with running cost `l` and terminal cost `h`,
//! the first-order adjoint `(p, q, s)` solves
//!
//! ```text
//! −dp = H_x dt − q dW − s dΦ̃,          p(T) = h_x(x̄(T), α(T)),
//!  H  = l + bᵀp + Σ_k σ^kᵀq^k + Σ_j γ^jᵀs^j λ_j,
//! ```
//!
//! with `σ^k` the k-th Brownian column, `γ^j` the loading on jumps into
//! regime `j` and `λ_j = λ_{α(t−),j}` the current intensity of those jumps.
//! The second-order adjoint `(P, Q, S)` solves the matrix equation
//!
//! ```text
//! −dP = [ P b_x + b_xᵀ P
//!         + Σ_k (σ_x^kᵀ P σ_x^k + σ_x^kᵀ Q^k + Q^k σ_x^k)
//!         + Σ_j (γ_x^jᵀ S^j + S^j γ_x^j + γ_x^jᵀ (P + S^j) γ_x^j) λ_j
//!         + H_xx ] dt − Q dW − S dΦ̃,   P(T) = h_xx(x̄(T), α(T)),
//! ```
//!
//! where `H_xx = l_xx + Σ_k b_xx^k p_k + Σ_{k,m} σ_xx^{km} q_{km} +
//! Σ_{k,j} γ_xx^{kj} s_{kj} λ_j`. Every jump block carries its intensity so
//! that compensated and raw jump contributions recombine exactly.
//!
//! Candidate optimality is certified through the extended Hamiltonian, here
//! evaluated in the difference convention
//!
//! ```text
//! ℋ(u) − ℋ(ū) = H(u) − H(ū) + ½ Σ_k δσ^k(u)ᵀ P δσ^k(u)
//!               + ½ Σ_j δγ^j(u)ᵀ (P + S^j) δγ^j(u) λ_j,
//! ```
//!
//! with `δφ(u) = φ(t, x̄, u) − φ(t, x̄, ū)`. An optimal `ū` minimizes `ℋ` over
//! the control set for a.e. `(t, ω)`; [`check_maximum_condition`] measures
//! the fraction of sampled `(path, node)` cells where this holds on a finite
//! control grid, within tolerance.

use crate::bsde::{backward_sweep, backward_sweep_with, BackwardConfig, BackwardSolution};
use crate::error::{CoreError, Result};
use crate::forward::PathBundle;
use crate::model::ModelSpec;
use crate::regime::RegimeGenerator;

/// First- and second-order adjoints solved along one bundle.
///
/// `first` has `m = L` (`y = p`, `z = q` as `L×d`, `κ = s` as `L×D`);
/// `second` has `m = L²` with `y = P` row-major and `z`, `κ` holding `Q^k`
/// and `S^j` in the layouts `z[(a·L+b)·d + k]`, `κ[(a·L+b)·D + j]`.
pub struct AdjointSolutions {
    pub first: BackwardSolution,
    pub second: BackwardSolution,
}

/// Solves first- then second-order adjoints under the bundle's policy.
pub fn solve_adjoints(bundle: &PathBundle, cfg: &BackwardConfig) -> Result<AdjointSolutions> {
    let first = solve_first_order_adjoint(bundle, cfg)?;
    let second = solve_second_order_adjoint(bundle, &first, cfg)?;
    Ok(AdjointSolutions { first, second })
}

/// Solves the first-order adjoint equation. A missing running cost is
/// treated as `l ≡ 0`; the terminal cost is required.
pub fn solve_first_order_adjoint(
    bundle: &PathBundle,
    cfg: &BackwardConfig,
) -> Result<BackwardSolution> {
    let spec = &bundle.spec;
    let h = spec.terminal_cost.as_ref().ok_or_else(|| {
        CoreError::ModelInconsistency("the adjoint equations require a terminal cost".into())
    })?;
    let dims = spec.dims;
    let (l, d, nd) = (dims.state, dims.brownian, dims.regimes);
    let n_steps = bundle.grid.n_steps;

    let terminal =
        |p: usize, out: &mut [f64]| h.grad_into(bundle.state(p, n_steps), bundle.regime(p, n_steps), out);

    let mut u = vec![0.0; dims.control];
    let mut lx = vec![0.0; l];
    let mut bx = vec![0.0; l * l];
    let mut sx = vec![0.0; l * d * l];
    let mut gx = vec![0.0; l * nd * l];
    let driver = move |pi: usize, n: usize, y: &[f64], z: &[f64], kap: &[f64], out: &mut [f64]| {
        let t = bundle.grid.node(n);
        let x = bundle.state(pi, n);
        let r = bundle.regime(pi, n);
        bundle.control_at(pi, n, &mut u);
        match &spec.running_cost {
            Some(rc) => rc.dx_into(t, x, &u, r, &mut lx),
            None => lx.fill(0.0),
        }
        spec.drift.dx_into(t, x, &u, r, &mut bx);
        spec.diffusion.dx_into(t, x, &u, r, &mut sx);
        spec.jump.dx_into(t, x, &u, r, &mut gx);
        for a in 0..l {
            let mut acc = lx[a];
            for k in 0..l {
                acc += bx[k * l + a] * y[k];
            }
            for k in 0..l {
                for dd in 0..d {
                    acc += sx[(k * d + dd) * l + a] * z[k * d + dd];
                }
            }
            for j in 0..nd {
                let lam = bundle.generator.jump_intensity(r, j);
                if lam == 0.0 {
                    continue;
                }
                for k in 0..l {
                    acc += gx[(k * nd + j) * l + a] * kap[k * nd + j] * lam;
                }
            }
            out[a] = acc;
        }
    };
    backward_sweep(bundle, l, terminal, driver, cfg)
}

/// Solves the second-order (matrix) adjoint equation given the first-order
/// solution along the same bundle. The solution is re-symmetrized after
/// every step; the terminal Hessian is required.
pub fn solve_second_order_adjoint(
    bundle: &PathBundle,
    first: &BackwardSolution,
    cfg: &BackwardConfig,
) -> Result<BackwardSolution> {
    let spec = &bundle.spec;
    let h = spec.terminal_cost.as_ref().ok_or_else(|| {
        CoreError::ModelInconsistency("the adjoint equations require a terminal cost".into())
    })?;
    let dims = spec.dims;
    let (l, d, nd) = (dims.state, dims.brownian, dims.regimes);
    if first.m != l {
        return Err(CoreError::DimensionMismatch(format!(
            "first-order solution has dimension {}, state dimension is {l}",
            first.m
        )));
    }
    let n_steps = bundle.grid.n_steps;
    let m = l * l;

    let terminal =
        |p: usize, out: &mut [f64]| h.hess_into(bundle.state(p, n_steps), bundle.regime(p, n_steps), out);

    let mut u = vec![0.0; dims.control];
    let mut lxx = vec![0.0; l * l];
    let mut bx = vec![0.0; l * l];
    let mut sx = vec![0.0; l * d * l];
    let mut gx = vec![0.0; l * nd * l];
    let mut bxx = vec![0.0; l * l * l];
    let mut sxx = vec![0.0; l * d * l * l];
    let mut gxx = vec![0.0; l * nd * l * l];
    let driver = move |pi: usize, n: usize, y: &[f64], z: &[f64], kap: &[f64], out: &mut [f64]| {
        let t = bundle.grid.node(n);
        let x = bundle.state(pi, n);
        let r = bundle.regime(pi, n);
        bundle.control_at(pi, n, &mut u);
        match &spec.running_cost {
            Some(rc) => rc.dxx_into(t, x, &u, r, &mut lxx),
            None => lxx.fill(0.0),
        }
        spec.drift.dx_into(t, x, &u, r, &mut bx);
        spec.diffusion.dx_into(t, x, &u, r, &mut sx);
        spec.jump.dx_into(t, x, &u, r, &mut gx);
        spec.drift.dxx_into(t, x, &u, r, &mut bxx);
        spec.diffusion.dxx_into(t, x, &u, r, &mut sxx);
        spec.jump.dxx_into(t, x, &u, r, &mut gxx);
        let p1 = first.y_row(pi, n);
        let q1 = first.z_row(pi, n);
        let s1 = first.kappa_row(pi, n);

        for a in 0..l {
            for b in 0..l {
                // H_xx: costs plus coefficient curvature contracted with the
                // first-order adjoints.
                let mut acc = lxx[a * l + b];
                for k in 0..l {
                    acc += bxx[(k * l + a) * l + b] * p1[k];
                }
                for k in 0..l {
                    for dd in 0..d {
                        acc += sxx[((k * d + dd) * l + a) * l + b] * q1[k * d + dd];
                    }
                }
                for j in 0..nd {
                    let lam = bundle.generator.jump_intensity(r, j);
                    if lam == 0.0 {
                        continue;
                    }
                    for k in 0..l {
                        acc += gxx[((k * nd + j) * l + a) * l + b] * s1[k * nd + j] * lam;
                    }
                }
                // P b_x + b_xᵀ P.
                for k in 0..l {
                    acc += y[a * l + k] * bx[k * l + b] + bx[k * l + a] * y[k * l + b];
                }
                // Diffusion blocks per Brownian column.
                for dd in 0..d {
                    for k in 0..l {
                        let m_ka = sx[(k * d + dd) * l + a];
                        let m_kb = sx[(k * d + dd) * l + b];
                        acc += m_ka * z[(k * l + b) * d + dd] + z[(a * l + k) * d + dd] * m_kb;
                        for w in 0..l {
                            acc += m_ka * y[k * l + w] * sx[(w * d + dd) * l + b];
                        }
                    }
                }
                // Jump blocks, intensity-weighted.
                for j in 0..nd {
                    let lam = bundle.generator.jump_intensity(r, j);
                    if lam == 0.0 {
                        continue;
                    }
                    let mut blk = 0.0;
                    for k in 0..l {
                        let g_ka = gx[(k * nd + j) * l + a];
                        let g_kb = gx[(k * nd + j) * l + b];
                        blk += g_ka * kap[(k * l + b) * nd + j] + kap[(a * l + k) * nd + j] * g_kb;
                        for w in 0..l {
                            blk += g_ka
                                * (y[k * l + w] + kap[(k * l + w) * nd + j])
                                * gx[(w * nd + j) * l + b];
                        }
                    }
                    acc += blk * lam;
                }
                out[a * l + b] = acc;
            }
        }
    };
    let post = move |_n: usize, row: &mut [f64]| {
        for a in 0..l {
            for b in (a + 1)..l {
                let avg = 0.5 * (row[a * l + b] + row[b * l + a]);
                row[a * l + b] = avg;
                row[b * l + a] = avg;
            }
        }
    };
    backward_sweep_with(bundle, m, terminal, driver, post, cfg)
}

/// Control Hamiltonian
/// `H(t, x, u, e_i, p, q, s) = l + bᵀp + Σ_k σ^kᵀq^k + Σ_j γ^jᵀ s^j λ_ij`,
/// with `q` row-major `L×d` and `s` row-major `L×D`. A missing running cost
/// contributes zero.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    spec: &ModelSpec,
    generator: &RegimeGenerator,
    t: f64,
    x: &[f64],
    u: &[f64],
    regime: usize,
    p: &[f64],
    q: &[f64],
    s: &[f64],
) -> Result<f64> {
    let dims = spec.dims;
    let (l, d, nd) = (dims.state, dims.brownian, dims.regimes);
    if x.len() != l || u.len() != dims.control || regime >= nd {
        return Err(CoreError::DimensionMismatch(
            "hamiltonian arguments do not match the model dimensions".into(),
        ));
    }
    if p.len() != l || q.len() != l * d || s.len() != l * nd {
        return Err(CoreError::DimensionMismatch(
            "adjoint slices do not match the model dimensions".into(),
        ));
    }
    let mut coeffs = CoeffValues::new(l, d, nd);
    coeffs.eval(spec, t, x, u, regime);
    let mut acc = coeffs.l;
    for k in 0..l {
        acc += coeffs.b[k] * p[k];
    }
    for i in 0..l * d {
        acc += coeffs.sigma[i] * q[i];
    }
    for j in 0..nd {
        let lam = generator.jump_intensity(regime, j);
        if lam == 0.0 {
            continue;
        }
        for k in 0..l {
            acc += coeffs.gamma[k * nd + j] * s[k * nd + j] * lam;
        }
    }
    Ok(acc)
}

/// Everything pathwise the extended Hamiltonian needs at one `(t, x̄, e_i)`:
/// the candidate control and the adjoint slices, with `cap_p` the `L×L`
/// second-order adjoint and `cap_s` its jump loadings in the solution
/// layout `cap_s[(a·L+b)·D + j]`.
pub struct ExtendedHamiltonianPoint<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub regime: usize,
    pub u_bar: &'a [f64],
    pub p: &'a [f64],
    pub q: &'a [f64],
    pub s: &'a [f64],
    pub cap_p: &'a [f64],
    pub cap_s: &'a [f64],
}

/// Extended Hamiltonian `ℋ(t, x̄, u, e_i)` at a probe control `u`, up to a
/// `u`-independent additive constant (the difference `ℋ(u) − ℋ(ū)` is the
/// variational-inequality kernel and is what minimization sees):
///
/// ```text
/// ℋ(u) = H(u) + ½ Σ_k δσ^k(u)ᵀ P δσ^k(u)
///        + ½ Σ_j δγ^j(u)ᵀ (P + S^j) δγ^j(u) λ_j.
/// ```
pub fn h_function(
    spec: &ModelSpec,
    generator: &RegimeGenerator,
    pt: &ExtendedHamiltonianPoint,
    u: &[f64],
) -> Result<f64> {
    let dims = spec.dims;
    let (l, d, nd) = (dims.state, dims.brownian, dims.regimes);
    if pt.cap_p.len() != l * l || pt.cap_s.len() != l * l * nd {
        return Err(CoreError::DimensionMismatch(
            "second-order adjoint slices do not match the model dimensions".into(),
        ));
    }
    let h = hamiltonian(spec, generator, pt.t, pt.x, u, pt.regime, pt.p, pt.q, pt.s)?;
    let mut base = CoeffValues::new(l, d, nd);
    base.eval(spec, pt.t, pt.x, pt.u_bar, pt.regime);
    let mut probe = CoeffValues::new(l, d, nd);
    probe.eval(spec, pt.t, pt.x, u, pt.regime);
    Ok(h + quadratic_correction(&base, &probe, pt, generator, l, d, nd))
}

/// Coefficient values at one `(t, x, u, regime)`.
struct CoeffValues {
    l: f64,
    b: Vec<f64>,
    sigma: Vec<f64>,
    gamma: Vec<f64>,
}

impl CoeffValues {
    fn new(l: usize, d: usize, nd: usize) -> Self {
        Self {
            l: 0.0,
            b: vec![0.0; l],
            sigma: vec![0.0; l * d],
            gamma: vec![0.0; l * nd],
        }
    }

    fn eval(&mut self, spec: &ModelSpec, t: f64, x: &[f64], u: &[f64], regime: usize) {
        self.l = spec
            .running_cost
            .as_ref()
            .map_or(0.0, |rc| rc.value(t, x, u, regime));
        spec.drift.value_into(t, x, u, regime, &mut self.b);
        spec.diffusion.value_into(t, x, u, regime, &mut self.sigma);
        spec.jump.value_into(t, x, u, regime, &mut self.gamma);
    }
}

/// `½ Σ_k δσᵀPδσ + ½ Σ_j δγᵀ(P+S^j)δγ λ_j` between `probe` and `base`.
fn quadratic_correction(
    base: &CoeffValues,
    probe: &CoeffValues,
    pt: &ExtendedHamiltonianPoint,
    generator: &RegimeGenerator,
    l: usize,
    d: usize,
    nd: usize,
) -> f64 {
    let mut quad = 0.0;
    for dd in 0..d {
        for a in 0..l {
            let da = probe.sigma[a * d + dd] - base.sigma[a * d + dd];
            if da == 0.0 {
                continue;
            }
            for b in 0..l {
                let db = probe.sigma[b * d + dd] - base.sigma[b * d + dd];
                quad += da * pt.cap_p[a * l + b] * db;
            }
        }
    }
    for j in 0..nd {
        let lam = generator.jump_intensity(pt.regime, j);
        if lam == 0.0 {
            continue;
        }
        for a in 0..l {
            let da = probe.gamma[a * nd + j] - base.gamma[a * nd + j];
            if da == 0.0 {
                continue;
            }
            for b in 0..l {
                let db = probe.gamma[b * nd + j] - base.gamma[b * nd + j];
                quad += da * (pt.cap_p[a * l + b] + pt.cap_s[(a * l + b) * nd + j]) * db * lam;
            }
        }
    }
    0.5 * quad
}

/// `ℋ(u) − ℋ(ū)` with pre-evaluated base coefficients (hot path of the
/// condition check).
#[allow(clippy::too_many_arguments)]
fn delta_h(
    spec: &ModelSpec,
    generator: &RegimeGenerator,
    pt: &ExtendedHamiltonianPoint,
    u: &[f64],
    base: &CoeffValues,
    probe: &mut CoeffValues,
) -> f64 {
    let dims = spec.dims;
    let (l, d, nd) = (dims.state, dims.brownian, dims.regimes);
    probe.eval(spec, pt.t, pt.x, u, pt.regime);
    let mut acc = probe.l - base.l;
    for k in 0..l {
        acc += (probe.b[k] - base.b[k]) * pt.p[k];
    }
    for i in 0..l * d {
        acc += (probe.sigma[i] - base.sigma[i]) * pt.q[i];
    }
    for j in 0..nd {
        let lam = generator.jump_intensity(pt.regime, j);
        if lam == 0.0 {
            continue;
        }
        for k in 0..l {
            acc += (probe.gamma[k * nd + j] - base.gamma[k * nd + j]) * pt.s[k * nd + j] * lam;
        }
    }
    acc + quadratic_correction(base, probe, pt, generator, l, d, nd)
}

/// Options of [`check_maximum_condition`].
#[derive(Clone, Copy, Debug)]
pub struct MaxConditionOptions {
    /// Control candidates per box dimension (grids enumerate their points).
    pub grid_points: usize,
    /// A cell passes when `ℋ(ū) − min_grid ℋ ≤ tolerance`.
    pub tolerance: f64,
    /// Evaluate at most this many paths, chosen by a deterministic stride;
    /// `0` means all paths.
    pub max_paths: usize,
}

impl Default for MaxConditionOptions {
    fn default() -> Self {
        Self {
            grid_points: 101,
            tolerance: 0.02,
            max_paths: 256,
        }
    }
}

/// A `(node, regime)` group of the condition check: pass fraction, the
/// largest optimality gap of the group and the grid argmin at that worst
/// cell (ties resolved to the lowest candidate index).
#[derive(Clone, Debug)]
pub struct MaxConditionRow {
    pub time: f64,
    pub regime: usize,
    pub cells: usize,
    pub frac_pass: f64,
    pub worst_gap: f64,
    pub argmin_u: Vec<f64>,
}

/// Result of [`check_maximum_condition`].
#[derive(Clone, Debug)]
pub struct MaxConditionReport {
    /// Fraction of sampled cells passing at the configured tolerance.
    pub fraction_pass: f64,
    pub cells: usize,
    pub worst_gap: f64,
    pub rows: Vec<MaxConditionRow>,
}

/// Checks the pointwise minimum condition of the candidate policy on a grid
/// of controls, per sampled `(path, node)` cell with the cell's own adjoint
/// estimates. Aborted paths are skipped.
pub fn check_maximum_condition(
    bundle: &PathBundle,
    adjoints: &AdjointSolutions,
    opts: &MaxConditionOptions,
) -> Result<MaxConditionReport> {
    let spec = &bundle.spec;
    let generator = &bundle.generator;
    let dims = spec.dims;
    let (l, d, nd) = (dims.state, dims.brownian, dims.regimes);
    if adjoints.first.m != l || adjoints.second.m != l * l {
        return Err(CoreError::DimensionMismatch(
            "adjoint solutions do not match the model dimensions".into(),
        ));
    }
    let candidates = spec.control_set.enumerate(opts.grid_points);
    if candidates.is_empty() {
        return Err(CoreError::InvalidInput("control grid has no candidates".into()));
    }
    let n_steps = bundle.grid.n_steps;

    let paths: Vec<usize> = if opts.max_paths == 0 || opts.max_paths >= bundle.n_paths {
        (0..bundle.n_paths).collect()
    } else {
        let stride = bundle.n_paths / opts.max_paths;
        (0..opts.max_paths).map(|i| i * stride).collect()
    };

    struct Group {
        cells: usize,
        passes: usize,
        worst_gap: f64,
        argmin: usize,
    }
    let mut rows = Vec::new();
    let mut total_cells = 0usize;
    let mut total_pass = 0usize;
    let mut worst_gap = 0.0f64;
    let mut ubar = vec![0.0; dims.control];
    let mut base = CoeffValues::new(l, d, nd);
    let mut probe = CoeffValues::new(l, d, nd);

    for n in 0..n_steps {
        let mut groups: Vec<Group> = (0..nd)
            .map(|_| Group {
                cells: 0,
                passes: 0,
                worst_gap: -1.0,
                argmin: 0,
            })
            .collect();
        for &p in &paths {
            if bundle.aborted.binary_search(&p).is_ok() {
                continue;
            }
            let r = bundle.regime(p, n);
            bundle.control_at(p, n, &mut ubar);
            let pt = ExtendedHamiltonianPoint {
                t: bundle.grid.node(n),
                x: bundle.state(p, n),
                regime: r,
                u_bar: &ubar,
                p: adjoints.first.y_row(p, n),
                q: adjoints.first.z_row(p, n),
                s: adjoints.first.kappa_row(p, n),
                cap_p: adjoints.second.y_row(p, n),
                cap_s: adjoints.second.kappa_row(p, n),
            };
            base.eval(spec, pt.t, pt.x, pt.u_bar, pt.regime);
            let mut min_delta = f64::INFINITY;
            let mut argmin = 0usize;
            for (c, u) in candidates.iter().enumerate() {
                let dh = delta_h(spec, generator, &pt, u, &base, &mut probe);
                if dh < min_delta {
                    min_delta = dh;
                    argmin = c;
                }
            }
            let gap = (-min_delta).max(0.0);
            let g = &mut groups[r];
            g.cells += 1;
            if min_delta >= -opts.tolerance {
                g.passes += 1;
            }
            if gap > g.worst_gap {
                g.worst_gap = gap;
                g.argmin = argmin;
            }
        }
        for (r, g) in groups.into_iter().enumerate() {
            if g.cells == 0 {
                continue;
            }
            total_cells += g.cells;
            total_pass += g.passes;
            worst_gap = worst_gap.max(g.worst_gap);
            rows.push(MaxConditionRow {
                time: bundle.grid.node(n),
                regime: r,
                cells: g.cells,
                frac_pass: g.passes as f64 / g.cells as f64,
                worst_gap: g.worst_gap,
                argmin_u: candidates[g.argmin].clone(),
            });
        }
    }
    if total_cells == 0 {
        return Err(CoreError::InvalidInput(
            "no usable (path, node) cells — all sampled paths aborted".into(),
        ));
    }
    Ok(MaxConditionReport {
        fraction_pass: total_pass as f64 / total_cells as f64,
        cells: total_cells,
        worst_gap,
        rows,
    })
}
