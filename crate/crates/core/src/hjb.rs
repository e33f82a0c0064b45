//! Finite-difference solution of the coupled dynamic-programming system for
//! one-dimensional regime-switching jump diffusions, and Monte Carlo
//! verification that the solved value surface bounds every policy's cost
//! from below (with equality for the extracted feedback).
//!
//! For each regime `e_i` the value function satisfies, backwards from the
//! terminal condition `V(T, x, e_i) = h(x, e_i)`,
//!
//! ```text
//! ∂_t V(t,x,e_i) + inf_{u∈U} { ℒ^u V(t,x,e_i) + l(t,x,u,e_i) } = 0,
//!
//! ℒ^u V(t,x,e_i) = V_x b(t,x,u,e_i) + ½ (σσᵀ)(t,x,u,e_i) V_xx
//!   + Σ_m [ V(t, x+γ^m(t,x,u,e_i), e_m) − V(t,x,e_i) − V_x γ^m ] λ_im,
//! ```
//!
//! a system of `D` parabolic equations coupled through the jump exchange
//! term. Folding the jump compensator `−V_x γ^m λ_im` into the advection
//! gives the form the scheme discretizes: an effective drift
//! `b_eff = b − Σ_m γ^m λ_im` and a plain exchange
//! `Σ_m λ_im [V(t, x+γ^m, e_m) − V(t,x,e_i)]`.
//!
//! The scheme is explicit and monotone: upwinded first difference on
//! `b_eff`, centred second difference, linear interpolation of jump
//! destinations (non-negative weights), explicit Euler in time under the
//! stability bound
//!
//! ```text
//! Δt · ( σσᵀ/Δx² + |b_eff|/Δx + Σ_m λ_im ) ≤ 1,
//! ```
//!
//! checked at every evaluated `(node, control)` pair; a violation aborts
//! with the offending step sizes. Ghost values at the two window edges are
//! linear extrapolations of the interior, which makes the second difference
//! vanish there; the comparison principle therefore holds exactly at
//! interior nodes and up to the boundary layer at the edges. Jump
//! destinations outside the window are handled per [`JumpBoundary`] and
//! flag the run as non-monotone.
//!
//! Minimization is over an explicit list of control points; ties select the
//! lowest index, so a cost-free model reproduces its terminal surface and
//! the first control exactly.

use crate::error::{CoreError, Result};
use crate::forward::{simulate_forward, ForwardConfig, PathBundle};
use crate::grid::TimeGrid;
use crate::model::{ControlPolicy, ModelSpec};
use crate::mp::{h_function, AdjointSolutions, ExtendedHamiltonianPoint, MaxConditionOptions};
use crate::regime::RegimeGenerator;
use ndarray::{Array3, ArrayView2, Axis};
use rayon::prelude::*;

/// Uniform spatial window `[x_min, x_max]` with `n_cells` cells
/// (`n_cells + 1` nodes).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateWindow {
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
}

impl StateWindow {
    pub fn new(x_min: f64, x_max: f64, n_cells: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_max > x_min) {
            return Err(CoreError::InvalidInput(format!(
                "state window [{x_min}, {x_max}] is not an interval"
            )));
        }
        if n_cells < 2 {
            return Err(CoreError::InvalidInput(
                "state window needs at least two cells".into(),
            ));
        }
        Ok(Self { x_min, x_max, n_cells })
    }

    /// Window centred at `x0` with the given half width, cells of size
    /// (approximately, after rounding the cell count up) `dx`.
    pub fn centered(x0: f64, half_width: f64, dx: f64) -> Result<Self> {
        if !(half_width > 0.0 && dx > 0.0) {
            return Err(CoreError::InvalidInput(
                "window half width and cell size must be positive".into(),
            ));
        }
        let n_cells = ((2.0 * half_width) / dx).ceil().max(2.0) as usize;
        Self::new(x0 - half_width, x0 + half_width, n_cells)
    }

    /// Default half width `6 · max|σ| · √T`, scanning the diffusion at the
    /// initial state over the control points and regimes.
    pub fn default_half_width(
        spec: &ModelSpec,
        grid: TimeGrid,
        x0: f64,
        controls: &[Vec<f64>],
    ) -> f64 {
        let d = spec.dims.brownian;
        let mut sbuf = vec![0.0; d];
        let mut smax = 0.0f64;
        for i in 0..spec.dims.regimes {
            for u in controls {
                spec.diffusion.value_into(0.0, &[x0], u, i, &mut sbuf);
                let s2: f64 = sbuf.iter().map(|v| v * v).sum();
                smax = smax.max(s2.sqrt());
            }
        }
        6.0 * smax * grid.horizon.sqrt()
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.n_cells as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn node(&self, m: usize) -> f64 {
        if m == self.n_cells {
            self.x_max
        } else {
            self.x_min + m as f64 * self.dx()
        }
    }

    /// Nearest node index to `x`, clamped into the window.
    pub fn nearest_node(&self, x: f64) -> usize {
        let raw = ((x - self.x_min) / self.dx()).round();
        (raw.max(0.0) as usize).min(self.n_cells)
    }
}

/// How jump destinations outside the spatial window are valued.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JumpBoundary {
    /// Linear extrapolation from the two boundary nodes (consistent, but a
    /// negative interpolation weight breaks strict monotonicity there).
    Extrapolate,
    /// Value of the nearest boundary node.
    Clamp,
}

/// Solved value surfaces `V(t_n, x_m, e_i)` with the minimizing control of
/// every node.
#[derive(Clone, Debug)]
pub struct ValueGrid {
    pub grid: TimeGrid,
    pub window: StateWindow,
    pub n_regimes: usize,
    /// Control points the minimization ranged over.
    pub controls: Vec<Vec<f64>>,
    /// Shape `(n_steps + 1, n_nodes, D)`.
    pub values: Array3<f64>,
    /// Index into [`Self::controls`] of the minimizer, same shape as
    /// [`Self::values`]; the terminal row minimizes against the terminal
    /// surface itself.
    pub u_index: Array3<usize>,
    /// Largest observed `Δt·(σ²/Δx² + |b_eff|/Δx + Σλ)`; `≤ 1` by
    /// construction, reported for margin inspection.
    pub cfl_margin: f64,
    /// Number of jump-destination evaluations outside the window.
    pub escaped_destinations: usize,
    /// Whether the discrete comparison principle held everywhere: the
    /// stability bound was satisfied (enforced) and no destination needed
    /// boundary treatment.
    pub monotone: bool,
}

impl ValueGrid {
    pub fn value(&self, n: usize, m: usize, regime: usize) -> f64 {
        self.values[[n, m, regime]]
    }

    pub fn u_star(&self, n: usize, m: usize, regime: usize) -> &[f64] {
        &self.controls[self.u_index[[n, m, regime]]]
    }

    /// Value at an off-grid state by linear interpolation (clamped to the
    /// window).
    pub fn value_at(&self, n: usize, x: f64, regime: usize) -> f64 {
        let w = &self.window;
        let dx = w.dx();
        let pos = ((x - w.x_min) / dx).clamp(0.0, w.n_cells as f64);
        let m0 = (pos.floor() as usize).min(w.n_cells - 1);
        let frac = pos - m0 as f64;
        (1.0 - frac) * self.values[[n, m0, regime]] + frac * self.values[[n, m0 + 1, regime]]
    }

    /// Minimizing control at the node nearest to `(t_n, x)`.
    pub fn u_star_at(&self, n: usize, x: f64, regime: usize) -> &[f64] {
        self.u_star(n, self.window.nearest_node(x), regime)
    }

    /// Feedback policy reading the extracted minimizers at the nearest
    /// grid node.
    pub fn feedback_policy(&self) -> ControlPolicy {
        let controls = self.controls.clone();
        let u_index = self.u_index.clone();
        let grid = self.grid;
        let window = self.window;
        let dim = self.controls[0].len();
        ControlPolicy::feedback(dim, move |t, x, regime, out| {
            let n = grid.nearest_node(t);
            let m = window.nearest_node(x[0]);
            out.copy_from_slice(&controls[u_index[[n, m, regime]]]);
        })
    }
}

/// Solves the coupled dynamic-programming system on `grid × window` by the
/// explicit monotone scheme described in the module docs, minimizing over
/// `controls` at every node (ties to the lowest index). The running and
/// terminal costs of `spec` default to zero when absent.
///
/// Each backward step evaluates its `(node, regime)` cells in parallel;
/// steps are sequential.
///
/// Errors: [`CoreError::Stability`] when the explicit stability bound fails
/// at any evaluated cell (the message carries the offending sizes);
/// [`CoreError::InvalidInput`] / [`CoreError::DimensionMismatch`] for
/// structural problems.
pub fn solve_hjb(
    spec: &ModelSpec,
    generator: &RegimeGenerator,
    grid: TimeGrid,
    window: StateWindow,
    controls: &[Vec<f64>],
    boundary: JumpBoundary,
) -> Result<ValueGrid> {
    let dims = spec.dims;
    if dims.state != 1 {
        return Err(CoreError::InvalidInput(format!(
            "the finite-difference solver handles one-dimensional state, got L = {}",
            dims.state
        )));
    }
    if generator.num_states() != dims.regimes {
        return Err(CoreError::DimensionMismatch(format!(
            "generator has {} states, model declares {} regimes",
            generator.num_states(),
            dims.regimes
        )));
    }
    if controls.is_empty() {
        return Err(CoreError::InvalidInput("control list is empty".into()));
    }
    for u in controls {
        if u.len() != dims.control {
            return Err(CoreError::DimensionMismatch(format!(
                "control point of length {} against control dimension {}",
                u.len(),
                dims.control
            )));
        }
    }
    let (d, nd) = (dims.brownian, dims.regimes);
    let mm = window.n_nodes();
    let dx = window.dx();
    let dt = grid.dt();
    let n_steps = grid.n_steps;

    let mut values = Array3::<f64>::zeros((n_steps + 1, mm, nd));
    let mut u_index = Array3::<usize>::zeros((n_steps + 1, mm, nd));
    for m in 0..mm {
        let x = [window.node(m)];
        for i in 0..nd {
            values[[n_steps, m, i]] = match &spec.terminal_cost {
                Some(h) => h.value(&x, i),
                None => 0.0,
            };
        }
    }

    struct CellOut {
        v_new: f64,
        argmin: usize,
        cfl: f64,
        escaped: usize,
    }

    let mut cfl_margin = 0.0f64;
    let mut escaped_total = 0usize;
    for n in (0..=n_steps).rev() {
        // The terminal pass extracts the minimizer against the terminal
        // surface itself without updating values.
        let refrow = if n == n_steps { n } else { n + 1 };
        let prev = values.index_axis(Axis(0), refrow);
        let t = grid.node(n);
        let cells: Vec<Result<CellOut>> = (0..mm * nd)
            .into_par_iter()
            .map_init(
                || (vec![0.0; 1], vec![0.0; d], vec![0.0; nd]),
                |(bbuf, sbuf, gbuf), flat| {
                    let i = flat % nd;
                    let m = flat / nd;
                    let x = window.node(m);
                    let xs = [x];
                    let vm = prev[[m, i]];
                    // Ghost neighbours by linear extrapolation at the edges.
                    let vp = if m + 1 <= window.n_cells {
                        prev[[m + 1, i]]
                    } else {
                        2.0 * vm - prev[[m - 1, i]]
                    };
                    let vms = if m >= 1 {
                        prev[[m - 1, i]]
                    } else {
                        2.0 * vm - prev[[m + 1, i]]
                    };
                    let vxx = (vp - 2.0 * vm + vms) / (dx * dx);

                    let mut best = f64::INFINITY;
                    let mut argmin = 0usize;
                    let mut cfl_max = 0.0f64;
                    let mut escaped = 0usize;
                    for (c, u) in controls.iter().enumerate() {
                        spec.drift.value_into(t, &xs, u, i, bbuf);
                        spec.diffusion.value_into(t, &xs, u, i, sbuf);
                        spec.jump.value_into(t, &xs, u, i, gbuf);
                        let s2: f64 = sbuf.iter().map(|v| v * v).sum();
                        let mut b_eff = bbuf[0];
                        let mut lam_tot = 0.0;
                        let mut exchange = 0.0;
                        for j in 0..nd {
                            let lam = generator.jump_intensity(i, j);
                            if lam == 0.0 {
                                continue;
                            }
                            lam_tot += lam;
                            b_eff -= gbuf[j] * lam;
                            let xd = x + gbuf[j];
                            let vd = if xd < window.x_min || xd > window.x_max {
                                escaped += 1;
                                match boundary {
                                    JumpBoundary::Clamp => {
                                        prev[[window.nearest_node(xd), j]]
                                    }
                                    JumpBoundary::Extrapolate => {
                                        let m0 = if xd < window.x_min {
                                            0
                                        } else {
                                            window.n_cells - 1
                                        };
                                        let frac = (xd - window.node(m0)) / dx;
                                        (1.0 - frac) * prev[[m0, j]]
                                            + frac * prev[[m0 + 1, j]]
                                    }
                                }
                            } else {
                                let pos = (xd - window.x_min) / dx;
                                let m0 = (pos.floor() as usize).min(window.n_cells - 1);
                                let frac = pos - m0 as f64;
                                (1.0 - frac) * prev[[m0, j]] + frac * prev[[m0 + 1, j]]
                            };
                            exchange += lam * (vd - vm);
                        }
                        let cfl = dt * (s2 / (dx * dx) + b_eff.abs() / dx + lam_tot);
                        if cfl > 1.0 + 1e-9 {
                            return Err(CoreError::Stability(format!(
                                "explicit step outside its stability region at t = {t}, \
                                 x = {x}, regime {i}: Δt·(σ²/Δx² + |b_eff|/Δx + Σλ) = \
                                 {cfl:.4} > 1 with Δt = {dt:.3e}, Δx = {dx:.3e}"
                            )));
                        }
                        cfl_max = cfl_max.max(cfl);
                        let dvx = if b_eff >= 0.0 {
                            (vp - vm) / dx
                        } else {
                            (vm - vms) / dx
                        };
                        let run = match &spec.running_cost {
                            Some(l) => l.value(t, &xs, u, i),
                            None => 0.0,
                        };
                        let cand = b_eff * dvx + 0.5 * s2 * vxx + exchange + run;
                        if cand < best {
                            best = cand;
                            argmin = c;
                        }
                    }
                    Ok(CellOut {
                        v_new: vm + dt * best,
                        argmin,
                        cfl: cfl_max,
                        escaped,
                    })
                },
            )
            .collect();
        for (flat, cell) in cells.into_iter().enumerate() {
            let cell = cell?;
            let i = flat % nd;
            let m = flat / nd;
            if n < n_steps {
                values[[n, m, i]] = cell.v_new;
                if !cell.v_new.is_finite() {
                    return Err(CoreError::Numerical(format!(
                        "value surface became non-finite at t = {t}, node {m}, regime {i}"
                    )));
                }
            }
            u_index[[n, m, i]] = cell.argmin;
            cfl_margin = cfl_margin.max(cell.cfl);
            escaped_total += cell.escaped;
        }
    }

    Ok(ValueGrid {
        grid,
        window,
        n_regimes: nd,
        controls: controls.to_vec(),
        values,
        u_index,
        cfl_margin,
        escaped_destinations: escaped_total,
        monotone: escaped_total == 0,
    })
}

/// Monte Carlo estimate `(mean, standard error)` of the classical cost
/// `E[∫ l(t, x, u, α) dt + h(x_T, α_T)]` along a simulated bundle, a left
/// Riemann sum on the base nodes. Aborted paths are skipped.
pub fn policy_cost(bundle: &PathBundle) -> Result<(f64, f64)> {
    let spec = &bundle.spec;
    if spec.running_cost.is_none() && spec.terminal_cost.is_none() {
        return Err(CoreError::ModelInconsistency(
            "the model defines neither a running nor a terminal cost".into(),
        ));
    }
    let grid = bundle.grid;
    let dt = grid.dt();
    let mut ubuf = vec![0.0; spec.dims.control];
    let mut alive = vec![true; bundle.n_paths];
    for &p in &bundle.aborted {
        alive[p] = false;
    }
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut k = 0usize;
    for p in 0..bundle.n_paths {
        if !alive[p] {
            continue;
        }
        let mut acc = 0.0;
        if let Some(l) = &spec.running_cost {
            for n in 0..grid.n_steps {
                bundle.control_at(p, n, &mut ubuf);
                acc += l.value(grid.node(n), bundle.state(p, n), &ubuf, bundle.regime(p, n)) * dt;
            }
        }
        if let Some(h) = &spec.terminal_cost {
            acc += h.value(bundle.state(p, grid.n_steps), bundle.regime(p, grid.n_steps));
        }
        sum += acc;
        sumsq += acc * acc;
        k += 1;
    }
    if k == 0 {
        return Err(CoreError::InvalidInput("every simulated path aborted".into()));
    }
    let mean = sum / k as f64;
    let se = if k > 1 {
        ((sumsq / k as f64 - mean * mean).max(0.0) / (k as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

/// One policy of a dominance check.
#[derive(Clone, Debug)]
pub struct DominanceRow {
    pub label: String,
    /// Monte Carlo cost estimate and its standard error.
    pub cost: f64,
    pub se: f64,
    /// `V(0, x₀, e_{r₀})` read off the value grid.
    pub value: f64,
    /// `value ≤ cost + 3·se + tolerance`.
    pub pass: bool,
}

/// Result of [`verify_value_dominance`].
#[derive(Clone, Debug)]
pub struct DominanceReport {
    pub rows: Vec<DominanceRow>,
    /// The extracted-feedback equality case
    /// `|value − cost| ≤ 3·se + tolerance`.
    pub equality: DominanceRow,
    pub tolerance: f64,
    pub all_pass: bool,
}

/// Monte Carlo options of [`verify_value_dominance`].
#[derive(Clone, Debug)]
pub struct DominanceOptions {
    pub n_paths: usize,
    pub seed: u64,
    pub x0: f64,
    pub initial_regime: usize,
    /// Additive slack for the spatial/temporal discretization of the value
    /// grid, on top of the `3·se` statistical band.
    pub tolerance: f64,
}

/// Verifies the lower-bound property of the solved value surface: for every
/// supplied policy, `V(0, x₀, e_{r₀}) ≤ Ĵ(policy) + 3·SE + tolerance`, and
/// for the surface's own extracted feedback additionally
/// `|V − Ĵ| ≤ 3·SE + tolerance` (the equality case certifying the feedback
/// optimal). All simulations share the seed, so policies are compared on
/// common noise.
pub fn verify_value_dominance(
    vg: &ValueGrid,
    spec: &ModelSpec,
    generator: &RegimeGenerator,
    policies: &[ControlPolicy],
    opts: &DominanceOptions,
) -> Result<DominanceReport> {
    let v0 = vg.value_at(0, opts.x0, opts.initial_regime);
    let fcfg = ForwardConfig {
        n_paths: opts.n_paths,
        seed: opts.seed,
        x0: vec![opts.x0],
        initial_regime: opts.initial_regime,
    };
    let mut rows = Vec::with_capacity(policies.len());
    let mut all_pass = true;
    for (idx, policy) in policies.iter().enumerate() {
        let bundle = simulate_forward(spec, generator, vg.grid, policy, &fcfg)?;
        let (cost, se) = policy_cost(&bundle)?;
        let pass = v0 <= cost + 3.0 * se + opts.tolerance;
        all_pass &= pass;
        rows.push(DominanceRow {
            label: format!("policy {idx}"),
            cost,
            se,
            value: v0,
            pass,
        });
    }
    let feedback = vg.feedback_policy();
    let bundle = simulate_forward(spec, generator, vg.grid, &feedback, &fcfg)?;
    let (cost, se) = policy_cost(&bundle)?;
    let pass = (v0 - cost).abs() <= 3.0 * se + opts.tolerance;
    all_pass &= pass;
    let equality = DominanceRow {
        label: "extracted feedback".into(),
        cost,
        se,
        value: v0,
        pass,
    };
    Ok(DominanceReport {
        rows,
        equality,
        tolerance: opts.tolerance,
        all_pass,
    })
}

/// Result of [`argmin_agreement`].
#[derive(Clone, Copy, Debug)]
pub struct ArgminAgreementReport {
    pub cells: usize,
    pub agreements: usize,
    pub fraction: f64,
}

/// Compares, along sampled candidate trajectories, the feedback extracted
/// from the value grid against the pointwise grid minimizer of the extended
/// Hamiltonian built from the first/second adjoint estimates. Two
/// minimizers agree when they differ by at most one control-grid cell per
/// coordinate (both minimizations run over the same candidate list; a flat
/// objective can land on either edge of the same plateau cell).
///
/// The bundle must be simulated on the grid the surface was solved on, and
/// `opts.grid_points` must enumerate the control set to exactly the
/// surface's control list.
pub fn argmin_agreement(
    vg: &ValueGrid,
    bundle: &PathBundle,
    adjoints: &AdjointSolutions,
    opts: &MaxConditionOptions,
) -> Result<ArgminAgreementReport> {
    let spec = &bundle.spec;
    if bundle.grid != vg.grid {
        return Err(CoreError::InvalidInput(
            "bundle and value grid use different time grids".into(),
        ));
    }
    let candidates = spec.control_set.enumerate(opts.grid_points);
    if candidates.len() != vg.controls.len()
        || candidates
            .iter()
            .zip(&vg.controls)
            .any(|(a, b)| a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-12))
    {
        return Err(CoreError::InvalidInput(
            "value grid was solved over a different control list".into(),
        ));
    }
    // Per-coordinate agreement slack: the smallest positive gap among the
    // candidate coordinates of each control dimension.
    let cdim = spec.dims.control;
    let mut slack = vec![0.0f64; cdim];
    for k in 0..cdim {
        let mut coords: Vec<f64> = candidates.iter().map(|u| u[k]).collect();
        coords.sort_by(f64::total_cmp);
        let mut gap = f64::INFINITY;
        for w in coords.windows(2) {
            let g = w[1] - w[0];
            if g > 1e-14 {
                gap = gap.min(g);
            }
        }
        slack[k] = if gap.is_finite() { gap } else { 0.0 };
    }

    let paths: Vec<usize> = if opts.max_paths == 0 || opts.max_paths >= bundle.n_paths {
        (0..bundle.n_paths).collect()
    } else {
        let stride = bundle.n_paths / opts.max_paths;
        (0..opts.max_paths).map(|i| i * stride).collect()
    };
    let mut ubar = vec![0.0; cdim];
    let mut cells = 0usize;
    let mut agreements = 0usize;
    for n in 0..bundle.grid.n_steps {
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
            let mut best = f64::INFINITY;
            let mut u_mp = &candidates[0];
            for u in &candidates {
                let h = h_function(spec, &bundle.generator, &pt, u)?;
                if h < best {
                    best = h;
                    u_mp = u;
                }
            }
            let u_fd = vg.u_star_at(n, pt.x[0], r);
            let agree = u_mp
                .iter()
                .zip(u_fd)
                .zip(&slack)
                .all(|((a, b), s)| (a - b).abs() <= s + 1e-9);
            cells += 1;
            agreements += agree as usize;
        }
    }
    if cells == 0 {
        return Err(CoreError::InvalidInput("no cells sampled".into()));
    }
    Ok(ArgminAgreementReport {
        cells,
        agreements,
        fraction: agreements as f64 / cells as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coefficient, ControlSet, Dims, RunningCost, ScalarStateFn};
    use crate::mp::solve_adjoints;
    use crate::bsde::BackwardConfig;
    use ndarray::array;

    fn gen2(l01: f64, l10: f64) -> RegimeGenerator {
        RegimeGenerator::new(array![[-l01, l01], [l10, -l10]]).unwrap()
    }

    fn gen1() -> RegimeGenerator {
        RegimeGenerator::new(array![[0.0]]).unwrap()
    }

    /// Cost-free model: the value stays at the terminal constant and ties
    /// resolve to the first control point, whatever the dynamics do.
    #[test]
    fn cost_free_model_keeps_the_terminal_constant() {
        let gen = gen2(0.7, 0.4);
        let spec = ModelSpec {
            dims: Dims { state: 1, brownian: 1, regimes: 2, control: 1 },
            drift: Coefficient::new(1, 1, |_t, x, u, _r, out: &mut [f64]| {
                out[0] = 0.2 * x[0] + 0.3 * u[0];
            }),
            diffusion: Coefficient::new(1, 1, |_t, _x, _u, _r, out: &mut [f64]| out[0] = 0.3),
            jump: Coefficient::new(1, 2, |_t, _x, _u, r, out: &mut [f64]| {
                out.fill(0.0);
                out[1 - r] = 0.04;
            }),
            driver: None,
            terminal_y: None,
            running_cost: None,
            terminal_cost: Some(ScalarStateFn::new(|_x, _r| 2.5)),
            control_set: ControlSet::interval(0.0, 1.0),
        };
        let grid = TimeGrid::new(0.5, 200).unwrap();
        let window = StateWindow::new(-1.0, 1.0, 100).unwrap();
        let controls = vec![vec![0.0], vec![0.5], vec![1.0]];
        let vg = solve_hjb(&spec, &gen, grid, window, &controls, JumpBoundary::Extrapolate)
            .unwrap();
        for v in vg.values.iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
        for idx in vg.u_index.iter() {
            assert_eq!(*idx, 0, "ties must select the lowest control index");
        }
        // Boundary nodes jump past the window edge, so the run is flagged,
        // yet the extrapolated constant keeps the surface exact.
        assert!(!vg.monotone);
        assert!(vg.escaped_destinations > 0);
        assert!(vg.cfl_margin <= 1.0);
    }

    /// Uncontrolled `b = 0, σ = 1, γ = 0, l = 0, h = x²` has the closed
    /// form `V(t, x) = x² + (T − t)`. The centred second difference is
    /// exact for quadratics, so the interior error is pure boundary-layer
    /// leakage and stays under the documented bound.
    #[test]
    fn heat_equation_value_matches_the_closed_form() {
        let spec = ModelSpec {
            dims: Dims { state: 1, brownian: 1, regimes: 1, control: 1 },
            drift: Coefficient::zero(1, 1),
            diffusion: Coefficient::new(1, 1, |_t, _x, _u, _r, out: &mut [f64]| out[0] = 1.0),
            jump: Coefficient::zero(1, 1),
            driver: None,
            terminal_y: None,
            running_cost: None,
            terminal_cost: Some(ScalarStateFn::new(|x, _r| x[0] * x[0])),
            control_set: ControlSet::Grid { points: vec![vec![0.0]] },
        };
        let t_end = 0.5;
        let grid = TimeGrid::new(t_end, 1500).unwrap();
        let window = StateWindow::new(-4.25, 4.25, 425).unwrap();
        assert!((window.dx() - 0.02).abs() < 1e-12);
        let vg = solve_hjb(
            &spec,
            &gen1(),
            grid,
            window,
            &[vec![0.0]],
            JumpBoundary::Extrapolate,
        )
        .unwrap();
        let mut worst = 0.0f64;
        for m in 0..window.n_nodes() {
            let x = window.node(m);
            if x.abs() > 2.125 {
                continue;
            }
            worst = worst.max((vg.value(0, m, 0) - (x * x + t_end)).abs());
        }
        assert!(worst <= 5e-3, "interior error {worst}");
        assert!(vg.monotone);
    }

    /// Uncontrolled two-regime model with jumps and a running cost: the
    /// grid value at the initial point matches an independent Monte Carlo
    /// cost estimate within its confidence band plus the grid tolerance.
    #[test]
    fn two_regime_value_matches_monte_carlo() {
        let gen = gen2(0.6, 0.9);
        let spec = ModelSpec {
            dims: Dims { state: 1, brownian: 1, regimes: 2, control: 1 },
            drift: Coefficient::new(1, 1, |_t, x, _u, _r, out: &mut [f64]| {
                out[0] = 0.2 * x[0].tanh();
            }),
            diffusion: Coefficient::new(1, 1, |_t, _x, _u, r, out: &mut [f64]| {
                out[0] = if r == 0 { 0.5 } else { 0.4 };
            }),
            jump: Coefficient::new(1, 2, |_t, _x, _u, r, out: &mut [f64]| {
                out.fill(0.0);
                out[1 - r] = if r == 0 { 0.08 } else { -0.06 };
            }),
            driver: None,
            terminal_y: None,
            running_cost: Some(RunningCost::new(|_t, x, _u, _r| 0.25 * x[0] * x[0])),
            terminal_cost: Some(ScalarStateFn::new(|x, r| {
                0.5 * x[0] * x[0] + if r == 0 { 0.1 } else { -0.1 }
            })),
            control_set: ControlSet::Grid { points: vec![vec![0.0]] },
        };
        let grid = TimeGrid::new(0.6, 400).unwrap();
        let window = StateWindow::new(-2.1, 2.7, 240).unwrap();
        let vg = solve_hjb(
            &spec,
            &gen,
            grid,
            window,
            &[vec![0.0]],
            JumpBoundary::Extrapolate,
        )
        .unwrap();
        let v0 = vg.value_at(0, 0.3, 0);

        let policy = ControlPolicy::constant(vec![0.0]);
        let mc_grid = TimeGrid::new(0.6, 300).unwrap();
        let bundle = simulate_forward(
            &spec,
            &gen,
            mc_grid,
            &policy,
            &ForwardConfig { n_paths: 20_000, seed: 77, x0: vec![0.3], initial_regime: 0 },
        )
        .unwrap();
        let (cost, se) = policy_cost(&bundle).unwrap();
        assert!(
            (v0 - cost).abs() <= 3.0 * se + 5e-3,
            "grid value {v0} vs Monte Carlo {cost} ± {se}"
        );
    }

    /// Raising the terminal condition by a constant raises every node by
    /// exactly that constant (the minimization commutes with constant
    /// shifts), in particular never lowers any node.
    #[test]
    fn raising_the_terminal_never_lowers_the_value() {
        let gen = gen2(0.8, 0.5);
        let build = |offset: f64| ModelSpec {
            dims: Dims { state: 1, brownian: 1, regimes: 2, control: 1 },
            drift: Coefficient::new(1, 1, |_t, _x, u, _r, out: &mut [f64]| out[0] = 0.4 * u[0]),
            diffusion: Coefficient::new(1, 1, |_t, _x, _u, _r, out: &mut [f64]| out[0] = 0.35),
            jump: Coefficient::new(1, 2, |_t, _x, _u, r, out: &mut [f64]| {
                out.fill(0.0);
                out[1 - r] = 0.05;
            }),
            driver: None,
            terminal_y: None,
            running_cost: Some(RunningCost::new(|_t, x, u, _r| {
                x[0] * x[0] + 0.5 * u[0] * u[0]
            })),
            terminal_cost: Some(ScalarStateFn::new(move |x, _r| {
                (x[0] - 0.5) * (x[0] - 0.5) + offset
            })),
            control_set: ControlSet::interval(0.0, 1.0),
        };
        let grid = TimeGrid::new(0.4, 220).unwrap();
        let window = StateWindow::new(-1.4, 1.8, 160).unwrap();
        let controls: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64 * 0.25]).collect();
        let base = solve_hjb(&build(0.0), &gen, grid, window, &controls, JumpBoundary::Extrapolate)
            .unwrap();
        let lifted =
            solve_hjb(&build(0.1), &gen, grid, window, &controls, JumpBoundary::Extrapolate)
                .unwrap();
        for (a, b) in base.values.iter().zip(lifted.values.iter()) {
            assert!(*b >= a - 1e-12, "comparison principle violated");
            assert!((b - a - 0.1).abs() < 1e-9, "constant shift must propagate exactly");
        }
    }

    #[test]
    fn stability_violation_reports_the_offending_sizes() {
        let spec = ModelSpec {
            dims: Dims { state: 1, brownian: 1, regimes: 1, control: 1 },
            drift: Coefficient::zero(1, 1),
            diffusion: Coefficient::new(1, 1, |_t, _x, _u, _r, out: &mut [f64]| out[0] = 1.0),
            jump: Coefficient::zero(1, 1),
            driver: None,
            terminal_y: None,
            running_cost: None,
            terminal_cost: Some(ScalarStateFn::new(|x, _r| x[0])),
            control_set: ControlSet::Grid { points: vec![vec![0.0]] },
        };
        // Δt = 0.1, Δx = 0.1: Δt σ²/Δx² = 10 ≫ 1.
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let window = StateWindow::new(-1.0, 1.0, 20).unwrap();
        let err = solve_hjb(&spec, &gen1(), grid, window, &[vec![0.0]], JumpBoundary::Clamp);
        match err {
            Err(CoreError::Stability(msg)) => {
                assert!(msg.contains("Δx"), "message should carry the sizes: {msg}");
            }
            other => panic!("expected a stability error, got {other:?}"),
        }
    }

    /// Jumps that leave the window are valued by the requested boundary
    /// mode and clear the monotone flag.
    #[test]
    fn escaping_jump_destinations_flag_the_run() {
        let gen = gen2(0.5, 0.5);
        let spec = ModelSpec {
            dims: Dims { state: 1, brownian: 1, regimes: 2, control: 1 },
            drift: Coefficient::zero(1, 1),
            diffusion: Coefficient::new(1, 1, |_t, _x, _u, _r, out: &mut [f64]| out[0] = 0.2),
            jump: Coefficient::new(1, 2, |_t, _x, _u, r, out: &mut [f64]| {
                out.fill(0.0);
                out[1 - r] = 5.0;
            }),
            driver: None,
            terminal_y: None,
            running_cost: None,
            terminal_cost: Some(ScalarStateFn::new(|x, _r| x[0] * x[0])),
            control_set: ControlSet::Grid { points: vec![vec![0.0]] },
        };
        let grid = TimeGrid::new(0.3, 300).unwrap();
        let window = StateWindow::new(-1.0, 1.0, 50).unwrap();
        for mode in [JumpBoundary::Extrapolate, JumpBoundary::Clamp] {
            let vg = solve_hjb(&spec, &gen, grid, window, &[vec![0.0]], mode).unwrap();
            assert!(!vg.monotone);
            assert!(vg.escaped_destinations > 0);
            assert!(vg.values.iter().all(|v| v.is_finite()));
        }
    }

    fn controlled_spec() -> (RegimeGenerator, ModelSpec) {
        let gen = gen2(0.7, 0.4);
        let spec = ModelSpec {
            dims: Dims { state: 1, brownian: 1, regimes: 2, control: 1 },
            drift: Coefficient::new(1, 1, |_t, _x, u, _r, out: &mut [f64]| out[0] = 0.5 * u[0]),
            diffusion: Coefficient::new(1, 1, |_t, _x, _u, _r, out: &mut [f64]| out[0] = 0.4),
            jump: Coefficient::new(1, 2, |_t, _x, _u, r, out: &mut [f64]| {
                out.fill(0.0);
                out[1 - r] = 0.04;
            }),
            driver: None,
            terminal_y: None,
            running_cost: Some(RunningCost::new(|_t, x, u, _r| {
                0.3 * x[0] * x[0] + u[0] * u[0]
            })),
            terminal_cost: Some(ScalarStateFn::new(|x, _r| {
                0.5 * (x[0] - 1.0) * (x[0] - 1.0)
            })),
            control_set: ControlSet::interval(0.0, 1.0),
        };
        (gen, spec)
    }

    /// Dominance on a genuinely controlled instance: the surface bounds the
    /// costs of constant policies from below, matches its own extracted
    /// feedback, and an artificially lifted surface is caught by the same
    /// check.
    #[test]
    fn dominance_holds_and_a_lifted_surface_fails() {
        let (gen, spec) = controlled_spec();
        let grid = TimeGrid::new(0.5, 250).unwrap();
        let window = StateWindow::new(-1.5, 1.9, 170).unwrap();
        let controls: Vec<Vec<f64>> = (0..11).map(|k| vec![k as f64 * 0.1]).collect();
        let vg = solve_hjb(&spec, &gen, grid, window, &controls, JumpBoundary::Extrapolate)
            .unwrap();
        let opts = DominanceOptions {
            n_paths: 8000,
            seed: 99,
            x0: 0.2,
            initial_regime: 0,
            tolerance: 5e-3,
        };
        let policies = vec![
            ControlPolicy::constant(vec![0.0]),
            ControlPolicy::constant(vec![0.5]),
            ControlPolicy::constant(vec![1.0]),
        ];
        let rep = verify_value_dominance(&vg, &spec, &gen, &policies, &opts).unwrap();
        assert!(rep.all_pass, "dominance report: {rep:?}");
        assert!(rep.equality.pass);

        let mut lifted = vg.clone();
        lifted.values += 0.1;
        let rep2 = verify_value_dominance(&lifted, &spec, &gen, &policies, &opts).unwrap();
        assert!(
            !rep2.equality.pass,
            "a surface 0.1 above the optimum must fail its equality case"
        );
    }

    /// The extracted feedback agrees with the extended-Hamiltonian grid
    /// minimizer along candidate trajectories.
    #[test]
    fn feedback_agrees_with_the_hamiltonian_argmin() {
        let (gen, spec) = controlled_spec();
        let grid = TimeGrid::new(0.5, 250).unwrap();
        let window = StateWindow::new(-1.5, 1.9, 170).unwrap();
        let controls = spec.control_set.enumerate(21);
        let vg = solve_hjb(&spec, &gen, grid, window, &controls, JumpBoundary::Extrapolate)
            .unwrap();
        let bundle = simulate_forward(
            &spec,
            &gen,
            grid,
            &vg.feedback_policy(),
            &ForwardConfig { n_paths: 400, seed: 11, x0: vec![0.2], initial_regime: 0 },
        )
        .unwrap();
        let adj = solve_adjoints(&bundle, &BackwardConfig::default()).unwrap();
        let opts = MaxConditionOptions { grid_points: 21, tolerance: 0.02, max_paths: 48 };
        let rep = argmin_agreement(&vg, &bundle, &adj, &opts).unwrap();
        assert!(
            rep.fraction >= 0.9,
            "agreement {} over {} cells",
            rep.fraction,
            rep.cells
        );
    }

    #[test]
    fn feedback_policy_reads_the_nearest_node() {
        let (gen, spec) = controlled_spec();
        let grid = TimeGrid::new(0.5, 50).unwrap();
        let window = StateWindow::new(-1.5, 1.9, 68).unwrap();
        let controls: Vec<Vec<f64>> = (0..11).map(|k| vec![k as f64 * 0.1]).collect();
        let vg = solve_hjb(&spec, &gen, grid, window, &controls, JumpBoundary::Extrapolate)
            .unwrap();
        let policy = vg.feedback_policy();
        let mut out = vec![0.0];
        let t = 0.203;
        let x = 0.511;
        policy.eval_into(t, &[x], 1, &spec.control_set, &mut out);
        let n = grid.nearest_node(t);
        let m = window.nearest_node(x);
        assert_eq!(out[0], vg.u_star(n, m, 1)[0]);
    }

    #[test]
    fn rejects_multidimensional_state_and_bad_controls() {
        let (gen, mut spec) = controlled_spec();
        let grid = TimeGrid::new(0.5, 50).unwrap();
        let window = StateWindow::new(-1.0, 1.0, 40).unwrap();
        assert!(matches!(
            solve_hjb(&spec, &gen, grid, window, &[], JumpBoundary::Clamp),
            Err(CoreError::InvalidInput(_))
        ));
        assert!(matches!(
            solve_hjb(&spec, &gen, grid, window, &[vec![0.0, 1.0]], JumpBoundary::Clamp),
            Err(CoreError::DimensionMismatch(_))
        ));
        spec.dims.state = 2;
        assert!(matches!(
            solve_hjb(&spec, &gen, grid, window, &[vec![0.0]], JumpBoundary::Clamp),
            Err(CoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn window_helpers_are_consistent() {
        let w = StateWindow::centered(0.3, 1.2, 0.05).unwrap();
        assert!(w.x_min <= -0.9 + 1e-12 && w.x_max >= 1.5 - 1e-12);
        assert_eq!(w.n_nodes(), w.n_cells + 1);
        assert_eq!(w.nearest_node(w.x_min - 5.0), 0);
        assert_eq!(w.nearest_node(w.x_max + 5.0), w.n_cells);
        assert!(StateWindow::new(0.0, 0.0, 10).is_err());
        assert!(StateWindow::new(0.0, 1.0, 1).is_err());

        let (_, spec) = controlled_spec();
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let controls = vec![vec![0.0], vec![1.0]];
        let hw = StateWindow::default_half_width(&spec, grid, 0.2, &controls);
        assert!((hw - 6.0 * 0.4 * 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn policy_cost_requires_some_cost_data() {
        let (gen, mut spec) = controlled_spec();
        spec.running_cost = None;
        spec.terminal_cost = None;
        let grid = TimeGrid::new(0.5, 20).unwrap();
        let bundle = simulate_forward(
            &spec,
            &gen,
            grid,
            &ControlPolicy::constant(vec![0.0]),
            &ForwardConfig { n_paths: 10, seed: 1, x0: vec![0.0], initial_regime: 0 },
        )
        .unwrap();
        assert!(matches!(
            policy_cost(&bundle),
            Err(CoreError::ModelInconsistency(_))
        ));
    }
}
