//! Needle (spike) variations of a control policy, the first- and
//! second-order variational equations they induce, and empirical
//! convergence-rate estimation for the pathwise expansion.
//!
//! A spike replaces the candidate control `ū` by a fixed value `v` on a
//! window `E_ε = [τ, τ+ε)` snapped to whole grid steps. Writing
//! `δφ(t) = φ(t, x̄(t), v) − φ(t, x̄(t), ū(t))` for any coefficient `φ`, the
//! variational processes solve, with `x₁(0) = x₂(0) = 0`,
//!
//! ```text
//! dx₁ = [b_x x₁ + δb·1_E] dt + Σ_k [σ_x^k x₁ + δσ^k·1_E] dW^k
//!       + Σ_j [γ_x^j x₁ + δγ^j·1_E] dΦ̃_j,
//!
//! dx₂ = [b_x x₂ + ½ x₁ᵀb_xx x₁ + δb_x x₁·1_E] dt
//!       + Σ_k [σ_x^k x₂ + ½ x₁ᵀσ_xx^k x₁ + δσ_x^k x₁·1_E] dW^k
//!       + Σ_j [γ_x^j x₂ + ½ x₁ᵀγ_xx^j x₁ + δγ_x^j x₁·1_E] dΦ̃_j,
//! ```
//!
//! integrated substep by substep along each simulated path with the same
//! conventions as the forward walker (coefficients frozen at substep left
//! endpoints, exact compensator drift, jump loadings applied at jumps), so
//! the discrete variational solutions line up with the stored paths to
//! rounding whenever the continuous ones do exactly.
//!
//! [`estimate_rates`] re-simulates the spiked system over a ladder of
//! window lengths under common random numbers (one Gaussian per substep
//! regardless of the policy) and tracks, as `sup` over base nodes of the
//! path mean:
//!
//! | series              | quantity                    | expected order |
//! |---------------------|-----------------------------|----------------|
//! | `first_variation`   | `E‖x₁‖²`                    | `ε`            |
//! | `state_deviation`   | `E‖x^ε − x̄‖²`               | `ε`            |
//! | `second_variation`  | `E‖x₂‖²`                    | `ε²`           |
//! | `first_remainder`   | `E‖x^ε − x̄ − x₁‖²`          | `ε²`           |
//! | `second_remainder`  | `E‖x^ε − x̄ − x₁ − x₂‖²`     | `o(ε²)`        |
//!
//! together with the per-`ε` cost-expansion ratio: the path mean of
//!
//! ```text
//! ∫ [l_x·(x₁+x₂) + ½ x₁ᵀl_xx x₁ + δl·1_E] dt
//!   + h_x(x̄(T))·(x₁+x₂)(T) + ½ x₁ᵀh_xx(x̄(T)) x₁(T),
//! ```
//!
//! divided by `ε`. This mean equals `J(u^ε) − J(ū) + o(ε)`, so at a
//! minimizing candidate the ratio cannot fall noticeably below zero. The
//! same first-order statement in Hamiltonian form is provided by
//! [`variational_inequality`]: `E ∫_{E_ε} [ℋ(v) − ℋ(ū)] dt / ε`, which is
//! nonnegative up to `o(1)` at an optimum and strictly negative for a
//! candidate that a spike can improve.

use crate::error::{CoreError, Result};
use crate::forward::{replay_path, simulate_forward, ForwardConfig, PathBundle};
use crate::grid::TimeGrid;
use crate::model::ControlPolicy;
use crate::mp::{h_function, AdjointSolutions, ExtendedHamiltonianPoint};
use crate::stats::{log2_slope, mean, standard_error};
use ndarray::Array3;
use rayon::prelude::*;

/// A needle variation: control `v` on the half-open window
/// `[node(start_step), node(start_step + width_steps))`.
#[derive(Clone, Debug)]
pub struct SpikePerturbation {
    pub start_step: usize,
    pub width_steps: usize,
    pub v: Vec<f64>,
}

impl SpikePerturbation {
    /// Snaps the window `[tau, tau+eps)` to whole grid steps: at least one
    /// step wide, shifted left if needed so it fits inside the horizon.
    pub fn snapped(grid: TimeGrid, tau: f64, eps: f64, v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(CoreError::InvalidInput("spike control must be non-empty".into()));
        }
        if !(eps > 0.0) || !(tau >= 0.0) || tau > grid.horizon {
            return Err(CoreError::InvalidInput(format!(
                "spike window [{tau}, {tau}+{eps}) is not inside [0, {}]",
                grid.horizon
            )));
        }
        let dt = grid.dt();
        let width = ((eps / dt).round() as usize).clamp(1, grid.n_steps);
        let start = (((tau / dt).round() as usize).min(grid.n_steps - width)).max(0);
        Ok(Self {
            start_step: start,
            width_steps: width,
            v,
        })
    }

    /// Actual window length after snapping.
    pub fn eps(&self, grid: TimeGrid) -> f64 {
        self.width_steps as f64 * grid.dt()
    }

    /// Window endpoints `(lo, hi)` on the grid.
    pub fn window(&self, grid: TimeGrid) -> (f64, f64) {
        (
            grid.node(self.start_step),
            grid.node(self.start_step + self.width_steps),
        )
    }
}

/// Wraps `base` so the spike value overrides it inside the window.
/// Clamping still happens at the evaluation site, as for any policy.
pub fn apply_spike(base: &ControlPolicy, grid: TimeGrid, spike: &SpikePerturbation) -> ControlPolicy {
    let inner = base.clone();
    let (lo, hi) = spike.window(grid);
    let v = spike.v.clone();
    ControlPolicy::feedback(base.dim(), move |t, x, r, out| {
        if t >= lo && t < hi {
            out.copy_from_slice(&v);
        } else {
            inner.raw_into(t, x, r, out);
        }
    })
}

/// First- and second-order variational solutions along a bundle, plus the
/// per-path second-order cost expansion (see the module docs). Rows of
/// aborted paths are carried but meaningless; callers filter on
/// `bundle.aborted`.
pub struct VariationalSolution {
    /// `x₁` at base nodes, `(n_paths, n_nodes, L)`.
    pub x1: Array3<f64>,
    /// `x₂` at base nodes, `(n_paths, n_nodes, L)`.
    pub x2: Array3<f64>,
    /// Per-path cost expansion (running + terminal parts).
    pub cost_expansion: Vec<f64>,
}

/// Integrates the variational equations of `spike` along every path of the
/// bundle by exact replay. The spike value is clamped into the control set
/// once, mirroring what the spiked forward walk would see.
pub fn solve_variational_eqs(
    bundle: &PathBundle,
    spike: &SpikePerturbation,
) -> Result<VariationalSolution> {
    let spec = &bundle.spec;
    let dims = spec.dims;
    let (l, d, nd) = (dims.state, dims.brownian, dims.regimes);
    if spike.v.len() != dims.control {
        return Err(CoreError::DimensionMismatch(format!(
            "spike control has dimension {}, model control dimension is {}",
            spike.v.len(),
            dims.control
        )));
    }
    if spike.width_steps == 0 || spike.start_step + spike.width_steps > bundle.grid.n_steps {
        return Err(CoreError::InvalidInput("spike window does not fit the grid".into()));
    }
    let (lo, hi) = spike.window(bundle.grid);
    let mut vcl = spike.v.clone();
    spec.control_set.clamp(&mut vcl);
    let n_nodes = bundle.grid.n_steps + 1;

    struct PathOut {
        x1: Vec<f64>,
        x2: Vec<f64>,
        cost: f64,
    }

    let outs: Vec<PathOut> = (0..bundle.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut x1 = vec![0.0; l];
            let mut x2 = vec![0.0; l];
            let mut out_x1 = vec![0.0; n_nodes * l];
            let mut out_x2 = vec![0.0; n_nodes * l];
            let mut cost = 0.0f64;
            let mut bx = vec![0.0; l * l];
            let mut sx = vec![0.0; l * d * l];
            let mut gx = vec![0.0; l * nd * l];
            let mut bxx = vec![0.0; l * l * l];
            let mut sxx = vec![0.0; l * d * l * l];
            let mut gxx = vec![0.0; l * nd * l * l];
            let mut db = vec![0.0; l];
            let mut ds = vec![0.0; l * d];
            let mut dg = vec![0.0; l * nd];
            let mut dbx = vec![0.0; l * l];
            let mut dsx = vec![0.0; l * d * l];
            let mut dgx = vec![0.0; l * nd * l];
            let mut lx = vec![0.0; l];
            let mut lxx = vec![0.0; l * l];
            let mut mult = vec![0.0; nd];
            let mut inc1 = vec![0.0; l];
            let mut inc2 = vec![0.0; l];

            replay_path(bundle, p, |info| {
                let in_window = info.t >= lo && info.t < hi;
                let (t, x, u, r, dt) = (info.t, info.x, info.u, info.regime, info.dt);
                spec.drift.dx_into(t, x, u, r, &mut bx);
                spec.diffusion.dx_into(t, x, u, r, &mut sx);
                spec.jump.dx_into(t, x, u, r, &mut gx);
                spec.drift.dxx_into(t, x, u, r, &mut bxx);
                spec.diffusion.dxx_into(t, x, u, r, &mut sxx);
                spec.jump.dxx_into(t, x, u, r, &mut gxx);
                if in_window {
                    // δ values and δ first derivatives at the spike control.
                    spec.drift.value_into(t, x, &vcl, r, &mut db);
                    spec.diffusion.value_into(t, x, &vcl, r, &mut ds);
                    spec.jump.value_into(t, x, &vcl, r, &mut dg);
                    for (dv, base) in db.iter_mut().zip(info.b) {
                        *dv -= base;
                    }
                    for (dv, base) in ds.iter_mut().zip(info.sigma) {
                        *dv -= base;
                    }
                    for (dv, base) in dg.iter_mut().zip(info.gamma) {
                        *dv -= base;
                    }
                    spec.drift.dx_into(t, x, &vcl, r, &mut dbx);
                    spec.diffusion.dx_into(t, x, &vcl, r, &mut dsx);
                    spec.jump.dx_into(t, x, &vcl, r, &mut dgx);
                    for (dv, base) in dbx.iter_mut().zip(bx.iter()) {
                        *dv -= base;
                    }
                    for (dv, base) in dsx.iter_mut().zip(sx.iter()) {
                        *dv -= base;
                    }
                    for (dv, base) in dgx.iter_mut().zip(gx.iter()) {
                        *dv -= base;
                    }
                }
                for (j, m) in mult.iter_mut().enumerate() {
                    *m = -bundle.generator.jump_intensity(r, j) * dt;
                }
                if let Some((target, _)) = info.jump {
                    mult[target] += 1.0;
                }

                for k in 0..l {
                    // First variation.
                    let mut a1 = 0.0;
                    for a in 0..l {
                        a1 += bx[k * l + a] * x1[a];
                    }
                    if in_window {
                        a1 += db[k];
                    }
                    let mut acc1 = a1 * dt;
                    for dd in 0..d {
                        let mut s1 = 0.0;
                        for a in 0..l {
                            s1 += sx[(k * d + dd) * l + a] * x1[a];
                        }
                        if in_window {
                            s1 += ds[k * d + dd];
                        }
                        acc1 += s1 * info.dw[dd];
                    }
                    for j in 0..nd {
                        if mult[j] == 0.0 {
                            continue;
                        }
                        let mut g1 = 0.0;
                        for a in 0..l {
                            g1 += gx[(k * nd + j) * l + a] * x1[a];
                        }
                        if in_window {
                            g1 += dg[k * nd + j];
                        }
                        acc1 += g1 * mult[j];
                    }
                    inc1[k] = acc1;

                    // Second variation (uses the pre-update x₁).
                    let quad = |hess: &[f64], base: usize| -> f64 {
                        let mut q = 0.0;
                        for a in 0..l {
                            for b in 0..l {
                                q += hess[(base + a) * l + b] * x1[a] * x1[b];
                            }
                        }
                        0.5 * q
                    };
                    let mut a2 = quad(&bxx, k * l);
                    for a in 0..l {
                        a2 += bx[k * l + a] * x2[a];
                    }
                    if in_window {
                        for a in 0..l {
                            a2 += dbx[k * l + a] * x1[a];
                        }
                    }
                    let mut acc2 = a2 * dt;
                    for dd in 0..d {
                        let mut s2 = quad(&sxx, (k * d + dd) * l);
                        for a in 0..l {
                            s2 += sx[(k * d + dd) * l + a] * x2[a];
                        }
                        if in_window {
                            for a in 0..l {
                                s2 += dsx[(k * d + dd) * l + a] * x1[a];
                            }
                        }
                        acc2 += s2 * info.dw[dd];
                    }
                    for j in 0..nd {
                        if mult[j] == 0.0 {
                            continue;
                        }
                        let mut g2 = quad(&gxx, (k * nd + j) * l);
                        for a in 0..l {
                            g2 += gx[(k * nd + j) * l + a] * x2[a];
                        }
                        if in_window {
                            for a in 0..l {
                                g2 += dgx[(k * nd + j) * l + a] * x1[a];
                            }
                        }
                        acc2 += g2 * mult[j];
                    }
                    inc2[k] = acc2;
                }

                // Running-cost expansion, with the pre-update variations.
                if let Some(rc) = &spec.running_cost {
                    rc.dx_into(t, x, u, r, &mut lx);
                    rc.dxx_into(t, x, u, r, &mut lxx);
                    let mut term = 0.0;
                    for a in 0..l {
                        term += lx[a] * (x1[a] + x2[a]);
                        for b in 0..l {
                            term += 0.5 * lxx[a * l + b] * x1[a] * x1[b];
                        }
                    }
                    if in_window {
                        term += rc.value(t, x, &vcl, r) - rc.value(t, x, u, r);
                    }
                    cost += term * dt;
                }

                for k in 0..l {
                    x1[k] += inc1[k];
                    x2[k] += inc2[k];
                }
                let row = (info.base_step + 1) * l;
                out_x1[row..row + l].copy_from_slice(&x1);
                out_x2[row..row + l].copy_from_slice(&x2);
            })
            .expect("path index in range");

            if let Some(h) = &spec.terminal_cost {
                let xt = bundle.state(p, bundle.grid.n_steps);
                let rt = bundle.regime(p, bundle.grid.n_steps);
                let mut hx = vec![0.0; l];
                let mut hxx = vec![0.0; l * l];
                h.grad_into(xt, rt, &mut hx);
                h.hess_into(xt, rt, &mut hxx);
                for a in 0..l {
                    cost += hx[a] * (x1[a] + x2[a]);
                    for b in 0..l {
                        cost += 0.5 * hxx[a * l + b] * x1[a] * x1[b];
                    }
                }
            }
            PathOut {
                x1: out_x1,
                x2: out_x2,
                cost,
            }
        })
        .collect();

    let mut x1 = Array3::<f64>::zeros((bundle.n_paths, n_nodes, l));
    let mut x2 = Array3::<f64>::zeros((bundle.n_paths, n_nodes, l));
    let mut cost_expansion = Vec::with_capacity(bundle.n_paths);
    {
        let s1 = x1.as_slice_mut().expect("contiguous");
        let s2 = x2.as_slice_mut().expect("contiguous");
        for (p, out) in outs.into_iter().enumerate() {
            s1[p * n_nodes * l..(p + 1) * n_nodes * l].copy_from_slice(&out.x1);
            s2[p * n_nodes * l..(p + 1) * n_nodes * l].copy_from_slice(&out.x2);
            cost_expansion.push(out.cost);
        }
    }
    Ok(VariationalSolution {
        x1,
        x2,
        cost_expansion,
    })
}

/// Spike placement and window ladder of [`estimate_rates`].
#[derive(Clone, Debug)]
pub struct RatesConfig {
    /// Spike control value (clamped into the control set when used).
    pub v: Vec<f64>,
    /// Window start (snapped to a node).
    pub tau: f64,
    /// Window lengths; each is snapped to whole steps.
    pub eps_ladder: Vec<f64>,
}

impl RatesConfig {
    /// Window at a quarter of the horizon, lengths `2⁻³T … 2⁻⁸T`.
    pub fn geometric(horizon: f64, v: Vec<f64>) -> Self {
        Self {
            v,
            tau: 0.25 * horizon,
            eps_ladder: (3..=8).map(|k| horizon * 0.5f64.powi(k)).collect(),
        }
    }
}

/// One tracked quantity across the window ladder.
#[derive(Clone, Debug)]
pub struct RateSeries {
    pub name: &'static str,
    /// Value per ladder entry (aligned with `RatesReport::eps`).
    pub values: Vec<f64>,
    /// `(slope, standard error)` of the log₂–log₂ fit; `None` when some
    /// value is exactly zero (identically vanishing quantity) or
    /// nonpositive, so no rate is defined.
    pub slope: Option<(f64, f64)>,
}

/// Result of [`estimate_rates`].
#[derive(Clone, Debug)]
pub struct RatesReport {
    /// Snapped window lengths actually used.
    pub eps: Vec<f64>,
    /// The five tracked series, in the order of the module-level table.
    pub series: Vec<RateSeries>,
    /// Cost-expansion ratio per ladder entry.
    pub cost_ratios: Vec<f64>,
    /// Smallest cost-expansion ratio across the ladder.
    pub cost_ratio_min: f64,
    /// A defined slope has standard error above 0.15 — the ladder or the
    /// path count is too small for a trustworthy rate.
    pub degraded: bool,
}

const RATE_NAMES: [&str; 5] = [
    "first_variation",
    "state_deviation",
    "second_variation",
    "first_remainder",
    "second_remainder",
];

/// Re-simulates the spiked system across the window ladder under common
/// random numbers and fits the empirical convergence rates of the
/// variational expansion (see the module docs for the tracked quantities).
pub fn estimate_rates(bundle: &PathBundle, cfg: &RatesConfig) -> Result<RatesReport> {
    if cfg.eps_ladder.len() < 2 {
        return Err(CoreError::InvalidInput(
            "rate estimation needs at least two window lengths".into(),
        ));
    }
    let grid = bundle.grid;
    let l = bundle.spec.dims.state;
    let n_nodes = grid.n_steps + 1;

    let spikes: Vec<SpikePerturbation> = cfg
        .eps_ladder
        .iter()
        .map(|&e| SpikePerturbation::snapped(grid, cfg.tau, e, cfg.v.clone()))
        .collect::<Result<_>>()?;
    let eps: Vec<f64> = spikes.iter().map(|s| s.eps(grid)).collect();
    if eps.iter().all(|&e| e == eps[0]) {
        return Err(CoreError::InvalidInput(
            "window ladder collapses to a single snapped length; refine the grid".into(),
        ));
    }

    let mut alive = vec![true; bundle.n_paths];
    for &p in &bundle.aborted {
        alive[p] = false;
    }

    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(spikes.len()); RATE_NAMES.len()];
    let mut cost_ratios = Vec::with_capacity(spikes.len());
    let mut spike_results = Vec::with_capacity(spikes.len());
    for spike in &spikes {
        let policy = apply_spike(&bundle.policy, grid, spike);
        let spiked = simulate_forward(
            &bundle.spec,
            &bundle.generator,
            grid,
            &policy,
            &ForwardConfig {
                n_paths: bundle.n_paths,
                seed: bundle.seed,
                x0: bundle.x0.clone(),
                initial_regime: bundle.initial_regime,
            },
        )?;
        for &p in &spiked.aborted {
            alive[p] = false;
        }
        let var = solve_variational_eqs(bundle, spike)?;
        spike_results.push((spiked, var));
    }
    let n_alive = alive.iter().filter(|&&a| a).count();
    if n_alive == 0 {
        return Err(CoreError::InvalidInput("every simulated path aborted".into()));
    }

    for ((spiked, var), &e) in spike_results.iter().zip(&eps) {
        let mut sups = [0.0f64; 5];
        for n in 0..n_nodes {
            let mut sums = [0.0f64; 5];
            for p in 0..bundle.n_paths {
                if !alive[p] {
                    continue;
                }
                let xb = bundle.state(p, n);
                let xe = spiked.state(p, n);
                let mut sq = [0.0f64; 5];
                for m in 0..l {
                    let v1 = var.x1[[p, n, m]];
                    let v2 = var.x2[[p, n, m]];
                    let dev = xe[m] - xb[m];
                    sq[0] += v1 * v1;
                    sq[1] += dev * dev;
                    sq[2] += v2 * v2;
                    sq[3] += (dev - v1) * (dev - v1);
                    sq[4] += (dev - v1 - v2) * (dev - v1 - v2);
                }
                for (s, q) in sums.iter_mut().zip(sq) {
                    *s += q;
                }
            }
            for (sup, s) in sups.iter_mut().zip(sums) {
                *sup = sup.max(s / n_alive as f64);
            }
        }
        for (store, sup) in values.iter_mut().zip(sups) {
            store.push(sup);
        }
        let cost_mean = var
            .cost_expansion
            .iter()
            .zip(&alive)
            .filter(|(_, &a)| a)
            .map(|(c, _)| c)
            .sum::<f64>()
            / n_alive as f64;
        cost_ratios.push(cost_mean / e);
    }

    let series: Vec<RateSeries> = RATE_NAMES
        .iter()
        .zip(values)
        .map(|(&name, vals)| {
            let slope = log2_slope(&eps, &vals);
            RateSeries {
                name,
                values: vals,
                slope,
            }
        })
        .collect();
    let degraded = series
        .iter()
        .any(|s| matches!(s.slope, Some((_, se)) if se > 0.15));
    let cost_ratio_min = cost_ratios.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RatesReport {
        eps,
        series,
        cost_ratios,
        cost_ratio_min,
        degraded,
    })
}

/// Result of [`variational_inequality`].
#[derive(Clone, Copy, Debug)]
pub struct SpikeInequalityReport {
    /// Snapped window length.
    pub eps: f64,
    /// `E ∫_{E_ε} [ℋ(v) − ℋ(ū)] dt / ε` over non-aborted paths.
    pub mean_over_eps: f64,
    /// Standard error of that path mean (also divided by `ε`).
    pub se_over_eps: f64,
    pub paths: usize,
}

/// Integrated extended-Hamiltonian increment of a spike, evaluated along
/// the candidate paths with the supplied adjoint estimates. Nonnegative up
/// to `o(1)` (in `ε` and statistical error) when the candidate is optimal.
pub fn variational_inequality(
    bundle: &PathBundle,
    adjoints: &AdjointSolutions,
    spike: &SpikePerturbation,
) -> Result<SpikeInequalityReport> {
    let spec = &bundle.spec;
    let dims = spec.dims;
    let l = dims.state;
    if adjoints.first.m != l || adjoints.second.m != l * l {
        return Err(CoreError::DimensionMismatch(
            "adjoint solutions do not match the model dimensions".into(),
        ));
    }
    if spike.v.len() != dims.control {
        return Err(CoreError::DimensionMismatch(format!(
            "spike control has dimension {}, model control dimension is {}",
            spike.v.len(),
            dims.control
        )));
    }
    if spike.width_steps == 0 || spike.start_step + spike.width_steps > bundle.grid.n_steps {
        return Err(CoreError::InvalidInput("spike window does not fit the grid".into()));
    }
    let mut vcl = spike.v.clone();
    spec.control_set.clamp(&mut vcl);
    let dt = bundle.grid.dt();
    let eps = spike.eps(bundle.grid);

    let mut ubar = vec![0.0; dims.control];
    let mut per_path = Vec::with_capacity(bundle.n_paths);
    for p in 0..bundle.n_paths {
        if bundle.aborted.binary_search(&p).is_ok() {
            continue;
        }
        let mut acc = 0.0;
        for n in spike.start_step..spike.start_step + spike.width_steps {
            bundle.control_at(p, n, &mut ubar);
            let pt = ExtendedHamiltonianPoint {
                t: bundle.grid.node(n),
                x: bundle.state(p, n),
                regime: bundle.regime(p, n),
                u_bar: &ubar,
                p: adjoints.first.y_row(p, n),
                q: adjoints.first.z_row(p, n),
                s: adjoints.first.kappa_row(p, n),
                cap_p: adjoints.second.y_row(p, n),
                cap_s: adjoints.second.kappa_row(p, n),
            };
            let hv = h_function(spec, &bundle.generator, &pt, &vcl)?;
            let hu = h_function(spec, &bundle.generator, &pt, &ubar)?;
            acc += (hv - hu) * dt;
        }
        per_path.push(acc / eps);
    }
    if per_path.is_empty() {
        return Err(CoreError::InvalidInput("every simulated path aborted".into()));
    }
    Ok(SpikeInequalityReport {
        eps,
        mean_over_eps: mean(&per_path),
        se_over_eps: standard_error(&per_path),
        paths: per_path.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::BackwardConfig;
    use crate::model::builtins::{example1, Example1Params};
    use crate::mp::solve_adjoints;
    use crate::regime::RegimeGenerator;
    use ndarray::array;

    fn gen2() -> RegimeGenerator {
        RegimeGenerator::new(array![[-0.5, 0.5], [0.7, -0.7]]).unwrap()
    }

    fn params(modulated: bool) -> Example1Params {
        Example1Params {
            sigma: if modulated { vec![1.0, 0.8] } else { vec![1.0, 1.0] },
            gamma: if modulated {
                vec![vec![0.2, 0.1], vec![0.1, 0.3]]
            } else {
                vec![vec![0.0, 0.0], vec![0.0, 0.0]]
            },
            cost_slope: if modulated { 1.5 } else { 1.0 },
            state_modulation: if modulated { 0.3 } else { 0.0 },
        }
    }

    fn bundle(modulated: bool, u: f64, n_paths: usize, n_steps: usize, seed: u64) -> PathBundle {
        let spec = example1(&params(modulated)).unwrap();
        simulate_forward(
            &spec,
            &gen2(),
            TimeGrid::new(1.0, n_steps).unwrap(),
            &ControlPolicy::constant(vec![u]),
            &ForwardConfig {
                n_paths,
                seed,
                x0: vec![0.0],
                initial_regime: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn snapping_rounds_and_fits_the_window() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let s = SpikePerturbation::snapped(grid, 0.26, 0.3, vec![2.0]).unwrap();
        assert_eq!((s.start_step, s.width_steps), (2, 2));
        assert!((s.eps(grid) - 0.25).abs() < 1e-15);
        assert_eq!(s.window(grid), (0.25, 0.5));

        // Tiny windows widen to one step; late starts shift left to fit.
        let tiny = SpikePerturbation::snapped(grid, 0.5, 1e-9, vec![1.0]).unwrap();
        assert_eq!(tiny.width_steps, 1);
        let late = SpikePerturbation::snapped(grid, 0.99, 0.5, vec![1.0]).unwrap();
        assert_eq!((late.start_step, late.width_steps), (4, 4));

        assert!(SpikePerturbation::snapped(grid, 0.2, 0.0, vec![1.0]).is_err());
        assert!(SpikePerturbation::snapped(grid, -0.1, 0.2, vec![1.0]).is_err());
        assert!(SpikePerturbation::snapped(grid, 0.2, 0.1, vec![]).is_err());
    }

    #[test]
    fn spike_at_the_base_control_is_a_no_op() {
        let base = bundle(true, 1.0, 60, 16, 40);
        let spike = SpikePerturbation::snapped(base.grid, 0.25, 0.25, vec![1.0]).unwrap();
        let spiked_policy = apply_spike(&base.policy, base.grid, &spike);
        let spiked = simulate_forward(
            &base.spec,
            &base.generator,
            base.grid,
            &spiked_policy,
            &ForwardConfig {
                n_paths: base.n_paths,
                seed: base.seed,
                x0: base.x0.clone(),
                initial_regime: base.initial_regime,
            },
        )
        .unwrap();
        assert_eq!(base.x, spiked.x);
        let var = solve_variational_eqs(&base, &spike).unwrap();
        assert!(var.x1.iter().all(|&v| v == 0.0));
        assert!(var.x2.iter().all(|&v| v == 0.0));
        assert!(var.cost_expansion.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn state_independent_noise_makes_the_expansion_exact() {
        // Unmodulated: dx = u dW, so x^ε − x̄ = ∫ δσ 1_E dW = x₁ exactly and
        // x₂ ≡ 0; x₁(T) telescopes the stored window increments.
        let base = bundle(false, 1.0, 200, 16, 41);
        let spike = SpikePerturbation {
            start_step: 4,
            width_steps: 4,
            v: vec![0.0],
        };
        let var = solve_variational_eqs(&base, &spike).unwrap();
        let spiked = simulate_forward(
            &base.spec,
            &base.generator,
            base.grid,
            &apply_spike(&base.policy, base.grid, &spike),
            &ForwardConfig {
                n_paths: base.n_paths,
                seed: base.seed,
                x0: base.x0.clone(),
                initial_regime: base.initial_regime,
            },
        )
        .unwrap();
        for p in 0..base.n_paths {
            let dw_window: f64 = (4..8).map(|n| base.dw_step(p, n)[0]).sum();
            // δσ = (0 − 1)·1 = −1 on the window.
            assert!((var.x1[[p, 16, 0]] + dw_window).abs() < 1e-12, "path {p}");
            for n in 0..=16 {
                let dev = spiked.x[[p, n, 0]] - base.x[[p, n, 0]];
                assert!((dev - var.x1[[p, n, 0]]).abs() < 1e-12);
                assert_eq!(var.x2[[p, n, 0]], 0.0);
            }
        }
    }

    #[test]
    fn variations_scale_with_the_control_increment() {
        // Coefficients are linear in u, so doubling v − ū doubles x₁ and
        // quadruples x₂ exactly.
        let base = bundle(true, 1.0, 80, 16, 42);
        let mk = |v: f64| SpikePerturbation {
            start_step: 4,
            width_steps: 4,
            v: vec![v],
        };
        let half = solve_variational_eqs(&base, &mk(0.5)).unwrap();
        let full = solve_variational_eqs(&base, &mk(0.0)).unwrap();
        for p in (0..80).step_by(7) {
            for n in 0..=16 {
                let a = 2.0 * half.x1[[p, n, 0]];
                let b = full.x1[[p, n, 0]];
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "x1 at ({p},{n})");
                let a2 = 4.0 * half.x2[[p, n, 0]];
                let b2 = full.x2[[p, n, 0]];
                assert!((a2 - b2).abs() <= 1e-11 * (1.0 + b2.abs()), "x2 at ({p},{n})");
            }
        }
    }

    #[test]
    fn inequality_is_zero_at_base_spike_and_splits_candidates() {
        let cfg = BackwardConfig::default();
        // Optimal candidate ū ≡ 1 (c = σ² = 1): spiking to v = 0 gives
        // ℋ(0) − ℋ(1) = c − σ²q̂ + ½σ²P̂ ≈ ½ > 0.
        let good = bundle(false, 1.0, 2000, 20, 43);
        let adj = solve_adjoints(&good, &cfg).unwrap();
        let spike = SpikePerturbation::snapped(good.grid, 0.25, 0.25, vec![0.0]).unwrap();
        let rep = variational_inequality(&good, &adj, &spike).unwrap();
        assert!(rep.mean_over_eps >= -0.05, "mean {}", rep.mean_over_eps);
        assert!((rep.mean_over_eps - 0.5).abs() < 0.2, "mean {}", rep.mean_over_eps);

        let same = SpikePerturbation::snapped(good.grid, 0.25, 0.25, vec![1.0]).unwrap();
        let rep0 = variational_inequality(&good, &adj, &same).unwrap();
        assert_eq!(rep0.mean_over_eps, 0.0);
        assert_eq!(rep0.se_over_eps, 0.0);

        // Wrong candidate ū ≡ 0 freezes the state: the adjoints are exact
        // and the increment at v = 1 is exactly −c + ½σ² = −½.
        let bad = bundle(false, 0.0, 400, 20, 43);
        let adj0 = solve_adjoints(&bad, &cfg).unwrap();
        let rep1 = variational_inequality(&bad, &adj0, &spike_with(&bad, 1.0)).unwrap();
        assert!((rep1.mean_over_eps + 0.5).abs() < 1e-9, "mean {}", rep1.mean_over_eps);
    }

    fn spike_with(b: &PathBundle, v: f64) -> SpikePerturbation {
        SpikePerturbation::snapped(b.grid, 0.25, 0.25, vec![v]).unwrap()
    }

    #[test]
    fn rate_ladder_recovers_first_order_and_remainder_decay() {
        let base = bundle(true, 1.0, 1500, 64, 44);
        let cfg = RatesConfig {
            v: vec![0.0],
            tau: 0.25,
            eps_ladder: vec![0.25, 0.125, 0.0625],
        };
        let rep = estimate_rates(&base, &cfg).unwrap();
        assert_eq!(rep.eps, vec![0.25, 0.125, 0.0625]);
        for s in &rep.series {
            for w in s.values.windows(2) {
                assert!(w[1] < w[0], "{} does not shrink with ε: {:?}", s.name, s.values);
            }
        }
        let (s1, _) = rep.series[0].slope.expect("x1 norm is positive");
        assert!((s1 - 1.0).abs() <= 0.35, "first-variation slope {s1}");
        let (s4, _) = rep.series[3].slope.expect("remainder is positive");
        assert!(s4 >= 1.5, "first-remainder slope {s4}");
        assert!(rep.cost_ratios.iter().all(|r| r.is_finite()));
        assert_eq!(rep.cost_ratio_min, {
            let mut m = f64::INFINITY;
            for &r in &rep.cost_ratios {
                m = m.min(r);
            }
            m
        });
    }

    #[test]
    fn state_independent_coefficients_have_no_second_order_content() {
        let base = bundle(false, 1.0, 300, 32, 45);
        let cfg = RatesConfig {
            v: vec![0.0],
            tau: 0.25,
            eps_ladder: vec![0.25, 0.125],
        };
        let rep = estimate_rates(&base, &cfg).unwrap();
        for idx in [2usize, 3, 4] {
            let s = &rep.series[idx];
            assert!(
                s.values.iter().all(|&v| v.abs() <= 1e-20),
                "{} should vanish identically: {:?}",
                s.name,
                s.values
            );
        }
        // x₂ is exactly zero, so its series has no rate; the remainders are
        // rounding-level (different accumulation orders) rather than exact.
        assert!(rep.series[2].slope.is_none());
        assert!(rep.series[0].slope.is_some());
    }

    #[test]
    fn rejects_degenerate_ladders_and_mismatched_controls() {
        let base = bundle(false, 1.0, 50, 8, 46);
        let one = RatesConfig {
            v: vec![0.0],
            tau: 0.25,
            eps_ladder: vec![0.25],
        };
        assert!(estimate_rates(&base, &one).is_err());
        let collapsing = RatesConfig {
            v: vec![0.0],
            tau: 0.25,
            eps_ladder: vec![1e-6, 1e-7],
        };
        assert!(estimate_rates(&base, &collapsing).is_err());
        let bad_dim = SpikePerturbation {
            start_step: 0,
            width_steps: 2,
            v: vec![0.0, 1.0],
        };
        assert!(solve_variational_eqs(&base, &bad_dim).is_err());
        let overrun = SpikePerturbation {
            start_step: 7,
            width_steps: 2,
            v: vec![0.0],
        };
        assert!(solve_variational_eqs(&base, &overrun).is_err());
    }
}
