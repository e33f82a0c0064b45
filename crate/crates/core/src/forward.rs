//! Forward simulation of the controlled regime-switching SDE
//!
//! ```text
//! dx = b(t,x,u,α) dt + σ(t,x,u,α) dW + γ(t,x,u,α) dΦ̃,
//! ```
//!
//! where `Φ̃_j = Φ_j − ∫ λ_j ds` are the compensated regime-jump counters.
//!
//! Each path walks an Euler scheme on the base grid *augmented by its own
//! regime-jump times*: every base step is subdivided at the jumps falling
//! inside it, so coefficients are always evaluated under the correct regime
//! and compensator increments are exact. States are stored at the shared
//! base nodes only, which keeps memory flat and lets backward solvers work
//! on a common grid.
//!
//! Conventions: within a substep all coefficients are frozen at the left
//! endpoint (including the jump loading applied at a jump ending the
//! substep), and the regime on a substep is the right-continuous value at
//! its left endpoint.
//!
//! The module also provides pathwise calculus checks: the change-of-variable
//! (Itô) residual for a smooth observable, and an exact event-walk
//! verification of the product rule for the compensated counters.

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::model::{ControlPolicy, ModelSpec};
use crate::regime::{counting_data, sample_chain, ChainPath, CountingData, RegimeGenerator};
use crate::rng::{stream, StreamKind};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Simulation size and initial condition.
#[derive(Clone, Debug)]
pub struct ForwardConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub initial_regime: usize,
}

/// One substep of the augmented Euler walk, as seen by observers.
pub struct SubStepInfo<'a> {
    /// Index of the enclosing base step.
    pub base_step: usize,
    /// Left endpoint of the substep.
    pub t: f64,
    /// Substep length.
    pub dt: f64,
    /// State at the left endpoint.
    pub x: &'a [f64],
    /// Control at the left endpoint (already clamped).
    pub u: &'a [f64],
    /// Regime on the substep.
    pub regime: usize,
    /// Brownian increment over the substep.
    pub dw: &'a [f64],
    /// Drift value at the left endpoint, length `L`.
    pub b: &'a [f64],
    /// Diffusion value at the left endpoint, row-major `L×d`.
    pub sigma: &'a [f64],
    /// Jump loading at the left endpoint, row-major `L×D`.
    pub gamma: &'a [f64],
    /// State after the continuous update, before any jump at the right end.
    pub x_minus: &'a [f64],
    /// Jump at the right endpoint: `(target regime, post-jump state)`.
    pub jump: Option<(usize, &'a [f64])>,
}

/// Per-path output of the walker.
struct WalkResult {
    /// States at base nodes, row-major `(n_steps+1)×L`.
    nodes: Vec<f64>,
    /// Brownian increments per base step, row-major `n_steps×d`.
    dw: Vec<f64>,
    /// Regime at each base node (right-continuous).
    regimes: Vec<u8>,
    clamped: bool,
    aborted: bool,
}

/// Euler walk of a single path on its jump-augmented grid. The observer
/// runs on every substep; Brownian draws continue even after a non-finite
/// abort so the stream stays aligned across models sharing the seed.
fn walk_path(
    spec: &ModelSpec,
    generator: &RegimeGenerator,
    policy: &ControlPolicy,
    grid: TimeGrid,
    chain: &ChainPath,
    x0: &[f64],
    rng: &mut ChaCha8Rng,
    mut observer: impl FnMut(&SubStepInfo),
) -> WalkResult {
    let dims = spec.dims;
    let (l, d, nd) = (dims.state, dims.brownian, dims.regimes);
    let n_steps = grid.n_steps;
    let mut nodes = vec![0.0; (n_steps + 1) * l];
    let mut dw_out = vec![0.0; n_steps * d];
    let mut regimes = vec![0u8; n_steps + 1];
    let mut clamped = false;
    let mut aborted = false;

    let mut x = x0.to_vec();
    let mut u = vec![0.0; dims.control];
    let mut bval = vec![0.0; l];
    let mut sval = vec![0.0; l * d];
    let mut gval = vec![0.0; l * nd];
    let mut dw = vec![0.0; d];
    let mut x_minus = vec![0.0; l];
    let mut x_next = vec![0.0; l];
    nodes[..l].copy_from_slice(&x);
    regimes[0] = chain.state_at(0.0) as u8;

    let mut jump_idx = 0usize; // index into chain.jump_times
    for n in 0..n_steps {
        let t0 = grid.node(n);
        let t1 = grid.node(n + 1);
        let mut s = t0;
        loop {
            // Next boundary: the first remaining jump in (s, t1], else t1.
            let (e, jump_target) = match chain.jump_times.get(jump_idx) {
                Some(&tau) if tau <= t1 => (tau, Some(chain.states_after[jump_idx])),
                _ => (t1, None),
            };
            let dt_sub = e - s;
            let regime = chain.state_at(s);
            let was_clamped = policy.eval_into(s, &x, regime, &spec.control_set, &mut u);
            clamped |= was_clamped;
            for w in dw.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *w = g * dt_sub.sqrt();
            }
            spec.drift.value_into(s, &x, &u, regime, &mut bval);
            spec.diffusion.value_into(s, &x, &u, regime, &mut sval);
            spec.jump.value_into(s, &x, &u, regime, &mut gval);

            for m in 0..l {
                let mut inc = bval[m] * dt_sub;
                for k in 0..d {
                    inc += sval[m * d + k] * dw[k];
                }
                for j in 0..nd {
                    inc -= gval[m * nd + j] * generator.jump_intensity(regime, j) * dt_sub;
                }
                x_minus[m] = x[m] + inc;
            }
            let jump = match jump_target {
                Some(target) => {
                    for m in 0..l {
                        x_next[m] = x_minus[m] + gval[m * nd + target];
                    }
                    Some((target, x_next.as_slice()))
                }
                None => {
                    x_next.copy_from_slice(&x_minus);
                    None
                }
            };
            observer(&SubStepInfo {
                base_step: n,
                t: s,
                dt: dt_sub,
                x: &x,
                u: &u,
                regime,
                dw: &dw,
                b: &bval,
                sigma: &sval,
                gamma: &gval,
                x_minus: &x_minus,
                jump,
            });
            for k in 0..d {
                dw_out[n * d + k] += dw[k];
            }
            if !aborted {
                if x_next.iter().all(|v| v.is_finite()) {
                    x.copy_from_slice(&x_next);
                } else {
                    aborted = true; // freeze the last finite state
                }
            }
            if jump_target.is_some() {
                jump_idx += 1;
            }
            s = e;
            if s >= t1 {
                break;
            }
        }
        nodes[(n + 1) * l..(n + 2) * l].copy_from_slice(&x);
        regimes[n + 1] = chain.state_at(t1) as u8;
    }
    WalkResult {
        nodes,
        dw: dw_out,
        regimes,
        clamped,
        aborted,
    }
}

/// A simulated batch of forward paths on a shared base grid.
///
/// `x[[p, n, m]]` is component `m` of the state of path `p` at node `n`;
/// `dw[[p, n, k]]` the Brownian increment over base step `n`;
/// `regimes[[p, n]]` the regime at node `n` (right-continuous).
pub struct PathBundle {
    pub spec: ModelSpec,
    pub generator: RegimeGenerator,
    pub grid: TimeGrid,
    pub policy: ControlPolicy,
    pub n_paths: usize,
    pub x0: Vec<f64>,
    pub initial_regime: usize,
    pub seed: u64,
    pub x: Array3<f64>,
    pub dw: Array3<f64>,
    pub regimes: Array2<u8>,
    pub chains: Vec<ChainPath>,
    pub countings: Vec<CountingData>,
    /// Paths whose state became non-finite and was frozen.
    pub aborted: Vec<usize>,
    /// Whether any policy evaluation had to be clamped into the control set.
    pub clamped: bool,
}

impl PathBundle {
    /// State slice of `path` at base node `node`.
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let l = self.spec.dims.state;
        let flat = self.x.as_slice().expect("x is contiguous");
        let start = (path * (self.grid.n_steps + 1) + node) * l;
        &flat[start..start + l]
    }

    pub fn regime(&self, path: usize, node: usize) -> usize {
        self.regimes[[path, node]] as usize
    }

    /// Brownian increment slice of `path` over base step `step`.
    pub fn dw_step(&self, path: usize, step: usize) -> &[f64] {
        let d = self.spec.dims.brownian;
        let flat = self.dw.as_slice().expect("dw is contiguous");
        let start = (path * self.grid.n_steps + step) * d;
        &flat[start..start + d]
    }

    /// Raw jump counts per target over base step `step`.
    pub fn dphi_into(&self, path: usize, step: usize, out: &mut [f64]) {
        let t0 = self.grid.node(step);
        let t1 = self.grid.node(step + 1);
        let c = &self.countings[path];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (c.count(j, t1) - c.count(j, t0)) as f64;
        }
    }

    /// Compensated jump increments `ΔΦ̃_j` over base step `step`, using the
    /// exact piecewise-linear compensator.
    pub fn dphi_tilde_into(&self, path: usize, step: usize, out: &mut [f64]) {
        let t0 = self.grid.node(step);
        let t1 = self.grid.node(step + 1);
        let c = &self.countings[path];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (c.count(j, t1) - c.count(j, t0)) as f64
                - (c.compensator(j, t1) - c.compensator(j, t0));
        }
    }

    /// Evaluates the bundle's policy at a base node of a path.
    pub fn control_at(&self, path: usize, node: usize, out: &mut [f64]) {
        let t = self.grid.node(node);
        self.policy
            .eval_into(t, self.state(path, node), self.regime(path, node), &self.spec.control_set, out);
    }
}

/// Simulates `cfg.n_paths` forward paths under `policy`.
///
/// Path `p` uses the regime stream `(seed, Chain, p)` and the Brownian
/// stream `(seed, Brownian, p)`, so results are independent of batch size
/// and worker count, and two simulations sharing a seed share their noise
/// path by path regardless of the model or policy.
pub fn simulate_forward(
    spec: &ModelSpec,
    generator: &RegimeGenerator,
    grid: TimeGrid,
    policy: &ControlPolicy,
    cfg: &ForwardConfig,
) -> Result<PathBundle> {
    spec.check_shapes()?;
    let dims = spec.dims;
    if generator.num_states() != dims.regimes {
        return Err(CoreError::DimensionMismatch(format!(
            "generator has {} states, model has {} regimes",
            generator.num_states(),
            dims.regimes
        )));
    }
    if dims.regimes > u8::MAX as usize {
        return Err(CoreError::InvalidInput("more than 255 regimes are not supported".into()));
    }
    if policy.dim() != dims.control {
        return Err(CoreError::DimensionMismatch(format!(
            "policy dimension {} vs control dimension {}",
            policy.dim(),
            dims.control
        )));
    }
    if cfg.x0.len() != dims.state {
        return Err(CoreError::DimensionMismatch(format!(
            "x0 has length {}, state dimension is {}",
            cfg.x0.len(),
            dims.state
        )));
    }
    if cfg.initial_regime >= dims.regimes {
        return Err(CoreError::InvalidInput(format!(
            "initial regime {} out of range (D = {})",
            cfg.initial_regime, dims.regimes
        )));
    }
    if cfg.n_paths == 0 {
        return Err(CoreError::InvalidInput("n_paths must be positive".into()));
    }

    let results: Vec<(ChainPath, CountingData, WalkResult)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut chain_rng = stream(cfg.seed, StreamKind::Chain, p as u64);
            let chain = sample_chain(generator, cfg.initial_regime, grid.horizon, &mut chain_rng)
                .expect("inputs validated above");
            let counting = counting_data(&chain, generator).expect("chain matches generator");
            let mut brownian_rng = stream(cfg.seed, StreamKind::Brownian, p as u64);
            let walk = walk_path(
                spec,
                generator,
                policy,
                grid,
                &chain,
                &cfg.x0,
                &mut brownian_rng,
                |_| {},
            );
            (chain, counting, walk)
        })
        .collect();

    let (l, d) = (dims.state, dims.brownian);
    let n_nodes = grid.n_steps + 1;
    let mut x = Array3::<f64>::zeros((cfg.n_paths, n_nodes, l));
    let mut dw = Array3::<f64>::zeros((cfg.n_paths, grid.n_steps, d));
    let mut regimes = Array2::<u8>::zeros((cfg.n_paths, n_nodes));
    let mut chains = Vec::with_capacity(cfg.n_paths);
    let mut countings = Vec::with_capacity(cfg.n_paths);
    let mut aborted = Vec::new();
    let mut clamped = false;
    {
        let xs = x.as_slice_mut().expect("contiguous");
        let ds = dw.as_slice_mut().expect("contiguous");
        let rs = regimes.as_slice_mut().expect("contiguous");
        for (p, (chain, counting, walk)) in results.into_iter().enumerate() {
            xs[p * n_nodes * l..(p + 1) * n_nodes * l].copy_from_slice(&walk.nodes);
            ds[p * grid.n_steps * d..(p + 1) * grid.n_steps * d].copy_from_slice(&walk.dw);
            rs[p * n_nodes..(p + 1) * n_nodes].copy_from_slice(&walk.regimes);
            if walk.aborted {
                aborted.push(p);
            }
            clamped |= walk.clamped;
            chains.push(chain);
            countings.push(counting);
        }
    }
    Ok(PathBundle {
        spec: spec.clone(),
        generator: generator.clone(),
        grid,
        policy: policy.clone(),
        n_paths: cfg.n_paths,
        x0: cfg.x0.clone(),
        initial_regime: cfg.initial_regime,
        seed: cfg.seed,
        x,
        dw,
        regimes,
        chains,
        countings,
        aborted,
        clamped,
    })
}

/// Re-walks one path of a bundle, feeding every substep to `observer`. The
/// Brownian stream is re-derived from the bundle's seed and path index, so
/// the replay reproduces the stored trajectory to the bit while exposing
/// the substep-level data the bundle does not keep.
pub fn replay_path(
    bundle: &PathBundle,
    path: usize,
    observer: impl FnMut(&SubStepInfo),
) -> Result<()> {
    if path >= bundle.n_paths {
        return Err(CoreError::InvalidInput(format!(
            "path {path} out of range ({} simulated)",
            bundle.n_paths
        )));
    }
    let mut rng = stream(bundle.seed, StreamKind::Brownian, path as u64);
    walk_path(
        &bundle.spec,
        &bundle.generator,
        &bundle.policy,
        bundle.grid,
        &bundle.chains[path],
        &bundle.x0,
        &mut rng,
        observer,
    );
    Ok(())
}

type ObsVal = std::sync::Arc<dyn Fn(f64, &[f64], usize) -> f64 + Send + Sync>;
type ObsGrad = std::sync::Arc<dyn Fn(f64, &[f64], usize, &mut [f64]) + Send + Sync>;

/// A smooth observable `φ(t, x, regime)` with analytic derivatives, used by
/// the change-of-variable check.
#[derive(Clone)]
pub struct SmoothObservable {
    pub value: ObsVal,
    pub dt: ObsVal,
    pub grad: ObsGrad,
    /// Hessian in `x`, row-major `L×L`.
    pub hess: ObsGrad,
}

impl SmoothObservable {
    /// Affine observable `φ = wᵀx + a_i + c·t` with a regime-independent
    /// slope and per-regime intercepts. For such φ the discrete
    /// change-of-variable residual is exact to rounding for *any* model.
    pub fn affine(slope: Vec<f64>, intercepts: Vec<f64>, time_slope: f64) -> Self {
        let w = slope.clone();
        let a = intercepts.clone();
        let value = std::sync::Arc::new(move |t: f64, x: &[f64], r: usize| {
            let mut v = a[r] + time_slope * t;
            for (wi, xi) in w.iter().zip(x) {
                v += wi * xi;
            }
            v
        });
        let dt = std::sync::Arc::new(move |_t: f64, _x: &[f64], _r: usize| time_slope);
        let w2 = slope;
        let grad = std::sync::Arc::new(move |_t: f64, _x: &[f64], _r: usize, out: &mut [f64]| {
            out.copy_from_slice(&w2)
        });
        let hess = std::sync::Arc::new(|_t: f64, _x: &[f64], _r: usize, out: &mut [f64]| {
            out.fill(0.0)
        });
        Self { value, dt, grad, hess }
    }

    /// Quadratic observable `φ = |x|²`, whose residual decays with the step
    /// size on diffusive models.
    pub fn squared_norm() -> Self {
        Self {
            value: std::sync::Arc::new(|_t, x: &[f64], _r| x.iter().map(|v| v * v).sum()),
            dt: std::sync::Arc::new(|_t, _x: &[f64], _r| 0.0),
            grad: std::sync::Arc::new(|_t, x: &[f64], _r, out: &mut [f64]| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = 2.0 * v;
                }
            }),
            hess: std::sync::Arc::new(|_t, x: &[f64], _r, out: &mut [f64]| {
                let l = x.len();
                out.fill(0.0);
                for m in 0..l {
                    out[m * l + m] = 2.0;
                }
            }),
        }
    }
}

/// Pathwise residuals of the change-of-variable formula
///
/// ```text
/// φ(T,x_T,α_T) − φ(0,x_0,α_0)
///   = ∫ [φ_t + φ_x·(b − Σ_j γ^j λ_j) + ½ tr(σᵀ φ_xx σ)] dt
///   + ∫ φ_x σ dW + Σ_{jumps τ→j} [φ(τ, x(τ−)+γ^j, j) − φ(τ, x(τ−), α(τ−))]
/// ```
///
/// evaluated with the walker's own conventions. Returns one residual per
/// path. Exactly zero (to rounding) for affine observables; `O(Δt^½)`
/// decay on diffusions.
pub fn ito_residuals(
    spec: &ModelSpec,
    generator: &RegimeGenerator,
    grid: TimeGrid,
    policy: &ControlPolicy,
    cfg: &ForwardConfig,
    phi: &SmoothObservable,
) -> Result<Vec<f64>> {
    spec.check_shapes()?;
    let dims = spec.dims;
    let (l, d, nd) = (dims.state, dims.brownian, dims.regimes);
    if generator.num_states() != nd {
        return Err(CoreError::DimensionMismatch(
            "generator/model regime count mismatch".into(),
        ));
    }
    let residuals: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut chain_rng = stream(cfg.seed, StreamKind::Chain, p as u64);
            let chain = sample_chain(generator, cfg.initial_regime, grid.horizon, &mut chain_rng)
                .expect("inputs validated above");
            let mut brownian_rng = stream(cfg.seed, StreamKind::Brownian, p as u64);
            let mut rhs = 0.0f64;
            let mut grad = vec![0.0; l];
            let mut hess = vec![0.0; l * l];
            let walk = walk_path(
                spec,
                generator,
                policy,
                grid,
                &chain,
                &cfg.x0,
                &mut brownian_rng,
                |info| {
                    (phi.grad)(info.t, info.x, info.regime, &mut grad);
                    (phi.hess)(info.t, info.x, info.regime, &mut hess);
                    let mut dt_term = (phi.dt)(info.t, info.x, info.regime);
                    for m in 0..l {
                        let mut beff = info.b[m];
                        for j in 0..nd {
                            beff -= info.gamma[m * nd + j]
                                * generator.jump_intensity(info.regime, j);
                        }
                        dt_term += grad[m] * beff;
                    }
                    // ½ tr(σᵀ φ_xx σ) = ½ Σ_k σ_k ᵀ φ_xx σ_k over columns k.
                    for k in 0..d {
                        let mut acc = 0.0;
                        for m in 0..l {
                            for n2 in 0..l {
                                acc += info.sigma[m * d + k]
                                    * hess[m * l + n2]
                                    * info.sigma[n2 * d + k];
                            }
                        }
                        dt_term += 0.5 * acc;
                    }
                    rhs += dt_term * info.dt;
                    for k in 0..d {
                        let mut gs = 0.0;
                        for m in 0..l {
                            gs += grad[m] * info.sigma[m * d + k];
                        }
                        rhs += gs * info.dw[k];
                    }
                    if let Some((target, x_post)) = info.jump {
                        let tau = info.t + info.dt;
                        rhs += (phi.value)(tau, x_post, target)
                            - (phi.value)(tau, info.x_minus, info.regime);
                    }
                },
            );
            let x_t = &walk.nodes[grid.n_steps * l..(grid.n_steps + 1) * l];
            let lhs = (phi.value)(grid.horizon, x_t, walk.regimes[grid.n_steps] as usize)
                - (phi.value)(0.0, &cfg.x0, walk.regimes[0] as usize);
            lhs - rhs
        })
        .collect();
    Ok(residuals)
}

/// Exact event-walk verification of the product rule for the compensated
/// counters: for each pair `(j,k)`,
///
/// ```text
/// Φ̃_j(T)Φ̃_k(T) = ∫ Φ̃_j(s−) dΦ̃_k + ∫ Φ̃_k(s−) dΦ̃_j + [Φ̃_j, Φ̃_k](T),
/// ```
///
/// with `[Φ̃_j, Φ̃_k](T) = Σ_s ΔΦ_j(s)ΔΦ_k(s)` accumulated over jump events.
/// All integrands are piecewise linear between events, so the trapezoid
/// rule on event segments is exact and residuals are pure rounding noise.
/// Returns the `D×D` residual matrix for one chain.
pub fn covariation_residuals(counting: &CountingData) -> Array2<f64> {
    let d = counting.num_states();
    let horizon = counting.horizon();
    let mut res = Array2::<f64>::zeros((d, d));
    // Martingale value just before time t.
    let mt_minus = |j: usize, t: f64, at_event: bool| -> f64 {
        if at_event {
            // Left limit: count strictly before t.
            let eps_count = counting.count(j, t) as f64 - counting.count_jump_at(j, t);
            eps_count - counting.compensator(j, t)
        } else {
            counting.count(j, t) as f64 - counting.compensator(j, t)
        }
    };
    for j in 0..d {
        for k in 0..d {
            let mut int_jk = 0.0; // ∫ Φ̃_j(s−) dΦ̃_k
            let mut int_kj = 0.0;
            let mut bracket = 0.0;
            // dt parts over event segments (trapezoid, exact on linear).
            let mut seg_start = 0.0;
            for (idx, &tau) in counting.times().iter().enumerate() {
                if idx == 0 {
                    continue; // times[0] == 0
                }
                let end = tau.min(horizon);
                if end > seg_start {
                    let lam_j = counting.intensity_on_segment(idx - 1, j);
                    let lam_k = counting.intensity_on_segment(idx - 1, k);
                    let mj0 = mt_minus(j, seg_start, false);
                    let mj1 = mt_minus(j, end, true);
                    let mk0 = mt_minus(k, seg_start, false);
                    let mk1 = mt_minus(k, end, true);
                    int_jk -= lam_k * (end - seg_start) * 0.5 * (mj0 + mj1);
                    int_kj -= lam_j * (end - seg_start) * 0.5 * (mk0 + mk1);
                }
                // Jump parts at the event (if tau is a jump, not the horizon cap).
                if tau < horizon || counting.is_jump_time(tau) {
                    let dj = counting.count_jump_at(j, tau);
                    let dk = counting.count_jump_at(k, tau);
                    if dk > 0.0 {
                        int_jk += mt_minus(j, tau, true) * dk;
                    }
                    if dj > 0.0 {
                        int_kj += mt_minus(k, tau, true) * dj;
                    }
                    bracket += dj * dk;
                }
                seg_start = end;
            }
            let mj_t = counting.count(j, horizon) as f64 - counting.compensator(j, horizon);
            let mk_t = counting.count(k, horizon) as f64 - counting.compensator(k, horizon);
            res[[j, k]] = mj_t * mk_t - int_jk - int_kj - bracket;
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtins::{example1, linear_quadratic, Example1Params, LinearQuadraticParams};
    use crate::model::{Coefficient, ControlSet, Dims};
    use ndarray::array;

    fn two_state_generator() -> RegimeGenerator {
        RegimeGenerator::new(array![[-0.5, 0.5], [0.8, -0.8]]).unwrap()
    }

    fn constant_model(b: f64, s: f64, g: Vec<Vec<f64>>) -> ModelSpec {
        let d = g.len();
        ModelSpec {
            dims: Dims {
                state: 1,
                brownian: 1,
                regimes: d,
                control: 1,
            },
            drift: Coefficient::new(1, 1, move |_t, _x, _u, _r, out| out[0] = b),
            diffusion: Coefficient::new(1, 1, move |_t, _x, _u, _r, out| out[0] = s),
            jump: Coefficient::new(1, d, move |_t, _x, _u, r, out| out.copy_from_slice(&g[r])),
            driver: None,
            terminal_y: None,
            running_cost: None,
            terminal_cost: None,
            control_set: ControlSet::interval(0.0, 1.0),
        }
    }

    fn small_cfg(n_paths: usize, seed: u64) -> ForwardConfig {
        ForwardConfig {
            n_paths,
            seed,
            x0: vec![0.0],
            initial_regime: 0,
        }
    }

    #[test]
    fn pure_drift_is_exact() {
        let spec = constant_model(1.5, 0.0, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let gen = two_state_generator();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let policy = ControlPolicy::constant(vec![0.5]);
        let bundle = simulate_forward(&spec, &gen, grid, &policy, &small_cfg(4, 1)).unwrap();
        for p in 0..4 {
            assert!((bundle.state(p, 16)[0] - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_diffusion_matches_stored_increments() {
        let spec = constant_model(0.0, 0.7, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let gen = two_state_generator();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let policy = ControlPolicy::constant(vec![0.0]);
        let bundle = simulate_forward(&spec, &gen, grid, &policy, &small_cfg(6, 2)).unwrap();
        for p in 0..6 {
            let wsum: f64 = (0..8).map(|n| bundle.dw_step(p, n)[0]).sum();
            assert!(
                (bundle.state(p, 8)[0] - 0.7 * wsum).abs() < 1e-12,
                "path {p}"
            );
        }
    }

    #[test]
    fn constant_jump_loading_reproduces_martingale() {
        // dx = γ dΦ̃ with per-regime constant rows: x(T) telescopes to
        // Σ_j Σ_{segments} γ_{i(s),j} dΦ̃_j, which for regime-independent
        // loadings equals Σ_j g_j Φ̃_j(T).
        let g = vec![vec![0.4, -0.3], vec![0.4, -0.3]];
        let spec = constant_model(0.0, 0.0, g);
        let gen = two_state_generator();
        let grid = TimeGrid::new(2.0, 10).unwrap();
        let policy = ControlPolicy::constant(vec![0.0]);
        let bundle = simulate_forward(&spec, &gen, grid, &policy, &small_cfg(50, 3)).unwrap();
        for p in 0..50 {
            let c = &bundle.countings[p];
            let want = 0.4 * c.martingale(0, 2.0) - 0.3 * c.martingale(1, 2.0);
            assert!(
                (bundle.state(p, 10)[0] - want).abs() < 1e-11,
                "path {p}: {} vs {want}",
                bundle.state(p, 10)[0]
            );
        }
    }

    #[test]
    fn dphi_tilde_sums_to_terminal_martingale() {
        let spec = constant_model(0.0, 0.0, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let gen = two_state_generator();
        let grid = TimeGrid::new(2.0, 7).unwrap();
        let policy = ControlPolicy::constant(vec![0.0]);
        let bundle = simulate_forward(&spec, &gen, grid, &policy, &small_cfg(40, 4)).unwrap();
        let mut inc = [0.0; 2];
        for p in 0..40 {
            let mut total = [0.0; 2];
            for n in 0..7 {
                bundle.dphi_tilde_into(p, n, &mut inc);
                total[0] += inc[0];
                total[1] += inc[1];
            }
            for j in 0..2 {
                let want = bundle.countings[p].martingale(j, 2.0);
                assert!((total[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_and_seeds_differ() {
        let spec = example1(&Example1Params::default()).unwrap();
        let gen = two_state_generator();
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let policy = ControlPolicy::constant(vec![1.0]);
        let a = simulate_forward(&spec, &gen, grid, &policy, &small_cfg(10, 9)).unwrap();
        let b = simulate_forward(&spec, &gen, grid, &policy, &small_cfg(10, 9)).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.dw, b.dw);
        assert_eq!(a.regimes, b.regimes);
        let c = simulate_forward(&spec, &gen, grid, &policy, &small_cfg(10, 10)).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn prefix_of_larger_batch_is_identical() {
        let spec = example1(&Example1Params::default()).unwrap();
        let gen = two_state_generator();
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let policy = ControlPolicy::constant(vec![0.7]);
        let small = simulate_forward(&spec, &gen, grid, &policy, &small_cfg(5, 11)).unwrap();
        let large = simulate_forward(&spec, &gen, grid, &policy, &small_cfg(20, 11)).unwrap();
        for p in 0..5 {
            for n in 0..7 {
                assert_eq!(small.state(p, n), large.state(p, n));
            }
        }
    }

    #[test]
    fn exploding_path_is_frozen_and_flagged() {
        let mut spec = constant_model(0.0, 0.0, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        spec.drift = Coefficient::new(1, 1, |_t, x, _u, _r, out| {
            out[0] = (x[0] + 1.0) * 1e200;
        });
        let gen = two_state_generator();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let policy = ControlPolicy::constant(vec![0.0]);
        let bundle = simulate_forward(&spec, &gen, grid, &policy, &small_cfg(3, 5)).unwrap();
        assert_eq!(bundle.aborted, vec![0, 1, 2]);
        for p in 0..3 {
            assert!(bundle.state(p, 4).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn clamping_is_flagged() {
        let spec = example1(&Example1Params::default()).unwrap();
        let gen = two_state_generator();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let inside = ControlPolicy::constant(vec![0.5]);
        let outside = ControlPolicy::constant(vec![1.5]);
        let a = simulate_forward(&spec, &gen, grid, &inside, &small_cfg(2, 6)).unwrap();
        assert!(!a.clamped);
        let b = simulate_forward(&spec, &gen, grid, &outside, &small_cfg(2, 6)).unwrap();
        assert!(b.clamped);
    }

    #[test]
    fn input_validation() {
        let spec = example1(&Example1Params::default()).unwrap();
        let gen = two_state_generator();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let policy = ControlPolicy::constant(vec![1.0]);
        let mut cfg = small_cfg(2, 0);
        cfg.x0 = vec![0.0, 0.0];
        assert!(simulate_forward(&spec, &gen, grid, &policy, &cfg).is_err());
        let mut cfg = small_cfg(2, 0);
        cfg.initial_regime = 9;
        assert!(simulate_forward(&spec, &gen, grid, &policy, &cfg).is_err());
        let bad_policy = ControlPolicy::constant(vec![1.0, 1.0]);
        assert!(simulate_forward(&spec, &gen, grid, &bad_policy, &small_cfg(2, 0)).is_err());
        let gen3 = RegimeGenerator::new(array![
            [-1.0, 0.5, 0.5],
            [0.2, -0.4, 0.2],
            [0.3, 0.3, -0.6]
        ])
        .unwrap();
        assert!(simulate_forward(&spec, &gen3, grid, &policy, &small_cfg(2, 0)).is_err());
    }

    #[test]
    fn affine_observable_residual_is_rounding_noise() {
        // Full jump-diffusion with state- and control-dependent loadings.
        let spec = linear_quadratic(&LinearQuadraticParams {
            drift_x: vec![0.2, -0.1],
            drift_u: vec![0.5, 0.5],
            diff_x: vec![0.3, 0.1],
            diff_u: vec![0.2, 0.4],
            diff_const: vec![0.6, 0.9],
            jump_loading: vec![vec![0.2, -0.1], vec![0.3, 0.4]],
            cost_x: 1.0,
            cost_u: 1.0,
            terminal_x: 1.0,
            control_lo: -1.0,
            control_hi: 1.0,
        })
        .unwrap();
        let gen = two_state_generator();
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let policy = ControlPolicy::deterministic(1, |t, out| out[0] = (3.0 * t).sin());
        let phi = SmoothObservable::affine(vec![1.3], vec![0.2, -0.7], 0.4);
        let res = ito_residuals(&spec, &gen, grid, &policy, &small_cfg(64, 12), &phi).unwrap();
        let max = res.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        assert!(max <= 1e-10, "max residual {max}");
    }

    #[test]
    fn quadratic_observable_residual_shrinks_with_dt() {
        let spec = constant_model(0.1, 0.8, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let gen = two_state_generator();
        let policy = ControlPolicy::constant(vec![0.0]);
        let phi = SmoothObservable::squared_norm();
        let mut means = Vec::new();
        for n_steps in [8usize, 64] {
            let grid = TimeGrid::new(1.0, n_steps).unwrap();
            let res = ito_residuals(&spec, &gen, grid, &policy, &small_cfg(256, 13), &phi).unwrap();
            means.push(res.iter().map(|r| r.abs()).sum::<f64>() / res.len() as f64);
        }
        assert!(
            means[1] < 0.5 * means[0],
            "no decay: {means:?}"
        );
    }

    #[test]
    fn covariation_residuals_are_rounding_noise() {
        let gen = RegimeGenerator::new(array![
            [-1.2, 0.7, 0.5],
            [0.9, -1.5, 0.6],
            [0.4, 0.8, -1.2]
        ])
        .unwrap();
        let mut worst = 0.0f64;
        for p in 0..200 {
            let mut rng = stream(99, StreamKind::Chain, p);
            let chain = sample_chain(&gen, (p % 3) as usize, 3.0, &mut rng).unwrap();
            let counting = counting_data(&chain, &gen).unwrap();
            let res = covariation_residuals(&counting);
            worst = worst.max(res.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        }
        assert!(worst <= 1e-10, "worst covariation residual {worst}");
    }
}
