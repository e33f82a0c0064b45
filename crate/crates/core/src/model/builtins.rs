//! Built-in model families with analytic derivatives.
//!
//! * [`example1`] — control only in the noise loadings: `dx = u σ_i dW +
//!   u γ_i dΦ̃`, running cost `−c·u`, terminal cost `x²/2 + 1`, `U = [0,1]`.
//!   An optional state modulation multiplies both loadings by
//!   `1 + m·sin(x)`, which makes the coefficients genuinely state-dependent
//!   while keeping the unmodulated closed form as the `m = 0` special case.
//! * [`example2`] — recursive utility variant: `dx = u dW + u ν dΦ̃` with
//!   driver `f = z + Σ_j κ_j² λ_j` and terminal value `g = x + a_i`.
//! * [`linear_quadratic`] — regime-switching scalar LQ problem.

use super::{
    Coefficient, ControlSet, Dims, DriverFn, ModelSpec, RunningCost, ScalarStateFn,
};
use crate::error::{CoreError, Result};
use crate::regime::RegimeGenerator;
use ndarray::Array2;

/// Parameters of the noise-control family.
#[derive(Clone, Debug)]
pub struct Example1Params {
    /// Diffusion loading per regime; its length sets the number of regimes.
    pub sigma: Vec<f64>,
    /// Jump loadings `gamma[i][j]`: loading on jumps into regime `j` while
    /// in regime `i`. Shape `D×D`.
    pub gamma: Vec<Vec<f64>>,
    /// Reward slope `c` of the running cost `−c·u`.
    pub cost_slope: f64,
    /// Modulation strength `m` of the factor `1 + m·sin(x)`.
    pub state_modulation: f64,
}

impl Default for Example1Params {
    fn default() -> Self {
        Self {
            sigma: vec![1.0, 0.8],
            gamma: vec![vec![0.2, 0.1], vec![0.1, 0.3]],
            cost_slope: 1.5,
            state_modulation: 0.0,
        }
    }
}

fn check_matrix(name: &str, m: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(CoreError::DimensionMismatch(format!(
            "{name} must be {rows}x{cols}"
        )));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidInput(format!("{name} has non-finite entries")));
    }
    Ok(())
}

/// Builds the noise-control model. With `state_modulation = 0` the optimal
/// control is `ū ≡ 1` whenever `c ≥ σ_i² + Σ_j γ_ij² λ_ij` in every regime,
/// and the adjoints are known in closed form.
pub fn example1(p: &Example1Params) -> Result<ModelSpec> {
    let d = p.sigma.len();
    if d == 0 || p.sigma.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidInput("sigma must be nonempty and finite".into()));
    }
    check_matrix("gamma", &p.gamma, d, d)?;
    if !p.cost_slope.is_finite() || !p.state_modulation.is_finite() {
        return Err(CoreError::InvalidInput("cost_slope and state_modulation must be finite".into()));
    }
    let m = p.state_modulation;

    let sigma = p.sigma.clone();
    let diffusion = Coefficient::new(1, 1, {
        let sigma = sigma.clone();
        move |_t, x, u, r, out: &mut [f64]| out[0] = u[0] * sigma[r] * (1.0 + m * x[0].sin())
    })
    .with_dx({
        let sigma = sigma.clone();
        move |_t, x, u, r, out: &mut [f64]| out[0] = u[0] * sigma[r] * m * x[0].cos()
    })
    .with_dxx({
        let sigma = sigma.clone();
        move |_t, x, u, r, out: &mut [f64]| out[0] = -u[0] * sigma[r] * m * x[0].sin()
    });

    let gamma = p.gamma.clone();
    let jump = Coefficient::new(1, d, {
        let gamma = gamma.clone();
        move |_t, x, u, r, out: &mut [f64]| {
            let f = 1.0 + m * x[0].sin();
            for (j, o) in out.iter_mut().enumerate() {
                *o = u[0] * gamma[r][j] * f;
            }
        }
    })
    .with_dx({
        let gamma = gamma.clone();
        move |_t, x, u, r, out: &mut [f64]| {
            let f = m * x[0].cos();
            for (j, o) in out.iter_mut().enumerate() {
                *o = u[0] * gamma[r][j] * f;
            }
        }
    })
    .with_dxx({
        let gamma = gamma.clone();
        move |_t, x, u, r, out: &mut [f64]| {
            let f = -m * x[0].sin();
            for (j, o) in out.iter_mut().enumerate() {
                *o = u[0] * gamma[r][j] * f;
            }
        }
    });

    let c = p.cost_slope;
    let running = RunningCost::new(move |_t, _x, u, _r| -c * u[0])
        .with_dx(|_t, _x, _u, _r, out: &mut [f64]| out[0] = 0.0)
        .with_dxx(|_t, _x, _u, _r, out: &mut [f64]| out[0] = 0.0);
    let terminal = ScalarStateFn::new(|x, _r| 0.5 * x[0] * x[0] + 1.0)
        .with_grad(|x, _r, out: &mut [f64]| out[0] = x[0])
        .with_hess(|_x, _r, out: &mut [f64]| out[0] = 1.0);

    let spec = ModelSpec {
        dims: Dims {
            state: 1,
            brownian: 1,
            regimes: d,
            control: 1,
        },
        drift: Coefficient::zero(1, 1),
        diffusion,
        jump,
        driver: None,
        terminal_y: None,
        running_cost: Some(running),
        terminal_cost: Some(terminal),
        control_set: ControlSet::interval(0.0, 1.0),
    };
    spec.check_shapes()?;
    Ok(spec)
}

/// Parameters of the recursive-utility family.
#[derive(Clone, Debug)]
pub struct Example2Params {
    /// Jump loadings `ν_j` (shared across regimes); length `D`.
    pub nu: Vec<f64>,
    /// Terminal offsets `a_i` added per regime: `g(x, e_i) = x + a_i`.
    pub terminal_offset: Vec<f64>,
    /// Strength `c` of an optional state tilt `c·sin(x)` added to the
    /// aggregator. With `c = 0` the aggregator is the plain
    /// `z + Σ_j κ_j² λ_ij`; with `c ≠ 0` the utility depends on the whole
    /// state path, which exercises the `f_x`/`f_xx` machinery while the
    /// frozen candidate `ū ≡ 0` keeps every backward solve exact.
    pub state_tilt: f64,
}

impl Example2Params {
    pub fn with_regimes(d: usize) -> Self {
        Self {
            nu: vec![0.3; d],
            terminal_offset: vec![0.0; d],
            state_tilt: 0.0,
        }
    }
}

/// Builds the recursive model `dx = u dW + u ν dΦ̃`,
/// `f(t,x,y,z,κ,e_i) = z + Σ_j κ_j² λ_ij + c·sin(x)`, `g(x,e_i) = x + a_i`,
/// `U = [0,1]`. The intensities `λ_ij` are read from `generator`. With
/// `c = 0` the optimal control is `ū ≡ 0`: a constant control `u` costs
/// `y(0) = x(0) + T·(u + u²·Σ_j ν_j² λ_j)` plus terminal offsets, so all
/// adjoints are known in closed form. With `c ≠ 0` and `ū ≡ 0` the state
/// freezes at `x(0) = x₀` and the closed forms become
/// `ȳ(t) = x₀ + c·sin(x₀)(T−t)`, `𝔭(t) = 1 + c·cos(x₀)(T−t)`,
/// `𝒫(t) = −c·sin(x₀)(T−t)` with vanishing martingale loadings.
pub fn example2(p: &Example2Params, generator: &RegimeGenerator) -> Result<ModelSpec> {
    let d = generator.num_states();
    if p.nu.len() != d || p.nu.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::DimensionMismatch(format!(
            "nu must have one finite entry per regime ({d})"
        )));
    }
    if p.terminal_offset.len() != d || p.terminal_offset.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::DimensionMismatch(format!(
            "terminal_offset must have one finite entry per regime ({d})"
        )));
    }
    let mut lambda = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            lambda[[i, j]] = generator.jump_intensity(i, j);
        }
    }

    let diffusion = Coefficient::new(1, 1, |_t, _x, u, _r, out: &mut [f64]| out[0] = u[0])
        .with_dx(|_t, _x, _u, _r, out: &mut [f64]| out[0] = 0.0)
        .with_dxx(|_t, _x, _u, _r, out: &mut [f64]| out[0] = 0.0);
    let nu = p.nu.clone();
    let jump = Coefficient::new(1, d, {
        let nu = nu.clone();
        move |_t, _x, u, _r, out: &mut [f64]| {
            for (j, o) in out.iter_mut().enumerate() {
                *o = u[0] * nu[j];
            }
        }
    })
    .with_dx(|_t, _x, _u, _r, out: &mut [f64]| out.fill(0.0))
    .with_dxx(|_t, _x, _u, _r, out: &mut [f64]| out.fill(0.0));

    let lam = lambda.clone();
    let tilt = p.state_tilt;
    let driver = DriverFn::new(d, {
        let lam = lam.clone();
        move |_t, x, _y, z, kappa, _u, r| {
            let mut s = z + tilt * x.sin();
            for (j, k) in kappa.iter().enumerate() {
                s += k * k * lam[[r, j]];
            }
            s
        }
    })
    .with_grad({
        let lam = lam.clone();
        move |_t, x, _y, _z, kappa, _u, r, out: &mut [f64]| {
            out[0] = tilt * x.cos();
            out[1] = 0.0;
            out[2] = 1.0;
            for (j, k) in kappa.iter().enumerate() {
                out[3 + j] = 2.0 * k * lam[[r, j]];
            }
        }
    })
    .with_hess({
        let lam = lam.clone();
        move |_t, x, _y, _z, _kappa, _u, r, out: &mut [f64]| {
            out.fill(0.0);
            let nc = 3 + lam.ncols();
            out[0] = -tilt * x.sin();
            for j in 0..lam.ncols() {
                out[(3 + j) * nc + (3 + j)] = 2.0 * lam[[r, j]];
            }
        }
    });

    let offsets = p.terminal_offset.clone();
    let terminal_y = ScalarStateFn::new(move |x, r| x[0] + offsets[r])
        .with_grad(|_x, _r, out: &mut [f64]| out[0] = 1.0)
        .with_hess(|_x, _r, out: &mut [f64]| out[0] = 0.0);

    let spec = ModelSpec {
        dims: Dims {
            state: 1,
            brownian: 1,
            regimes: d,
            control: 1,
        },
        drift: Coefficient::zero(1, 1),
        diffusion,
        jump,
        driver: Some(driver),
        terminal_y: Some(terminal_y),
        running_cost: None,
        terminal_cost: None,
        control_set: ControlSet::interval(0.0, 1.0),
    };
    spec.check_shapes()?;
    Ok(spec)
}

/// Parameters of the regime-switching scalar LQ family. All per-regime
/// vectors share length `D`.
#[derive(Clone, Debug)]
pub struct LinearQuadraticParams {
    /// Drift `b = a_i·x + b_i·u`.
    pub drift_x: Vec<f64>,
    pub drift_u: Vec<f64>,
    /// Diffusion `σ = c_i·x + e_i·u + s_i`.
    pub diff_x: Vec<f64>,
    pub diff_u: Vec<f64>,
    pub diff_const: Vec<f64>,
    /// Constant jump loadings `gamma[i][j]`.
    pub jump_loading: Vec<Vec<f64>>,
    /// Running cost `(q·x² + r·u²)/2`.
    pub cost_x: f64,
    pub cost_u: f64,
    /// Terminal cost `m·x²/2`.
    pub terminal_x: f64,
    pub control_lo: f64,
    pub control_hi: f64,
}

/// Builds the LQ model.
pub fn linear_quadratic(p: &LinearQuadraticParams) -> Result<ModelSpec> {
    let d = p.drift_x.len();
    for (name, v) in [
        ("drift_x", &p.drift_x),
        ("drift_u", &p.drift_u),
        ("diff_x", &p.diff_x),
        ("diff_u", &p.diff_u),
        ("diff_const", &p.diff_const),
    ] {
        if v.len() != d || v.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::DimensionMismatch(format!(
                "{name} must have one finite entry per regime ({d})"
            )));
        }
    }
    check_matrix("jump_loading", &p.jump_loading, d, d)?;

    let (ax, bu) = (p.drift_x.clone(), p.drift_u.clone());
    let drift = Coefficient::new(1, 1, {
        let (ax, bu) = (ax.clone(), bu.clone());
        move |_t, x, u, r, out: &mut [f64]| out[0] = ax[r] * x[0] + bu[r] * u[0]
    })
    .with_dx({
        let ax = ax.clone();
        move |_t, _x, _u, r, out: &mut [f64]| out[0] = ax[r]
    })
    .with_dxx(|_t, _x, _u, _r, out: &mut [f64]| out[0] = 0.0);

    let (cx, eu, s0) = (p.diff_x.clone(), p.diff_u.clone(), p.diff_const.clone());
    let diffusion = Coefficient::new(1, 1, {
        let (cx, eu, s0) = (cx.clone(), eu.clone(), s0.clone());
        move |_t, x, u, r, out: &mut [f64]| out[0] = cx[r] * x[0] + eu[r] * u[0] + s0[r]
    })
    .with_dx({
        let cx = cx.clone();
        move |_t, _x, _u, r, out: &mut [f64]| out[0] = cx[r]
    })
    .with_dxx(|_t, _x, _u, _r, out: &mut [f64]| out[0] = 0.0);

    let g = p.jump_loading.clone();
    let jump = Coefficient::new(1, d, {
        let g = g.clone();
        move |_t, _x, _u, r, out: &mut [f64]| out.copy_from_slice(&g[r])
    })
    .with_dx(|_t, _x, _u, _r, out: &mut [f64]| out.fill(0.0))
    .with_dxx(|_t, _x, _u, _r, out: &mut [f64]| out.fill(0.0));

    let (q, r_u) = (p.cost_x, p.cost_u);
    let running = RunningCost::new(move |_t, x, u, _r| 0.5 * (q * x[0] * x[0] + r_u * u[0] * u[0]))
        .with_dx(move |_t, x, _u, _r, out: &mut [f64]| out[0] = q * x[0])
        .with_dxx(move |_t, _x, _u, _r, out: &mut [f64]| out[0] = q);
    let mt = p.terminal_x;
    let terminal = ScalarStateFn::new(move |x, _r| 0.5 * mt * x[0] * x[0])
        .with_grad(move |x, _r, out: &mut [f64]| out[0] = mt * x[0])
        .with_hess(move |_x, _r, out: &mut [f64]| out[0] = mt);

    let spec = ModelSpec {
        dims: Dims {
            state: 1,
            brownian: 1,
            regimes: d,
            control: 1,
        },
        drift,
        diffusion,
        jump,
        driver: None,
        terminal_y: None,
        running_cost: Some(running),
        terminal_cost: Some(terminal),
        control_set: ControlSet::interval(p.control_lo, p.control_hi),
    };
    spec.check_shapes()?;
    Ok(spec)
}
