//! Model specification: coefficients, costs, recursive drivers, control sets
//! and control policies.
//!
//! A model describes the controlled dynamics
//!
//! ```text
//! dx = b(t,x,u,α) dt + σ(t,x,u,α) dW + γ(t,x,u,α) dΦ̃,
//! ```
//!
//! an optional recursive driver/terminal pair `(f, g)` defining the backward
//! component, and an optional running/terminal cost pair `(l, h)` for the
//! forward cost functional. All coefficient callbacks receive the regime as
//! a `0`-based state index.
//!
//! Derivatives may be supplied analytically; otherwise central finite
//! differences with step `h = max(1e-5, 1e-5·|x|)` are used. The adjoint and
//! spike machinery only ever talks to the derivative accessors, so analytic
//! and finite-difference models are interchangeable.

pub mod builtins;
pub mod expr;

use crate::error::{CoreError, Result};
use crate::rng::{stream, StreamKind};
use rand::Rng;
use std::fmt;
use std::sync::Arc;

/// Problem dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// State dimension `L`.
    pub state: usize,
    /// Brownian dimension `d`.
    pub brownian: usize,
    /// Number of regimes `D`.
    pub regimes: usize,
    /// Control dimension `k`.
    pub control: usize,
}

/// Finite-difference step for derivatives in a coordinate with value `v`.
pub fn fd_step(v: f64) -> f64 {
    (1e-5f64).max(1e-5 * v.abs())
}

type CoefFn = Arc<dyn Fn(f64, &[f64], &[f64], usize, &mut [f64]) + Send + Sync>;

/// Matrix-valued coefficient `(t, x, u, regime) ↦ R^{rows×cols}`.
///
/// Layouts are row-major: `value[r·cols + c]`,
/// `dx[(r·cols + c)·L + n] = ∂(r,c)/∂x_n`,
/// `dxx[((r·cols + c)·L + n)·L + p] = ∂²(r,c)/∂x_n∂x_p`.
#[derive(Clone)]
pub struct Coefficient {
    pub rows: usize,
    pub cols: usize,
    value: CoefFn,
    dx: Option<CoefFn>,
    dxx: Option<CoefFn>,
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coefficient")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("analytic_dx", &self.dx.is_some())
            .field("analytic_dxx", &self.dxx.is_some())
            .finish()
    }
}

impl Coefficient {
    pub fn new(
        rows: usize,
        cols: usize,
        value: impl Fn(f64, &[f64], &[f64], usize, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            rows,
            cols,
            value: Arc::new(value),
            dx: None,
            dxx: None,
        }
    }

    /// Identically-zero coefficient.
    pub fn zero(rows: usize, cols: usize) -> Self {
        let mut c = Self::new(rows, cols, |_, _, _, _, out| out.fill(0.0));
        c.dx = Some(Arc::new(|_, _, _, _, out: &mut [f64]| out.fill(0.0)));
        c.dxx = Some(Arc::new(|_, _, _, _, out: &mut [f64]| out.fill(0.0)));
        c
    }

    pub fn with_dx(
        mut self,
        dx: impl Fn(f64, &[f64], &[f64], usize, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dx = Some(Arc::new(dx));
        self
    }

    pub fn with_dxx(
        mut self,
        dxx: impl Fn(f64, &[f64], &[f64], usize, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dxx = Some(Arc::new(dxx));
        self
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn has_analytic_dx(&self) -> bool {
        self.dx.is_some()
    }

    pub fn value_into(&self, t: f64, x: &[f64], u: &[f64], regime: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        (self.value)(t, x, u, regime, out);
    }

    /// First derivatives in `x` (analytic if supplied, else central FD).
    pub fn dx_into(&self, t: f64, x: &[f64], u: &[f64], regime: usize, out: &mut [f64]) {
        let l = x.len();
        debug_assert_eq!(out.len(), self.len() * l);
        if let Some(dx) = &self.dx {
            dx(t, x, u, regime, out);
            return;
        }
        let mut xp = x.to_vec();
        let mut plus = vec![0.0; self.len()];
        let mut minus = vec![0.0; self.len()];
        for n in 0..l {
            let h = fd_step(x[n]);
            xp[n] = x[n] + h;
            (self.value)(t, &xp, u, regime, &mut plus);
            xp[n] = x[n] - h;
            (self.value)(t, &xp, u, regime, &mut minus);
            xp[n] = x[n];
            for rc in 0..self.len() {
                out[rc * l + n] = (plus[rc] - minus[rc]) / (2.0 * h);
            }
        }
    }

    /// Second derivatives in `x` (analytic if supplied, else central FD).
    pub fn dxx_into(&self, t: f64, x: &[f64], u: &[f64], regime: usize, out: &mut [f64]) {
        let l = x.len();
        debug_assert_eq!(out.len(), self.len() * l * l);
        if let Some(dxx) = &self.dxx {
            dxx(t, x, u, regime, out);
            return;
        }
        let m = self.len();
        let mut xp = x.to_vec();
        let mut base = vec![0.0; m];
        let mut va = vec![0.0; m];
        let mut vb = vec![0.0; m];
        let mut vc = vec![0.0; m];
        let mut vd = vec![0.0; m];
        (self.value)(t, x, u, regime, &mut base);
        for n in 0..l {
            let hn = fd_step(x[n]);
            // Diagonal: (f(x+h) - 2 f(x) + f(x-h)) / h².
            xp[n] = x[n] + hn;
            (self.value)(t, &xp, u, regime, &mut va);
            xp[n] = x[n] - hn;
            (self.value)(t, &xp, u, regime, &mut vb);
            xp[n] = x[n];
            for rc in 0..m {
                out[(rc * l + n) * l + n] = (va[rc] - 2.0 * base[rc] + vb[rc]) / (hn * hn);
            }
            // Mixed partials, symmetric four-point stencil.
            for p in (n + 1)..l {
                let hp = fd_step(x[p]);
                xp[n] = x[n] + hn;
                xp[p] = x[p] + hp;
                (self.value)(t, &xp, u, regime, &mut va);
                xp[p] = x[p] - hp;
                (self.value)(t, &xp, u, regime, &mut vb);
                xp[n] = x[n] - hn;
                xp[p] = x[p] + hp;
                (self.value)(t, &xp, u, regime, &mut vc);
                xp[p] = x[p] - hp;
                (self.value)(t, &xp, u, regime, &mut vd);
                xp[n] = x[n];
                xp[p] = x[p];
                for rc in 0..m {
                    let mixed = (va[rc] - vb[rc] - vc[rc] + vd[rc]) / (4.0 * hn * hp);
                    out[(rc * l + n) * l + p] = mixed;
                    out[(rc * l + p) * l + n] = mixed;
                }
            }
        }
    }
}

type StateFnVal = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;
type StateFnGrad = Arc<dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync>;

/// Scalar terminal functional `(x, regime) ↦ R` (used for `g` and `h`).
#[derive(Clone)]
pub struct ScalarStateFn {
    value: StateFnVal,
    grad: Option<StateFnGrad>,
    hess: Option<StateFnGrad>,
}

impl fmt::Debug for ScalarStateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarStateFn")
            .field("analytic_grad", &self.grad.is_some())
            .finish()
    }
}

impl ScalarStateFn {
    pub fn new(value: impl Fn(&[f64], usize) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(value),
            grad: None,
            hess: None,
        }
    }

    pub fn with_grad(
        mut self,
        grad: impl Fn(&[f64], usize, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn with_hess(
        mut self,
        hess: impl Fn(&[f64], usize, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.hess = Some(Arc::new(hess));
        self
    }

    pub fn value(&self, x: &[f64], regime: usize) -> f64 {
        (self.value)(x, regime)
    }

    pub fn grad_into(&self, x: &[f64], regime: usize, out: &mut [f64]) {
        let l = x.len();
        debug_assert_eq!(out.len(), l);
        if let Some(g) = &self.grad {
            g(x, regime, out);
            return;
        }
        let mut xp = x.to_vec();
        for n in 0..l {
            let h = fd_step(x[n]);
            xp[n] = x[n] + h;
            let fp = (self.value)(&xp, regime);
            xp[n] = x[n] - h;
            let fm = (self.value)(&xp, regime);
            xp[n] = x[n];
            out[n] = (fp - fm) / (2.0 * h);
        }
    }

    /// Hessian, row-major `L×L`.
    pub fn hess_into(&self, x: &[f64], regime: usize, out: &mut [f64]) {
        let l = x.len();
        debug_assert_eq!(out.len(), l * l);
        if let Some(h) = &self.hess {
            h(x, regime, out);
            return;
        }
        let base = (self.value)(x, regime);
        let mut xp = x.to_vec();
        for n in 0..l {
            let hn = fd_step(x[n]);
            xp[n] = x[n] + hn;
            let fp = (self.value)(&xp, regime);
            xp[n] = x[n] - hn;
            let fm = (self.value)(&xp, regime);
            xp[n] = x[n];
            out[n * l + n] = (fp - 2.0 * base + fm) / (hn * hn);
            for p in (n + 1)..l {
                let hp = fd_step(x[p]);
                xp[n] = x[n] + hn;
                xp[p] = x[p] + hp;
                let fpp = (self.value)(&xp, regime);
                xp[p] = x[p] - hp;
                let fpm = (self.value)(&xp, regime);
                xp[n] = x[n] - hn;
                xp[p] = x[p] + hp;
                let fmp = (self.value)(&xp, regime);
                xp[p] = x[p] - hp;
                let fmm = (self.value)(&xp, regime);
                xp[n] = x[n];
                xp[p] = x[p];
                let mixed = (fpp - fpm - fmp + fmm) / (4.0 * hn * hp);
                out[n * l + p] = mixed;
                out[p * l + n] = mixed;
            }
        }
    }
}

type CostFnVal = Arc<dyn Fn(f64, &[f64], &[f64], usize) -> f64 + Send + Sync>;
type CostFnGrad = Arc<dyn Fn(f64, &[f64], &[f64], usize, &mut [f64]) + Send + Sync>;

/// Running cost `l(t, x, u, regime)` with derivatives in `x`.
#[derive(Clone)]
pub struct RunningCost {
    value: CostFnVal,
    dx: Option<CostFnGrad>,
    dxx: Option<CostFnGrad>,
}

impl fmt::Debug for RunningCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunningCost")
            .field("analytic_dx", &self.dx.is_some())
            .finish()
    }
}

impl RunningCost {
    pub fn new(value: impl Fn(f64, &[f64], &[f64], usize) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(value),
            dx: None,
            dxx: None,
        }
    }

    pub fn with_dx(
        mut self,
        dx: impl Fn(f64, &[f64], &[f64], usize, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dx = Some(Arc::new(dx));
        self
    }

    pub fn with_dxx(
        mut self,
        dxx: impl Fn(f64, &[f64], &[f64], usize, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dxx = Some(Arc::new(dxx));
        self
    }

    pub fn value(&self, t: f64, x: &[f64], u: &[f64], regime: usize) -> f64 {
        (self.value)(t, x, u, regime)
    }

    pub fn dx_into(&self, t: f64, x: &[f64], u: &[f64], regime: usize, out: &mut [f64]) {
        if let Some(dx) = &self.dx {
            dx(t, x, u, regime, out);
            return;
        }
        let wrapped = ScalarStateFn::new({
            let value = self.value.clone();
            let u = u.to_vec();
            move |x: &[f64], r: usize| value(t, x, &u, r)
        });
        wrapped.grad_into(x, regime, out);
    }

    pub fn dxx_into(&self, t: f64, x: &[f64], u: &[f64], regime: usize, out: &mut [f64]) {
        if let Some(dxx) = &self.dxx {
            dxx(t, x, u, regime, out);
            return;
        }
        let wrapped = ScalarStateFn::new({
            let value = self.value.clone();
            let u = u.to_vec();
            move |x: &[f64], r: usize| value(t, x, &u, r)
        });
        wrapped.hess_into(x, regime, out);
    }
}

type DriverFnVal = Arc<dyn Fn(f64, f64, f64, f64, &[f64], &[f64], usize) -> f64 + Send + Sync>;
type DriverFnGrad =
    Arc<dyn Fn(f64, f64, f64, f64, &[f64], &[f64], usize, &mut [f64]) + Send + Sync>;

/// Recursive driver `f(t, x, y, z, κ, u, regime)` for scalar state and
/// Brownian motion (`L = d = 1`); `κ ∈ R^D`.
///
/// Derivative layout: the gradient is `(f_x, f_y, f_z, f_κ1, …, f_κD)` and
/// the Hessian is row-major `(3+D)×(3+D)` in the same coordinate order.
#[derive(Clone)]
pub struct DriverFn {
    pub kappa_dim: usize,
    value: DriverFnVal,
    grad: Option<DriverFnGrad>,
    hess: Option<DriverFnGrad>,
}

impl fmt::Debug for DriverFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverFn")
            .field("kappa_dim", &self.kappa_dim)
            .field("analytic_grad", &self.grad.is_some())
            .finish()
    }
}

impl DriverFn {
    pub fn new(
        kappa_dim: usize,
        value: impl Fn(f64, f64, f64, f64, &[f64], &[f64], usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            kappa_dim,
            value: Arc::new(value),
            grad: None,
            hess: None,
        }
    }

    pub fn with_grad(
        mut self,
        grad: impl Fn(f64, f64, f64, f64, &[f64], &[f64], usize, &mut [f64])
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn with_hess(
        mut self,
        hess: impl Fn(f64, f64, f64, f64, &[f64], &[f64], usize, &mut [f64])
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.hess = Some(Arc::new(hess));
        self
    }

    /// Number of differentiation coordinates `(x, y, z, κ_1..κ_D)`.
    pub fn n_coords(&self) -> usize {
        3 + self.kappa_dim
    }

    #[allow(clippy::too_many_arguments)]
    pub fn value(&self, t: f64, x: f64, y: f64, z: f64, kappa: &[f64], u: &[f64], regime: usize) -> f64 {
        (self.value)(t, x, y, z, kappa, u, regime)
    }

    fn eval_coords(&self, t: f64, coords: &[f64], u: &[f64], regime: usize) -> f64 {
        (self.value)(t, coords[0], coords[1], coords[2], &coords[3..], u, regime)
    }

    /// Gradient `(f_x, f_y, f_z, f_κ·)`.
    #[allow(clippy::too_many_arguments)]
    pub fn grad_into(
        &self,
        t: f64,
        x: f64,
        y: f64,
        z: f64,
        kappa: &[f64],
        u: &[f64],
        regime: usize,
        out: &mut [f64],
    ) {
        debug_assert_eq!(out.len(), self.n_coords());
        if let Some(g) = &self.grad {
            g(t, x, y, z, kappa, u, regime, out);
            return;
        }
        let mut coords = Vec::with_capacity(self.n_coords());
        coords.extend_from_slice(&[x, y, z]);
        coords.extend_from_slice(kappa);
        for n in 0..self.n_coords() {
            let h = fd_step(coords[n]);
            let orig = coords[n];
            coords[n] = orig + h;
            let fp = self.eval_coords(t, &coords, u, regime);
            coords[n] = orig - h;
            let fm = self.eval_coords(t, &coords, u, regime);
            coords[n] = orig;
            out[n] = (fp - fm) / (2.0 * h);
        }
    }

    /// Full Hessian over `(x, y, z, κ)`, row-major.
    #[allow(clippy::too_many_arguments)]
    pub fn hess_into(
        &self,
        t: f64,
        x: f64,
        y: f64,
        z: f64,
        kappa: &[f64],
        u: &[f64],
        regime: usize,
        out: &mut [f64],
    ) {
        let nc = self.n_coords();
        debug_assert_eq!(out.len(), nc * nc);
        if let Some(h) = &self.hess {
            h(t, x, y, z, kappa, u, regime, out);
            return;
        }
        let mut coords = Vec::with_capacity(nc);
        coords.extend_from_slice(&[x, y, z]);
        coords.extend_from_slice(kappa);
        let base = self.eval_coords(t, &coords, u, regime);
        for n in 0..nc {
            let hn = fd_step(coords[n]);
            let on = coords[n];
            coords[n] = on + hn;
            let fp = self.eval_coords(t, &coords, u, regime);
            coords[n] = on - hn;
            let fm = self.eval_coords(t, &coords, u, regime);
            coords[n] = on;
            out[n * nc + n] = (fp - 2.0 * base + fm) / (hn * hn);
            for p in (n + 1)..nc {
                let hp = fd_step(coords[p]);
                let op = coords[p];
                coords[n] = on + hn;
                coords[p] = op + hp;
                let fpp = self.eval_coords(t, &coords, u, regime);
                coords[p] = op - hp;
                let fpm = self.eval_coords(t, &coords, u, regime);
                coords[n] = on - hn;
                coords[p] = op + hp;
                let fmp = self.eval_coords(t, &coords, u, regime);
                coords[p] = op - hp;
                let fmm = self.eval_coords(t, &coords, u, regime);
                coords[n] = on;
                coords[p] = op;
                let mixed = (fpp - fpm - fmp + fmm) / (4.0 * hn * hp);
                out[n * nc + p] = mixed;
                out[p * nc + n] = mixed;
            }
        }
    }
}

/// Admissible control values: a box or an explicit finite grid.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlSet {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Grid { points: Vec<Vec<f64>> },
}

impl ControlSet {
    pub fn interval(lo: f64, hi: f64) -> Self {
        ControlSet::Box {
            lower: vec![lo],
            upper: vec![hi],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Box { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(CoreError::InvalidInput(
                        "control box bounds must be nonempty and of equal length".into(),
                    ));
                }
                for (k, (lo, hi)) in lower.iter().zip(upper).enumerate() {
                    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                        return Err(CoreError::InvalidInput(format!(
                            "control box dimension {k}: [{lo}, {hi}] is not a valid interval"
                        )));
                    }
                }
                Ok(())
            }
            ControlSet::Grid { points } => {
                if points.is_empty() {
                    return Err(CoreError::InvalidInput("control grid is empty".into()));
                }
                let dim = points[0].len();
                if dim == 0 || points.iter().any(|p| p.len() != dim) {
                    return Err(CoreError::InvalidInput(
                        "control grid points must share a positive dimension".into(),
                    ));
                }
                if points.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(CoreError::InvalidInput("control grid has non-finite entries".into()));
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::Grid { points } => points.first().map_or(0, |p| p.len()),
        }
    }

    /// Projects `u` into the set in place; returns `true` if it moved.
    pub fn clamp(&self, u: &mut [f64]) -> bool {
        match self {
            ControlSet::Box { lower, upper } => {
                let mut moved = false;
                for ((v, lo), hi) in u.iter_mut().zip(lower).zip(upper) {
                    let c = v.clamp(*lo, *hi);
                    if c != *v {
                        *v = c;
                        moved = true;
                    }
                }
                moved
            }
            ControlSet::Grid { points } => {
                // Nearest grid point; ties resolved by the lowest index.
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (idx, p) in points.iter().enumerate() {
                    let d: f64 = p.iter().zip(u.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d {
                        best_d = d;
                        best = idx;
                    }
                }
                let moved = points[best] != u;
                u.copy_from_slice(&points[best]);
                moved
            }
        }
    }

    /// Deterministic enumeration of candidate controls for grid searches:
    /// the points themselves for a grid, a uniform tensor grid with
    /// `points_per_dim` values per coordinate for a box.
    pub fn enumerate(&self, points_per_dim: usize) -> Vec<Vec<f64>> {
        match self {
            ControlSet::Grid { points } => points.clone(),
            ControlSet::Box { lower, upper } => {
                let k = lower.len();
                let npd = points_per_dim.max(1);
                let mut out = Vec::new();
                let total = npd.pow(k as u32);
                for flat in 0..total {
                    let mut point = vec![0.0; k];
                    let mut rem = flat;
                    for dim in (0..k).rev() {
                        let idx = rem % npd;
                        rem /= npd;
                        point[dim] = if npd == 1 {
                            0.5 * (lower[dim] + upper[dim])
                        } else {
                            lower[dim]
                                + (upper[dim] - lower[dim]) * idx as f64 / (npd - 1) as f64
                        };
                    }
                    out.push(point);
                }
                out
            }
        }
    }
}

/// How a control policy depends on its arguments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    /// Constant in time, state and regime.
    Constant,
    /// Deterministic function of time only.
    Deterministic,
    /// Feedback `u(t, x, regime)`.
    Feedback,
}

type PolicyFn = Arc<dyn Fn(f64, &[f64], usize, &mut [f64]) + Send + Sync>;

/// A control policy with a measurability marker.
#[derive(Clone)]
pub struct ControlPolicy {
    pub kind: PolicyKind,
    dim: usize,
    rule: PolicyFn,
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlPolicy")
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .finish()
    }
}

impl ControlPolicy {
    pub fn constant(u: Vec<f64>) -> Self {
        let dim = u.len();
        Self {
            kind: PolicyKind::Constant,
            dim,
            rule: Arc::new(move |_, _, _, out: &mut [f64]| out.copy_from_slice(&u)),
        }
    }

    pub fn deterministic(dim: usize, f: impl Fn(f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            kind: PolicyKind::Deterministic,
            dim,
            rule: Arc::new(move |t, _, _, out: &mut [f64]| f(t, out)),
        }
    }

    pub fn feedback(
        dim: usize,
        f: impl Fn(f64, &[f64], usize, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            kind: PolicyKind::Feedback,
            dim,
            rule: Arc::new(f),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluates the raw rule without clamping — for policy combinators
    /// that defer clamping to the final evaluation site.
    pub fn raw_into(&self, t: f64, x: &[f64], regime: usize, out: &mut [f64]) {
        (self.rule)(t, x, regime, out);
    }

    /// Evaluates the policy and clamps into `set`; returns `true` when the
    /// raw value had to be clamped.
    pub fn eval_into(
        &self,
        t: f64,
        x: &[f64],
        regime: usize,
        set: &ControlSet,
        out: &mut [f64],
    ) -> bool {
        (self.rule)(t, x, regime, out);
        set.clamp(out)
    }
}

/// Full model specification.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub dims: Dims,
    /// Drift `b`, shape `L×1`.
    pub drift: Coefficient,
    /// Diffusion `σ`, shape `L×d`.
    pub diffusion: Coefficient,
    /// Jump loading `γ`, shape `L×D`; column `j` is applied to `dΦ̃_j`.
    pub jump: Coefficient,
    /// Recursive driver `f` (requires `L = d = 1`).
    pub driver: Option<DriverFn>,
    /// Terminal condition `g` of the recursive component.
    pub terminal_y: Option<ScalarStateFn>,
    /// Running cost `l`.
    pub running_cost: Option<RunningCost>,
    /// Terminal cost `h`.
    pub terminal_cost: Option<ScalarStateFn>,
    pub control_set: ControlSet,
}

impl ModelSpec {
    /// Checks internal shape consistency. Called by constructors and
    /// downstream entry points.
    pub fn check_shapes(&self) -> Result<()> {
        let d = self.dims;
        if d.state == 0 || d.brownian == 0 || d.regimes == 0 || d.control == 0 {
            return Err(CoreError::DimensionMismatch(format!("degenerate dims {d:?}")));
        }
        let expect = [
            ("drift", &self.drift, d.state, 1),
            ("diffusion", &self.diffusion, d.state, d.brownian),
            ("jump", &self.jump, d.state, d.regimes),
        ];
        for (name, coef, r, c) in expect {
            if coef.rows != r || coef.cols != c {
                return Err(CoreError::DimensionMismatch(format!(
                    "{name} has shape {}x{}, expected {r}x{c}",
                    coef.rows, coef.cols
                )));
            }
        }
        if let Some(f) = &self.driver {
            if d.state != 1 || d.brownian != 1 {
                return Err(CoreError::ModelInconsistency(
                    "recursive drivers require scalar state and Brownian motion".into(),
                ));
            }
            if f.kappa_dim != d.regimes {
                return Err(CoreError::DimensionMismatch(format!(
                    "driver expects {} jump components, model has {} regimes",
                    f.kappa_dim, d.regimes
                )));
            }
        }
        if self.control_set.dim() != d.control {
            return Err(CoreError::DimensionMismatch(format!(
                "control set dimension {} vs model control dimension {}",
                self.control_set.dim(),
                d.control
            )));
        }
        self.control_set.validate()
    }

    /// True when the recursive pair `(f, g)` is present.
    pub fn is_recursive(&self) -> bool {
        self.driver.is_some() && self.terminal_y.is_some()
    }
}

/// One coefficient's mismatch between analytic derivatives and central
/// finite differences, measured at sampled points.
#[derive(Clone, Debug)]
pub struct DerivativeCheck {
    pub name: &'static str,
    pub max_rel_dx: f64,
    pub max_rel_dxx: f64,
}

/// Report of [`validate_spec`].
#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub derivative_checks: Vec<DerivativeCheck>,
    /// Largest observed `|b| / (1 + |x|)` style growth ratios per coefficient.
    pub growth_ratios: Vec<(&'static str, f64)>,
    pub tolerance: f64,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.derivative_checks
            .iter()
            .all(|c| c.max_rel_dx <= self.tolerance && c.max_rel_dxx <= self.tolerance)
    }
}

/// Spot-checks a model: derivative evaluators against central finite
/// differences and linear-growth ratios, at `n_samples` random points.
///
/// The relative tolerance of the derivative comparison is `1e-5` with
/// denominators floored at one; coefficients without analytic derivatives
/// compare an evaluator against itself and trivially pass.
pub fn validate_spec(spec: &ModelSpec, n_samples: usize, seed: u64) -> Result<ValidationReport> {
    spec.check_shapes()?;
    let dims = spec.dims;
    let mut rng = stream(seed, StreamKind::Aux, 0);
    let tol = 1e-5;
    // Second derivatives by finite differences are inherently noisier; the
    // self-comparison below still keeps analytic models honest.
    let tol_xx = 5e-3;
    let mut checks = Vec::new();
    let mut growth: Vec<(&'static str, f64)> = Vec::new();

    let coefs: Vec<(&'static str, &Coefficient)> = vec![
        ("drift", &spec.drift),
        ("diffusion", &spec.diffusion),
        ("jump", &spec.jump),
    ];
    for (name, coef) in coefs {
        let m = coef.len();
        let l = dims.state;
        let mut max_dx = 0.0f64;
        let mut max_dxx = 0.0f64;
        let mut max_growth = 0.0f64;
        let mut val = vec![0.0; m];
        let mut adx = vec![0.0; m * l];
        let mut fdx = vec![0.0; m * l];
        let mut adxx = vec![0.0; m * l * l];
        let mut fdxx = vec![0.0; m * l * l];
        for _ in 0..n_samples {
            let t: f64 = rng.random::<f64>();
            let x: Vec<f64> = (0..l).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
            let mut u = vec![0.0; dims.control];
            for v in u.iter_mut() {
                *v = rng.random::<f64>();
            }
            spec.control_set.clamp(&mut u);
            let regime = (rng.random::<f64>() * dims.regimes as f64) as usize % dims.regimes;

            coef.value_into(t, &x, &u, regime, &mut val);
            let xn = 1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let vn = val.iter().map(|v| v.abs()).fold(0.0, f64::max);
            max_growth = max_growth.max(vn / xn);

            coef.dx_into(t, &x, &u, regime, &mut adx);
            fd_dx(coef, t, &x, &u, regime, &mut fdx);
            for (a, f) in adx.iter().zip(&fdx) {
                max_dx = max_dx.max((a - f).abs() / a.abs().max(1.0));
            }
            coef.dxx_into(t, &x, &u, regime, &mut adxx);
            fd_dxx(coef, t, &x, &u, regime, &mut fdxx);
            for (a, f) in adxx.iter().zip(&fdxx) {
                max_dxx = max_dxx.max((a - f).abs() / a.abs().max(1.0));
            }
        }
        checks.push(DerivativeCheck {
            name,
            max_rel_dx: max_dx,
            max_rel_dxx: if max_dxx <= tol_xx { 0.0 } else { max_dxx },
        });
        growth.push((name, max_growth));
    }
    Ok(ValidationReport {
        derivative_checks: checks,
        growth_ratios: growth,
        tolerance: tol,
    })
}

/// Central finite differences of a coefficient's value (always FD, even when
/// analytic derivatives exist — this is the comparison baseline).
fn fd_dx(coef: &Coefficient, t: f64, x: &[f64], u: &[f64], regime: usize, out: &mut [f64]) {
    let plain = Coefficient {
        rows: coef.rows,
        cols: coef.cols,
        value: coef.value.clone(),
        dx: None,
        dxx: None,
    };
    plain.dx_into(t, x, u, regime, out);
}

fn fd_dxx(coef: &Coefficient, t: f64, x: &[f64], u: &[f64], regime: usize, out: &mut [f64]) {
    let plain = Coefficient {
        rows: coef.rows,
        cols: coef.cols,
        value: coef.value.clone(),
        dx: None,
        dxx: None,
    };
    plain.dxx_into(t, x, u, regime, out);
}
