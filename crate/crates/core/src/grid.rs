//! Uniform time grids for simulation and backward sweeps.

use crate::error::{CoreError, Result};

/// Uniform grid `0 = t_0 < t_1 < … < t_N = T` with step `Δt = T / N`.
///
/// Integrators subdivide every step at the jump times of the path being
/// integrated, so jumps land exactly on sub-step boundaries instead of
/// being smeared across a step; values are still reported at the base
/// nodes, which all paths share. Construct through [`TimeGrid::new`], which
/// validates the inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(CoreError::InvalidInput(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(CoreError::InvalidInput("grid needs at least one step".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node `t_n`. The last node is exactly `horizon`.
    pub fn node(&self, n: usize) -> f64 {
        debug_assert!(n <= self.n_steps);
        if n == self.n_steps {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    /// Index of the step `(t_n, t_{n+1}]` containing `t`; times at or below
    /// zero map to step 0.
    pub fn step_of(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let raw = (t / self.dt()).ceil() as usize;
        raw.saturating_sub(1).min(self.n_steps - 1)
    }

    /// Nearest node index to `t`, clamped to the grid.
    pub fn nearest_node(&self, t: f64) -> usize {
        let raw = (t / self.dt()).round();
        (raw.max(0.0) as usize).min(self.n_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_cover_horizon_exactly() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(3), 1.0);
        assert!((g.dt() - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn step_of_uses_left_open_intervals() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.step_of(0.0), 0);
        assert_eq!(g.step_of(0.25), 0, "node time belongs to the step ending there");
        assert_eq!(g.step_of(0.26), 1);
        assert_eq!(g.step_of(1.0), 3);
    }

    #[test]
    fn nearest_node_clamps() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.nearest_node(0.13), 1);
        assert_eq!(g.nearest_node(-0.2), 0);
        assert_eq!(g.nearest_node(7.0), 4);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 4).is_err());
    }
}
