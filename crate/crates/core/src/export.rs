//! CSV export of chains, path bundles, backward solutions, condition
//! reports, rate ladders, duality checks and value surfaces.
//!
//! Every writer follows the same conventions so that downstream tooling can
//! rely on the byte level of the files:
//!
//! * UTF-8, `,` field separator, `.` decimal separator, one header row;
//! * floating-point fields use Rust's shortest round-trip `Display`
//!   formatting, so equal inputs produce byte-identical output;
//! * regime and state indices are written 0-based, exactly as the library
//!   counts them — numbered column *names* such as `regime_occupancy_1`
//!   enumerate columns, they are not index values;
//! * vector-valued fields (multi-dimensional controls, spike directions)
//!   are joined with `;` inside one CSV field;
//! * scalar models keep the bare column names (`mean_x`, `mean_z`);
//!   higher-dimensional models suffix them with 1-based component numbers
//!   (`mean_x_1`, `mean_x_2`, …) in storage order.
//!
//! Writers accept any [`std::io::Write`] sink and do not flush; wrap files
//! in a [`std::io::BufWriter`] and let the drop flush.

use std::fmt::Write as _;
use std::io::Write;

use crate::bsde::BackwardSolution;
use crate::error::{CoreError, Result};
use crate::forward::PathBundle;
use crate::grid::TimeGrid;
use crate::hjb::ValueGrid;
use crate::mp::MaxConditionRow;
use crate::recursive::DualityReport;
use crate::regime::ChainPath;
use crate::spike::RateSeries;

/// Appends `count` columns named `base` (when `count == 1`) or
/// `base_1..base_count` to a header line under construction.
fn push_columns(header: &mut String, base: &str, count: usize, always_number: bool) {
    for k in 0..count {
        header.push(',');
        header.push_str(base);
        if count > 1 || always_number {
            let _ = write!(header, "_{}", k + 1);
        }
    }
}

/// Writes a `;`-joined vector field (no trailing separator).
fn push_joined(line: &mut String, v: &[f64]) {
    for (k, c) in v.iter().enumerate() {
        if k > 0 {
            line.push(';');
        }
        let _ = write!(line, "{c}");
    }
}

/// Writes the event log of a single regime chain.
///
/// Columns: `time,state_index`. The first row records the initial state at
/// time `0`; every further row is one jump (its time and the state entered).
/// Nodes of any sampling grid are deliberately absent — the chain is
/// right-continuous and fully determined by these events.
pub fn write_chain_events<W: Write>(w: &mut W, chain: &ChainPath) -> Result<()> {
    writeln!(w, "time,state_index")?;
    writeln!(w, "0,{}", chain.initial_state)?;
    for (t, s) in chain.jump_times.iter().zip(&chain.states_after) {
        writeln!(w, "{t},{s}")?;
    }
    Ok(())
}

/// Writes per-node cross-path summaries of a forward bundle.
///
/// Columns: `time,mean_x,var_x,regime_occupancy_1..D` (state columns are
/// numbered per component when the state is multi-dimensional). `mean_x`
/// and `var_x` are the sample mean and the unbiased sample variance across
/// paths; `regime_occupancy_k` is the fraction of paths in regime `k − 1`
/// at that node. Aborted paths (frozen after a non-finite state) are
/// excluded from all three statistics.
pub fn write_bundle_summary<W: Write>(w: &mut W, bundle: &PathBundle) -> Result<()> {
    let l = bundle.spec.dims.state;
    let n_regimes = bundle.spec.dims.regimes;
    let live: Vec<usize> = (0..bundle.n_paths)
        .filter(|p| bundle.aborted.binary_search(p).is_err())
        .collect();
    if live.is_empty() {
        return Err(CoreError::InvalidInput(
            "bundle summary: every path aborted".into(),
        ));
    }
    let k = live.len() as f64;

    let mut header = String::from("time");
    push_columns(&mut header, "mean_x", l, false);
    push_columns(&mut header, "var_x", l, false);
    push_columns(&mut header, "regime_occupancy", n_regimes, true);
    writeln!(w, "{header}")?;

    let mut line = String::new();
    for n in 0..=bundle.grid.n_steps {
        line.clear();
        let _ = write!(line, "{}", bundle.grid.node(n));
        let mut mean = vec![0.0; l];
        let mut var = vec![0.0; l];
        for &p in &live {
            for (m, s) in mean.iter_mut().zip(bundle.state(p, n)) {
                *m += s;
            }
        }
        for m in &mut mean {
            *m /= k;
        }
        for &p in &live {
            for ((v, m), s) in var.iter_mut().zip(&mean).zip(bundle.state(p, n)) {
                *v += (s - m) * (s - m);
            }
        }
        for v in &mut var {
            *v /= (k - 1.0).max(1.0);
        }
        for m in &mean {
            let _ = write!(line, ",{m}");
        }
        for v in &var {
            let _ = write!(line, ",{v}");
        }
        let mut occ = vec![0usize; n_regimes];
        for &p in &live {
            occ[bundle.regime(p, n)] += 1;
        }
        for o in &occ {
            let _ = write!(line, ",{}", *o as f64 / k);
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes per-step cross-path means of a backward solution.
///
/// Columns: `time,mean_y,mean_z,mean_kappa_1..D` for a scalar solution;
/// multi-dimensional `y`/`z` blocks are numbered per component in storage
/// order. One row per *step*: the row at `t_n` holds the mean of `y(t_n)`
/// together with the loadings fitted on step `n`, which live on steps, not
/// nodes, so the terminal node carries no row.
pub fn write_solution_summary<W: Write>(
    w: &mut W,
    grid: &TimeGrid,
    sol: &BackwardSolution,
) -> Result<()> {
    let m = sol.m;
    let k_paths = sol.y.shape()[0];
    let n_steps = sol.z.shape()[1];
    let zw = sol.z.shape()[2];
    let kw = sol.kappa.shape()[2];
    if grid.n_steps != n_steps || sol.y.shape()[1] != n_steps + 1 {
        return Err(CoreError::DimensionMismatch(format!(
            "solution has {} steps, grid has {}",
            n_steps, grid.n_steps
        )));
    }
    if k_paths == 0 {
        return Err(CoreError::InvalidInput(
            "solution summary: no paths".into(),
        ));
    }
    let n_regimes = kw / m;

    let mut header = String::from("time");
    push_columns(&mut header, "mean_y", m, false);
    push_columns(&mut header, "mean_z", zw, false);
    if m == 1 {
        push_columns(&mut header, "mean_kappa", n_regimes, true);
    } else {
        push_columns(&mut header, "mean_kappa", kw, false);
    }
    writeln!(w, "{header}")?;

    let k = k_paths as f64;
    let mut line = String::new();
    for n in 0..n_steps {
        line.clear();
        let _ = write!(line, "{}", grid.node(n));
        for c in 0..m {
            let s: f64 = (0..k_paths).map(|p| sol.y[[p, n, c]]).sum();
            let _ = write!(line, ",{}", s / k);
        }
        for c in 0..zw {
            let s: f64 = (0..k_paths).map(|p| sol.z[[p, n, c]]).sum();
            let _ = write!(line, ",{}", s / k);
        }
        for c in 0..kw {
            let s: f64 = (0..k_paths).map(|p| sol.kappa[[p, n, c]]).sum();
            let _ = write!(line, ",{}", s / k);
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes the sampled rows of a pointwise minimum-condition check.
///
/// Columns: `time,regime,frac_pass,worst_gap,argmin_u`; `regime` is the
/// 0-based index and `argmin_u` the `;`-joined minimizing control of the
/// worst cell of that `(time, regime)` group.
pub fn write_condition_report<W: Write>(w: &mut W, rows: &[MaxConditionRow]) -> Result<()> {
    writeln!(w, "time,regime,frac_pass,worst_gap,argmin_u")?;
    let mut line = String::new();
    for row in rows {
        line.clear();
        let _ = write!(
            line,
            "{},{},{},{},",
            row.time, row.regime, row.frac_pass, row.worst_gap
        );
        push_joined(&mut line, &row.argmin_u);
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes a rate ladder in long form, one row per `(quantity, ε)` pair.
///
/// Columns: `quantity,eps,value,slope,slope_se`. The fitted slope of a
/// quantity is repeated on each of its rows; quantities whose rate is
/// undefined (identically vanishing series) leave both slope fields empty.
/// Works for any series family sharing one ladder `eps`.
pub fn write_rates_report<W: Write>(w: &mut W, eps: &[f64], series: &[RateSeries]) -> Result<()> {
    writeln!(w, "quantity,eps,value,slope,slope_se")?;
    let mut line = String::new();
    for s in series {
        if s.values.len() != eps.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "series {} has {} values for {} ladder rungs",
                s.name,
                s.values.len(),
                eps.len()
            )));
        }
        for (e, v) in eps.iter().zip(&s.values) {
            line.clear();
            let _ = write!(line, "{},{e},{v},", s.name);
            if let Some((slope, se)) = s.slope {
                let _ = write!(line, "{slope},{se}");
            } else {
                line.push(',');
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// Writes one duality check per row.
///
/// Columns: `eps,tau,v,yhat0,chi_integral,gap` with the spike direction `v`
/// `;`-joined when multi-dimensional.
pub fn write_duality_reports<W: Write>(w: &mut W, reports: &[DualityReport]) -> Result<()> {
    writeln!(w, "eps,tau,v,yhat0,chi_integral,gap")?;
    let mut line = String::new();
    for rep in reports {
        line.clear();
        let _ = write!(line, "{},{},", rep.eps, rep.tau);
        push_joined(&mut line, &rep.v);
        let _ = write!(line, ",{},{},{}", rep.yhat0, rep.chi_integral, rep.gap);
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes a finite-difference value surface with its minimizing feedback.
///
/// Columns: `t,x,regime,V,u_star`, one row per `(time node, space node,
/// regime)` in that nesting order; `u_star` is `;`-joined when the control
/// is multi-dimensional.
pub fn write_value_surface<W: Write>(w: &mut W, vg: &ValueGrid) -> Result<()> {
    writeln!(w, "t,x,regime,V,u_star")?;
    let mut line = String::new();
    for n in 0..=vg.grid.n_steps {
        let t = vg.grid.node(n);
        for m in 0..vg.window.n_nodes() {
            let x = vg.window.node(m);
            for i in 0..vg.n_regimes {
                line.clear();
                let _ = write!(line, "{t},{x},{i},{},", vg.value(n, m, i));
                push_joined(&mut line, vg.u_star(n, m, i));
                writeln!(w, "{line}")?;
            }
        }
    }
    Ok(())
}
