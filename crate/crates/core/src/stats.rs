//! Small statistical helpers: sample summaries, slope fits, deterministic
//! parallel reductions.

use rayon::prelude::*;

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Ordinary least squares fit `y ≈ a + b·x`, returning `(a, b, se_b)`.
///
/// `se_b` is the usual residual-based standard error of the slope; with
/// fewer than three points it is reported as zero.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    assert!(x.len() >= 2, "slope fit needs at least two points");
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(u, v)| (u - mx) * (v - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let se_b = if x.len() > 2 {
        let ss_res: f64 = x
            .iter()
            .zip(y)
            .map(|(u, v)| {
                let r = v - (a + b * u);
                r * r
            })
            .sum();
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (a, b, se_b)
}

/// Fitted slope of `log2(value)` against `log2(scale)`, with standard error.
///
/// Non-positive values cannot be fitted on a log scale; they are rejected so
/// callers surface degenerate quantities instead of silently dropping points.
pub fn log2_slope(scales: &[f64], values: &[f64]) -> Option<(f64, f64)> {
    if scales.len() != values.len() || scales.len() < 2 {
        return None;
    }
    if scales.iter().any(|&s| s <= 0.0) || values.iter().any(|&v| v <= 0.0) {
        return None;
    }
    let xs: Vec<f64> = scales.iter().map(|s| s.log2()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.log2()).collect();
    let (_, slope, se) = fit_line(&xs, &ys);
    Some((slope, se))
}

/// Chunk size used by the deterministic parallel helpers.
///
/// Fixed independently of the worker count so that the order in which
/// partial results are combined never changes.
pub const PAR_CHUNK: usize = 2048;

/// Map `f` over `0..n` in fixed chunks, then fold the per-chunk results in
/// index order. The reduction order is independent of the thread count, so
/// floating-point output is bit-identical for any `--workers` setting.
pub fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(std::ops::Range<usize>) -> f64 + Sync + Send,
{
    let chunks: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(PAR_CHUNK)
        .map(|s| s..(s + PAR_CHUNK).min(n))
        .collect();
    let partials: Vec<f64> = chunks.into_par_iter().map(f).collect();
    partials.into_iter().sum()
}

/// Like [`chunked_sum`] but accumulating a vector per chunk.
pub fn chunked_sum_vec<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync + Send,
{
    let chunks: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(PAR_CHUNK)
        .map(|s| s..(s + PAR_CHUNK).min(n))
        .collect();
    let partials: Vec<Vec<f64>> = chunks
        .into_par_iter()
        .map(|r| {
            let mut acc = vec![0.0; dim];
            f(r, &mut acc);
            acc
        })
        .collect();
    let mut out = vec![0.0; dim];
    for part in partials {
        for (o, p) in out.iter_mut().zip(&part) {
            *o += p;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.5, 3.5, 5.5, 7.5];
        let (a, b, se) = fit_line(&x, &y);
        assert!((a - (-0.5)).abs() < 1e-12);
        assert!((b - 2.0).abs() < 1e-12);
        assert!(se < 1e-12);
    }

    #[test]
    fn log_slope_of_power_law() {
        let eps = [0.125, 0.0625, 0.03125];
        let vals: Vec<f64> = eps.iter().map(|e| 3.0 * e * e).collect();
        let (slope, se) = log2_slope(&eps, &vals).unwrap();
        assert!((slope - 2.0).abs() < 1e-10);
        assert!(se < 1e-10);
    }

    #[test]
    fn log_slope_rejects_nonpositive_values() {
        assert!(log2_slope(&[0.5, 0.25], &[1.0, 0.0]).is_none());
    }

    #[test]
    fn chunked_sum_matches_serial() {
        let n = 10_000;
        let par = chunked_sum(n, |r| r.map(|i| (i as f64).sqrt()).sum());
        let ser: f64 = (0..n).map(|i| (i as f64).sqrt()).sum();
        // Same chunking is used regardless of threads; chunk partials are
        // combined in order, so the only difference from a serial loop is
        // the per-chunk grouping itself.
        assert!((par - ser).abs() < 1e-6 * ser.abs());
    }
}
