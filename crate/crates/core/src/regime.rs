//! Continuous-time finite-state Markov chain (the "regime" process).
//!
//! The chain lives on canonical unit vectors `e_1, …, e_D`; we store plain
//! `0`-based state indices. Its law is given by a generator matrix
//! `Q = [λ_ij]` with nonnegative off-diagonal rates and zero row sums. For
//! each target state `j` the counting process
//!
//! ```text
//! Φ_j(t) = #{ s ≤ t : α(s) = e_j, α(s⁻) ≠ e_j }
//! ```
//!
//! has the exact (piecewise linear) compensator
//! `λ_j(t) = ∫_0^t Σ_{i≠j} λ_ij · 1{α(s⁻) = e_i} ds`, and
//! `Φ̃_j = Φ_j − λ_j` is a martingale. Sampling uses exact exponential
//! holding times; no discretization is involved anywhere in this module.

use crate::error::{CoreError, Result};
use crate::rng::{stream, StreamKind};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Relative tolerance accepted for row sums of user-supplied generators.
/// Rows within this tolerance are canonicalized so sums are exactly zero.
const ROW_SUM_TOL: f64 = 1e-9;

/// Validated generator matrix of the regime chain.
#[derive(Clone, Debug)]
pub struct RegimeGenerator {
    rates: Array2<f64>,
}

impl RegimeGenerator {
    /// Validates and canonicalizes a generator matrix.
    ///
    /// Off-diagonal entries must be nonnegative and finite; each row must sum
    /// to zero within a small relative tolerance. The diagonal is recomputed
    /// as minus the off-diagonal row sum so that row sums are exactly zero.
    pub fn new(rates: Array2<f64>) -> Result<Self> {
        let (r, c) = rates.dim();
        if r == 0 || r != c {
            return Err(CoreError::InvalidGenerator(format!(
                "generator must be square and nonempty, got {r}x{c}"
            )));
        }
        let mut canon = rates.clone();
        for i in 0..r {
            let mut off_sum = 0.0;
            let mut scale = 0.0f64;
            for j in 0..c {
                let v = rates[[i, j]];
                if !v.is_finite() {
                    return Err(CoreError::InvalidGenerator(format!(
                        "rate[{i}][{j}] is not finite"
                    )));
                }
                scale = scale.max(v.abs());
                if i != j {
                    if v < 0.0 {
                        return Err(CoreError::InvalidGenerator(format!(
                            "off-diagonal rate[{i}][{j}] = {v} is negative"
                        )));
                    }
                    off_sum += v;
                }
            }
            let row_sum = off_sum + rates[[i, i]];
            if row_sum.abs() > ROW_SUM_TOL * scale.max(1.0) {
                return Err(CoreError::InvalidGenerator(format!(
                    "row {i} sums to {row_sum}, expected 0"
                )));
            }
            canon[[i, i]] = -off_sum;
        }
        Ok(Self { rates: canon })
    }

    /// Number of regimes `D`.
    pub fn num_states(&self) -> usize {
        self.rates.nrows()
    }

    /// Raw generator entry `λ_ij`.
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates[[i, j]]
    }

    /// Intensity of jumping *into* state `j` while sitting in state `i`:
    /// `λ_ij` for `i ≠ j`, and `0` for `i = j` (a chain cannot jump into the
    /// state it already occupies).
    pub fn jump_intensity(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            self.rates[[i, j]]
        }
    }

    /// Total exit rate `−λ_ii` of state `i`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.rates[[i, i]]
    }

    /// Largest total exit rate over all states.
    pub fn max_exit_rate(&self) -> f64 {
        (0..self.num_states())
            .map(|i| self.exit_rate(i))
            .fold(0.0, f64::max)
    }

    /// Transition probability matrix `P(t) = exp(tQ)` computed by scaling
    /// and squaring with a truncated Taylor series.
    ///
    /// Rows of the result sum to one within `1e-12`; `t` must be
    /// nonnegative and finite.
    pub fn transition_probability(&self, t: f64) -> Result<Array2<f64>> {
        if !t.is_finite() || t < 0.0 {
            return Err(CoreError::InvalidInput(format!(
                "transition probability needs t >= 0, got {t}"
            )));
        }
        let d = self.num_states();
        let a = &self.rates * t;
        // Scale so the infinity norm is at most 1/2, run the Taylor series
        // to machine precision, then repeatedly square.
        let norm = a
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let s = if norm > 0.5 {
            (norm / 0.5).log2().ceil() as u32
        } else {
            0
        };
        let b = &a / 2f64.powi(s as i32);
        let mut result = Array2::<f64>::eye(d);
        let mut term = Array2::<f64>::eye(d);
        for k in 1..=60 {
            term = term.dot(&b) / k as f64;
            result += &term;
            let term_norm: f64 = term.iter().map(|v| v.abs()).sum();
            if term_norm < 1e-18 {
                break;
            }
        }
        for _ in 0..s {
            result = result.dot(&result);
        }
        Ok(result)
    }
}

/// One realized trajectory of the regime chain on `[0, horizon]`.
///
/// `jump_times` are strictly increasing and lie in `(0, horizon]`;
/// `states_after[k]` is the state entered at `jump_times[k]`. The path is
/// right-continuous: `state_at(t)` returns the state entered at the last
/// jump time `≤ t`.
#[derive(Clone, Debug)]
pub struct ChainPath {
    pub initial_state: usize,
    pub horizon: f64,
    pub jump_times: Vec<f64>,
    pub states_after: Vec<usize>,
}

impl ChainPath {
    /// Validates the structural invariants of a hand-built path.
    pub fn new(
        initial_state: usize,
        horizon: f64,
        jump_times: Vec<f64>,
        states_after: Vec<usize>,
        num_states: usize,
    ) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(CoreError::InvalidInput(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if initial_state >= num_states {
            return Err(CoreError::InvalidInput(format!(
                "initial state {initial_state} out of range (D = {num_states})"
            )));
        }
        if jump_times.len() != states_after.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "{} jump times vs {} states",
                jump_times.len(),
                states_after.len()
            )));
        }
        let mut prev_t = 0.0;
        let mut prev_s = initial_state;
        for (k, (&t, &s)) in jump_times.iter().zip(&states_after).enumerate() {
            if !(t > prev_t && t <= horizon) {
                return Err(CoreError::InvalidInput(format!(
                    "jump time #{k} = {t} is not strictly increasing within (0, {horizon}]"
                )));
            }
            if s >= num_states {
                return Err(CoreError::InvalidInput(format!(
                    "jump target #{k} = {s} out of range (D = {num_states})"
                )));
            }
            if s == prev_s {
                return Err(CoreError::InvalidInput(format!(
                    "jump #{k} does not change the state ({s})"
                )));
            }
            prev_t = t;
            prev_s = s;
        }
        Ok(Self {
            initial_state,
            horizon,
            jump_times,
            states_after,
        })
    }

    pub fn num_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Index of the last jump at time `≤ t`, if any.
    fn last_jump_leq(&self, t: f64) -> Option<usize> {
        match self
            .jump_times
            .binary_search_by(|jt| jt.partial_cmp(&t).unwrap())
        {
            Ok(k) => Some(k),
            Err(0) => None,
            Err(k) => Some(k - 1),
        }
    }

    /// Right-continuous state at time `t`.
    pub fn state_at(&self, t: f64) -> usize {
        match self.last_jump_leq(t) {
            Some(k) => self.states_after[k],
            None => self.initial_state,
        }
    }

    /// Left limit `α(t⁻)`: the state just before `t`.
    pub fn state_before(&self, t: f64) -> usize {
        // Jumps exactly at t are excluded from the left limit.
        match self.last_jump_leq(t) {
            Some(k) if self.jump_times[k] == t => {
                if k == 0 {
                    self.initial_state
                } else {
                    self.states_after[k - 1]
                }
            }
            Some(k) => self.states_after[k],
            None => self.initial_state,
        }
    }
}

/// Samples one chain trajectory with exact exponential holding times.
///
/// From state `i` the holding time is `Exp(−λ_ii)`; the next state is chosen
/// with probabilities `λ_ij / (−λ_ii)`. A state with zero exit rate is
/// absorbing. Draws come only from `rng`, so the result is a pure function
/// of the stream.
pub fn sample_chain(
    gen: &RegimeGenerator,
    initial_state: usize,
    horizon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ChainPath> {
    if initial_state >= gen.num_states() {
        return Err(CoreError::InvalidInput(format!(
            "initial state {initial_state} out of range (D = {})",
            gen.num_states()
        )));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(CoreError::InvalidInput(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let d = gen.num_states();
    let mut t = 0.0;
    let mut state = initial_state;
    let mut jump_times = Vec::new();
    let mut states_after = Vec::new();
    loop {
        let rate = gen.exit_rate(state);
        if rate <= 0.0 {
            break; // absorbing state
        }
        // Inverse-CDF exponential sample; 1 - U avoids log(0).
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / rate;
        if t > horizon {
            break;
        }
        let mut v: f64 = rng.random::<f64>() * rate;
        let mut next = usize::MAX;
        for j in 0..d {
            let lam = gen.jump_intensity(state, j);
            if lam <= 0.0 {
                continue;
            }
            if v < lam {
                next = j;
                break;
            }
            v -= lam;
        }
        if next == usize::MAX {
            // Rounding pushed v past the last positive rate; take it.
            next = (0..d)
                .rev()
                .find(|&j| gen.jump_intensity(state, j) > 0.0)
                .expect("positive exit rate implies a reachable state");
        }
        jump_times.push(t);
        states_after.push(next);
        state = next;
    }
    ChainPath::new(initial_state, horizon, jump_times, states_after, d)
}

/// Samples `n` chains on independent per-path streams keyed by
/// `(seed, path index)`. Path `i` is identical no matter the batch size or
/// thread count.
pub fn sample_chains(
    gen: &RegimeGenerator,
    initial_state: usize,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<ChainPath>> {
    if initial_state >= gen.num_states() {
        return Err(CoreError::InvalidInput(format!(
            "initial state {initial_state} out of range (D = {})",
            gen.num_states()
        )));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(CoreError::InvalidInput(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, StreamKind::Chain, i as u64);
            sample_chain(gen, initial_state, horizon, &mut rng)
        })
        .collect()
}

/// Counting processes, exact compensators and compensated martingales of one
/// chain path.
#[derive(Clone, Debug)]
pub struct CountingData {
    num_states: usize,
    horizon: f64,
    /// Segment boundaries: 0, jump times, horizon.
    times: Vec<f64>,
    /// State occupied on `[times[k], times[k+1])`.
    seg_state: Vec<usize>,
    /// `counts[j][k]` = number of jumps into `j` at times `≤ times[k]`.
    counts: Vec<Vec<u32>>,
    /// `comp[j][k]` = compensator of `Φ_j` accumulated up to `times[k]`.
    comp: Vec<Vec<f64>>,
    /// Jump intensities `λ_ij` with zero diagonal (compensator slopes).
    intensity: Array2<f64>,
}

/// Builds the counting data of `chain` under `gen`.
///
/// Compensators are evaluated exactly: they are piecewise linear with slope
/// `λ_{α(s),j}` between jump times, never approximated by quadrature.
pub fn counting_data(chain: &ChainPath, gen: &RegimeGenerator) -> Result<CountingData> {
    let d = gen.num_states();
    if chain.initial_state >= d || chain.states_after.iter().any(|&s| s >= d) {
        return Err(CoreError::DimensionMismatch(format!(
            "chain states exceed generator dimension {d}"
        )));
    }
    let k = chain.num_jumps();
    let mut times = Vec::with_capacity(k + 2);
    times.push(0.0);
    times.extend_from_slice(&chain.jump_times);
    if *times.last().unwrap() < chain.horizon {
        times.push(chain.horizon);
    }
    let mut seg_state = Vec::with_capacity(times.len());
    let mut counts = vec![vec![0u32; times.len()]; d];
    let mut comp = vec![vec![0.0f64; times.len()]; d];
    let mut state = chain.initial_state;
    seg_state.push(state);
    for seg in 1..times.len() {
        let dt = times[seg] - times[seg - 1];
        for j in 0..d {
            comp[j][seg] = comp[j][seg - 1] + gen.jump_intensity(state, j) * dt;
            counts[j][seg] = counts[j][seg - 1];
        }
        // Is times[seg] a jump time?
        if seg - 1 < k {
            let target = chain.states_after[seg - 1];
            counts[target][seg] += 1;
            state = target;
        }
        seg_state.push(state);
    }
    let mut intensity = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            intensity[[i, j]] = gen.jump_intensity(i, j);
        }
    }
    Ok(CountingData {
        num_states: d,
        horizon: chain.horizon,
        times,
        seg_state,
        counts,
        comp,
        intensity,
    })
}

impl CountingData {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Segment boundaries: `0`, the jump times, and the horizon.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Compensator slope of `Φ_j` on segment `seg` (between `times[seg]`
    /// and `times[seg+1]`).
    pub fn intensity_on_segment(&self, seg: usize, j: usize) -> f64 {
        self.intensity[[self.seg_state[seg], j]]
    }

    /// `1.0` if a jump into `j` happens exactly at `t`, else `0.0`.
    pub fn count_jump_at(&self, j: usize, t: f64) -> f64 {
        match self
            .times
            .binary_search_by(|v| v.partial_cmp(&t).unwrap())
        {
            Ok(k) if k >= 1 => (self.counts[j][k] - self.counts[j][k - 1]) as f64,
            _ => 0.0,
        }
    }

    /// Whether any jump happens exactly at `t`.
    pub fn is_jump_time(&self, t: f64) -> bool {
        (0..self.num_states).any(|j| self.count_jump_at(j, t) > 0.0)
    }

    fn segment_of(&self, t: f64) -> usize {
        assert!(
            (0.0..=self.horizon).contains(&t),
            "query time {t} outside [0, {}]",
            self.horizon
        );
        match self
            .times
            .binary_search_by(|v| v.partial_cmp(&t).unwrap())
        {
            Ok(k) => k,
            Err(k) => k - 1,
        }
    }

    /// Number of jumps into `j` on `[0, t]`.
    pub fn count(&self, j: usize, t: f64) -> u32 {
        self.counts[j][self.segment_of(t)]
    }

    /// Exact compensator `λ_j(t)` (piecewise linear between jump times).
    pub fn compensator(&self, j: usize, t: f64) -> f64 {
        let k = self.segment_of(t);
        let base = self.comp[j][k];
        if k + 1 == self.times.len() {
            return base;
        }
        base + (t - self.times[k]) * self.intensity[[self.seg_state[k], j]]
    }

    /// Compensated martingale `Φ̃_j(t) = Φ_j(t) − λ_j(t)`.
    pub fn martingale(&self, j: usize, t: f64) -> f64 {
        self.count(j, t) as f64 - self.compensator(j, t)
    }
}
