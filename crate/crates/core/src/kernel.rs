//! Mixture density, log-likelihood, the gradient function `D_{π,X}` with its derivatives, and
//! rigorous upper bounds on `D` over intervals.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{NpmleError, Result};
use crate::mixtures::DiscreteMixture;

/// `1/√(2π)`.
pub const PHI0: f64 = 0.398_942_280_401_432_7;

/// Highest derivative order of `D` supported.
pub const MAX_D_ORDER: usize = 3;

/// Highest Hermite order supported by [`hermite`].
pub const MAX_HERMITE_ORDER: usize = 8;

/// Finest resolution used by interval sweeps, independent of a looser user slack.
pub const SWEEP_RESOLUTION: f64 = 1e-13;

/// Standard normal density.
#[inline]
pub fn phi(t: f64) -> f64 {
    PHI0 * (-0.5 * t * t).exp()
}

/// Observed sample, sorted ascending, with a range bound `L ≥ max(1, max|x_i|)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dataset {
    points: Vec<f64>,
    range_bound: f64,
}

impl Dataset {
    /// Sort the points and set `L = max(1, max|x_i|)`.
    pub fn new(points: &[f64]) -> Result<Self> {
        let max_abs = Self::validate(points)?;
        Self::with_range_bound(points, max_abs.max(1.0))
    }

    /// Sort the points with an explicit range bound; `L < 1` is clamped to 1.
    pub fn with_range_bound(points: &[f64], range_bound: f64) -> Result<Self> {
        let max_abs = Self::validate(points)?;
        if !range_bound.is_finite() || range_bound < max_abs {
            return Err(NpmleError::RangeBoundTooSmall {
                bound: range_bound,
                max_abs,
            });
        }
        let mut pts = points.to_vec();
        pts.sort_by(f64::total_cmp);
        Ok(Self {
            points: pts,
            range_bound: range_bound.max(1.0),
        })
    }

    fn validate(points: &[f64]) -> Result<f64> {
        if points.is_empty() {
            return Err(NpmleError::EmptyDataset);
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(NpmleError::NonFinite);
        }
        Ok(points.iter().fold(0.0, |a: f64, x| a.max(x.abs())))
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    /// The range bound `L`.
    pub fn range_bound(&self) -> f64 {
        self.range_bound
    }

    /// `[min x_i, max x_i]`; the NPMLE is supported here.
    pub fn hull(&self) -> (f64, f64) {
        (self.points[0], self.points[self.points.len() - 1])
    }

    pub fn mean(&self) -> f64 {
        self.points.iter().sum::<f64>() / self.n() as f64
    }
}

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `P_m(x) = Σ_j p_j φ(x − y_j)`.
pub fn mixture_density(m: &DiscreteMixture, x: f64) -> f64 {
    compensated_sum(m.atoms().map(|(p, y)| p * phi(x - y)))
}

pub(crate) fn density_raw(weights: &[f64], locations: &[f64], x: f64) -> f64 {
    compensated_sum(weights.iter().zip(locations).map(|(p, y)| p * phi(x - y)))
}

/// `ℓ_X(m) = (1/n) Σ_i log P_m(x_i)`.
pub fn log_likelihood(m: &DiscreteMixture, data: &Dataset) -> f64 {
    let n = data.n() as f64;
    data.points()
        .iter()
        .map(|&x| mixture_density(m, x).ln())
        .sum::<f64>()
        / n
}

/// Hermite polynomial `H_j(t) = e^{t²/2} (d/dt)^j e^{−t²/2}`.
pub fn hermite(j: usize, t: f64) -> Result<f64> {
    if j > MAX_HERMITE_ORDER {
        return Err(NpmleError::OrderTooLarge(j));
    }
    Ok(hermite_unchecked(j, t))
}

fn hermite_unchecked(j: usize, t: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, -t);
    if j == 0 {
        return prev;
    }
    for i in 1..j {
        let next = -t * cur - i as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `M_j = sup_t |H_j(t) e^{−t²/2}|` for `j ≤ 3`, rounded up by a few ulps.
pub fn hermite_envelope_sup(j: usize) -> Result<f64> {
    let exact = match j {
        0 => 1.0,
        1 => (-0.5f64).exp(),
        2 => 1.0,
        3 => {
            // |3t − t³| e^{−t²/2} peaks at t² = 3 − √6.
            let t2 = 3.0 - 6f64.sqrt();
            t2.sqrt() * (3.0 - t2) * (-0.5 * t2).exp()
        }
        _ => return Err(NpmleError::OrderTooLarge(j)),
    };
    Ok(exact * (1.0 + 8.0 * f64::EPSILON))
}

/// `D^{(j)}_m(y) = (1/n) Σ_i H_j(y − x_i) φ(x_i − y) / P_m(x_i)`.
///
/// The Hermite argument is `y − x_i` so that the result is the j-th derivative in `y`.
pub fn d_derivative(m: &DiscreteMixture, data: &Dataset, y: f64, j: usize) -> Result<f64> {
    if j > MAX_D_ORDER {
        return Err(NpmleError::OrderTooLarge(j));
    }
    let eval = DEvaluator::new(m, data);
    Ok(eval.derivative(y, j))
}

/// `Σ_j p_j D_m(y_j)`, identically 1.
pub fn expected_d_identity(m: &DiscreteMixture, data: &Dataset) -> f64 {
    let eval = DEvaluator::new(m, data);
    compensated_sum(m.atoms().map(|(p, y)| p * eval.d(y)))
}

/// Worst-case bounds for `D^{(j)}` valid for every mixture supported in `[−L, L]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeBounds {
    pub order: usize,
    /// `sup_y |D^{(j)}(y)| ≤ M_j e^{2L²}`.
    pub sup_bound: f64,
    /// `|D^{(j)}_π − D^{(j)}_{π′}| ≤ lipschitz_in_w1 · W1(π, π′)`, equal to `M_j e^{−1/2} e^{4L²}`.
    pub lipschitz_in_w1: f64,
}

/// Explicit derivative bounds from `P_π(x) ≥ e^{−2L²}/√(2π)` for `|x| ≤ L`, `supp π ⊆ [−L, L]`.
pub fn derivative_bound(j: usize, range_bound: f64) -> Result<DerivativeBounds> {
    if j > MAX_D_ORDER {
        return Err(NpmleError::OrderTooLarge(j));
    }
    let l2 = range_bound * range_bound;
    let mj = hermite_envelope_sup(j)?;
    let sup_bound = mj * (2.0 * l2).exp();
    let lipschitz_in_w1 = mj * (-0.5f64).exp() * (4.0 * l2).exp();
    if !sup_bound.is_finite() || !lipschitz_in_w1.is_finite() {
        return Err(NpmleError::BoundOverflow(range_bound));
    }
    Ok(DerivativeBounds {
        order: j,
        sup_bound,
        lipschitz_in_w1,
    })
}

/// Worst-case Lipschitz constant of `ℓ_X` in W1 over mixtures supported in `[−L, L]`.
pub fn log_likelihood_lipschitz(range_bound: f64) -> f64 {
    (-0.5f64).exp() * (2.0 * range_bound * range_bound).exp()
}

/// Fast evaluation of `D` and its derivatives for a fixed mixture.
#[derive(Debug, Clone)]
pub struct DEvaluator {
    xs: Vec<f64>,
    /// `1/(√(2π) n P_m(x_i))`.
    w: Vec<f64>,
    densities: Vec<f64>,
    n_atoms: usize,
}

impl DEvaluator {
    pub fn new(m: &DiscreteMixture, data: &Dataset) -> Self {
        Self::from_raw(m.weights(), m.locations(), data)
    }

    pub(crate) fn from_raw(weights: &[f64], locations: &[f64], data: &Dataset) -> Self {
        let n = data.n() as f64;
        let densities: Vec<f64> = data
            .points()
            .iter()
            .map(|&x| density_raw(weights, locations, x))
            .collect();
        let w = densities.iter().map(|p| PHI0 / (n * p)).collect();
        Self {
            xs: data.points().to_vec(),
            w,
            densities,
            n_atoms: weights.len(),
        }
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    /// `D(y)`.
    pub fn d(&self, y: f64) -> f64 {
        self.xs
            .iter()
            .zip(&self.w)
            .map(|(&x, &w)| {
                let u = x - y;
                w * (-0.5 * u * u).exp()
            })
            .sum()
    }

    /// `(D, D′, D″)(y)` together with the sums of absolute terms.
    pub fn d012(&self, y: f64) -> ([f64; 3], [f64; 3]) {
        let mut v = [0.0; 3];
        let mut a = [0.0; 3];
        for (&x, &w) in self.xs.iter().zip(&self.w) {
            let u = x - y;
            let e = w * (-0.5 * u * u).exp();
            let e1 = e * u;
            let e2 = e * (u * u - 1.0);
            v[0] += e;
            v[1] += e1;
            v[2] += e2;
            a[0] += e;
            a[1] += e1.abs();
            a[2] += e2.abs();
        }
        (v, a)
    }

    /// `D^{(j)}(y)` for `j ≤ 3`.
    pub fn derivative(&self, y: f64, j: usize) -> f64 {
        self.xs
            .iter()
            .zip(&self.w)
            .map(|(&x, &w)| {
                let u = x - y;
                w * hermite_unchecked(j, -u) * (-0.5 * u * u).exp()
            })
            .sum()
    }

    /// Data-dependent bound `sup_y |D^{(j)}(y)| ≤ M_j Σ_i w_i`.
    pub fn sup_abs_bound(&self, j: usize) -> f64 {
        let s: f64 = self.w.iter().sum();
        hermite_envelope_sup(j).unwrap_or(f64::INFINITY) * s * (1.0 + 1e-12)
    }

    /// Relative floating-point error allowance for a sum over the data.
    pub fn rounding_factor(&self) -> f64 {
        2.0 * (self.xs.len() + self.n_atoms + 10) as f64 * f64::EPSILON
    }

    /// Proved upper bound on `D(y)` at a single point.
    pub fn d_upper(&self, y: f64) -> f64 {
        let v = self.d(y);
        v + self.rounding_factor() * v.abs() + f64::MIN_POSITIVE
    }
}

/// An interval `[lo, hi]` together with a proved upper bound on `D` over it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub lo: f64,
    pub hi: f64,
    pub upper: f64,
}

/// Cell width for which the third-order envelope overshoots by at most `tau`.
pub fn cell_width(third_derivative_bound: f64, tau: f64) -> f64 {
    (3.0 * tau / third_derivative_bound.max(1e-300)).cbrt()
}

/// Upper limit on the number of envelope cells over one sweep.
pub const MAX_CELLS: usize = 1 << 21;

/// [`cell_width`] widened so that `span` needs at most [`MAX_CELLS`] cells. Widening keeps
/// the bounds valid; only the overshoot guarantee is lost, which happens when `D` is far
/// from a stationary profile.
pub fn capped_cell_width(third_derivative_bound: f64, tau: f64, span: f64) -> f64 {
    cell_width(third_derivative_bound, tau).max(span / MAX_CELLS as f64)
}

/// Sweep tolerance actually used for a requested slack.
pub fn sweep_tolerance(slack: f64) -> f64 {
    (0.5 * slack).min(SWEEP_RESOLUTION)
}

/// Proved upper bound of `D` on `[lo, lo + w]` from a second-order expansion at `lo` plus the
/// cubic remainder `B₃ w³/6`.
fn cell_upper(eval: &DEvaluator, lo: f64, width: f64, b3: f64) -> f64 {
    let ([d0, d1, d2], [a0, a1, a2]) = eval.d012(lo);
    let mut best = d0.max(d0 + d1 * width + 0.5 * d2 * width * width);
    if d2 < 0.0 {
        let t = -d1 / d2;
        if t > 0.0 && t < width {
            best = best.max(d0 - 0.5 * d1 * d1 / d2);
        }
    }
    let rounding = eval.rounding_factor() * (a0 + a1 * width + 0.5 * a2 * width * width);
    best + b3 * width.powi(3) / 6.0 + rounding + f64::MIN_POSITIVE
}

/// Cover every `[b_i, b_{i+1}]` with cells of width at most `h` and bound `D` on each.
pub fn envelope_cells(eval: &DEvaluator, breakpoints: &[f64], h: f64) -> Vec<Cell> {
    let b3 = eval.sup_abs_bound(3);
    let mut spans = Vec::new();
    for w in breakpoints.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let count = ((b - a) / h).ceil().max(1.0) as usize;
        let step = (b - a) / count as f64;
        for i in 0..count {
            let lo = a + step * i as f64;
            let hi = if i + 1 == count {
                b
            } else {
                a + step * (i + 1) as f64
            };
            spans.push((lo, hi));
        }
    }
    spans
        .par_iter()
        .map(|&(lo, hi)| Cell {
            lo,
            hi,
            upper: cell_upper(eval, lo, hi - lo, b3),
        })
        .collect()
}

/// Proved `U` with `sup_{[lo,hi]} D_m ≤ U ≤ sup + slack`.
///
/// `D` is increasing left of the data hull and decreasing right of it, so the sweep only
/// covers the part of `[lo, hi]` inside the hull.
pub fn sup_d_over_interval(
    m: &DiscreteMixture,
    data: &Dataset,
    lo: f64,
    hi: f64,
    slack: f64,
) -> Result<f64> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() || !(slack > 0.0) {
        return Err(NpmleError::InvalidInterval { lo, hi });
    }
    let eval = DEvaluator::new(m, data);
    Ok(sup_d_with(&eval, data, lo, hi, slack))
}

pub(crate) fn sup_d_with(eval: &DEvaluator, data: &Dataset, lo: f64, hi: f64, slack: f64) -> f64 {
    let (xmin, xmax) = data.hull();
    if hi <= xmin {
        return eval.d_upper(hi);
    }
    if lo >= xmax {
        return eval.d_upper(lo);
    }
    let a = lo.max(xmin);
    let b = hi.min(xmax);
    if a == b {
        return eval.d_upper(a);
    }
    let h = capped_cell_width(eval.sup_abs_bound(3), sweep_tolerance(slack), b - a);
    envelope_cells(eval, &[a, b], h)
        .iter()
        .map(|c| c.upper)
        .fold(f64::NEG_INFINITY, f64::max)
}
