//! Candidate-support grids, Frank–Wolfe on a grid, rounding of tiny atoms, and the exact
//! fixed-support weight optimizer.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{NpmleError, Result};
use crate::kernel::{phi, Dataset};
use crate::mixtures::{make_mixture, DiscreteMixture};

/// Finite candidate support `Z_ε ⊆ [−L, L]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    points: Vec<f64>,
    epsilon: f64,
    range_bound: f64,
}

impl Grid {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn range_bound(&self) -> f64 {
        self.range_bound
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index range of grid points that can maximize `D`: everything between the last point
    /// `≤ min x` and the first point `≥ max x` (`D` is monotone outside the data hull).
    pub fn active_range(&self, data: &Dataset) -> std::ops::Range<usize> {
        let (xmin, xmax) = data.hull();
        let pts = &self.points;
        let lo = pts.partition_point(|&z| z <= xmin).saturating_sub(1);
        let hi = pts.partition_point(|&z| z < xmax).min(pts.len() - 1);
        lo..hi + 1
    }
}

/// Uniform grid of spacing at most ε on `[−L, L]` with both endpoints, merged with extra points.
pub fn build_grid(range_bound: f64, epsilon: f64, extra_points: &[f64]) -> Result<Grid> {
    if !(epsilon > 0.0 && epsilon < range_bound) {
        return Err(NpmleError::EpsilonOutOfRange {
            epsilon,
            range: range_bound,
        });
    }
    if let Some(&p) = extra_points
        .iter()
        .find(|p| !p.is_finite() || p.abs() > range_bound)
    {
        return Err(NpmleError::ExtraPointOutOfRange(p));
    }
    let intervals = (2.0 * range_bound / epsilon - 1e-9).ceil().max(1.0) as usize;
    let mut points: Vec<f64> = (0..=intervals)
        .map(|i| range_bound * (2.0 * i as f64 / intervals as f64 - 1.0))
        .collect();
    points.extend_from_slice(extra_points);
    points.sort_by(f64::total_cmp);
    points.dedup();
    Ok(Grid {
        points,
        epsilon,
        range_bound,
    })
}

/// Dense weights on a grid with the Frank–Wolfe duality-gap history.
#[derive(Debug, Clone, Serialize)]
pub struct GridWeights {
    pub grid: Grid,
    pub weights: Vec<f64>,
    /// `gap_history[t]` is the gap of the t-th iterate.
    pub gap_history: Vec<f64>,
    pub iterations: usize,
}

impl GridWeights {
    /// The atoms with positive weight.
    pub fn to_mixture(&self) -> Result<DiscreteMixture> {
        let (w, y): (Vec<f64>, Vec<f64>) = self
            .weights
            .iter()
            .zip(self.grid.points())
            .filter(|(&w, _)| w > 0.0)
            .map(|(&w, &y)| (w, y))
            .unzip();
        let s: f64 = w.iter().sum();
        make_mixture(&w.iter().map(|v| v / s).collect::<Vec<_>>(), &y)
    }

    pub fn support_size(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }
}

/// `φ(x_i − z)` for the grid points of the active range, row-major by grid point.
struct GridKernel {
    offset: usize,
    n: usize,
    values: Vec<f64>,
}

impl GridKernel {
    fn new(grid: &Grid, data: &Dataset) -> Self {
        let range = grid.active_range(data);
        let n = data.n();
        let pts = &grid.points()[range.clone()];
        let mut values = vec![0.0; pts.len() * n];
        values
            .par_chunks_mut(n)
            .zip(pts.par_iter())
            .for_each(|(row, &z)| {
                for (v, &x) in row.iter_mut().zip(data.points()) {
                    *v = phi(x - z);
                }
            });
        Self {
            offset: range.start,
            n,
            values,
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.n..(r + 1) * self.n]
    }

    /// `D` at every active grid point for densities `p`.
    fn d_values(&self, densities: &[f64]) -> Vec<f64> {
        let n = self.n as f64;
        let inv: Vec<f64> = densities.iter().map(|p| 1.0 / (n * p)).collect();
        self.values
            .par_chunks(self.n)
            .map(|row| row.iter().zip(&inv).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// First index of the maximum (ties toward the smallest location).
fn argmax_first(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn nearest_to_zero(grid: &Grid) -> usize {
    let pts = grid.points();
    let mut best = 0;
    for (i, &z) in pts.iter().enumerate() {
        if z.abs() < pts[best].abs() {
            best = i;
        }
    }
    best
}

/// Frank–Wolfe with step `2/(t+2)` for exactly `iterations` steps.
pub fn frank_wolfe(data: &Dataset, grid: &Grid, iterations: usize) -> GridWeights {
    frank_wolfe_until(data, grid, 0.0, iterations.max(1), true)
}

/// Frank–Wolfe stopping at the first iterate whose gap is `≤ gap_target`, or after
/// `max_iterations` steps.
pub fn frank_wolfe_to_gap(
    data: &Dataset,
    grid: &Grid,
    gap_target: f64,
    max_iterations: usize,
) -> GridWeights {
    frank_wolfe_until(data, grid, gap_target, max_iterations, false)
}

fn frank_wolfe_until(
    data: &Dataset,
    grid: &Grid,
    gap_target: f64,
    max_iterations: usize,
    run_all: bool,
) -> GridWeights {
    let kernel = GridKernel::new(grid, data);
    let mut weights = vec![0.0; grid.len()];
    let start = nearest_to_zero(grid);
    weights[start] = 1.0;
    let mut densities: Vec<f64> = data
        .points()
        .iter()
        .map(|&x| phi(x - grid.points()[start]))
        .collect();
    let mut history = Vec::new();
    let mut t = 0usize;
    loop {
        let d = kernel.d_values(&densities);
        let (arg, dmax) = argmax_first(&d);
        let gap = (dmax - 1.0).max(0.0);
        history.push(gap);
        let done = if run_all {
            t >= max_iterations
        } else {
            gap <= gap_target || t >= max_iterations
        };
        if done {
            break;
        }
        let tf = t as f64;
        let keep = tf / (tf + 2.0);
        let add = 2.0 / (tf + 2.0);
        for w in weights.iter_mut() {
            *w *= keep;
        }
        weights[kernel.offset + arg] += add;
        for (p, k) in densities.iter_mut().zip(kernel.row(arg)) {
            *p = keep * *p + add * k;
        }
        t += 1;
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    GridWeights {
        grid: grid.clone(),
        weights,
        gap_history: history,
        iterations: t,
    }
}

/// Frank–Wolfe duality gap `max_{y ∈ Z} D(y) − 1`, an upper bound on `ℓ(π̂_Z) − ℓ(π)`.
pub fn duality_gap(w: &GridWeights, data: &Dataset) -> f64 {
    let kernel = GridKernel::new(&w.grid, data);
    let densities: Vec<f64> = data
        .points()
        .iter()
        .map(|&x| {
            w.weights
                .iter()
                .zip(w.grid.points())
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &y)| p * phi(x - y))
                .sum()
        })
        .collect();
    let d = kernel.d_values(&densities);
    argmax_first(&d).1 - 1.0
}

/// Default rounding threshold `e^{−L²} t^{−1/4} ε^{1/2}`.
pub fn default_iota(range_bound: f64, iterations: usize, epsilon: f64) -> f64 {
    (-range_bound * range_bound).exp() * (iterations.max(1) as f64).powf(-0.25) * epsilon.sqrt()
}

/// Zero every weight `≤ iota` and renormalize.
pub fn round_small_atoms(w: &GridWeights, iota: f64) -> Result<GridWeights> {
    let dropped: f64 = w.weights.iter().filter(|&&p| p <= iota).sum();
    if dropped >= 0.5 {
        return Err(NpmleError::TooMuchMassDropped(dropped));
    }
    let kept = 1.0 - dropped;
    let weights = w
        .weights
        .iter()
        .map(|&p| if p <= iota { 0.0 } else { p / kept })
        .collect();
    Ok(GridWeights {
        weights,
        ..w.clone()
    })
}

/// Maximize `ℓ_X` over weights on a fixed finite support.
///
/// Damped projected Newton on the active set with Armijo backtracking, plus insertion of
/// support points where `D > 1 + tol`. Zero-weight atoms are dropped from the output.
pub fn optimize_weights(support: &[f64], data: &Dataset, tol: f64) -> Result<DiscreteMixture> {
    optimize_weights_from(support, data, tol, None)
}

/// As [`optimize_weights`], warm-started from dense weights over `support`.
pub fn optimize_weights_from(
    support: &[f64],
    data: &Dataset,
    tol: f64,
    start: Option<&[f64]>,
) -> Result<DiscreteMixture> {
    if support.is_empty()
        || support.windows(2).any(|w| !(w[0] < w[1]))
        || support.iter().any(|s| !s.is_finite())
        || start.is_some_and(|s| s.len() != support.len())
    {
        return Err(NpmleError::InvalidSupport);
    }
    if !(tol > 0.0) {
        return Err(NpmleError::InvalidConfig(
            "tolerance must be positive".into(),
        ));
    }
    let mut active: Vec<(usize, f64)> = match start {
        Some(s) if s.iter().any(|&v| v > 0.0) => {
            let total: f64 = s.iter().filter(|&&v| v > 0.0).sum();
            s.iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, &v)| (i, v / total))
                .collect()
        }
        _ if support.len() <= 64 => {
            let u = 1.0 / support.len() as f64;
            (0..support.len()).map(|i| (i, u)).collect()
        }
        _ => {
            let mean = data.mean();
            let best = (0..support.len())
                .min_by(|&a, &b| {
                    (support[a] - mean)
                        .abs()
                        .total_cmp(&(support[b] - mean).abs())
                })
                .unwrap_or(0);
            vec![(best, 1.0)]
        }
    };
    const MAX_OUTER: usize = 400;
    for _ in 0..MAX_OUTER {
        newton_on_active(support, data, tol, &mut active)?;
        let weights: Vec<f64> = active.iter().map(|a| a.1).collect();
        let locs: Vec<f64> = active.iter().map(|a| support[a.0]).collect();
        let densities: Vec<f64> = data
            .points()
            .iter()
            .map(|&x| crate::kernel::density_raw(&weights, &locs, x))
            .collect();
        let d = d_on_points(support, data, &densities);
        let in_active: std::collections::HashSet<usize> = active.iter().map(|a| a.0).collect();
        let mut violators: Vec<usize> = (0..support.len())
            .filter(|&i| !in_active.contains(&i) && d[i] > 1.0 + tol)
            .filter(|&i| {
                (i == 0 || d[i] >= d[i - 1]) && (i + 1 == support.len() || d[i] >= d[i + 1])
            })
            .collect();
        if violators.is_empty() {
            // Non-local-maximum violators can only exist next to a local maximum one.
            violators = (0..support.len())
                .filter(|&i| !in_active.contains(&i) && d[i] > 1.0 + tol)
                .collect();
            if violators.is_empty() {
                let mut out: Vec<(usize, f64)> = active.into_iter().filter(|a| a.1 > 0.0).collect();
                out.sort_by_key(|a| a.0);
                let total: f64 = out.iter().map(|a| a.1).sum();
                let w: Vec<f64> = out.iter().map(|a| a.1 / total).collect();
                let y: Vec<f64> = out.iter().map(|a| support[a.0]).collect();
                return make_mixture(&w, &y);
            }
        }
        violators.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
        violators.truncate(8);
        for v in violators {
            insert_atom(support, data, &mut active, v);
        }
    }
    Err(NpmleError::NoConvergence(MAX_OUTER))
}

/// `D` at each support point for the given data densities.
fn d_on_points(points: &[f64], data: &Dataset, densities: &[f64]) -> Vec<f64> {
    let n = data.n() as f64;
    let inv: Vec<f64> = densities.iter().map(|p| 1.0 / (n * p)).collect();
    points
        .par_iter()
        .map(|&z| {
            data.points()
                .iter()
                .zip(&inv)
                .map(|(&x, &v)| phi(x - z) * v)
                .sum()
        })
        .collect()
}

fn objective(densities: &[f64]) -> f64 {
    densities.iter().map(|p| p.ln()).sum::<f64>() / densities.len() as f64
}

/// Exact line search along `(1−θ)p + θ δ_s`.
fn insert_atom(support: &[f64], data: &Dataset, active: &mut Vec<(usize, f64)>, s: usize) {
    let weights: Vec<f64> = active.iter().map(|a| a.1).collect();
    let locs: Vec<f64> = active.iter().map(|a| support[a.0]).collect();
    let dens: Vec<f64> = data
        .points()
        .iter()
        .map(|&x| crate::kernel::density_raw(&weights, &locs, x))
        .collect();
    let col: Vec<f64> = data.points().iter().map(|&x| phi(x - support[s])).collect();
    let slope = |theta: f64| -> f64 {
        dens.iter()
            .zip(&col)
            .map(|(&p, &c)| (c - p) / (p + theta * (c - p)))
            .sum::<f64>()
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if slope(1.0 - 1e-12) > 0.0 {
        lo = 1.0 - 1e-12;
    } else {
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let theta = lo;
    if theta <= 0.0 {
        return;
    }
    for a in active.iter_mut() {
        a.1 *= 1.0 - theta;
    }
    active.push((s, theta));
}

/// Projected Newton on the current active set until `max |D(y_j) − 1| ≤ tol` on it.
fn newton_on_active(
    support: &[f64],
    data: &Dataset,
    tol: f64,
    active: &mut Vec<(usize, f64)>,
) -> Result<()> {
    const MAX_INNER: usize = 500;
    let n = data.n();
    let nf = n as f64;
    let mut history: Vec<f64> = Vec::new();
    for _ in 0..MAX_INNER {
        let m = active.len();
        let cols: Vec<Vec<f64>> = active
            .iter()
            .map(|a| {
                data.points()
                    .iter()
                    .map(|&x| phi(x - support[a.0]))
                    .collect()
            })
            .collect();
        let dens: Vec<f64> = (0..n)
            .map(|i| (0..m).map(|j| active[j].1 * cols[j][i]).sum())
            .collect();
        let grad: Vec<f64> = (0..m)
            .map(|j| (0..n).map(|i| cols[j][i] / dens[i]).sum::<f64>() / nf)
            .collect();
        // Zero-weight atoms leave the active set; the outer loop re-inserts violators.
        let keep: Vec<bool> = (0..m).map(|j| active[j].1 > 0.0).collect();
        if keep.iter().any(|k| !k) {
            let mut idx = 0;
            active.retain(|_| {
                let k = keep[idx];
                idx += 1;
                k
            });
            continue;
        }
        let residual = grad
            .iter()
            .zip(active.iter())
            .map(|(g, _)| (g - 1.0).abs())
            .fold(0.0, f64::max);
        if residual <= tol || m == 1 {
            return Ok(());
        }
        let mut neg_h = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            let inv2 = 1.0 / (dens[i] * dens[i] * nf);
            for a in 0..m {
                let va = cols[a][i] * inv2;
                for b in a..m {
                    neg_h[(a, b)] += va * cols[b][i];
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                neg_h[(a, b)] = neg_h[(b, a)];
            }
        }
        let trace = (0..m).map(|a| neg_h[(a, a)]).sum::<f64>() / m as f64;
        let mut ridge = 1e-13 * trace;
        let chol = loop {
            let mut reg = neg_h.clone();
            for a in 0..m {
                reg[(a, a)] += ridge;
            }
            if let Some(c) = reg.cholesky() {
                break c;
            }
            ridge *= 100.0;
            if ridge > trace {
                return Err(NpmleError::NoConvergence(0));
            }
        };
        // Shifting by a constant leaves the constrained step unchanged and avoids cancellation.
        let g = DVector::from_iterator(m, grad.iter().map(|v| v - 1.0));
        let ones = DVector::from_element(m, 1.0);
        let ng = chol.solve(&g);
        let n1 = chol.solve(&ones);
        let mu = ng.sum() / n1.sum();
        let dir = ng - n1 * mu;
        let f0 = objective(&dens);
        // Stalled at the precision floor: ten steps without a resolvable gain.
        if history.len() >= 10 && f0 - history[history.len() - 10] <= 1e-15 * f0.abs().max(1.0) {
            return Ok(());
        }
        history.push(f0);
        let slope: f64 = g.dot(&dir);
        if !(slope > 0.0) {
            // No further ascent is representable in double precision.
            return Ok(());
        }
        // Ratio test: the first weight to reach zero limits the step.
        let (blocking, alpha_max) = (0..m)
            .filter(|&j| dir[j] < 0.0)
            .map(|j| (Some(j), -active[j].1 / dir[j]))
            .fold((None, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        let mut alpha = alpha_max.min(1.0);
        let mut accepted = false;
        while alpha > 1e-14 {
            let hits = alpha >= alpha_max;
            let mut trial: Vec<f64> = (0..m)
                .map(|j| (active[j].1 + alpha * dir[j]).max(0.0))
                .collect();
            if hits {
                if let Some(b) = blocking {
                    trial[b] = 0.0;
                }
            }
            let s: f64 = trial.iter().sum();
            trial.iter_mut().for_each(|v| *v /= s);
            let tdens: Vec<f64> = (0..n)
                .map(|i| (0..m).map(|j| trial[j] * cols[j][i]).sum())
                .collect();
            let f1 = objective(&tdens);
            // Near the optimum `f` stops resolving the ascent; concavity makes a non-negative
            // directional derivative at the trial point an equivalent acceptance test.
            let trial_slope: f64 = (0..m)
                .map(|j| dir[j] * (0..n).map(|i| cols[j][i] / tdens[i]).sum::<f64>() / nf)
                .sum();
            if f1 >= f0 + 1e-4 * alpha * slope || (!hits && trial_slope >= 0.0) {
                for j in 0..m {
                    active[j].1 = trial[j];
                }
                active.retain(|a| a.1 > 0.0);
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Ok(());
        }
    }
    Err(NpmleError::NoConvergence(MAX_INNER))
}
