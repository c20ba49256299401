//! Newton–Raphson on the relaxed `2k`-dimensional stationarity system and a Kantorovich check
//! proving quadratic convergence from a given iterate.
//!
//! Parameters are ordered `θ = (p_1, …, p_k, y_1, …, y_k)` and residuals
//! `γ = (D(y_1) − 1, …, D(y_k) − 1, D′(y_1), …, D′(y_k))`. All norms are Euclidean.

use nalgebra::{DMatrix, DVector};

use crate::error::{NpmleError, Result};
use crate::kernel::{hermite_envelope_sup, Dataset, PHI0};
use crate::mixtures::{normalized_mixture, DiscreteMixture};

/// Condition estimate above which the Jacobian is treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

/// Kantorovich quantities at one iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShubSmaleReport {
    /// Newton step norm `‖J⁻¹γ‖`.
    pub alpha: f64,
    /// Bound on `‖J⁻¹‖` over the ball of radius `r`.
    pub beta: f64,
    /// Lipschitz constant of `J` over the ball.
    pub lip_c: f64,
    pub h: f64,
    /// Radius containing every iterate and the limit; `+∞` when `h ≥ 1`.
    pub r: f64,
    /// Distance from the iterate to the boundary of the parameter domain.
    pub boundary_distance: f64,
    pub proved: bool,
}

impl ShubSmaleReport {
    fn failed(alpha: f64, boundary_distance: f64) -> Self {
        Self {
            alpha,
            beta: f64::INFINITY,
            lip_c: f64::INFINITY,
            h: f64::INFINITY,
            r: f64::INFINITY,
            boundary_distance,
            proved: false,
        }
    }
}

/// Newton iterates and residuals.
#[derive(Debug, Clone)]
pub struct NewtonTrace {
    /// Iterates with weights renormalized for display; the iteration itself uses raw weights.
    pub iterates: Vec<DiscreteMixture>,
    /// `‖γ‖∞` at each iterate.
    pub residual_norms: Vec<f64>,
    /// Raw weight sums `Σ p` at each iterate.
    pub weight_sums: Vec<f64>,
    pub converged: bool,
    /// Reason the iteration was abandoned.
    pub failed: Option<String>,
}

impl NewtonTrace {
    pub fn last(&self) -> &DiscreteMixture {
        self.iterates
            .last()
            .expect("trace holds the starting point")
    }

    pub fn iterations(&self) -> usize {
        self.iterates.len() - 1
    }
}

fn psi(b: usize, u: f64) -> f64 {
    let g = PHI0 * (-0.5 * u * u).exp();
    match b {
        0 => g,
        1 => u * g,
        2 => (u * u - 1.0) * g,
        3 => (u * u * u - 3.0 * u) * g,
        _ => unreachable!("kernel derivative order"),
    }
}

fn split(theta: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
    let k = theta.len() / 2;
    (
        theta.rows(0, k).iter().copied().collect(),
        theta.rows(k, k).iter().copied().collect(),
    )
}

fn stack(m: &DiscreteMixture) -> DVector<f64> {
    DVector::from_iterator(2 * m.k(), m.weights().iter().chain(m.locations()).copied())
}

fn densities(p: &[f64], y: &[f64], data: &Dataset) -> Vec<f64> {
    data.points()
        .iter()
        .map(|&x| p.iter().zip(y).map(|(&pj, &yj)| pj * psi(0, x - yj)).sum())
        .collect()
}

fn gamma_raw(p: &[f64], y: &[f64], data: &Dataset) -> DVector<f64> {
    let k = p.len();
    let n = data.n() as f64;
    let dens = densities(p, y, data);
    let mut g = DVector::zeros(2 * k);
    for (&x, &pi) in data.points().iter().zip(&dens) {
        for j in 0..k {
            let u = x - y[j];
            g[j] += psi(0, u) / pi;
            g[k + j] += psi(1, u) / pi;
        }
    }
    g /= n;
    for j in 0..k {
        g[j] -= 1.0;
    }
    g
}

fn jacobian_raw(p: &[f64], y: &[f64], data: &Dataset) -> DMatrix<f64> {
    let k = p.len();
    let n = data.n() as f64;
    let dens = densities(p, y, data);
    let mut jac = DMatrix::zeros(2 * k, 2 * k);
    for (&x, &pi) in data.points().iter().zip(&dens) {
        let ps: Vec<[f64; 3]> = y
            .iter()
            .map(|&yj| [psi(0, x - yj), psi(1, x - yj), psi(2, x - yj)])
            .collect();
        let inv = 1.0 / pi;
        let inv2 = inv * inv;
        for a in 0..2 {
            for j in 0..k {
                let row = a * k + j;
                for s in 0..k {
                    jac[(row, s)] -= ps[j][a] * ps[s][0] * inv2;
                    jac[(row, k + s)] -= p[s] * ps[j][a] * ps[s][1] * inv2;
                }
                jac[(row, k + j)] += ps[j][a + 1] * inv;
            }
        }
    }
    jac / n
}

/// Residual vector `γ` of the stationarity system.
pub fn gamma(m: &DiscreteMixture, data: &Dataset) -> DVector<f64> {
    gamma_raw(m.weights(), m.locations(), data)
}

/// Analytic Jacobian of [`gamma`] with respect to `(p, y)`, the weight constraint relaxed.
pub fn gamma_jacobian(m: &DiscreteMixture, data: &Dataset) -> DMatrix<f64> {
    jacobian_raw(m.weights(), m.locations(), data)
}

/// Solve `J s = γ`, rejecting ill-conditioned systems.
fn newton_step(jac: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let sv = jac.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(cond <= MAX_CONDITION) {
        return Err(NpmleError::SingularJacobian(cond));
    }
    jac.clone()
        .lu()
        .solve(g)
        .ok_or(NpmleError::SingularJacobian(f64::INFINITY))
}

fn domain_violation(p: &[f64], y: &[f64]) -> Option<String> {
    if let Some((i, w)) = p.iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
        return Some(format!("weight {i} left the simplex ({w:e})"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Some("non-finite location".into());
    }
    if let Some(i) = (1..y.len()).find(|&i| !(y[i] > y[i - 1])) {
        return Some(format!("locations {} and {i} lost their order", i - 1));
    }
    None
}

/// Newton iteration `θ ← θ − J⁻¹γ` until `‖γ‖∞ ≤ tol`, `max_iter` steps, or an exit from the
/// parameter domain.
pub fn newton_solve(
    m0: &DiscreteMixture,
    data: &Dataset,
    tol: f64,
    max_iter: usize,
) -> Result<NewtonTrace> {
    if !(tol > 0.0) {
        return Err(NpmleError::InvalidConfig(
            "newton tolerance must be positive".into(),
        ));
    }
    let mut theta = stack(m0);
    let mut trace = NewtonTrace {
        iterates: vec![m0.clone()],
        residual_norms: Vec::new(),
        weight_sums: Vec::new(),
        converged: false,
        failed: None,
    };
    for t in 0..=max_iter {
        let (p, y) = split(&theta);
        let g = gamma_raw(&p, &y, data);
        let res = g.amax();
        trace.residual_norms.push(res);
        trace.weight_sums.push(p.iter().sum());
        if res <= tol {
            trace.converged = true;
            break;
        }
        if t == max_iter {
            break;
        }
        let n = trace.residual_norms.len();
        if n >= 3 && res >= trace.residual_norms[n - 2] && res >= trace.residual_norms[n - 3] {
            // Rounding floor reached.
            break;
        }
        let step = newton_step(&jacobian_raw(&p, &y, data), &g)?;
        theta -= step;
        let (p, y) = split(&theta);
        if let Some(reason) = domain_violation(&p, &y) {
            trace.failed = Some(reason);
            break;
        }
        trace.iterates.push(normalized_mixture(&p, &y)?);
    }
    Ok(trace)
}

/// Per-datum sup bounds of `|ψ_b(x_i − y_s)|` over the ball, `b = 0..=3`.
fn psi_ball_bounds(u0: f64, r: f64, caps: &[f64; 4]) -> [f64; 4] {
    let umax = u0.abs() + r;
    let umin = (u0.abs() - r).max(0.0);
    let g = PHI0 * (-0.5 * umin * umin).exp();
    let polys = [
        1.0,
        umax,
        (umax * umax - 1.0).max(1.0),
        umax.powi(3) + 3.0 * umax,
    ];
    let mut out = [0.0; 4];
    for b in 0..4 {
        out[b] = (polys[b] * g).min(caps[b]);
    }
    out
}

/// Bound on the Lipschitz constant of `J` over the Euclidean ball of radius `r` around
/// `(p, y)`: the Frobenius norm of entrywise sup bounds on the second-derivative tensor.
pub fn jacobian_lipschitz(p: &[f64], y: &[f64], data: &Dataset, r: f64) -> f64 {
    let k = p.len();
    let n = data.n() as f64;
    let caps = [0, 1, 2, 3].map(|b| hermite_envelope_sup(b).unwrap_or(f64::INFINITY) * PHI0);
    let pbar: Vec<f64> = p.iter().map(|v| v + r).collect();
    let mut psis: Vec<Vec<[f64; 4]>> = Vec::with_capacity(data.n());
    let mut gs: Vec<f64> = Vec::with_capacity(data.n());
    for &x in data.points() {
        let row: Vec<[f64; 4]> = y
            .iter()
            .map(|&ys| psi_ball_bounds(x - ys, r, &caps))
            .collect();
        let plb: f64 = p
            .iter()
            .zip(y)
            .map(|(&ps, &ys)| (ps - r).max(0.0) * psi(0, (x - ys).abs() + r))
            .sum();
        if !(plb > 0.0) {
            return f64::INFINITY;
        }
        psis.push(row);
        gs.push(1.0 / plb);
    }
    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let mut total = 0.0;
    for a in 0..2 {
        for j in 0..k {
            for (cs, ct) in (0..4 * k * k).map(|v| (v / (2 * k), v % (2 * k))) {
                let (s_is_y, s) = (cs >= k, cs % k);
                let (t_is_y, t) = (ct >= k, ct % k);
                let mut entry = 0.0;
                for (row, &g) in psis.iter().zip(&gs) {
                    let (g2, g3) = (g * g, g * g * g);
                    let pa = row[j][a];
                    let pa1 = row[j][a + 1];
                    entry += match (s_is_y, t_is_y) {
                        (false, false) => 2.0 * pa * row[s][0] * row[t][0] * g3,
                        (false, true) => {
                            (d(j, t) * pa1 * row[s][0] + d(s, t) * pa * row[s][1]) * g2
                                + 2.0 * pa * row[s][0] * pbar[t] * row[t][1] * g3
                        }
                        (true, false) => {
                            (d(j, s) * pa1 * row[t][0] + d(s, t) * pa * row[s][1]) * g2
                                + 2.0 * pbar[s] * pa * row[s][1] * row[t][0] * g3
                        }
                        (true, true) => {
                            d(j, s) * d(j, t) * row[j][a + 2] * g
                                + d(j, s) * pa1 * pbar[t] * row[t][1] * g2
                                + pbar[s]
                                    * ((d(j, t) * pa1 * row[s][1] + d(s, t) * pa * row[s][2]) * g2
                                        + 2.0 * pa * row[s][1] * pbar[t] * row[t][1] * g3)
                        }
                    };
                }
                total += (entry / n).powi(2);
            }
        }
    }
    total.sqrt() * (1.0 + 1e-9)
}

/// Kantorovich check at `m`: with `C` the Lipschitz constant of `J` on a ball of radius `r`
/// and `‖J⁻¹‖ ≤ β` there, Newton steps satisfy `‖s_{t+1}‖ ≤ (βC/2)‖s_t‖²`, so `h = αβC < 1`
/// keeps every iterate within `r = α/(1 − h)`. The radius is solved self-consistently.
pub fn shub_smale_check(m: &DiscreteMixture, data: &Dataset) -> ShubSmaleReport {
    let p = m.weights();
    let y = m.locations();
    let min_gap = y
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let boundary = p
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
        .min(min_gap / std::f64::consts::SQRT_2);
    let jac = gamma_jacobian(m, data);
    let g = gamma(m, data);
    let step = match newton_step(&jac, &g) {
        Ok(s) => s,
        Err(_) => return ShubSmaleReport::failed(f64::INFINITY, boundary),
    };
    let alpha = step.norm() * (1.0 + 1e-9) + 1e-300;
    let sigma_min = jac.singular_values().min() * (1.0 - 1e-9);
    let mut r_trial = alpha;
    let mut last = ShubSmaleReport::failed(alpha, boundary);
    for _ in 0..40 {
        if r_trial >= boundary {
            return last;
        }
        let lip_c = jacobian_lipschitz(p, y, data, r_trial);
        let denom = sigma_min - lip_c * r_trial;
        if !(denom > 0.0) {
            return last;
        }
        let beta = 1.0 / denom;
        let h = alpha * beta * lip_c;
        let r = if h < 1.0 {
            alpha / (1.0 - h)
        } else {
            f64::INFINITY
        };
        last = ShubSmaleReport {
            alpha,
            beta,
            lip_c,
            h,
            r,
            boundary_distance: boundary,
            proved: false,
        };
        if h >= 1.0 {
            return last;
        }
        if r <= r_trial {
            last.proved = r < boundary;
            return last;
        }
        r_trial = r * 1.01;
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::d_derivative;
    use crate::mixtures::make_mixture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(x: &[f64]) -> Dataset {
        Dataset::new(x).unwrap()
    }

    /// Root of `D′(y) = 0` for `½δ_{−y} + ½δ_y` on `{−a, a}`, by bisection.
    pub(crate) fn symmetric_root(a: f64) -> f64 {
        let x = data(&[-a, a]);
        let dprime = |y: f64| {
            let m = make_mixture(&[0.5, 0.5], &[-y, y]).unwrap();
            d_derivative(&m, &x, y, 1).unwrap()
        };
        let (mut lo, mut hi): (f64, f64) = (0.5 * a, 1.5 * a);
        assert!(dprime(lo) > 0.0 && dprime(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if dprime(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn gamma_examples() {
        let d0 = DiscreteMixture::point_mass(0.0);
        assert!(gamma(&d0, &data(&[0.0])).amax() < 1e-15);
        assert!(gamma(&d0, &data(&[-0.8, 0.8])).amax() < 1e-15);
        let g = gamma(&DiscreteMixture::point_mass(0.1), &data(&[0.0]));
        assert!(g[0].abs() < 1e-15);
        // With one datum, D(y) = φ(y)/φ(0.1), so D(0.1) = 1 and D′(0.1) = −0.1.
        assert!((g[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn jacobian_single_atom() {
        let j = gamma_jacobian(&DiscreteMixture::point_mass(0.0), &data(&[0.0]));
        assert!((j[(0, 0)] + 1.0).abs() < 1e-15);
        assert!(j[(0, 1)].abs() < 1e-15 && j[(1, 0)].abs() < 1e-15);
        assert!((j[(1, 1)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(1..8);
            let k = rng.random_range(1..4);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut ys: Vec<f64> = (0..k)
                .map(|i| -1.5 + i as f64 + rng.random_range(0.0..0.8))
                .collect();
            ys.sort_by(f64::total_cmp);
            let ws: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
            let x = data(&xs);
            let jac = jacobian_raw(&ws, &ys, &x);
            let theta = DVector::from_iterator(2 * k, ws.iter().chain(&ys).copied());
            let h = 1e-6;
            for c in 0..2 * k {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[c] += h;
                dn[c] -= h;
                let (pu, yu) = split(&up);
                let (pd, yd) = split(&dn);
                let fd = (gamma_raw(&pu, &yu, &x) - gamma_raw(&pd, &yd, &x)) / (2.0 * h);
                for r in 0..2 * k {
                    let scale = jac[(r, c)].abs().max(1e-3);
                    assert!(
                        (fd[r] - jac[(r, c)]).abs() <= 1e-6 * scale,
                        "entry ({r},{c}): fd {} vs {}",
                        fd[r],
                        jac[(r, c)]
                    );
                }
            }
        }
    }

    #[test]
    fn newton_examples() {
        let d0 = DiscreteMixture::point_mass(0.0);
        let trace = newton_solve(&d0, &data(&[0.0]), 1e-12, 20).unwrap();
        assert_eq!(trace.iterations(), 0);
        assert!(trace.converged);

        let ystar = symmetric_root(2.0);
        let m0 = make_mixture(&[0.5, 0.5], &[-ystar + 0.01, ystar + 0.01]).unwrap();
        let trace = newton_solve(&m0, &data(&[-2.0, 2.0]), 1e-13, 30).unwrap();
        assert!(trace.converged, "{:?}", trace.residual_norms);
        let last = trace.last();
        assert!((last.locations()[1] - ystar).abs() < 1e-10);
        assert!((last.locations()[0] + ystar).abs() < 1e-10);
        assert!((last.weights()[0] - 0.5).abs() < 1e-10);
        assert!((trace.weight_sums.last().unwrap() - 1.0).abs() < 1e-12);

        let x = data(&[-0.5, 0.5]);
        let m0 = make_mixture(&[0.99, 0.01], &[0.0, 3.0]).unwrap();
        let trace = newton_solve(&m0, &x, 1e-12, 30).unwrap();
        assert!(trace.failed.is_some());
    }

    #[test]
    fn weight_sum_conserved_near_solution() {
        let ystar = symmetric_root(1.5);
        let m0 = make_mixture(&[0.5005, 0.4995], &[-ystar - 1e-3, ystar + 2e-3]).unwrap();
        let trace = newton_solve(&m0, &data(&[-1.5, 1.5]), 1e-13, 20).unwrap();
        assert!(trace.converged);
        for s in &trace.weight_sums[1..] {
            assert!((s - 1.0).abs() <= 1e-5);
        }
        assert!((trace.weight_sums.last().unwrap() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn shub_smale_examples() {
        let x = data(&[-2.0, 2.0]);
        let ystar = symmetric_root(2.0);
        let m = make_mixture(&[0.5, 0.5], &[-ystar + 1e-4, ystar]).unwrap();
        let rep = shub_smale_check(&m, &x);
        assert!(rep.proved, "{rep:?}");
        assert!(rep.h < 1.0 && rep.r < rep.boundary_distance);

        let far = make_mixture(&[0.5, 0.5], &[-0.2, 0.3]).unwrap();
        let rep = shub_smale_check(&far, &x);
        assert!(!rep.proved);
        if rep.h >= 1.0 {
            assert_eq!(rep.r, f64::INFINITY);
        }
    }

    #[test]
    fn lipschitz_bound_dominates_observed_variation() {
        let x = data(&[-1.7, -0.2, 0.9, 2.0]);
        let p = [0.4, 0.6];
        let y = [-1.0, 1.2];
        let r = 0.05;
        let c = jacobian_lipschitz(&p, &y, &x, r);
        let j0 = jacobian_raw(&p, &y, &x);
        let dir = [0.6, -0.3, 0.5, 0.55];
        let norm = dir.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        let t = r / norm;
        let p1 = [p[0] + t * dir[0], p[1] + t * dir[1]];
        let y1 = [y[0] + t * dir[2], y[1] + t * dir[3]];
        let j1 = jacobian_raw(&p1, &y1, &x);
        let diff = (j1 - j0).singular_values().max();
        assert!(diff <= c * r);
    }

    #[test]
    fn negative_definite_at_solution() {
        let x = data(&[-2.0, 2.0]);
        let ystar = symmetric_root(2.0);
        let m = make_mixture(&[0.5, 0.5], &[-ystar, ystar]).unwrap();
        // Scaling the D′ rows by p_j turns J into the Hessian of ℓ in (p, y).
        let mut j = gamma_jacobian(&m, &x);
        for r in 0..2 {
            for c in 0..4 {
                j[(2 + r, c)] *= m.weights()[r];
            }
        }
        let sym = -(&j + j.transpose()) * 0.5;
        assert!(sym.symmetric_eigenvalues().min() > 0.0);
        assert!((&j - j.transpose()).amax() < 1e-12);
    }
}
