//! Acceptance suite. Each criterion prints one `criterion N: PASS|FAIL` line.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use npmle::certifier::{certify_global_max, hessian_lambda, loss_hessian};
use npmle::em::{em_jacobian_spectrum, em_solve, em_step};
use npmle::error::NpmleError;
use npmle::grid_solver::{build_grid, frank_wolfe, optimize_weights};
use npmle::kernel::{d_derivative, expected_d_identity, log_likelihood, phi, Dataset};
use npmle::mixtures::{make_mixture, merge_adjacent, param_distance, w1_distance, DiscreteMixture};
use npmle::newton::{gamma, gamma_jacobian};
use npmle::pipeline::{
    grid_stage, sample_clustered, sample_iid, solve_npmle, solve_static, SolveConfig, SolveReport,
    CLUSTER_SPACING,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Writes straight to stdout so the line survives libtest's output capture.
fn verdict(n: usize, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

fn solve(data: &Dataset) -> SolveReport {
    match solve_npmle(data, &SolveConfig::default()) {
        Ok(r) => r,
        Err(NpmleError::RefinementExhausted(r)) => *r,
        Err(e) => panic!("solve failed: {e}"),
    }
}

/// Root of `y = a tanh(a y)` on `(0, a]`: the symmetric two-atom stationarity equation.
fn two_point_root(a: f64) -> f64 {
    let f = |y: f64| a * (a * y).tanh() - y;
    let (mut lo, mut hi): (f64, f64) = (1e-9, a);
    assert!(f(lo) > 0.0 && f(hi) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn uniform_data(seed: u64, n: usize, half_width: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<f64> = (0..n)
        .map(|_| rng.random_range(-half_width..half_width))
        .collect();
    Dataset::new(&pts).unwrap()
}

/// Fixtures shared by the stationarity and quadratic-rate criteria.
fn fixtures() -> Vec<(String, Dataset)> {
    let mut out = Vec::new();
    for a in [0.5, 0.8, 0.95, 1.2, 1.5, 2.0] {
        out.push((format!("two-point a={a}"), Dataset::new(&[-a, a]).unwrap()));
    }
    for k in [2, 3] {
        out.push((
            format!("clustered k={k}"),
            sample_clustered(k, 100, 0.1, 17).unwrap(),
        ));
    }
    for s in 0..10 {
        out.push((format!("uniform n=12 seed={s}"), uniform_data(s, 12, 2.0)));
    }
    for s in 0..5 {
        out.push((
            format!("uniform[-1,1] n=50 seed={s}"),
            sample_iid("uniform[-1,1]", 50, s).unwrap(),
        ));
    }
    out
}

#[test]
fn criterion_01_two_point_phase_transition() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for a in [0.5f64, 0.8, 0.95, 1.2, 1.5, 2.0] {
        let x = Dataset::new(&[-a, a]).unwrap();
        // Closed form D(y) = e^{−y²/2} cosh(a y) for δ₀ cross-checks the kernel.
        let d0 = DiscreteMixture::point_mass(0.0);
        for y in [0.3f64, 0.9, 1.7] {
            let closed = (-0.5 * y * y).exp() * (a * y).cosh();
            if (d_derivative(&d0, &x, y, 0).unwrap() - closed).abs() > 1e-14 {
                failures.push(format!("a={a}: D(δ₀) mismatch at {y}"));
            }
        }
        let r = solve(&x);
        let want = if a <= 1.0 { 1 } else { 2 };
        if r.certificate.support_count != Some(want) {
            failures.push(format!(
                "a={a}: certified {:?}, want {want}",
                r.certificate.support_count
            ));
            continue;
        }
        let y = r.final_mixture.locations();
        let err = if want == 1 {
            y[0].abs()
        } else {
            let root = two_point_root(a);
            (y[1] - root).abs().max((y[0] + root).abs())
        };
        if err > 1e-8 {
            failures.push(format!("a={a}: location error {err:e}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 30.0 {
        failures.push(format!("runtime {secs:.1}s"));
    }
    let pass = failures.is_empty();
    verdict(1, pass, &format!("{secs:.2}s; {failures:?}"));
    assert!(pass);
}

/// Likelihood maximizer on a fine grid over the hull, merged, then polished by plain EM.
fn brute_force_oracle(data: &Dataset, spacing: f64) -> DiscreteMixture {
    let (lo, hi) = data.hull();
    let steps = ((hi - lo) / spacing).ceil() as usize;
    let grid: Vec<f64> = if steps == 0 {
        vec![lo]
    } else {
        (0..=steps)
            .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
            .collect()
    };
    let coarse = optimize_weights(&grid, data, 1e-13).unwrap();
    let merged = merge_adjacent(&coarse, 3.0 * spacing);
    let (mut p, mut y) = (merged.weights().to_vec(), merged.locations().to_vec());
    let xs = data.points();
    let n = xs.len() as f64;
    for _ in 0..200_000 {
        let dens: Vec<f64> = xs
            .iter()
            .map(|&x| p.iter().zip(&y).map(|(pj, yj)| pj * phi(x - yj)).sum())
            .collect();
        let mut np = vec![0.0; p.len()];
        let mut ny = vec![0.0; p.len()];
        for j in 0..p.len() {
            let mut resp_sum = 0.0;
            let mut resp_x = 0.0;
            for (&x, &d) in xs.iter().zip(&dens) {
                let r = p[j] * phi(x - y[j]) / d;
                resp_sum += r;
                resp_x += r * x;
            }
            np[j] = resp_sum / n;
            ny[j] = resp_x / resp_sum;
        }
        let step = np
            .iter()
            .zip(&p)
            .chain(ny.iter().zip(&y))
            .fold(0.0, |a: f64, (u, v)| a.max((u - v).abs()));
        p = np;
        y = ny;
        if step < 1e-15 {
            break;
        }
    }
    make_mixture(&p, &y).unwrap()
}

#[test]
fn criterion_02_certificate_soundness_fuzz() {
    let start = Instant::now();
    let results: Vec<(usize, Vec<String>, bool)> = (0..200u64)
        .into_par_iter()
        .map(|i| {
            let n = 1 + (i as usize % 12);
            let x = uniform_data(1000 + i, n, 2.0);
            let r = solve(&x);
            let mut problems = Vec::new();
            let cert = &r.certificate;
            let Some(w1) = cert.w1_bound else {
                return (i as usize, problems, false);
            };
            let eps = r.refinement_log.last().unwrap().epsilon;
            let oracle = brute_force_oracle(&x, eps / 100.0);
            let dist = w1_distance(&r.candidate, &oracle);
            if dist > w1 + 1e-9 {
                problems.push(format!("instance {i}: W1 {dist:e} exceeds bound {w1:e}"));
            }
            let k = r.candidate.k();
            if cert.constant("support_lower_holds") == Some(1.0) && oracle.k() < k {
                problems.push(format!(
                    "instance {i}: lower count {k} but oracle has {}",
                    oracle.k()
                ));
            }
            if cert.constant("support_upper_holds") == Some(1.0) && oracle.k() > k {
                problems.push(format!(
                    "instance {i}: upper count {k} but oracle has {}",
                    oracle.k()
                ));
            }
            (i as usize, problems, true)
        })
        .collect();
    let proved = results.iter().filter(|r| r.2).count();
    let violations: Vec<String> = results.into_iter().flat_map(|r| r.1).collect();
    let secs = start.elapsed().as_secs_f64();
    let pass = violations.is_empty() && secs < 600.0;
    verdict(
        2,
        pass,
        &format!(
            "{proved}/200 proved, {} violations, {secs:.1}s {violations:?}",
            violations.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_stationarity_at_output() {
    let mut failures = Vec::new();
    let all = fixtures();
    for (name, x) in &all {
        let r = solve(x);
        if !r.certificate.is_complete() {
            failures.push(format!("{name}: not certified"));
            continue;
        }
        let m = &r.final_mixture;
        let g = gamma(m, x);
        let k = m.k();
        let d_res = (0..k).map(|j| g[j].abs()).fold(0.0, f64::max);
        let dp_res = (0..k).map(|j| g[k + j].abs()).fold(0.0, f64::max);
        let delta = certify_global_max(m, x, 1e-12);
        if d_res > 1e-8 || dp_res > 1e-8 || delta > 1e-8 {
            failures.push(format!(
                "{name}: |D-1| {d_res:e}, |D'| {dp_res:e}, delta {delta:e}"
            ));
        }
    }
    let pass = failures.is_empty();
    verdict(3, pass, &format!("{} fixtures; {failures:?}", all.len()));
    assert!(pass);
}

#[test]
fn criterion_04_shub_smale_quadratic_rate() {
    let mut checked = 0;
    let mut failures = Vec::new();
    for (name, x) in &fixtures() {
        let r = solve(x);
        let (Some(ss), Some(trace)) = (r.shub_smale, r.newton_trace.as_ref()) else {
            continue;
        };
        if !ss.proved || !r.certificate.is_complete() {
            continue;
        }
        checked += 1;
        let limit = trace.last();
        let err = |t: usize| {
            let m = trace.iterates.get(t).unwrap_or(limit);
            param_distance(m, limit).unwrap()
        };
        let d0 = err(0);
        let scale = limit
            .weights()
            .iter()
            .chain(limit.locations())
            .fold(1.0, |a: f64, v| a.max(v.abs()));
        for t in 1..=4usize {
            let envelope = 1.05 * 2f64.powi(1 - (1i32 << t)) * d0;
            // Iterates are only resolved to a few ulps of the parameters.
            let floor = 8.0 * f64::EPSILON * scale;
            if err(t) > envelope + floor {
                failures.push(format!("{name}: t={t} error {:e} > {envelope:e}", err(t)));
            }
        }
    }
    let pass = failures.is_empty() && checked > 0;
    verdict(4, pass, &format!("{checked} proved fixtures; {failures:?}"));
    assert!(pass);
}

#[test]
fn criterion_05_jacobian_and_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_j: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..10);
        let k = rng.random_range(1..4);
        let x = uniform_data(rng.random(), n, 2.0);
        let mut ys: Vec<f64> = (0..k)
            .map(|i| -1.5 + 1.1 * i as f64 + rng.random_range(0.0..0.6))
            .collect();
        ys.sort_by(f64::total_cmp);
        let mut ws: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = ws.iter().sum();
        ws.iter_mut().for_each(|w| *w /= s);
        let m = make_mixture(&ws, &ys).unwrap();
        let jac = gamma_jacobian(&m, &x);
        // γ at raw parameters, from the library's D evaluation on an unnormalized mixture.
        let gamma_at = |theta: &DVector<f64>| -> DVector<f64> {
            let p: Vec<f64> = theta.rows(0, k).iter().copied().collect();
            let y: Vec<f64> = theta.rows(k, k).iter().copied().collect();
            let mut g = DVector::zeros(2 * k);
            let dens: Vec<f64> = x
                .points()
                .iter()
                .map(|&xi| p.iter().zip(&y).map(|(pj, yj)| pj * phi(xi - yj)).sum())
                .collect();
            for j in 0..k {
                for (&xi, &d) in x.points().iter().zip(&dens) {
                    g[j] += phi(xi - y[j]) / d / n as f64;
                    g[k + j] += (xi - y[j]) * phi(xi - y[j]) / d / n as f64;
                }
                g[j] -= 1.0;
            }
            g
        };
        let theta = DVector::from_iterator(2 * k, ws.iter().chain(&ys).copied());
        let h = 1e-6;
        for c in 0..2 * k {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[c] += h;
            dn[c] -= h;
            let fd = (gamma_at(&up) - gamma_at(&dn)) / (2.0 * h);
            for r in 0..2 * k {
                let rel = (fd[r] - jac[(r, c)]).abs() / jac[(r, c)].abs().max(1e-3);
                worst_j = worst_j.max(rel);
            }
        }
    }

    // Hessian: second differences of ℓ along 20 zero-sum directions.
    let x = uniform_data(77, 9, 2.0);
    let m = make_mixture(&[0.25, 0.35, 0.4], &[-1.3, 0.1, 1.2]).unwrap();
    let hess = loss_hessian(&m, &x);
    let lambda = hessian_lambda(&m, &x);
    let ll = |v: &[f64], t: f64| {
        let w: Vec<f64> = m.weights().iter().zip(v).map(|(p, d)| p + t * d).collect();
        log_likelihood(&make_mixture(&w, m.locations()).unwrap(), &x)
    };
    let curvature = |v: &[f64]| {
        let t = 1e-4;
        -(ll(v, t) - 2.0 * ll(v, 0.0) + ll(v, -t)) / (t * t) / v.iter().map(|a| a * a).sum::<f64>()
    };
    let mut worst_h: f64 = 0.0;
    let mut below_lambda = false;
    for _ in 0..20 {
        let mut v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = v.iter().sum::<f64>() / 3.0;
        v.iter_mut().for_each(|a| *a -= mean);
        let vv = DVector::from_vec(v.clone());
        let quad = -(vv.transpose() * &hess * &vv)[(0, 0)] / vv.norm_squared();
        let fd = curvature(&v);
        worst_h = worst_h.max((fd - quad).abs() / quad.abs());
        below_lambda |= fd < lambda * (1.0 - 1e-5);
    }
    // Minimizing direction of the reduced Hessian reproduces λ.
    let q = DMatrix::from_row_slice(
        3,
        2,
        &[
            1.0 / 2f64.sqrt(),
            1.0 / 6f64.sqrt(),
            -1.0 / 2f64.sqrt(),
            1.0 / 6f64.sqrt(),
            0.0,
            -2.0 / 6f64.sqrt(),
        ],
    );
    let eig = SymmetricEigen::new(q.transpose() * (-&hess) * &q);
    let imin = eig.eigenvalues.imin();
    let dir = &q * eig.eigenvectors.column(imin);
    let along = curvature(dir.as_slice());
    let lambda_err = (along - lambda).abs() / lambda;
    let pass = worst_j <= 1e-6 && worst_h <= 1e-5 && !below_lambda && lambda_err <= 1e-5;
    verdict(
        5,
        pass,
        &format!("jacobian rel err {worst_j:e}; hessian rel err {worst_h:e}; lambda rel err {lambda_err:e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_frank_wolfe_gap_decay() {
    let mut failures = Vec::new();
    let mut slopes = Vec::new();
    for s in 0..10u64 {
        let x = uniform_data(600 + s, 12, 2.0);
        let grid = build_grid(x.range_bound(), 0.05, &[]).unwrap();
        let fw = frank_wolfe(&x, &grid, 10_000);
        let mut best = f64::INFINITY;
        let min_so_far: Vec<f64> = fw
            .gap_history
            .iter()
            .map(|&g| {
                best = best.min(g);
                best
            })
            .collect();
        let g_fit = min_so_far
            .iter()
            .enumerate()
            .map(|(t, &g)| g * (t as f64 + 2.0))
            .fold(0.0, f64::max);
        let pts: Vec<(f64, f64)> = (10..=10_000)
            .filter(|&t| min_so_far[t] > 0.0)
            .map(|t| ((t as f64).ln(), min_so_far[t].ln()))
            .collect();
        let slope = if pts.len() < 2 || pts.last().unwrap().0 < (5_000f64).ln() {
            // The gap reached zero: decay is faster than any power.
            f64::NEG_INFINITY
        } else {
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            sxy / sxx
        };
        slopes.push(slope);
        if slope > -0.9 {
            failures.push(format!("seed {s}: slope {slope:.3}, G {g_fit:.3}"));
        }
    }
    let pass = failures.is_empty();
    verdict(6, pass, &format!("slopes {slopes:.3?}; {failures:?}"));
    assert!(pass);
}

#[test]
fn criterion_07_em_properties() {
    let outcomes: Vec<(bool, bool, bool, f64, String)> = (0..100u64)
        .into_par_iter()
        .map(|s| {
            let x = uniform_data(700 + s, 12, 2.0);
            let r = solve(&x);
            let trace = em_solve(&r.candidate, &x, 1e-12, 300, None);
            let monotone = match &trace {
                Ok(t) => t.log_likelihoods.windows(2).all(|w| w[1] >= w[0] - 1e-12),
                Err(NpmleError::AtomCollision) => true,
                Err(_) => false,
            };
            if !r.certificate.is_complete() {
                return (
                    monotone,
                    true,
                    false,
                    f64::NAN,
                    format!("seed {s}: not certified"),
                );
            }
            let m = &r.final_mixture;
            let fixed = em_step(m, &x)
                .map(|e| param_distance(&e, m).unwrap())
                .unwrap_or(f64::INFINITY);
            let spec = em_jacobian_spectrum(m, &x);
            let stable = spec.interpretable && spec.spectral_radius() < 1.0;
            (
                monotone,
                fixed <= 1e-9,
                stable,
                spec.spectral_radius(),
                format!("seed {s}: fixed {fixed:e}"),
            )
        })
        .collect();
    let monotone = outcomes.iter().all(|o| o.0);
    let fixed = outcomes.iter().all(|o| o.1);
    let stable = outcomes.iter().filter(|o| o.2).count();
    let bad: Vec<&String> = outcomes
        .iter()
        .filter(|o| !o.1 || !o.2)
        .map(|o| &o.4)
        .collect();
    let max_radius = outcomes
        .iter()
        .map(|o| o.3)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let pass = monotone && fixed && stable >= 95;
    verdict(
        7,
        pass,
        &format!("monotone {monotone}; fixed points {fixed}; {stable}/100 stable, max radius {max_radius:.4}; {bad:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_clustered_construction() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for k in [2usize, 3, 4] {
        let x = sample_clustered(k, 100, 0.1, 8).unwrap();
        let r = solve(&x);
        if r.certificate.support_count != Some(k) {
            failures.push(format!(
                "k={k}: certified {:?}",
                r.certificate.support_count
            ));
            continue;
        }
        let step = CLUSTER_SPACING * ((k + 1) as f64).ln().sqrt();
        for (i, &y) in r.final_mixture.locations().iter().enumerate() {
            let center = step * (i + 1) as f64;
            if (y - center).abs() > 0.2 {
                failures.push(format!("k={k}: atom {y} vs center {center}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 300.0;
    verdict(8, pass, &format!("{secs:.1}s; {failures:?}"));
    assert!(pass);
}

#[test]
fn criterion_09_identity_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let x = uniform_data(rng.random(), n, 4.0);
        let k = rng.random_range(1..6);
        let mut ys: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        ys.sort_by(f64::total_cmp);
        ys.dedup();
        let mut ws: Vec<f64> = (0..ys.len()).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = ws.iter().sum();
        ws.iter_mut().for_each(|w| *w /= s);
        let m = make_mixture(&ws, &ys).unwrap();
        worst = worst.max((expected_d_identity(&m, &x) - 1.0).abs());
    }
    let pass = worst <= 1e-12;
    verdict(9, pass, &format!("max deviation {worst:e}"));
    assert!(pass);
}

#[test]
fn criterion_10_static_support() {
    let x = Dataset::new(&[-0.8, 0.8]).unwrap();
    let r = solve_static(&x, &[-0.8, 0.0, 0.8], 1e-9).unwrap();
    let closed = (-0.32f64).exp() * 0.64f64.cosh();
    let d_edge = d_derivative(&r.final_mixture, &x, 0.8, 0).unwrap();
    let first = r.certificate.is_complete()
        && r.final_mixture == DiscreteMixture::point_mass(0.0)
        && d_edge < 1.0
        && (d_edge - closed).abs() < 1e-14;

    let y = uniform_data(10, 10, 2.0);
    let eps = 0.01;
    let grid = build_grid(y.range_bound(), eps, &[]).unwrap();
    let fine = solve_static(&y, grid.points(), 1e-9).unwrap();
    let stage = grid_stage(&y, eps, &SolveConfig::default()).unwrap();
    let w1 = w1_distance(&fine.final_mixture, &stage.grid_optimum);
    let pass = first && w1 <= 1e-6;
    verdict(
        10,
        pass,
        &format!("delta_0 certified {first}, D(0.8) = {d_edge:.6}; fine-grid W1 {w1:e}"),
    );
    assert!(pass);
}
