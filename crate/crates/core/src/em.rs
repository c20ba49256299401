//! EM iteration on k-atom mixtures and its local linearization.

use nalgebra::{DMatrix, DVector};

use crate::error::{NpmleError, Result};
use crate::kernel::{log_likelihood, DEvaluator, Dataset};
use crate::mixtures::{normalized_mixture, param_distance, DiscreteMixture};

/// Stationarity tolerance under which a spectrum is interpretable.
pub const STATIONARY_TOL: f64 = 1e-8;

/// EM iterates with optional error tracking against a reference.
#[derive(Debug, Clone)]
pub struct EmTrace {
    pub iterates: Vec<DiscreteMixture>,
    pub log_likelihoods: Vec<f64>,
    /// Parameter distance of each iterate to the reference; empty without one.
    pub param_errors: Vec<f64>,
    /// Median ratio of successive errors over the last 10 iterations.
    pub rate_estimate: Option<f64>,
    pub converged: bool,
}

/// Eigenvalue moduli of the EM map's Jacobian, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct EmSpectrum {
    pub moduli: Vec<f64>,
    /// False when the point is not stationary within [`STATIONARY_TOL`].
    pub interpretable: bool,
}

impl EmSpectrum {
    pub fn spectral_radius(&self) -> f64 {
        self.moduli.first().copied().unwrap_or(0.0)
    }
}

/// Raw update `p ↦ p D(y)`, `y ↦ y + D′(y)/D(y)` on unnormalized weights.
fn em_raw(p: &[f64], y: &[f64], data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let eval = DEvaluator::from_raw(p, y, data);
    let mut np = Vec::with_capacity(p.len());
    let mut ny = Vec::with_capacity(y.len());
    for (&pj, &yj) in p.iter().zip(y) {
        let (v, _) = eval.d012(yj);
        np.push(pj * v[0]);
        ny.push(yj + v[1] / v[0]);
    }
    (np, ny)
}

/// One simultaneous EM update.
pub fn em_step(m: &DiscreteMixture, data: &Dataset) -> Result<DiscreteMixture> {
    let (p, y) = em_raw(m.weights(), m.locations(), data);
    if y.windows(2).any(|w| !(w[1] > w[0])) || y.iter().any(|v| !v.is_finite()) {
        return Err(NpmleError::AtomCollision);
    }
    normalized_mixture(&p, &y)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Iterate [`em_step`] until the parameter step is at most `tol` or `max_iter` steps.
pub fn em_solve(
    m0: &DiscreteMixture,
    data: &Dataset,
    tol: f64,
    max_iter: usize,
    reference: Option<&DiscreteMixture>,
) -> Result<EmTrace> {
    if !(tol > 0.0) {
        return Err(NpmleError::InvalidConfig(
            "EM tolerance must be positive".into(),
        ));
    }
    let error_of = |m: &DiscreteMixture| reference.map(|r| param_distance(m, r)).transpose();
    let mut trace = EmTrace {
        iterates: vec![m0.clone()],
        log_likelihoods: vec![log_likelihood(m0, data)],
        param_errors: error_of(m0)?.into_iter().collect(),
        rate_estimate: None,
        converged: false,
    };
    let mut current = m0.clone();
    for _ in 0..max_iter {
        let next = em_step(&current, data)?;
        let step = param_distance(&next, &current)?;
        trace.log_likelihoods.push(log_likelihood(&next, data));
        trace.param_errors.extend(error_of(&next)?);
        trace.iterates.push(next.clone());
        current = next;
        if step <= tol {
            trace.converged = true;
            break;
        }
    }
    let errs = &trace.param_errors;
    let start = errs.len().saturating_sub(11);
    let ratios: Vec<f64> = errs[start..]
        .windows(2)
        .filter(|w| w[0] > 1e-14)
        .map(|w| w[1] / w[0])
        .collect();
    trace.rate_estimate = median(ratios);
    Ok(trace)
}

/// Eigenvalue moduli of the central finite-difference Jacobian of the EM map in the
/// `2k`-dimensional `(p, y)` parametrization.
pub fn em_jacobian_spectrum(m: &DiscreteMixture, data: &Dataset) -> EmSpectrum {
    let k = m.k();
    let eval = DEvaluator::new(m, data);
    let stationary = m.locations().iter().all(|&y| {
        let (v, _) = eval.d012(y);
        (v[0] - 1.0).abs() <= STATIONARY_TOL && v[1].abs() <= STATIONARY_TOL
    });
    let theta: Vec<f64> = m.weights().iter().chain(m.locations()).copied().collect();
    let map = |t: &[f64]| -> DVector<f64> {
        let (p, y) = em_raw(&t[..k], &t[k..], data);
        DVector::from_iterator(2 * k, p.into_iter().chain(y))
    };
    let mut jac = DMatrix::zeros(2 * k, 2 * k);
    for c in 0..2 * k {
        let h = 1e-6 * theta[c].abs().max(1.0);
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[c] += h;
        dn[c] -= h;
        jac.set_column(c, &((map(&up) - map(&dn)) / (2.0 * h)));
    }
    let mut moduli: Vec<f64> = jac.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    EmSpectrum {
        moduli,
        interpretable: stationary,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixtures::make_mixture;
    use crate::newton::newton_solve;

    fn data(x: &[f64]) -> Dataset {
        Dataset::new(x).unwrap()
    }

    #[test]
    fn single_atom_jumps_to_mean() {
        let x = data(&[-0.3, 0.4, 1.7, 2.2]);
        let next = em_step(&DiscreteMixture::point_mass(-5.0), &x).unwrap();
        assert!((next.locations()[0] - x.mean()).abs() < 1e-12);
        assert_eq!(next.weights(), &[1.0]);
    }

    #[test]
    fn symmetry_preserved() {
        let x = data(&[-2.0, 2.0]);
        let m = make_mixture(&[0.5, 0.5], &[-1.0, 1.0]).unwrap();
        let next = em_step(&m, &x).unwrap();
        assert!((next.weights()[0] - next.weights()[1]).abs() < 1e-15);
        assert!((next.locations()[0] + next.locations()[1]).abs() < 1e-15);
    }

    #[test]
    fn stationary_point_is_fixed() {
        let x = data(&[-2.0, 2.0]);
        let m0 = make_mixture(&[0.5, 0.5], &[-2.0, 2.0]).unwrap();
        let limit = newton_solve(&m0, &x, 1e-14, 40).unwrap();
        let pi = limit.last();
        let next = em_step(pi, &x).unwrap();
        assert!(param_distance(&next, pi).unwrap() < 1e-12);
        let trace = em_solve(pi, &x, 1e-10, 100, None).unwrap();
        assert_eq!(trace.iterates.len(), 2);
        assert!(trace.converged);
    }

    #[test]
    fn monotone_with_linear_rate() {
        let x = data(&[-2.0, 2.0]);
        let m0 = make_mixture(&[0.5, 0.5], &[-2.0, 2.0]).unwrap();
        let reference = newton_solve(&m0, &x, 1e-14, 40).unwrap().last().clone();
        let start = make_mixture(&[0.45, 0.55], &[-1.7, 2.3]).unwrap();
        let trace = em_solve(&start, &x, 1e-13, 500, Some(&reference)).unwrap();
        for w in trace.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        let rate = trace.rate_estimate.unwrap();
        assert!(rate < 1.0, "{rate}");
    }

    #[test]
    fn spectrum_examples() {
        let spec = em_jacobian_spectrum(&DiscreteMixture::point_mass(0.0), &data(&[0.0]));
        assert!(spec.interpretable);
        assert!(spec.spectral_radius() < 1e-6);
        let spec = em_jacobian_spectrum(&DiscreteMixture::point_mass(1.0), &data(&[0.0]));
        assert!(!spec.interpretable);
    }
}
