//! A-posteriori certificates for a candidate mixture: a proved W1 bound to the NPMLE, lower and
//! upper bounds on its atom count, and the static-support analogue.
//!
//! Every inequality used is recorded in `constant_chain`. The bounds rely on:
//! * `D_π̂ ≤ 1` everywhere and `supp π̂ ⊆ [min x, max x]`;
//! * a proved `sup D_m ≤ 1 + δ`, which gives `∫ (D_m − 1) dπ̂ ≥ 0` and the density-ratio bound
//!   `(1/n) Σ (r_i − 1)²/r_i ≤ δ` for `r_i = P_m(x_i)/P_π̂(x_i)`;
//! * strong concavity of `ℓ_X` on the candidate's support, which converts density closeness at
//!   the data into weight closeness.

use nalgebra::{DMatrix, SymmetricEigen};
use serde_json::{json, Map, Value};

use crate::error::{NpmleError, Result};
use crate::kernel::{
    envelope_cells, hermite_envelope_sup, phi, sweep_tolerance, DEvaluator, Dataset, PHI0,
};
use crate::mixtures::{separation_stats, DiscreteMixture};
use crate::newton::ShubSmaleReport;

/// Lipschitz constant of `φ`.
const PHI_LIP: f64 = 0.241_970_724_519_143_37;

/// Default KKT tolerance for the candidate premise.
pub const DEFAULT_PREMISE_TOL: f64 = 1e-6;

/// Candidates whose `Σ p_j D(y_j)` deviates from 1 by more than this are refused.
pub const IDENTITY_GUARD: f64 = 1e-8;

/// Outcome of a certificate.
#[derive(Debug, Clone, PartialEq)]
pub enum CertStatus {
    Proved,
    /// The named condition failed.
    Inconclusive(String),
}

impl CertStatus {
    pub fn is_proved(&self) -> bool {
        matches!(self, CertStatus::Proved)
    }
}

/// Runtime estimates of the data constants; never part of a proof.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticEstimates {
    /// `−max_j D″(y_j)`.
    pub a_hat_curvature: f64,
    /// Off-support gap at radius `max(a_hat, c1)`.
    pub b_hat: f64,
    /// `A_hat / (2 M₃ L² e^{4L²})`.
    pub a_hat: f64,
}

/// Record of verified inequalities for one candidate.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub candidate: DiscreteMixture,
    pub status: CertStatus,
    pub delta: f64,
    pub c1: f64,
    pub c2: f64,
    pub lambda: f64,
    pub eta: f64,
    pub w1_bound: Option<f64>,
    pub support_count: Option<usize>,
    pub parameter_distance_bound: Option<f64>,
    pub constant_chain: Vec<(String, f64)>,
    pub diagnostics: DiagnosticEstimates,
    pub shub_smale: Option<ShubSmaleReport>,
}

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

impl Certificate {
    /// Whether the W1 bound and the exact atom count are both proved.
    pub fn is_complete(&self) -> bool {
        self.status.is_proved() && self.support_count.is_some()
    }

    /// Look up a named constant.
    pub fn constant(&self, name: &str) -> Option<f64> {
        self.constant_chain
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
    }

    /// JSON document; non-finite and absent values become `null`.
    pub fn to_json(&self) -> Value {
        let chain: Map<String, Value> = self
            .constant_chain
            .iter()
            .map(|(k, v)| (k.clone(), num(*v)))
            .collect();
        let status = match &self.status {
            CertStatus::Proved => "Proved",
            CertStatus::Inconclusive(_) => "Inconclusive",
        };
        json!({
            "status": status,
            "w1_bound": self.w1_bound.map_or(Value::Null, num),
            "support_count": self.support_count,
            "parameter_distance_bound": self.parameter_distance_bound.map_or(Value::Null, num),
            "delta": num(self.delta),
            "c1": num(self.c1),
            "c2": num(self.c2),
            "lambda": num(self.lambda),
            "eta": num(self.eta),
            "constant_chain": Value::Object(chain),
            "diagnostics": {
                "A_hat": num(self.diagnostics.a_hat_curvature),
                "B_hat": num(self.diagnostics.b_hat),
                "a_hat": num(self.diagnostics.a_hat),
            },
            "shub_smale": self.shub_smale.as_ref().map_or(Value::Null, |s| json!({
                "alpha": num(s.alpha),
                "beta": num(s.beta),
                "lipC": num(s.lip_c),
                "h": num(s.h),
                "r": num(s.r),
                "proved": s.proved,
            })),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct DistCell {
    lo: f64,
    hi: f64,
    dhi: f64,
    upper: f64,
}

/// Proved envelope of `D_m` on the data hull (extended to the atoms), reused by every check.
#[derive(Debug, Clone)]
pub struct CandidateAnalysis<'a> {
    m: &'a DiscreteMixture,
    data: &'a Dataset,
    eval: DEvaluator,
    cells: Vec<DistCell>,
    domain: (f64, f64),
    cell_width: f64,
    slack: f64,
    delta: f64,
}

impl<'a> CandidateAnalysis<'a> {
    pub fn new(m: &'a DiscreteMixture, data: &'a Dataset, slack: f64) -> Self {
        let eval = DEvaluator::new(m, data);
        let (xmin, xmax) = data.hull();
        let y = m.locations();
        let lo = xmin.min(y[0]);
        let hi = xmax.max(y[y.len() - 1]);
        let mut breaks = vec![lo, hi];
        breaks.extend(y.iter().copied());
        breaks.extend(y.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        breaks.retain(|b| *b >= lo && *b <= hi);
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let h = crate::kernel::capped_cell_width(
            eval.sup_abs_bound(3),
            sweep_tolerance(slack),
            hi - lo,
        );
        let raw = if lo < hi {
            envelope_cells(&eval, &breaks, h)
        } else {
            vec![crate::kernel::Cell {
                lo,
                hi,
                upper: eval.d_upper(lo),
            }]
        };
        let cells: Vec<DistCell> = raw
            .iter()
            .map(|c| {
                let (a, b) = (m.distance_to_support(c.lo), m.distance_to_support(c.hi));
                DistCell {
                    lo: c.lo,
                    hi: c.hi,
                    dhi: a.max(b),
                    upper: c.upper,
                }
            })
            .collect();
        let sup = cells
            .iter()
            .map(|c| c.upper)
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            m,
            data,
            eval,
            cells,
            domain: (lo, hi),
            cell_width: h,
            slack,
            delta: (sup - 1.0).max(0.0),
        }
    }

    pub fn candidate(&self) -> &DiscreteMixture {
        self.m
    }

    pub fn evaluator(&self) -> &DEvaluator {
        &self.eval
    }

    /// Proved `δ ≥ 0` with `sup_ℝ D_m ≤ 1 + δ`.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn cell_width(&self) -> f64 {
        self.cell_width
    }

    /// Largest proved `c2` with `D_m ≤ 1 − c2` wherever `d(y, supp m) ≥ c`.
    pub fn off_support_gap(&self, c: f64) -> f64 {
        let y = self.m.locations();
        let mut sup = self
            .cells
            .iter()
            .filter(|cell| cell.dhi >= c)
            .map(|cell| cell.upper)
            .fold(f64::NEG_INFINITY, f64::max);
        let left = y[0] - c;
        if left < self.domain.0 {
            sup = sup.max(self.eval.d_upper(left));
        }
        let right = y[y.len() - 1] + c;
        if right > self.domain.1 {
            sup = sup.max(self.eval.d_upper(right));
        }
        if sup == f64::NEG_INFINITY {
            sup = 0.0;
        }
        1.0 - sup
    }

    /// `max_{y ∈ hull} d(y, supp m)`.
    pub fn hull_radius(&self) -> f64 {
        let (xmin, xmax) = self.data.hull();
        let y = self.m.locations();
        let mut r = self
            .m
            .distance_to_support(xmin)
            .max(self.m.distance_to_support(xmax));
        for w in y.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            if mid >= xmin && mid <= xmax {
                r = r.max(0.5 * (w[1] - w[0]));
            }
        }
        r
    }

    /// `inf (1 + δ − D(y)) / (d(y) − c0)²` over hull points with `d(y) > c0`.
    fn quadratic_margin(&self, c0: f64) -> f64 {
        let (xmin, xmax) = self.data.hull();
        self.cells
            .iter()
            .filter(|c| c.hi >= xmin && c.lo <= xmax && c.dhi > c0)
            .map(|c| (1.0 + self.delta - c.upper).max(0.0) / (c.dhi - c0).powi(2))
            .fold(f64::INFINITY, f64::min)
    }

    /// Upper bound on `sup D″` over `[a, b]` from a first-order envelope.
    fn sup_second_derivative(&self, a: f64, b: f64) -> f64 {
        let b3 = self.eval.sup_abs_bound(3);
        let pieces = 32;
        let w = (b - a) / pieces as f64;
        let rf = self.eval.rounding_factor();
        let at = |y: f64| {
            let (v, s) = self.eval.d012(y);
            v[2] + rf * s[2]
        };
        let mut best = f64::NEG_INFINITY;
        let mut prev = at(a);
        for i in 1..=pieces {
            let next = at(if i == pieces { b } else { a + w * i as f64 });
            best = best.max(prev.max(next) + 0.5 * b3 * w);
            prev = next;
        }
        best
    }
}

/// Proved `δ` with `max_ℝ D_m ≤ 1 + δ`.
pub fn certify_global_max(m: &DiscreteMixture, data: &Dataset, slack: f64) -> f64 {
    CandidateAnalysis::new(m, data, slack).delta()
}

/// Largest proved `c2` with `D_m(y) ≤ 1 − c2` whenever `d(y, supp m) ≥ c1`.
pub fn off_support_gap(m: &DiscreteMixture, data: &Dataset, c1: f64, slack: f64) -> f64 {
    CandidateAnalysis::new(m, data, slack).off_support_gap(c1)
}

/// Hessian `H_ab = −(1/n) Σ_i φ(x_i − y_a) φ(x_i − y_b) / P_m(x_i)²` of `ℓ_X` in the weights.
pub fn loss_hessian(m: &DiscreteMixture, data: &Dataset) -> DMatrix<f64> {
    let k = m.k();
    let n = data.n() as f64;
    let eval = DEvaluator::new(m, data);
    let mut h = DMatrix::zeros(k, k);
    for (&x, &p) in data.points().iter().zip(eval.densities()) {
        let col: Vec<f64> = m.locations().iter().map(|&y| phi(x - y) / p).collect();
        for a in 0..k {
            for b in 0..k {
                h[(a, b)] -= col[a] * col[b] / n;
            }
        }
    }
    h
}

/// Orthonormal basis of `{v : Σ v = 0}` (Helmert vectors) as columns.
fn zero_sum_basis(k: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(k, k - 1);
    for c in 0..k - 1 {
        let m = (c + 1) as f64;
        let norm = (m * (m + 1.0)).sqrt();
        for r in 0..=c {
            q[(r, c)] = 1.0 / norm;
        }
        q[(c + 1, c)] = -m / norm;
    }
    q
}

/// Smallest eigenvalue of `−H` on zero-sum directions minus `1e-10 ‖H‖_F`; `+∞` for k = 1.
pub fn hessian_lambda(m: &DiscreteMixture, data: &Dataset) -> f64 {
    let k = m.k();
    if k == 1 {
        return f64::INFINITY;
    }
    let h = loss_hessian(m, data);
    let q = zero_sum_basis(k);
    let reduced = q.transpose() * (-&h) * &q;
    let eig = SymmetricEigen::new(reduced).eigenvalues;
    eig.iter().copied().fold(f64::INFINITY, f64::min) - 1e-10 * h.norm()
}

/// Cube-root schedule `c1 = (10 L δ / Â)^{1/3}`, floored at a tiny positive value.
pub fn default_c1(delta: f64, range_bound: f64, a_hat_curvature: f64) -> f64 {
    let a = if a_hat_curvature > 1e-6 {
        a_hat_curvature
    } else {
        1.0
    };
    (10.0 * range_bound * delta / a).cbrt().max(1e-9)
}

fn diagnostics_for(an: &CandidateAnalysis, c1: f64) -> DiagnosticEstimates {
    let m = an.m;
    let l = an.data.range_bound();
    let a_curv = -m
        .locations()
        .iter()
        .map(|&y| an.eval.derivative(y, 2))
        .fold(f64::NEG_INFINITY, f64::max);
    let m3 = hermite_envelope_sup(3).unwrap_or(f64::INFINITY);
    let a_hat = a_curv / (2.0 * m3 * l * l * (4.0 * l * l).exp());
    let b_hat = an.off_support_gap(a_hat.max(c1));
    DiagnosticEstimates {
        a_hat_curvature: a_curv,
        b_hat,
        a_hat,
    }
}

/// Quantities shared by the W1 chain and the support-count checks.
struct DensityFacts {
    /// `P_m(x_i)`.
    dens: Vec<f64>,
    /// `max r_i` and `max 1/r_i` for `r_i = P_m(x_i)/P_π̂(x_i)`.
    ratio_max: f64,
}

fn density_facts(eval: &DEvaluator, n: usize, delta: f64) -> DensityFacts {
    let t = 2.0 + n as f64 * delta;
    DensityFacts {
        dens: eval.densities().to_vec(),
        ratio_max: 0.5 * (t + (t * t - 4.0).max(0.0).sqrt()) * (1.0 + 1e-12),
    }
}

/// Bound on `sup_z |D^{(j)}_m(z) − D^{(j)}_π̂(z)|` from δ and, optionally, a W1 bound.
fn perturbation_bound(j: usize, facts: &DensityFacts, delta: f64, w1: Option<f64>) -> f64 {
    let n = facts.dens.len() as f64;
    let mj = hermite_envelope_sup(j).unwrap_or(f64::INFINITY) * PHI0;
    let s2 = facts.dens.iter().map(|p| 1.0 / (p * p)).sum::<f64>() / n;
    let via_delta = mj * (delta * facts.ratio_max).sqrt() * s2.sqrt();
    let via_w1 = w1.map_or(f64::INFINITY, |w| {
        facts
            .dens
            .iter()
            .map(|&p| {
                let lb = (p - PHI_LIP * w).max(p / facts.ratio_max).max(PHI0 / n);
                PHI_LIP * w / (p * lb)
            })
            .sum::<f64>()
            * mj
            / n
    });
    via_delta.min(via_w1) * (1.0 + 1e-9)
}

/// Certify a W1 bound between `m` and the NPMLE.
pub fn certify_w1(m: &DiscreteMixture, data: &Dataset, c1: f64, slack: f64) -> Certificate {
    let an = CandidateAnalysis::new(m, data, slack);
    certify_w1_with(&an, c1, DEFAULT_PREMISE_TOL)
}

/// [`certify_w1`] on a precomputed analysis.
pub fn certify_w1_with(an: &CandidateAnalysis, c1: f64, premise_tol: f64) -> Certificate {
    let m = an.m;
    let data = an.data;
    let k = m.k();
    let n = data.n();
    let l = data.range_bound();
    let delta = an.delta;
    let mut chain: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, v: f64| chain.push((name.to_string(), v));
    push("slack", an.slack);
    push("cell_width", an.cell_width);
    push("third_derivative_bound", an.eval.sup_abs_bound(3));

    let d_at: Vec<f64> = m.locations().iter().map(|&y| an.eval.d(y)).collect();
    let identity: f64 = m.weights().iter().zip(&d_at).map(|(p, d)| p * d).sum();
    let resid: Vec<f64> = d_at.iter().map(|d| d - 1.0).collect();
    let kkt_max = resid.iter().fold(0.0, |a: f64, r| a.max(r.abs()));
    let mean_r = resid.iter().sum::<f64>() / k as f64;
    let kkt_centered = resid
        .iter()
        .map(|r| (r - mean_r).powi(2))
        .sum::<f64>()
        .sqrt();
    push("identity_residual", (identity - 1.0).abs());
    push("kkt_residual_max", kkt_max);
    push("kkt_residual_centered_norm", kkt_centered);

    let c2 = an.off_support_gap(c1);
    let lambda = hessian_lambda(m, data);
    let eta = c1 + l * delta / c2;
    let diagnostics = diagnostics_for(an, c1);
    push("delta", delta);
    push("c1", c1);
    push("c2", c2);
    push("lambda", lambda);
    push("eta", eta);
    let mass10 = m.mass_in(-10.0, 10.0);
    let exponent = if mass10 >= 0.1 { 5.1 } else { 14.0 };
    let branch = lambda.min(1.0).powi(3) / ((k as f64).powi(3) * (exponent * l * l).exp());
    push("mass_in_pm10", mass10);
    push("paper_branch_threshold", branch);
    push(
        "paper_branch_holds",
        if c2 > 0.0 && eta <= branch { 1.0 } else { 0.0 },
    );

    let make = |status: CertStatus, w1: Option<f64>, chain: Vec<(String, f64)>| Certificate {
        candidate: m.clone(),
        status,
        delta,
        c1,
        c2,
        lambda,
        eta,
        w1_bound: w1,
        support_count: None,
        parameter_distance_bound: None,
        constant_chain: chain,
        diagnostics,
        shub_smale: None,
    };

    if (identity - 1.0).abs() > IDENTITY_GUARD {
        return make(
            CertStatus::Inconclusive("identity guard".into()),
            None,
            chain,
        );
    }
    if kkt_max > premise_tol {
        return make(
            CertStatus::Inconclusive("premise: candidate is not a fixed-support optimum".into()),
            None,
            chain,
        );
    }

    // Transport of π̂ onto supp m: mass at distance ≥ c1 is controlled by c2 (step route) or
    // by the quadratic margin of 1 + δ − D (quadratic route).
    let radius = an.hull_radius();
    push("hull_radius", radius);
    let mut w_star = f64::INFINITY;
    if c2 > 0.0 {
        let w_step = c1.min(radius) + (radius - c1).max(0.0) * delta / (delta + c2);
        push("route_step_w", w_step);
        w_star = w_star.min(w_step);
    }
    let mut c0_list = vec![0.0, c1];
    let mut c0 = an.cell_width;
    while c0 < radius.min(1.0) {
        c0_list.push(c0);
        c0 *= 2.0;
    }
    let mut best_quad = (f64::INFINITY, f64::NAN, f64::NAN);
    for &c0 in &c0_list {
        let kappa = an.quadratic_margin(c0);
        if kappa > 0.0 {
            let w = c0 + (delta / kappa).sqrt();
            if w < best_quad.0 {
                best_quad = (w, c0, kappa);
            }
        }
    }
    if best_quad.0.is_finite() {
        push("route_quadratic_c0", best_quad.1);
        push("route_quadratic_kappa", best_quad.2);
        push("route_quadratic_w", best_quad.0);
        w_star = w_star.min(best_quad.0);
    }
    if !(w_star < radius || (w_star.is_finite() && k == 1)) || !w_star.is_finite() {
        return make(
            CertStatus::Inconclusive("condition 1: off-support gap".into()),
            None,
            chain,
        );
    }
    let w_star = w_star.min(radius) * (1.0 + 1e-9) + 1e-15;
    push("transport_w_star", w_star);

    if k == 1 {
        push("w1_bound", w_star);
        return make(CertStatus::Proved, Some(w_star), chain);
    }
    if !(lambda > 0.0) {
        return make(
            CertStatus::Inconclusive("condition 3: Hessian not negative definite".into()),
            None,
            chain,
        );
    }

    // Transport π̂ to π' on supp m. Then |P_π' − P_π̂| ≤ g w* pointwise and
    // (1/n) Σ ((P_π̂ − P_m)/P_m)² ≤ r_max δ, while the weight difference q − p sums to zero,
    // so λ ‖q − p‖² ≤ (1/n) Σ ((P_π' − P_m)/P_m)².
    let facts = density_facts(&an.eval, n, delta);
    let nf = n as f64;
    let s2 = facts.dens.iter().map(|p| 1.0 / (p * p)).sum::<f64>() / nf;
    let transport_term = PHI_LIP * w_star * s2.sqrt();
    let ratio_term = (facts.ratio_max * delta).sqrt();
    let s = (transport_term + ratio_term) / lambda.sqrt() * (1.0 + 1e-9);
    push("density_ratio_max", facts.ratio_max);
    push("inverse_density_rms", s2.sqrt());
    push("transport_density_term", transport_term);
    push("ratio_density_term", ratio_term);
    let y = m.locations();
    let span = y[k - 1] - y[0];
    push("weight_error", s);
    push("span", span);
    let w1 = (w_star + (k as f64).sqrt() * s * 0.5 * span) * (1.0 + 1e-9);
    push("w1_bound", w1);
    make(CertStatus::Proved, Some(w1), chain)
}

/// `W1(m, π̂) ≤ Δ(m)/3` proves `|supp π̂| ≥ k`.
pub fn certify_support_lower(m: &DiscreteMixture, w1_bound: f64) -> bool {
    w1_bound <= separation_stats(m).delta / 3.0
}

/// Terms of the upper atom-count check at radius `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportUpperCheck {
    pub c: f64,
    /// Uniform bound on `|D_m − D_π̂|`.
    pub pert0: f64,
    /// Uniform bound on `|D″_m − D″_π̂|`.
    pub pert2: f64,
    /// `max_j sup_{|z − y_j| ≤ c} D″_m(z)`.
    pub max_curvature: f64,
    /// Off-support gap of `D_m` at radius `c`.
    pub gap: f64,
    pub holds: bool,
}

/// Upper atom-count check: `D″_π̂ < 0` on every c-neighbourhood of an atom and `D_π̂ < 1`
/// outside them, so each connected neighbourhood holds at most one atom of π̂.
pub fn support_upper_check(an: &CandidateAnalysis, w1_bound: f64, c: f64) -> SupportUpperCheck {
    let facts = density_facts(&an.eval, an.data.n(), an.delta);
    let pert0 = perturbation_bound(0, &facts, an.delta, Some(w1_bound));
    let pert2 = perturbation_bound(2, &facts, an.delta, Some(w1_bound));
    let max_curvature =
        an.m.locations()
            .iter()
            .map(|&y| an.sup_second_derivative(y - c, y + c))
            .fold(f64::NEG_INFINITY, f64::max);
    let gap = an.off_support_gap(c);
    SupportUpperCheck {
        c,
        pert0,
        pert2,
        max_curvature,
        gap,
        holds: max_curvature + pert2 < 0.0 && gap > pert0,
    }
}

/// Upper atom-count certificate at radius `c`; `delta` (a proved `sup D − 1`) tightens it.
pub fn certify_support_upper(
    m: &DiscreteMixture,
    data: &Dataset,
    w1_bound: f64,
    c: f64,
    slack: f64,
) -> bool {
    let an = CandidateAnalysis::new(m, data, slack);
    c > 0.0 && support_upper_check(&an, w1_bound, c).holds
}

/// Scan radii `c` for the upper atom-count check; returns the first that holds.
pub fn find_support_upper(an: &CandidateAnalysis, w1_bound: f64) -> Option<SupportUpperCheck> {
    let stats = separation_stats(an.m);
    let mut c = (0.5 * stats.min_gap).min(1.0);
    for _ in 0..40 {
        let check = support_upper_check(an, w1_bound, c);
        if check.holds {
            return Some(check);
        }
        c *= 0.7;
    }
    None
}

/// W1 certificate plus both atom-count checks and the parameter-distance bound.
pub fn certify_full(an: &CandidateAnalysis, c1: f64, premise_tol: f64) -> Certificate {
    let mut cert = certify_w1_with(an, c1, premise_tol);
    let Some(w1) = cert.w1_bound else {
        return cert;
    };
    let lower = certify_support_lower(an.m, w1);
    cert.constant_chain
        .push(("separation_delta".into(), separation_stats(an.m).delta));
    cert.constant_chain
        .push(("support_lower_holds".into(), if lower { 1.0 } else { 0.0 }));
    let upper = find_support_upper(an, w1);
    if let Some(u) = upper {
        cert.constant_chain.push(("support_upper_c".into(), u.c));
        cert.constant_chain
            .push(("support_upper_pert0".into(), u.pert0));
        cert.constant_chain
            .push(("support_upper_pert2".into(), u.pert2));
        cert.constant_chain
            .push(("support_upper_max_curvature".into(), u.max_curvature));
        cert.constant_chain
            .push(("support_upper_gap".into(), u.gap));
    }
    cert.constant_chain.push((
        "support_upper_holds".into(),
        if upper.is_some() { 1.0 } else { 0.0 },
    ));
    if lower && upper.is_some() {
        let k = an.m.k();
        cert.support_count = Some(k);
        let bound = if k == 1 {
            w1
        } else {
            12.0 * w1 / separation_stats(an.m).delta
        };
        cert.parameter_distance_bound = Some(bound);
    }
    cert
}

/// Static-support certificate: proves `supp π̂_S = supp m` and bounds `d(m, π̂_S)` where
/// `π̂_S` maximizes `ℓ_X` over mixtures supported on the finite set `S`.
pub fn certify_static_support(
    m: &DiscreteMixture,
    data: &Dataset,
    support_set: &[f64],
    tol: f64,
) -> Result<Certificate> {
    let scale = |v: f64| 1e-12 * v.abs().max(1.0);
    for &y in m.locations() {
        if !support_set.iter().any(|&s| (s - y).abs() <= scale(y)) {
            return Err(NpmleError::SupportNotInS(y));
        }
    }
    let k = m.k();
    let n = data.n();
    let eval = DEvaluator::new(m, data);
    let mut chain: Vec<(String, f64)> = Vec::new();
    let d_at: Vec<f64> = m.locations().iter().map(|&y| eval.d(y)).collect();
    let resid: Vec<f64> = d_at.iter().map(|d| d - 1.0).collect();
    let kkt_max = resid.iter().fold(0.0, |a: f64, r| a.max(r.abs()));
    let mean_r = resid.iter().sum::<f64>() / k as f64;
    let rho = resid
        .iter()
        .map(|r| (r - mean_r).powi(2))
        .sum::<f64>()
        .sqrt();
    let others: Vec<f64> = support_set
        .iter()
        .copied()
        .filter(|&s| m.locations().iter().all(|&y| (s - y).abs() > scale(y)))
        .collect();
    let delta_s = support_set
        .iter()
        .map(|&s| eval.d_upper(s) - 1.0)
        .fold(0.0, f64::max);
    let gap = 1.0
        - others
            .iter()
            .map(|&s| eval.d_upper(s))
            .fold(f64::NEG_INFINITY, f64::max);
    let gap = if others.is_empty() { 1.0 } else { gap };
    let facts = density_facts(&eval, n, delta_s);
    let pert0 = perturbation_bound(0, &facts, delta_s, None);
    let lambda = hessian_lambda(m, data);
    chain.push(("kkt_residual_max".into(), kkt_max));
    chain.push(("kkt_residual_centered_norm".into(), rho));
    chain.push(("delta_static".into(), delta_s));
    chain.push(("gap_static".into(), gap));
    chain.push(("density_ratio_max".into(), facts.ratio_max));
    chain.push(("perturbation_d0".into(), pert0));
    chain.push(("lambda".into(), lambda));
    let identity: f64 = m.weights().iter().zip(&d_at).map(|(p, d)| p * d).sum();
    let mut status = CertStatus::Proved;
    let mut s = 0.0;
    if (identity - 1.0).abs() > IDENTITY_GUARD {
        status = CertStatus::Inconclusive("identity guard".into());
    } else if kkt_max > tol {
        status = CertStatus::Inconclusive("premise: D ≠ 1 on the support".into());
    } else if !(gap > pert0) {
        status = CertStatus::Inconclusive("off-support gap".into());
    } else if k > 1 {
        let p_min = m.weights().iter().copied().fold(f64::INFINITY, f64::min);
        let k_max = data
            .points()
            .iter()
            .zip(eval.densities())
            .map(|(&x, &p)| {
                m.locations()
                    .iter()
                    .map(|&y| phi(x - y))
                    .fold(0.0, f64::max)
                    / p
            })
            .fold(0.0, f64::max);
        let one_plus_k = (1.0 / p_min).min(k_max);
        if !(lambda > 0.0) {
            status = CertStatus::Inconclusive("Hessian not negative definite".into());
        } else {
            s = 2.0 * one_plus_k * rho / lambda * (1.0 + 1e-9);
            chain.push(("one_plus_k".into(), one_plus_k));
            chain.push(("weight_error".into(), s));
            if !(s < p_min) {
                status =
                    CertStatus::Inconclusive("weight error exceeds the smallest weight".into());
            }
        }
    }
    let proved = status.is_proved();
    let y = m.locations();
    let w1 = (k as f64).sqrt() * s * 0.5 * (y[k - 1] - y[0]);
    let a_curv = -y
        .iter()
        .map(|&v| eval.derivative(v, 2))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Certificate {
        candidate: m.clone(),
        status,
        delta: delta_s,
        c1: f64::NAN,
        c2: gap,
        lambda,
        eta: f64::NAN,
        w1_bound: proved.then_some(w1),
        support_count: proved.then_some(k),
        parameter_distance_bound: proved.then_some(s),
        constant_chain: chain,
        diagnostics: DiagnosticEstimates {
            a_hat_curvature: a_curv,
            b_hat: gap,
            a_hat: f64::NAN,
        },
        shub_smale: None,
    })
}
