//! End-to-end solve: grid stage, merge, weight polish, certification, Newton polish. Also
//! synthetic data generation and the Monte-Carlo genericity harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::certifier::{
    certify_full, certify_static_support, default_c1, CandidateAnalysis, CertStatus, Certificate,
    DEFAULT_PREMISE_TOL,
};
use crate::error::{NpmleError, Result};
use crate::grid_solver::{
    build_grid, default_iota, frank_wolfe_to_gap, optimize_weights, optimize_weights_from,
    round_small_atoms, Grid, GridWeights,
};
use crate::kernel::{DEvaluator, Dataset};
use crate::mixtures::{merge_adjacent, separation_stats, DiscreteMixture};
use crate::newton::{newton_solve, shub_smale_check, NewtonTrace, ShubSmaleReport};

/// Spacing constant of the clustered fixture: centers at `C i √ln(k+1)`.
pub const CLUSTER_SPACING: f64 = 3.0;

/// Solver configuration. Every default is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub epsilon: f64,
    pub epsilon_shrink: f64,
    pub max_refinements: usize,
    /// Frank–Wolfe gap target; `None` means `ε²`.
    pub gap_target: Option<f64>,
    pub fw_max_iterations: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Rounding threshold; `None` uses the default schedule.
    pub mass_drop_iota: Option<f64>,
    /// Certificate radius `c1`; `None` uses the cube-root schedule.
    pub c1_override: Option<f64>,
    pub weight_tol: f64,
    pub certify_slack: f64,
    pub premise_tol: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            epsilon_shrink: 0.5,
            max_refinements: 12,
            gap_target: None,
            fw_max_iterations: 5000,
            newton_tol: 1e-12,
            newton_max_iter: 50,
            mass_drop_iota: None,
            c1_override: None,
            weight_tol: 1e-11,
            certify_slack: 1e-12,
            premise_tol: DEFAULT_PREMISE_TOL,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NpmleError::InvalidConfig(msg.into()));
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.epsilon_shrink > 0.0 && self.epsilon_shrink < 1.0) {
            return bad("epsilon_shrink must lie in (0, 1)");
        }
        let positive = [
            self.newton_tol,
            self.weight_tol,
            self.certify_slack,
            self.premise_tol,
        ];
        if positive.iter().any(|t| !(*t > 0.0)) {
            return bad("tolerances must be positive");
        }
        if self.gap_target.is_some_and(|g| !(g > 0.0))
            || self.mass_drop_iota.is_some_and(|g| !(g >= 0.0))
            || self.c1_override.is_some_and(|g| !(g > 0.0))
        {
            return bad("overrides must be positive");
        }
        Ok(())
    }
}

/// One pass of the refinement loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementRecord {
    pub epsilon: f64,
    /// Final Frank–Wolfe gap.
    pub gap: f64,
    pub status: CertStatus,
    pub candidate_atoms: usize,
}

/// Wall time per phase in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub grid: f64,
    pub certify: f64,
    pub newton: f64,
}

/// Output of a solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Newton-polished mixture, or the candidate if Newton was not run or failed.
    pub final_mixture: DiscreteMixture,
    /// The certified (or last attempted) candidate.
    pub candidate: DiscreteMixture,
    pub certificate: Certificate,
    pub shub_smale: Option<ShubSmaleReport>,
    pub newton_trace: Option<NewtonTrace>,
    pub refinement_log: Vec<RefinementRecord>,
    pub timings: PhaseTimings,
    pub warnings: Vec<String>,
}

/// Grid-stage output at one resolution.
#[derive(Debug, Clone)]
pub struct GridStage {
    pub grid: Grid,
    /// Frank–Wolfe weights after rounding.
    pub rounded: GridWeights,
    /// Frank–Wolfe gap before rounding.
    pub fw_gap: f64,
    /// Exact likelihood maximizer over the grid.
    pub grid_optimum: DiscreteMixture,
}

/// Frank–Wolfe to the gap target, rounding, then the exact optimum over the grid.
pub fn grid_stage(data: &Dataset, epsilon: f64, config: &SolveConfig) -> Result<GridStage> {
    let grid = build_grid(data.range_bound(), epsilon, &[])?;
    let target = config.gap_target.unwrap_or(epsilon * epsilon);
    let fw = frank_wolfe_to_gap(data, &grid, target, config.fw_max_iterations);
    let fw_gap = *fw.gap_history.last().unwrap_or(&f64::INFINITY);
    let iota = config
        .mass_drop_iota
        .unwrap_or_else(|| default_iota(data.range_bound(), fw.iterations, epsilon));
    let rounded = round_small_atoms(&fw, iota)?;
    let active = grid.active_range(data);
    let support = &grid.points()[active.clone()];
    let start = &rounded.weights[active];
    let start_sum: f64 = start.iter().sum();
    let grid_optimum = if start_sum > 0.0 {
        optimize_weights_from(support, data, config.weight_tol, Some(start))?
    } else {
        optimize_weights(support, data, config.weight_tol)?
    };
    Ok(GridStage {
        grid,
        rounded,
        fw_gap,
        grid_optimum,
    })
}

/// Merge radius: `a_hat / 5` when that exceeds the grid spacing, otherwise `3ε`.
fn merge_gap(a_hat: f64, epsilon: f64) -> f64 {
    let clique = a_hat / 5.0;
    if clique.is_finite() && clique > epsilon {
        clique.min(3.0 * epsilon)
    } else {
        3.0 * epsilon
    }
}

fn a_hat_estimate(m: &DiscreteMixture, data: &Dataset) -> f64 {
    let eval = DEvaluator::new(m, data);
    let l = data.range_bound();
    let curv = -m
        .locations()
        .iter()
        .map(|&y| eval.derivative(y, 2))
        .fold(f64::NEG_INFINITY, f64::max);
    let m3 = crate::kernel::hermite_envelope_sup(3).unwrap_or(f64::INFINITY);
    curv / (2.0 * m3 * l * l * (4.0 * l * l).exp())
}

fn certify_candidate(m: &DiscreteMixture, data: &Dataset, config: &SolveConfig) -> Certificate {
    let an = CandidateAnalysis::new(m, data, config.certify_slack);
    let c1 = config.c1_override.unwrap_or_else(|| {
        let curv = -m
            .locations()
            .iter()
            .map(|&y| an.evaluator().derivative(y, 2))
            .fold(f64::NEG_INFINITY, f64::max);
        default_c1(an.delta(), data.range_bound(), curv)
    });
    certify_full(&an, c1, config.premise_tol)
}

/// Certified NPMLE by geometric ε refinement.
pub fn solve_npmle(data: &Dataset, config: &SolveConfig) -> Result<SolveReport> {
    config.validate()?;
    let l = data.range_bound();
    let mut warnings = Vec::new();
    if (data.n() as f64) < l.powi(4) {
        warnings.push(format!(
            "n = {} is below L^4 = {:.3}; certification may need small epsilon",
            data.n(),
            l.powi(4)
        ));
    }
    let mut eps = config.epsilon.min(0.5 * l);
    let mut log = Vec::new();
    let mut timings = PhaseTimings::default();
    let mut last: Option<SolveReport> = None;
    for _ in 0..=config.max_refinements {
        let t0 = Instant::now();
        let pass = grid_stage(data, eps, config).and_then(|stage| {
            let merged = merge_adjacent(
                &stage.grid_optimum,
                merge_gap(a_hat_estimate(&stage.grid_optimum, data), eps),
            );
            let candidate = optimize_weights(merged.locations(), data, config.weight_tol)?;
            Ok((stage, candidate))
        });
        timings.grid += t0.elapsed().as_secs_f64();
        let (stage, candidate) = match (pass, last.as_mut()) {
            (Ok(v), _) => v,
            // A later pass that fails numerically ends refinement with the previous report.
            (Err(e @ NpmleError::NoConvergence(_)), Some(prev)) => {
                prev.warnings
                    .push(format!("refinement stopped at epsilon {eps:e}: {e}"));
                break;
            }
            (Err(e), _) => return Err(e),
        };

        let t1 = Instant::now();
        let mut cert = certify_candidate(&candidate, data, config);
        timings.certify += t1.elapsed().as_secs_f64();
        log.push(RefinementRecord {
            epsilon: eps,
            gap: stage.fw_gap,
            status: if cert.is_complete() {
                CertStatus::Proved
            } else {
                match &cert.status {
                    CertStatus::Proved => CertStatus::Inconclusive("support count".into()),
                    other => other.clone(),
                }
            },
            candidate_atoms: candidate.k(),
        });

        if cert.is_complete() {
            let t2 = Instant::now();
            let ss = shub_smale_check(&candidate, data);
            cert.shub_smale = Some(ss);
            let trace = newton_solve(&candidate, data, config.newton_tol, config.newton_max_iter);
            timings.newton += t2.elapsed().as_secs_f64();
            let (final_mixture, newton_trace) = match trace {
                Ok(tr) => {
                    let ok = tr.failed.is_none();
                    if !ok {
                        warnings.push(format!(
                            "newton abandoned: {}",
                            tr.failed.clone().unwrap_or_default()
                        ));
                    }
                    (
                        if ok {
                            tr.last().clone()
                        } else {
                            candidate.clone()
                        },
                        Some(tr),
                    )
                }
                Err(e) => {
                    warnings.push(format!("newton failed: {e}"));
                    (candidate.clone(), None)
                }
            };
            return Ok(SolveReport {
                final_mixture,
                candidate,
                certificate: cert,
                shub_smale: Some(ss),
                newton_trace,
                refinement_log: log,
                timings,
                warnings,
            });
        }
        last = Some(SolveReport {
            final_mixture: candidate.clone(),
            candidate,
            certificate: cert,
            shub_smale: None,
            newton_trace: None,
            refinement_log: log.clone(),
            timings,
            warnings: warnings.clone(),
        });
        eps *= config.epsilon_shrink;
    }
    Err(NpmleError::RefinementExhausted(Box::new(
        last.expect("at least one refinement pass"),
    )))
}

/// Likelihood maximizer over mixtures supported on the finite set `support`, certified.
pub fn solve_static(data: &Dataset, support: &[f64], tol: f64) -> Result<SolveReport> {
    if !(tol > 0.0) {
        return Err(NpmleError::InvalidConfig(
            "tolerance must be positive".into(),
        ));
    }
    let mut s: Vec<f64> = support.to_vec();
    if s.iter().any(|v| !v.is_finite()) {
        return Err(NpmleError::NonFinite);
    }
    s.sort_by(f64::total_cmp);
    s.dedup();
    let l = data.range_bound();
    if !s.iter().any(|v| v.abs() <= 3.0 * l) {
        return Err(NpmleError::InvalidSupport);
    }
    let t0 = Instant::now();
    let m = optimize_weights(&s, data, (0.1 * tol).min(1e-11))?;
    let grid_time = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let cert = certify_static_support(&m, data, &s, tol)?;
    let timings = PhaseTimings {
        grid: grid_time,
        certify: t1.elapsed().as_secs_f64(),
        newton: 0.0,
    };
    let record = RefinementRecord {
        epsilon: f64::NAN,
        gap: cert.delta,
        status: cert.status.clone(),
        candidate_atoms: m.k(),
    };
    Ok(SolveReport {
        final_mixture: m.clone(),
        candidate: m,
        certificate: cert,
        shub_smale: None,
        newton_trace: None,
        refinement_log: vec![record],
        timings,
        warnings: Vec::new(),
    })
}

fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    // FNV-1a of the operation tag separates streams sharing a seed.
    let hash = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(seed ^ hash)
}

fn dataset_rounded(points: &[f64]) -> Result<Dataset> {
    let max_abs = points.iter().fold(0.0, |a: f64, x| a.max(x.abs()));
    Dataset::with_range_bound(points, max_abs.ceil().max(1.0))
}

/// `k` clusters of `per_cluster` uniform points within `±spread` of `C i √ln(k+1)`.
pub fn sample_clustered(k: usize, per_cluster: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if k == 0 || per_cluster == 0 || !(spread > 0.0 && spread <= 0.1) {
        return Err(NpmleError::InvalidConfig(
            "need k >= 1, per_cluster >= 1, 0 < spread <= 0.1".into(),
        ));
    }
    let mut rng = stream(seed, "sample_clustered");
    let step = CLUSTER_SPACING * ((k + 1) as f64).ln().sqrt();
    let mut points = Vec::with_capacity(k * per_cluster);
    for i in 1..=k {
        let center = step * i as f64;
        for _ in 0..per_cluster {
            points.push(center + rng.random_range(-spread..=spread));
        }
    }
    dataset_rounded(&points)
}

/// Parsed distribution descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum Descriptor {
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// `(weight, mean, sd)` triples.
    GaussianMixture(Vec<(f64, f64, f64)>),
    TruncatedGaussian {
        mu: f64,
        sigma: f64,
        lo: f64,
        hi: f64,
    },
}

/// Parse `uniform[a,b]`, `gaussian-mixture[w:mu:sd,...]` or `truncated-gaussian[mu,sigma,a,b]`;
/// parentheses are accepted in place of brackets.
pub fn parse_descriptor(spec: &str) -> Result<Descriptor> {
    let unknown = || NpmleError::UnknownDescriptor(spec.to_string());
    let s = spec.trim();
    let open = s.find(['[', '(']).ok_or_else(unknown)?;
    let close = s.strip_suffix([']', ')']).ok_or_else(unknown)?;
    let name = s[..open].trim().to_ascii_lowercase();
    let body = &close[open + 1..];
    let nums = |text: &str| -> Result<Vec<f64>> {
        text.split([',', ':'])
            .map(|t| t.trim().parse::<f64>().map_err(|_| unknown()))
            .collect()
    };
    let d = match name.as_str() {
        "uniform" => match nums(body)?[..] {
            [lo, hi] if lo < hi => Descriptor::Uniform { lo, hi },
            _ => return Err(unknown()),
        },
        "gaussian-mixture" => {
            let comps = body
                .split(',')
                .map(|c| match nums(c)?[..] {
                    [w, mu, sd] if w > 0.0 && sd > 0.0 => Ok((w, mu, sd)),
                    _ => Err(unknown()),
                })
                .collect::<Result<Vec<_>>>()?;
            if comps.is_empty() {
                return Err(unknown());
            }
            Descriptor::GaussianMixture(comps)
        }
        "truncated-gaussian" => match nums(body)?[..] {
            [mu, sigma, lo, hi] if sigma > 0.0 && lo < hi => {
                Descriptor::TruncatedGaussian { mu, sigma, lo, hi }
            }
            _ => return Err(unknown()),
        },
        _ => return Err(unknown()),
    };
    Ok(d)
}

impl Descriptor {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Descriptor::Uniform { lo, hi } => rng.random_range(*lo..=*hi),
            Descriptor::GaussianMixture(comps) => {
                let total: f64 = comps.iter().map(|c| c.0).sum();
                let mut u = rng.random_range(0.0..total);
                let mut pick = comps[comps.len() - 1];
                for c in comps {
                    if u < c.0 {
                        pick = *c;
                        break;
                    }
                    u -= c.0;
                }
                Normal::new(pick.1, pick.2)
                    .expect("validated sd")
                    .sample(rng)
            }
            Descriptor::TruncatedGaussian { mu, sigma, lo, hi } => {
                let normal = Normal::new(*mu, *sigma).expect("validated sigma");
                for _ in 0..100_000 {
                    let v = normal.sample(rng);
                    if v >= *lo && v <= *hi {
                        return v;
                    }
                }
                rng.random_range(*lo..=*hi)
            }
        }
    }
}

/// `n` i.i.d. draws from a descriptor; `L` is `max |x|` rounded up, at least 1.
pub fn sample_iid(spec: &str, n: usize, seed: u64) -> Result<Dataset> {
    let d = parse_descriptor(spec)?;
    if n == 0 {
        return Err(NpmleError::EmptyDataset);
    }
    let mut rng = stream(seed, "sample_iid");
    let points: Vec<f64> = (0..n).map(|_| d.draw(&mut rng)).collect();
    dataset_rounded(&points)
}

/// One harness trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HarnessRecord {
    pub trial: usize,
    pub seed: u64,
    pub n: usize,
    pub range_bound: f64,
    pub certified: bool,
    pub k: Option<usize>,
    pub min_gap: Option<f64>,
    /// `−max D″` at the atoms.
    #[serde(rename = "A_hat")]
    pub a_hat: Option<f64>,
    /// Off-support gap estimate.
    #[serde(rename = "B_hat")]
    pub b_hat: Option<f64>,
    pub w1_bound: Option<f64>,
    pub status: String,
}

/// Harness records and their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessSummary {
    pub records: Vec<HarnessRecord>,
    pub all_certified: bool,
    /// Every certified trial has positive curvature and off-support gap estimates.
    pub all_nondegenerate: bool,
    /// Largest observed `k / L²`.
    pub c_report: f64,
}

fn status_text(s: &CertStatus) -> String {
    match s {
        CertStatus::Proved => "Proved".into(),
        CertStatus::Inconclusive(why) => format!("Inconclusive: {why}"),
    }
}

/// Run `trials` independent solves on draws from `spec` (parallel, deterministic per trial).
pub fn genericity_harness(
    trials: usize,
    spec: &str,
    n: usize,
    seed: u64,
    config: &SolveConfig,
) -> Result<HarnessSummary> {
    if trials == 0 {
        return Err(NpmleError::InvalidConfig(
            "trials must be at least 1".into(),
        ));
    }
    parse_descriptor(spec)?;
    let records: Vec<HarnessRecord> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = seed.wrapping_add(trial as u64);
            let blank = |l: f64, status: String| HarnessRecord {
                trial,
                seed: trial_seed,
                n,
                range_bound: l,
                certified: false,
                k: None,
                min_gap: None,
                a_hat: None,
                b_hat: None,
                w1_bound: None,
                status,
            };
            let data = match sample_iid(spec, n, trial_seed) {
                Ok(d) => d,
                Err(e) => return blank(f64::NAN, e.to_string()),
            };
            let l = data.range_bound();
            let report = match solve_npmle(&data, config) {
                Ok(r) => r,
                Err(NpmleError::RefinementExhausted(r)) => *r,
                Err(e) => return blank(l, e.to_string()),
            };
            let cert = &report.certificate;
            let stats = separation_stats(&report.final_mixture);
            HarnessRecord {
                certified: cert.is_complete(),
                k: cert.support_count,
                min_gap: stats.min_gap.is_finite().then_some(stats.min_gap),
                a_hat: Some(cert.diagnostics.a_hat_curvature),
                b_hat: Some(cert.diagnostics.b_hat),
                w1_bound: cert.w1_bound,
                status: status_text(&report.refinement_log.last().expect("non-empty log").status),
                ..blank(l, String::new())
            }
        })
        .collect();
    let all_certified = records.iter().all(|r| r.certified);
    let all_nondegenerate = records
        .iter()
        .filter(|r| r.certified)
        .all(|r| r.a_hat.is_some_and(|a| a > 0.0) && r.b_hat.is_some_and(|b| b > 0.0));
    let c_report = records
        .iter()
        .filter_map(|r| r.k.map(|k| k as f64 / (r.range_bound * r.range_bound)))
        .fold(0.0, f64::max);
    Ok(HarnessSummary {
        records,
        all_certified,
        all_nondegenerate,
        c_report,
    })
}

/// Parse a data file: one number per line, `#` starts a comment.
pub fn parse_data(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let v: f64 = body
            .parse()
            .map_err(|_| NpmleError::InvalidConfig(format!("not a number: `{body}`")))?;
        if !v.is_finite() {
            return Err(NpmleError::NonFinite);
        }
        out.push(v);
    }
    Ok(out)
}

/// Render points in the data-file format.
pub fn format_data(data: &Dataset) -> String {
    let mut s = String::new();
    for x in data.points() {
        s.push_str(&format!("{x:?}\n"));
    }
    s
}
