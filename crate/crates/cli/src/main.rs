use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use npmle::certifier::{certify_full, default_c1, CandidateAnalysis, DEFAULT_PREMISE_TOL};
use npmle::em::{em_jacobian_spectrum, em_solve};
use npmle::error::NpmleError;
use npmle::kernel::Dataset;
use npmle::mixtures::DiscreteMixture;
use npmle::newton::{newton_solve, shub_smale_check};
use npmle::pipeline::{
    format_data, genericity_harness, parse_data, sample_clustered, sample_iid, solve_npmle,
    solve_static, SolveConfig, SolveReport,
};
use serde_json::json;

/// Certified NPMLE for one-dimensional Gaussian location mixtures.
#[derive(Parser)]
#[command(name = "npmle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and certify the NPMLE of a data file.
    Solve(SolveArgs),
    /// Certify a given candidate mixture.
    Certify(CertifyArgs),
    /// Run EM from a starting mixture.
    Em(IterArgs),
    /// Run Newton from a starting mixture.
    Newton(IterArgs),
    /// Monte-Carlo genericity harness; writes one CSV row per trial.
    Harness(HarnessArgs),
    /// Generate a synthetic data file.
    Sample(SampleArgs),
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long = "max-refine", default_value_t = 12)]
    max_refine: usize,
    /// Certificate JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Solve over this finite support (a data-format file) instead of the real line.
    #[arg(long = "static-support")]
    static_support: Option<PathBuf>,
    /// Tolerance for the static-support certificate.
    #[arg(long = "static-tol", default_value_t = 1e-9)]
    static_tol: f64,
    /// Also write the final mixture as JSON.
    #[arg(long = "mixture-out")]
    mixture_out: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    input: PathBuf,
    /// Mixture JSON `{"weights":[...],"locations":[...]}`.
    #[arg(long)]
    candidate: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Radius c1; defaults to the cube-root schedule.
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long, default_value_t = 1e-12)]
    slack: f64,
}

#[derive(Args)]
struct IterArgs {
    #[arg(long)]
    input: PathBuf,
    /// Mixture JSON to start from.
    #[arg(long)]
    start: PathBuf,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long = "max-iter", default_value_t = 1000)]
    max_iter: usize,
}

#[derive(Args)]
struct HarnessArgs {
    /// Distribution descriptor, e.g. `uniform[-1,1]`.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Distribution descriptor.
    #[arg(
        long,
        conflicts_with = "clustered",
        required_unless_present = "clustered"
    )]
    spec: Option<String>,
    /// Number of clusters of the clustered fixture; `--n` is then the count per cluster.
    #[arg(long)]
    clustered: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let points = parse_data(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Dataset::new(&points)?)
}

fn read_mixture(path: &Path) -> Result<DiscreteMixture> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing mixture {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn finish_solve(report: &SolveReport, args: &SolveArgs, proved: bool) -> Result<ExitCode> {
    write_json(&args.out, &report.certificate.to_json())?;
    let mixture = serde_json::to_value(&report.final_mixture)?;
    if let Some(path) = &args.mixture_out {
        write_json(path, &mixture)?;
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for r in &report.refinement_log {
        eprintln!(
            "epsilon {:e}: gap {:e}, {} candidate atoms, {:?}",
            r.epsilon, r.gap, r.candidate_atoms, r.status
        );
    }
    println!("{}", serde_json::to_string_pretty(&mixture)?);
    Ok(if proved {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn run_solve(args: &SolveArgs) -> Result<ExitCode> {
    let data = read_dataset(&args.input)?;
    if let Some(path) = &args.static_support {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let support = parse_data(&text)?;
        let report = solve_static(&data, &support, args.static_tol)?;
        let proved = report.certificate.is_complete();
        return finish_solve(&report, args, proved);
    }
    let config = SolveConfig {
        epsilon: args.epsilon,
        max_refinements: args.max_refine,
        ..SolveConfig::default()
    };
    match solve_npmle(&data, &config) {
        Ok(report) => finish_solve(&report, args, true),
        Err(NpmleError::RefinementExhausted(report)) => finish_solve(&report, args, false),
        Err(e) => Err(e.into()),
    }
}

fn run_certify(args: &CertifyArgs) -> Result<ExitCode> {
    let data = read_dataset(&args.input)?;
    let m = read_mixture(&args.candidate)?;
    let an = CandidateAnalysis::new(&m, &data, args.slack);
    let c1 = args.c1.unwrap_or_else(|| {
        let curv = -m
            .locations()
            .iter()
            .map(|&y| an.evaluator().derivative(y, 2))
            .fold(f64::NEG_INFINITY, f64::max);
        default_c1(an.delta(), data.range_bound(), curv)
    });
    let mut cert = certify_full(&an, c1, DEFAULT_PREMISE_TOL);
    cert.shub_smale = Some(shub_smale_check(&m, &data));
    write_json(&args.out, &cert.to_json())?;
    if let npmle::certifier::CertStatus::Inconclusive(why) = &cert.status {
        eprintln!("inconclusive: {why}");
    }
    Ok(if cert.is_complete() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn run_em(args: &IterArgs) -> Result<ExitCode> {
    let data = read_dataset(&args.input)?;
    let m0 = read_mixture(&args.start)?;
    let trace = em_solve(&m0, &data, args.tol, args.max_iter, None)?;
    let last = trace.iterates.last().expect("trace holds the start");
    let spectrum = em_jacobian_spectrum(last, &data);
    let out = json!({
        "final": last,
        "iterations": trace.iterates.len() - 1,
        "converged": trace.converged,
        "log_likelihood": trace.log_likelihoods.last(),
        "jacobian_moduli": spectrum.moduli,
        "spectrum_interpretable": spectrum.interpretable,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn run_newton(args: &IterArgs) -> Result<ExitCode> {
    let data = read_dataset(&args.input)?;
    let m0 = read_mixture(&args.start)?;
    let ss = shub_smale_check(&m0, &data);
    let trace = newton_solve(&m0, &data, args.tol, args.max_iter)?;
    let out = json!({
        "final": trace.last(),
        "iterations": trace.iterations(),
        "converged": trace.converged,
        "failed": trace.failed,
        "residual_norms": trace.residual_norms,
        "shub_smale": {
            "alpha": ss.alpha, "beta": ss.beta, "lipC": ss.lip_c,
            "h": ss.h, "r": ss.r, "proved": ss.proved,
        },
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(if trace.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn run_harness(args: &HarnessArgs) -> Result<ExitCode> {
    let summary = genericity_harness(
        args.trials,
        &args.spec,
        args.n,
        args.seed,
        &SolveConfig::default(),
    )?;
    let mut writer = csv::Writer::from_path(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    for r in &summary.records {
        writer.serialize(r)?;
    }
    writer.flush()?;
    eprintln!(
        "certified {}/{}; nondegenerate: {}; max k/L^2 = {:.3}",
        summary.records.iter().filter(|r| r.certified).count(),
        summary.records.len(),
        summary.all_nondegenerate,
        summary.c_report
    );
    Ok(if summary.all_certified {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn run_sample(args: &SampleArgs) -> Result<ExitCode> {
    let data = match (&args.spec, args.clustered) {
        (Some(spec), None) => sample_iid(spec, args.n, args.seed)?,
        (None, Some(k)) => sample_clustered(k, args.n, args.spread, args.seed)?,
        _ => bail!("exactly one of --spec and --clustered is required"),
    };
    fs::write(&args.out, format_data(&data))
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => run_solve(a),
        Command::Certify(a) => run_certify(a),
        Command::Em(a) => run_em(a),
        Command::Newton(a) => run_newton(a),
        Command::Harness(a) => run_harness(a),
        Command::Sample(a) => run_sample(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
