//! `attn`: command-line front end for the attention laboratory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attn_core::experiments::{parse_sweep_config, run_sweep_to_dir};
use attn_core::theory::{
    simplex_eta_finite_n, simplex_threshold, three_phase_thresholds, PartitionCase,
};
use attn_core::tokens::{read_tokens_csv, write_tokens_csv};
use attn_core::{
    att_forward, classify_three_phase, end_to_end_jacobian, finite_difference_check,
    frobenius_norm_exact, frobenius_norm_hutchinson, iterate_layers, make_simplex,
    make_three_phase, run_verify, sample_gaussian_factor, simplex_eta_limit, simplex_finite_n,
    validate_three_phase, z_partition_prediction, AttentionParams64, Budget, GaussianFactorSpec,
    SimplexSpec, Suite, ThreePhaseSpec64, TokenConfig64,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(
    name = "attn",
    version,
    about = "Scaled softmax self-attention: forward maps, Jacobians, regime predictions and sweeps"
)]
struct Cli {
    /// Seed for every random choice (token sampling, probes, finite-difference pairs, sweep seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a token configuration and write it as CSV.
    Generate(GenerateArgs),
    /// One attention layer; writes the output tokens and a JSON sidecar.
    Forward(ForwardArgs),
    /// Apply the layer repeatedly and report per-layer geometry.
    Iterate(IterateArgs),
    /// Jacobian norm of one layer (exact, stochastic and/or checked against finite differences).
    Jacobian(JacobianArgs),
    /// Theoretical regime and limits for a parameter point.
    Predict(PredictArgs),
    /// Parameter sweep from a key=value config file.
    Sweep(SweepArgs),
    /// Run the built-in invariant suites.
    Verify(VerifyArgs),
}

/// Inverse temperature, given either as gamma (beta = gamma ln n) or directly.
#[derive(Args, Debug, Clone, Copy)]
#[group(required = true, multiple = false)]
struct ScaleArgs {
    /// Scaling exponent gamma, dimensionless; beta = gamma * ln(n).
    #[arg(long)]
    gamma: Option<f64>,
    /// Inverse temperature beta, dimensionless; overrides the ln(n) scaling.
    #[arg(long)]
    beta: Option<f64>,
}

impl ScaleArgs {
    fn params(self, alpha: f64) -> AttentionParams64 {
        match (self.gamma, self.beta) {
            (Some(g), _) => AttentionParams64::with_gamma(g, alpha),
            (None, Some(b)) => AttentionParams64::with_beta(b, alpha),
            // clap's group makes this unreachable
            (None, None) => AttentionParams64::with_gamma(1.0, alpha),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Simplex,
    Gaussian,
    ThreePhase,
}

#[derive(Args, Debug, Clone)]
struct ThreePhaseArgs {
    /// Cluster exponent tau: |K_i| is about n^tau.
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    /// Lower cluster-size constant: |K_i| >= kappa3 n^tau.
    #[arg(long, default_value_t = 0.1)]
    kappa3: f64,
    /// Upper cluster-size constant: |K_i| <= kappa4 n^tau.
    #[arg(long, default_value_t = 0.12)]
    kappa4: f64,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Generator.
    #[arg(long, value_enum)]
    kind: Kind,
    /// Number of tokens.
    #[arg(long)]
    n: usize,
    /// Ambient dimension; simplex needs d >= n+1, three-phase d >= n+groups+1.
    #[arg(long)]
    d: usize,
    /// Squared token norm (simplex only).
    #[arg(long, default_value_t = 1.0)]
    q: f64,
    /// Cosine: exact for simplex, factor weight for gaussian; three-phase takes four comma-separated bounds rho1,rho2,rho3,rho4.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    rho: Vec<f64>,
    #[command(flatten)]
    three: ThreePhaseArgs,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ForwardArgs {
    /// Input token CSV (header "# n=<n> d=<d>").
    #[arg(long)]
    tokens: PathBuf,
    #[command(flatten)]
    scale: ScaleArgs,
    /// Residual weight alpha, dimensionless.
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Output CSV of x' = ATT(N(X)) + alpha X.
    #[arg(long)]
    out: PathBuf,
    /// JSON sidecar path [default: <out>.json].
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IterateArgs {
    /// Input token CSV.
    #[arg(long)]
    tokens: PathBuf,
    #[command(flatten)]
    scale: ScaleArgs,
    /// Residual weight alpha, dimensionless.
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Number of layers.
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// Output CSV of the final tokens.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON trace with one summary per layer.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also report the top-k singular values of the end-to-end Jacobian (needs n*d <= max-dense-dim).
    #[arg(long)]
    spectrum: Option<usize>,
    /// Largest n*d for which the dense Jacobian is formed.
    #[arg(long, default_value_t = 4096)]
    max_dense_dim: usize,
}

#[derive(Args, Debug)]
struct JacobianArgs {
    /// Input token CSV.
    #[arg(long)]
    tokens: PathBuf,
    #[command(flatten)]
    scale: ScaleArgs,
    /// Residual weight alpha; recorded only, the norm is of the attention part.
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Exact eta = |J|_F^2/(nd). Default when no method is chosen.
    #[arg(long)]
    exact: bool,
    /// Hutchinson estimate with this many Rademacher probes.
    #[arg(long)]
    hutchinson: Option<usize>,
    /// Compare this many random blocks against central differences.
    #[arg(long)]
    fd_check: Option<usize>,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    /// Largest n^2 d^2 accepted by the exact route.
    #[arg(long, default_value_t = 1u64 << 42)]
    max_n2d2: u64,
    /// Output JSON report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Case {
    Simplex,
    ThreePhase,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Configuration family.
    #[arg(long, value_enum)]
    case: Case,
    /// Cosine rho for simplex; rho1,rho2,rho3,rho4 for three-phase.
    #[arg(long, value_delimiter = ',', required = true)]
    rho: Vec<f64>,
    /// Scaling exponent gamma, dimensionless.
    #[arg(long)]
    gamma: f64,
    /// Number of tokens used for the finite-n values.
    #[arg(long, default_value_t = 4096)]
    n: usize,
    /// Ambient dimension for the eta limit [default: n+1].
    #[arg(long)]
    d: Option<usize>,
    /// Squared token norm.
    #[arg(long, default_value_t = 1.0)]
    q: f64,
    /// Residual weight alpha.
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[command(flatten)]
    three: ThreePhaseArgs,
    /// Print the record as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// key=value config file (lists comma-separated).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads [default: available cores]; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides `out` in the config [default: sweep-out].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    All,
    Jacobian,
    Theory,
    Simplex,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Which invariant suite to run.
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    suite: SuiteArg,
    /// Also write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn read_tokens(path: &Path) -> Result<TokenConfig64> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_tokens_csv(BufReader::new(file))
        .with_context(|| format!("cannot parse {}", path.display()))
}

/// Fails early if the output's directory is missing.
fn check_out(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            bail!("output directory {} does not exist", dir.display())
        }
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn three_phase_spec(n: usize, rho: &[f64], t: &ThreePhaseArgs) -> Result<ThreePhaseSpec64> {
    let [rho1, rho2, rho3, rho4] = rho else {
        bail!(
            "three-phase needs --rho rho1,rho2,rho3,rho4 (got {} values)",
            rho.len()
        );
    };
    Ok(ThreePhaseSpec64 {
        n,
        tau: t.tau,
        rho1: *rho1,
        rho2: *rho2,
        rho3: *rho3,
        rho4: *rho4,
        kappa3: t.kappa3,
        kappa4: t.kappa4,
    })
}

fn single_rho(rho: &[f64]) -> Result<f64> {
    match rho {
        [r] => Ok(*r),
        _ => bail!("expected a single --rho value, got {}", rho.len()),
    }
}

fn generate(a: GenerateArgs, seed: u64) -> Result<()> {
    check_out(&a.out)?;
    let cfg = match a.kind {
        Kind::Simplex => make_simplex(&SimplexSpec {
            n: a.n,
            d: a.d,
            q: a.q,
            rho: single_rho(&a.rho)?,
        })?,
        Kind::Gaussian => sample_gaussian_factor(&GaussianFactorSpec {
            n: a.n,
            d: a.d,
            rho: single_rho(&a.rho)?,
            seed,
        })?,
        Kind::ThreePhase => {
            let spec = three_phase_spec(a.n, &a.rho, &a.three)?;
            let cfg = make_three_phase(&spec, a.d, seed)?;
            let report = validate_three_phase(&cfg, &spec);
            if !report.valid {
                bail!(
                    "generated configuration violates its three-phase parameters: {:?}",
                    report.violations
                );
            }
            cfg
        }
    };
    let mut w = create(&a.out)?;
    write_tokens_csv(&cfg, &mut w)?;
    w.flush()?;
    eprintln!(
        "wrote {} tokens in d={} to {}",
        cfg.n(),
        cfg.d(),
        a.out.display()
    );
    Ok(())
}

fn forward(a: ForwardArgs) -> Result<()> {
    check_out(&a.out)?;
    let sidecar = a.sidecar.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".json");
        PathBuf::from(s)
    });
    check_out(&sidecar)?;
    let cfg = read_tokens(&a.tokens)?;
    let params = a.scale.params(a.alpha);
    let out = att_forward(&cfg, &params)?;
    let mut w = create(&a.out)?;
    write_tokens_csv(&out.next_config()?, &mut w)?;
    w.flush()?;
    let row_sums: Vec<f64> = out.weights().rows().into_iter().map(|r| r.sum()).collect();
    let meta = json!({
        "n": cfg.n(),
        "d": cfg.d(),
        "beta": params.beta(cfg.n()),
        "gamma": params.gamma(cfg.n()),
        "alpha": params.alpha,
        "log_z": out.log_z().to_vec(),
        "row_sum_min": row_sums.iter().copied().fold(f64::INFINITY, f64::min),
        "row_sum_max": row_sums.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "row_sum_max_abs_error": out.softmax.max_row_sum_error(),
    });
    write_json(&sidecar, &meta)?;
    Ok(())
}

fn iterate(a: IterateArgs) -> Result<()> {
    for p in a.out.iter().chain(a.trace.iter()) {
        check_out(p)?;
    }
    let cfg = read_tokens(&a.tokens)?;
    let params = a.scale.params(a.alpha);
    let trace = iterate_layers(&cfg, &params, a.layers, |s| {
        let (min_cos, max_cos) = s
            .geometry
            .as_ref()
            .map_or((f64::NAN, f64::NAN), |g| (g.rho1, g.rho2));
        println!(
            "layer {:>3}  cos [{:.6}, {:.6}]  norm [{:.6}, {:.6}]  lambda {}",
            s.layer,
            min_cos,
            max_cos,
            s.min_norm,
            s.max_norm,
            s.lambda.map_or("n/a".to_string(), |l| format!("{l:.6}"))
        );
    })?;
    if let Some(out) = &a.out {
        let mut w = create(out)?;
        write_tokens_csv(&trace.output, &mut w)?;
        w.flush()?;
    }
    let spectrum = match a.spectrum {
        Some(k) => {
            let budget = Budget {
                max_dense_dim: a.max_dense_dim,
                ..Budget::default()
            };
            Some(end_to_end_jacobian(&cfg, &params, a.layers, k, &budget)?)
        }
        None => None,
    };
    if let Some(s) = &spectrum {
        println!(
            "end-to-end mean squared singular value {:.6}",
            s.mean_square
        );
        println!("top singular values {:?}", s.top_singular_values);
    }
    if let Some(path) = &a.trace {
        write_json(
            path,
            &json!({
                "n": cfg.n(),
                "d": cfg.d(),
                "beta": params.beta(cfg.n()),
                "alpha": params.alpha,
                "layers": trace.layers,
                "spectrum": spectrum,
            }),
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct JacobianOut {
    n: usize,
    d: usize,
    gamma: Option<f64>,
    beta: f64,
    alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eta_exact: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eta_hutch: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eta_hutch_se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fd_max_rel_err: Option<f64>,
}

fn jacobian(a: JacobianArgs, seed: u64) -> Result<()> {
    check_out(&a.out)?;
    let cfg = read_tokens(&a.tokens)?;
    let params = a.scale.params(a.alpha);
    let (n, d) = (cfg.n(), cfg.d());
    let exact = a.exact || (a.hutchinson.is_none() && a.fd_check.is_none());
    let budget = Budget {
        max_n2d2: usize::try_from(a.max_n2d2).unwrap_or(usize::MAX),
        ..Budget::default()
    };
    let mut out = JacobianOut {
        n,
        d,
        gamma: params.gamma(n),
        beta: params.beta(n),
        alpha: params.alpha,
        eta_exact: None,
        eta_hutch: None,
        eta_hutch_se: None,
        fd_max_rel_err: None,
    };
    if exact {
        out.eta_exact = frobenius_norm_exact(&cfg, &params, &budget)?.eta_exact;
    }
    if let Some(probes) = a.hutchinson {
        let h = frobenius_norm_hutchinson(&cfg, &params, probes, seed)?.eta_hutchinson;
        out.eta_hutch = h.map(|h| h.eta);
        out.eta_hutch_se = h.and_then(|h| h.eta_se);
    }
    if let Some(pairs) = a.fd_check {
        out.fd_max_rel_err = Some(finite_difference_check(
            &cfg, &params, pairs, seed, a.fd_step,
        )?);
    }
    write_json(&a.out, &out)?;
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let n = a.n;
    let beta = a.gamma * (n as f64).ln();
    let record = match a.case {
        Case::Simplex => {
            let rho = single_rho(&a.rho)?;
            let d = a.d.unwrap_or(n + 1);
            let fin = simplex_finite_n(rho, a.q, a.alpha, beta, n)?;
            let z = z_partition_prediction(&PartitionCase::Simplex { rho }, n, a.gamma)?;
            let eta_limit = simplex_eta_limit(rho, a.q, d, a.gamma)?;
            json!({
                "case": "simplex",
                "rho": rho,
                "gamma": a.gamma,
                "n": n,
                "d": d,
                "q": a.q,
                "alpha": a.alpha,
                "beta": beta,
                "threshold": simplex_threshold(rho),
                "regime": fin.regime,
                "cos_limit": fin.cos_limit,
                "length_limit": fin.length_limit,
                "finite_n_cos": fin.finite_n_cos,
                "finite_n_len": fin.finite_n_len,
                "log_z": fin.log_z,
                "z_dominant": z.dominant,
                "z_prefactor": z.prefactor,
                "z_leading_log": z.leading_log_z,
                "eta_limit": eta_limit,
                "eta_finite_n": if a.alpha == 0.0 { Some(simplex_eta_finite_n(rho, a.q, d, beta, n)) } else { None },
            })
        }
        Case::ThreePhase => {
            let spec = three_phase_spec(n, &a.rho, &a.three)?;
            let verdict = classify_three_phase(&spec, a.gamma)?;
            let z = z_partition_prediction(&PartitionCase::ThreePhase(spec), n, a.gamma).ok();
            json!({
                "case": "three-phase",
                "rho": a.rho,
                "gamma": a.gamma,
                "n": n,
                "tau": spec.tau,
                "regime": verdict.regime,
                "thresholds": three_phase_thresholds(&spec),
                "z_dominant": z.map(|z| z.dominant),
            })
        }
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&record)?);
    } else if let Some(map) = record.as_object() {
        for (k, v) in map {
            println!("{k:>14}: {v}");
        }
    }
    Ok(())
}

fn sweep(a: SweepArgs, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)
        .with_context(|| format!("cannot read {}", a.config.display()))?;
    let mut cfg =
        parse_sweep_config(&text).with_context(|| format!("bad config {}", a.config.display()))?;
    if let Some(s) = seed {
        let k = cfg.grid.seeds.len().max(1) as u64;
        cfg.grid.seeds = (0..k).map(|i| s + i).collect();
    }
    let out = a
        .out
        .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sweep-out"));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            bail!(
                "parent of output directory {} does not exist",
                out.display()
            );
        }
    }
    let workers = a.workers.or(cfg.workers);
    let records = run_sweep_to_dir(&cfg.grid, workers, &out)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    eprintln!(
        "{} records ({} failed) written to {}",
        records.len(),
        failed,
        out.display()
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<bool> {
    if let Some(p) = &a.json {
        check_out(p)?;
    }
    let suite = match a.suite {
        SuiteArg::All => Suite::All,
        SuiteArg::Jacobian => Suite::Jacobian,
        SuiteArg::Theory => Suite::Theory,
        SuiteArg::Simplex => Suite::Simplex,
    };
    let report = run_verify(suite);
    print!("{}", report.render_text());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(report.passed)
}

fn run(cli: Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Generate(a) => generate(a, seed)?,
        Command::Forward(a) => forward(a)?,
        Command::Iterate(a) => iterate(a)?,
        Command::Jacobian(a) => jacobian(a, seed)?,
        Command::Predict(a) => predict(a)?,
        Command::Sweep(a) => sweep(a, cli.seed)?,
        Command::Verify(a) => return verify(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors by itself.
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
