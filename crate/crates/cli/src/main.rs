//! `jkpanel` — split-panel jackknife toolkit.
//!
//! Subcommands:
//! * `design`   — validate a design file; report A, C, diagnostics, weights.
//! * `weights`  — solve combination/variance weights from a design file or a
//!   previously emitted design report (its `A`/`C` matrices).
//! * `infer`    — run jackknife inference on a CSV panel under a design.
//! * `simulate` — run a Monte Carlo study from a JSON config.
//!
//! Machine output (JSON, tables) goes to stdout or `--out`; human-readable
//! summaries go to stderr. Exit codes: 0 success, 1 usage/parse error,
//! 2 invalid design, 3 estimator failure. Set `JKPANEL_LOG` (e.g. `info`,
//! `debug`) to enable logging.

mod data;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand};
use jkpanel_core::design::{
    bias_loading_matrix, design_from_json, validate_matrices, DesignDiagnostics, DesignError,
    LoadedDesign,
};
use jkpanel_core::estimators::BuiltinEstimator;
use jkpanel_core::inference::{run_jackknife, InferenceError, InferenceResult, JackknifeSettings};
use jkpanel_core::linalg::Matrix;
use jkpanel_core::sim::{emit_table, run_study, SimError, StudyConfig, TableFormat};
use jkpanel_core::weights::{solve_weights, WeightError, WeightSolution};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::data::DataError;

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "jkpanel",
    version,
    about = "Split-panel jackknife: bias-corrected estimates, self-normalized t-inference, and Monte Carlo studies",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a design file and report its matrices, diagnostics, and weights
    Design(DesignArgs),
    /// Solve weights from a design file or an emitted design report (A, C)
    Weights(WeightsArgs),
    /// Run jackknife inference on a CSV panel under a design
    Infer(InferArgs),
    /// Run a Monte Carlo study from a JSON config
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DesignArgs {
    /// Design JSON file
    spec: PathBuf,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WeightsArgs {
    /// Design JSON file, or a design report with "A" and "C" matrices
    input: PathBuf,
    /// Number of variance directions q (default: the maximum the design admits)
    #[arg(long)]
    dof: Option<usize>,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Design JSON file
    #[arg(long)]
    design: PathBuf,
    /// Panel CSV: one 0-based index column per axis, then variable columns
    #[arg(long)]
    data: PathBuf,
    /// Estimator name (within_ls, var2, var3, probit2)
    #[arg(long)]
    estimator: String,
    /// Degrees of freedom q (default: the maximum the design admits)
    #[arg(long)]
    dof: Option<usize>,
    /// Significance level of the confidence interval
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Null value for the reported t-statistic
    #[arg(long, default_value_t = 0.0)]
    null: f64,
    /// Write the JSON result here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Study config JSON file
    config: PathBuf,
    /// Override the config's worker count
    #[arg(long)]
    workers: Option<usize>,
    /// Override the config's master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Table format
    #[arg(long, default_value = "md")]
    format: String,
    /// Write the table here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

/// Top-level CLI failure, carrying its exit code class.
#[derive(Debug)]
enum CliError {
    /// Bad invocation or unparseable input (exit 1).
    Usage(String),
    /// The design cannot support the requested computation (exit 2).
    InvalidDesign(String),
    /// An estimator failed on actual data (exit 3).
    Estimator(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::InvalidDesign(msg) | CliError::Estimator(msg) => {
                f.write_str(msg)
            }
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::InvalidDesign(_) => 2,
            CliError::Estimator(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Usage(render_chain(&e))
    }
}

impl From<DesignError> for CliError {
    fn from(e: DesignError) -> Self {
        match e {
            DesignError::Parse(_) => CliError::Usage(e.to_string()),
            other => CliError::InvalidDesign(other.to_string()),
        }
    }
}

impl From<WeightError> for CliError {
    fn from(e: WeightError) -> Self {
        CliError::InvalidDesign(e.to_string())
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::EstimatorFailure { .. }
            | InferenceError::NonFiniteEstimate { .. }
            | InferenceError::ZeroVariance { .. } => CliError::Estimator(render_chain(&e)),
            InferenceError::InvalidAlpha(_) => CliError::Usage(e.to_string()),
            InferenceError::DimensionMismatch(_) | InferenceError::InvalidDesign(_) => {
                CliError::InvalidDesign(e.to_string())
            }
            InferenceError::TDist(_) => CliError::Usage(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            SimError::Design(inner) => inner.into(),
            SimError::Weights(_) => CliError::InvalidDesign(e.to_string()),
            SimError::Replication { .. } => CliError::Estimator(e.to_string()),
        }
    }
}

/// Render an error with its full source chain, innermost last.
fn render_chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut cur = e.source();
    while let Some(src) = cur {
        let srcs = src.to_string();
        if !msg.contains(&srcs) {
            msg.push_str(": ");
            msg.push_str(&srcs);
        }
        cur = src.source();
    }
    msg
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; any
            // other parse problem is a usage error.
            let code = match e.kind() {
                ClapErrorKind::DisplayHelp
                | ClapErrorKind::DisplayVersion
                | ClapErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };

    env_logger::Builder::from_env(env_logger::Env::new().filter("JKPANEL_LOG"))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Design(args) => cmd_design(&args),
        Command::Weights(args) => cmd_weights(&args),
        Command::Infer(args) => cmd_infer(&args),
        Command::Simulate(args) => cmd_simulate(&args),
    };

    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write_output(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display()))),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(content.as_bytes())
                .and_then(|()| lock.flush())
                .map_err(|e| CliError::Usage(format!("cannot write to stdout: {e}")))
        }
    }
}

/// JSON block describing a weight solution; column `l` of `U*` appears as
/// the `l`-th inner vector of `u_star`.
fn weights_json(solution: &WeightSolution) -> serde_json::Value {
    let u_cols: Vec<Vec<f64>> = (0..solution.u_star.cols()).map(|l| solution.u_star.col(l)).collect();
    serde_json::json!({
        "v_star": solution.v_star,
        "u_star": u_cols,
        "variance_factor": solution.variance_factor,
        "q": solution.q,
        "multipliers": solution.multipliers,
        "residuals": solution.residuals,
    })
}

/// Fixed-width numeric table for stderr display.
fn format_matrix(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        out.push_str("  ");
        for j in 0..m.cols() {
            out.push_str(&format!("{:>12.6}", m.get(i, j)));
            if j + 1 < m.cols() {
                out.push(' ');
            }
        }
        out.push('\n');
    }
    out
}

fn format_vector(v: &[f64]) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("({})", cells.join(", "))
}

/// Human-readable diagnostics block for stderr.
fn describe_diagnostics(diag: &DesignDiagnostics) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "diagnostics: rank(A) = {} (R = {}), q_max = {}, variance factor = {:.6}\n",
        diag.rank_a, diag.bias_term_count, diag.q_max, diag.min_variance_factor
    ));
    if diag.is_valid() {
        out.push_str("design is valid\n");
    } else {
        out.push_str("design is INVALID:\n");
        for reason in diag.failure_reasons() {
            out.push_str(&format!("  - {reason}\n"));
        }
    }
    out
}

/// Load, validate, and solve a design file: returns everything the
/// `design`/`infer` paths need. Invalid designs surface as `InvalidDesign`
/// with every failure reason joined.
struct SolvedDesign {
    loaded: LoadedDesign,
    a: Matrix,
    c: Matrix,
    diagnostics: DesignDiagnostics,
    weights: Result<WeightSolution, WeightError>,
}

fn load_and_solve(path: &Path, dof: Option<usize>) -> Result<SolvedDesign, CliError> {
    let text = read_file(path)?;
    let loaded = design_from_json(&text)?;
    let a = bias_loading_matrix(&loaded.design);
    let c = loaded.effective_covariance();
    let diagnostics = validate_matrices(&a, &c, loaded.design.r());
    let weights = solve_weights(&a, &c, dof);
    log::info!(
        "loaded design {}: dims {:?}, m = {}, R = {}, q_max = {}",
        path.display(),
        loaded.design.shape().dims(),
        loaded.design.m(),
        loaded.design.r(),
        diagnostics.q_max
    );
    Ok(SolvedDesign { loaded, a, c, diagnostics, weights })
}

// ---------------------------------------------------------------------------
// design
// ---------------------------------------------------------------------------

fn cmd_design(args: &DesignArgs) -> Result<i32, CliError> {
    let solved = load_and_solve(&args.spec, None)?;
    let design = &solved.loaded.design;
    let valid = solved.diagnostics.is_valid();
    let reasons = solved.diagnostics.failure_reasons();

    let weights_block = match (&solved.weights, valid) {
        (Ok(sol), true) => weights_json(sol),
        _ => serde_json::Value::Null,
    };
    let report = serde_json::json!({
        "dims": design.shape().dims(),
        "m": design.m(),
        "r": design.r(),
        "A": solved.a.to_nested(),
        "C": solved.c.to_nested(),
        "diagnostics": solved.diagnostics,
        "valid": valid,
        "failure_reasons": reasons,
        "weights": weights_block,
    });
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Usage(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    write_output(args.out.as_deref(), &text)?;

    // Human-readable tables on stderr.
    eprintln!("design: dims {:?}, m = {} subsamples, R = {} bias terms", design.shape().dims(), design.m(), design.r());
    eprintln!("bias loadings A ({}x{}):", solved.a.rows(), solved.a.cols());
    eprint!("{}", format_matrix(&solved.a));
    eprintln!("overlap covariance C ({0}x{0}):", solved.c.rows());
    eprint!("{}", format_matrix(&solved.c));
    eprint!("{}", describe_diagnostics(&solved.diagnostics));
    if valid {
        if let Ok(sol) = &solved.weights {
            eprintln!("v* = {}", format_vector(&sol.v_star));
            for l in 0..sol.u_star.cols() {
                eprintln!("u*_{} = {}", l + 1, format_vector(&sol.u_star.col(l)));
            }
            eprintln!(
                "variance factor = {:.6}, q = {}, max condition residual = {:.3e}",
                sol.variance_factor,
                sol.q,
                sol.residuals.max()
            );
        }
        Ok(0)
    } else {
        for reason in solved.diagnostics.failure_reasons() {
            eprintln!("error: {reason}");
        }
        Ok(2)
    }
}

// ---------------------------------------------------------------------------
// weights
// ---------------------------------------------------------------------------

/// Matrices accepted by the `weights` subcommand: either a raw design file
/// (solved through the design pipeline) or an emitted design report whose
/// `A`/`C` entries are used verbatim.
fn weights_input(path: &Path) -> Result<(Matrix, Matrix, usize), CliError> {
    let text = read_file(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: malformed JSON: {e}", path.display())))?;

    let nested = |key: &str| -> Result<Matrix, CliError> {
        let rows: Vec<Vec<f64>> = serde_json::from_value(value[key].clone())
            .map_err(|e| CliError::Usage(format!("{}: bad {key} matrix: {e}", path.display())))?;
        Matrix::from_nested(&rows)
            .map_err(|e| CliError::Usage(format!("{}: bad {key} matrix: {e}", path.display())))
    };

    if value.get("A").is_some() && value.get("C").is_some() {
        let a = nested("A")?;
        let c = nested("C")?;
        let r = match value.get("r") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| CliError::Usage(format!("{}: bad r: {e}", path.display())))?,
            None => a.cols(),
        };
        Ok((a, c, r))
    } else if value.get("dims").is_some() {
        let loaded = design_from_json(&text)?;
        let a = bias_loading_matrix(&loaded.design);
        let c = loaded.effective_covariance();
        let r = loaded.design.r();
        Ok((a, c, r))
    } else {
        Err(CliError::Usage(format!(
            "{}: expected a design file (with \"dims\") or a design report (with \"A\" and \"C\")",
            path.display()
        )))
    }
}

fn cmd_weights(args: &WeightsArgs) -> Result<i32, CliError> {
    let (a, c, r) = weights_input(&args.input)?;
    let diagnostics = validate_matrices(&a, &c, r);
    if !diagnostics.is_valid() {
        return Err(CliError::InvalidDesign(diagnostics.failure_reasons().join("; ")));
    }
    let solution = solve_weights(&a, &c, args.dof)?;

    let report = serde_json::json!({
        "m": a.rows(),
        "r": r,
        "diagnostics": diagnostics,
        "weights": weights_json(&solution),
    });
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Usage(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    write_output(args.out.as_deref(), &text)?;

    eprintln!("v* = {}", format_vector(&solution.v_star));
    for l in 0..solution.u_star.cols() {
        eprintln!("u*_{} = {}", l + 1, format_vector(&solution.u_star.col(l)));
    }
    eprintln!(
        "variance factor = {:.6}, q = {}, max condition residual = {:.3e}",
        solution.variance_factor,
        solution.q,
        solution.residuals.max()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

fn describe_result(result: &InferenceResult) -> String {
    let level = (1.0 - result.alpha) * 100.0;
    let p = match &result.p_values {
        Some(p) => format!("{:.6}", p.two_sided.p),
        None => "n/a".to_string(),
    };
    format!(
        "φ̃ = {:.6}, SE = {:.6}, {level:.0}% CI = [{:.6}, {:.6}], p = {p}",
        result.phi_tilde, result.sigma_tilde, result.ci_lower, result.ci_upper
    )
}

fn cmd_infer(args: &InferArgs) -> Result<i32, CliError> {
    let estimator = BuiltinEstimator::from_name(&args.estimator).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown estimator {:?}; available: {}",
            args.estimator,
            BuiltinEstimator::names().join(", ")
        ))
    })?;
    let solved = load_and_solve(&args.design, args.dof)?;
    if !solved.diagnostics.is_valid() {
        return Err(CliError::InvalidDesign(solved.diagnostics.failure_reasons().join("; ")));
    }
    let weights = solved.weights?;

    let k = solved.loaded.design.shape().k();
    let dataset = data::load_panel_csv(&args.data, k)?;
    log::info!(
        "loaded panel {}: dims {:?}, variables {:?}",
        args.data.display(),
        dataset.shape().dims(),
        dataset.variable_names()
    );

    let settings = JackknifeSettings { q: args.dof, phi0: args.null, alpha: args.alpha };
    let result =
        run_jackknife(&dataset, &solved.loaded.design, &estimator, &settings, Some(&weights))?;

    let mut text = serde_json::to_string_pretty(&result)
        .map_err(|e| CliError::Usage(format!("cannot serialize result: {e}")))?;
    text.push('\n');
    write_output(args.out.as_deref(), &text)?;

    eprintln!("{}", describe_result(&result));
    if result.degenerate_variance {
        eprintln!(
            "warning: jackknife variance is numerically zero; the interval collapses to the \
             point estimate and no t-statistic is reported"
        );
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(args: &SimulateArgs) -> Result<i32, CliError> {
    let format: TableFormat = args.format.parse().map_err(CliError::Usage)?;
    let text = read_file(&args.config)?;
    let mut config = StudyConfig::from_json(&text)?;
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    log::info!(
        "study: dgp {:?}, phi = {}, dims {:?}, {} designs, {} replications, seed {}, {} workers",
        config.dgp,
        config.phi,
        config.dims,
        config.designs.len(),
        config.replications,
        config.seed,
        config.workers
    );

    let start = std::time::Instant::now();
    let table = run_study(&config)?;
    let elapsed = start.elapsed();

    let output = emit_table(&table, format);
    write_output(args.out.as_deref(), &output)?;

    eprintln!(
        "{} replications × {} designs in {:.2}s (seed {}, {} worker{})",
        config.replications,
        table.rows.len(),
        elapsed.as_secs_f64(),
        config.seed,
        config.workers,
        if config.workers == 1 { "" } else { "s" }
    );
    Ok(0)
}
