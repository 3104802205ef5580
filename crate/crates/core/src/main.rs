use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qrlong::io::{
    fit_report, load_csv, parse_methods, parse_reals, parse_taus, run_simulate_command, FitCommandSpec, ReportDocument,
    SimulateOptions, DEFAULT_PRECISION,
};
use qrlong::{Error, GammaMode, Result};

/// Weighted quantile regression for longitudinal data.
#[derive(Parser)]
#[command(name = "qrlong", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit WI, PQR or AQR to a long-format CSV file.
    Fit(FitArgs),
    /// Run a seeded Monte Carlo study.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV with one row per observation.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    response: String,
    /// Subject identifier column.
    #[arg(long)]
    id: String,
    /// Comma-separated covariate columns.
    #[arg(long, default_value = "")]
    covariates: String,
    /// Product term `a:b`; may be repeated.
    #[arg(long = "interaction")]
    interactions: Vec<String>,
    /// Comma-separated quantile levels.
    #[arg(long, default_value = "0.5")]
    tau: String,
    /// Comma-separated methods among wi, pqr, aqr.
    #[arg(long, default_value = "pqr")]
    method: String,
    /// Sparsity weighting: hk or identity.
    #[arg(long, default_value = "hk")]
    gamma: String,
    #[arg(long)]
    no_intercept: bool,
    /// Output CSV path; the aligned summary always goes to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Significant digits for numeric output.
    #[arg(long, default_value_t = DEFAULT_PRECISION)]
    precision: usize,
}

#[derive(Args)]
struct SimulateArgs {
    /// File of `key = value` lines; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Error distribution: normal, chisq or t.
    #[arg(long)]
    case: Option<String>,
    /// Comma-separated AR(1) parameters.
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    taus: Option<String>,
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PRECISION)]
    precision: usize,
}

fn check_precision(p: usize) -> Result<usize> {
    if (1..=17).contains(&p) {
        Ok(p)
    } else {
        Err(Error::Usage(format!("precision must be between 1 and 17, got {p}")))
    }
}

fn emit(doc: &ReportDocument, out: Option<&PathBuf>, precision: usize) -> Result<()> {
    if let Some(path) = out {
        fs::write(path, doc.to_csv(precision)?)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    print!("{}", doc.summary_text(precision));
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let precision = check_precision(args.precision)?;
    let interactions = args
        .interactions
        .iter()
        .map(|s| {
            s.split_once(':')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .filter(|(a, b)| !a.is_empty() && !b.is_empty())
                .ok_or_else(|| Error::Usage(format!("interaction `{s}` must look like a:b")))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = FitCommandSpec {
        covariates: args
            .covariates
            .split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(String::from)
            .collect(),
        interactions,
        intercept: !args.no_intercept,
        taus: parse_taus(&args.tau)?,
        methods: parse_methods(&args.method)?,
        gamma_mode: args.gamma.parse::<GammaMode>()?,
        output: args.out.clone(),
        ..FitCommandSpec::new(args.data, args.response, args.id)
    };
    spec.validate()?;
    let loaded = load_csv(&spec.input, &spec)?;
    if loaded.dropped_rows > 0 {
        eprintln!(
            "warning: dropped {} row(s) with missing or non-numeric fields",
            loaded.dropped_rows
        );
    }
    let doc = fit_report(&loaded, &spec)?;
    emit(&doc, spec.output.as_ref(), precision)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let precision = check_precision(args.precision)?;
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
            SimulateOptions::from_config_str(&text)?
        }
        None => SimulateOptions::default(),
    };
    let flags = SimulateOptions {
        case: args.case.as_deref().map(str::parse).transpose()?,
        rhos: args.rho.as_deref().map(|s| parse_reals(s, "rho")).transpose()?,
        m: args.m,
        n: args.n,
        replications: args.reps,
        taus: args.taus.as_deref().map(parse_taus).transpose()?,
        methods: args.methods.as_deref().map(parse_methods).transpose()?,
        seed: args.seed,
        gamma: args.gamma.as_deref().map(str::parse).transpose()?,
        beta: None,
    };
    let settings = file.overlay(flags).resolve()?;
    let doc = run_simulate_command(&settings)?;
    emit(&doc, args.out.as_ref(), precision)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Fit(args) => fit(args),
        Command::Simulate(args) => simulate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
