//! Command-line front end: exact dimension calculators for group and von
//! Neumann algebra expressions, constructions hitting prescribed dimensions,
//! and seeded Monte Carlo experiments.
//!
//! Exit codes: 0 success, 1 parse or input error, 2 rule inapplicable or
//! parameter out of range, 3 non-convergence, 4 config schema error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use freedim::dims::{
    construct_bs, construct_ft, delta0_vn, group_invariants, DimError,
};
use freedim::experiments::{run_experiment, ExperimentKind, ExperimentsError};
use freedim::rational::{parse_decimal, parse_rational};
use freedim::sexpr::{parse_group_expr, parse_vn_expr, resolve_vn_expr};
use freedim::Rational;

#[derive(Parser)]
#[command(name = "freedim", version, about = "Free entropy dimension calculator and random-matrix experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact dimension invariants for an expression tree
    Dim {
        #[command(subcommand)]
        target: DimCmd,
    },
    /// Constructions realizing a prescribed dimension
    Construct {
        #[command(subcommand)]
        what: ConstructCmd,
    },
    /// Seeded Monte Carlo experiments; writes result.json and result.csv
    Simulate {
        /// Experiment kind
        #[arg(value_parser = ["decay", "concentration", "asfree", "polar-compare"])]
        kind: String,
        /// JSON config path
        #[arg(long)]
        config: PathBuf,
        /// Master seed; overrides the config's seed when both are present
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for result files
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DimCmd {
    /// Group expression, e.g. "(amalgam (cyclic 2) (cyclic 3) over trivial)"
    Group {
        #[arg(long, conflicts_with = "file")]
        expr: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// von Neumann algebra expression, e.g. "(amalgam-vn (diffuse) (diffuse) over (hyperfinite d.json))"
    Vn {
        #[arg(long, conflicts_with = "file")]
        expr: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ConstructCmd {
    /// Tensor sequence whose amalgam realizes dimension s in (1, 2)
    Bs {
        /// Target dimension as p/q
        #[arg(long)]
        s: String,
        /// Certification tolerance, p/q or decimal
        #[arg(long)]
        tol: String,
        #[arg(long, default_value_t = 64)]
        max_terms: usize,
        /// Directory for sequence.json and report.json
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corner expression realizing dimension t >= 2
    Ft {
        /// Target dimension as p/q
        #[arg(long)]
        t: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

/// Applicability and range errors exit 2, non-convergence 3, reference and
/// input problems 1.
fn dim_error_code(e: &DimError) -> u8 {
    match e {
        DimError::ConstructNonConvergence { .. } | DimError::ScheduleInfeasible { .. } => 3,
        DimError::Ref { .. } => 1,
        _ => 2,
    }
}

fn experiments_error_code(e: &ExperimentsError) -> u8 {
    match e {
        ExperimentsError::Config { .. } => 4,
        _ => 3,
    }
}

fn read_input(
    expr: Option<String>,
    file: Option<PathBuf>,
) -> Result<(String, Option<PathBuf>), Failure> {
    match (expr, file) {
        (Some(e), None) => Ok((e, None)),
        (None, Some(f)) => {
            let text = std::fs::read_to_string(&f)
                .map_err(|e| fail(1, format!("cannot read {}: {e}", f.display())))?;
            let dir = f.parent().map(Path::to_path_buf);
            Ok((text, dir))
        }
        _ => Err(fail(1, "give exactly one of --expr and --file")),
    }
}

fn parse_rational_arg(name: &str, s: &str) -> Result<Rational, Failure> {
    parse_rational(s)
        .or_else(|_| parse_decimal(s))
        .map_err(|e| fail(1, format!("--{name}: {e}")))
}

fn print_report(v: &serde_json::Value) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    // tolerate a closed pipe on the reading side
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| fail(1, format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| fail(1, format!("cannot write {}: {e}", path.display())))
}

fn cmd_dim_group(expr: Option<String>, file: Option<PathBuf>) -> Result<(), Failure> {
    let (text, _) = read_input(expr, file)?;
    let g = parse_group_expr(&text)
        .map_err(|e| fail(1, format!("parse error at line {}, column {}: {}", e.line, e.column, e.message)))?;
    let inv = group_invariants(&g).map_err(|e| fail(dim_error_code(&e), e.to_string()))?;
    print_report(&inv.to_report());
    Ok(())
}

fn cmd_dim_vn(expr: Option<String>, file: Option<PathBuf>) -> Result<(), Failure> {
    let (text, dir) = read_input(expr, file)?;
    let ast = parse_vn_expr(&text)
        .map_err(|e| fail(1, format!("parse error at line {}, column {}: {}", e.line, e.column, e.message)))?;
    // hyperfinite references resolve relative to the input file's directory
    let base = dir.unwrap_or_else(|| PathBuf::from("."));
    let mut loader = |name: &str| -> Result<String, String> {
        let path = base.join(name);
        std::fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))
    };
    let e = resolve_vn_expr(&ast, &mut loader)
        .map_err(|e| fail(dim_error_code(&e), e.to_string()))?;
    let report = delta0_vn(&e).map_err(|e| fail(dim_error_code(&e), e.to_string()))?;
    print_report(&report.to_report());
    Ok(())
}

fn cmd_construct_bs(
    s: &str,
    tol: &str,
    max_terms: usize,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let s = parse_rational_arg("s", s)?;
    let tol = parse_rational_arg("tol", tol)?;
    let b = construct_bs(&s, &tol, max_terms)
        .map_err(|e| fail(dim_error_code(&e), e.to_string()))?;
    let report = b.to_report();
    if let Some(dir) = out {
        write_out(&dir, "sequence.json", &freedim::dims::HyperfiniteSpec::Sequence(b.sequence.clone()).to_json())?;
        write_out(&dir, "report.json", &serde_json::to_string_pretty(&report).expect("report"))?;
    }
    print_report(&report);
    Ok(())
}

fn cmd_construct_ft(t: &str, out: Option<PathBuf>) -> Result<(), Failure> {
    let t = parse_rational_arg("t", t)?;
    let f = construct_ft(&t).map_err(|e| fail(dim_error_code(&e), e.to_string()))?;
    let report = f.to_report();
    if let Some(dir) = out {
        write_out(&dir, "report.json", &serde_json::to_string_pretty(&report).expect("report"))?;
    }
    print_report(&report);
    Ok(())
}

fn cmd_simulate(
    kind: &str,
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let kind = ExperimentKind::from_name(kind).expect("clap validated the kind");
    let text = std::fs::read_to_string(config)
        .map_err(|e| fail(4, format!("cannot read {}: {e}", config.display())))?;
    let cfg = freedim::experiments::ExperimentConfig::from_json(&text)
        .map_err(|e| fail(experiments_error_code(&e), e.to_string()))?;
    let seed = seed
        .or(cfg.seed)
        .ok_or_else(|| fail(4, "config error at /seed: give --seed or a seed in the config"))?;
    let result =
        run_experiment(kind, &cfg, seed).map_err(|e| fail(experiments_error_code(&e), e.to_string()))?;
    if let Some(dir) = out {
        write_out(&dir, "result.csv", &result.csv())?;
        write_out(
            &dir,
            "result.json",
            &serde_json::to_string_pretty(&result.to_json()).expect("result"),
        )?;
    }
    print_report(&result.to_json());
    Ok(())
}

fn run() -> Result<(), Failure> {
    match Cli::parse().cmd {
        Cmd::Dim { target } => match target {
            DimCmd::Group { expr, file } => cmd_dim_group(expr, file),
            DimCmd::Vn { expr, file } => cmd_dim_vn(expr, file),
        },
        Cmd::Construct { what } => match what {
            ConstructCmd::Bs {
                s,
                tol,
                max_terms,
                out,
            } => cmd_construct_bs(&s, &tol, max_terms, out),
            ConstructCmd::Ft { t, out } => cmd_construct_ft(&t, out),
        },
        Cmd::Simulate {
            kind,
            config,
            seed,
            out,
        } => cmd_simulate(&kind, &config, seed, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
