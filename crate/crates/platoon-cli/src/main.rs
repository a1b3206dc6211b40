use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use platoon::scenario::{self, ConfigError, PlotData, ScenarioConfig, ScenarioError};
use platoon::stability::{search_certificate, verify, LmiProblem, SearchBudget, SearchOutcome, DEFAULT_TOL};
use serde::Deserialize;
use serde_json::json;

const EXIT_INVALID: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "platoon", version, about = "Platoon consensus under delay attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its trace, summary and charts.
    Simulate(SimulateArgs),
    /// Parse and cross-validate a scenario config.
    ValidateConfig { path: PathBuf },
    /// Search for a delay-dependent stability certificate.
    StabilityCheck(StabilityArgs),
    /// Redraw the charts from an exported trace.csv.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, conflicts_with = "batch", required_unless_present = "batch")]
    config: Option<PathBuf>,
    /// Output directory. Defaults to the config's `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run several configs in parallel, each into `<out>/<config stem>`.
    #[arg(long, num_args = 1.., requires = "out")]
    batch: Vec<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct StabilityArgs {
    /// Scenario whose nominal topology and attack define the problem.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON file with `psi`, `psi1` (row-major), `U` and `d`.
    #[arg(long)]
    matrices: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    psi: Vec<Vec<f64>>,
    psi1: Vec<Vec<f64>>,
    #[serde(rename = "U")]
    bound: f64,
    #[serde(rename = "d")]
    derivative_bound: f64,
    #[serde(default)]
    seed: u64,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self { code: EXIT_INVALID, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        if e.is_validation() {
            Failure::invalid(e.to_string())
        } else {
            Failure::runtime(e.to_string())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::invalid(e.to_string())
    }
}

fn simulate_one(config_path: &Path, out: Option<&Path>) -> Result<serde_json::Value, Failure> {
    let config = ScenarioConfig::load(config_path)?;
    let dir = match (out, &config.output.dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => return Err(Failure::invalid("no output directory: pass --out or set output.dir")),
    };
    let trace = scenario::run(&config)?;
    let files = scenario::export(&trace, &dir, config.output.csv_stride)?;
    Ok(json!({
        "config": config_path,
        "out": dir,
        "files": files,
        "summary": trace.summary,
    }))
}

fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    if let Some(config) = &args.config {
        let report = simulate_one(config, args.out.as_deref())?;
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        return Ok(());
    }
    let root = args.out.as_deref().expect("clap enforces --out with --batch");
    let results: Vec<(PathBuf, Result<serde_json::Value, Failure>)> = std::thread::scope(|s| {
        let handles: Vec<_> = args
            .batch
            .iter()
            .map(|path| {
                let stem = path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_os_string());
                let dir = root.join(stem);
                (path.clone(), s.spawn(move || simulate_one(path, Some(&dir))))
            })
            .collect();
        handles
            .into_iter()
            .map(|(p, h)| (p, h.join().unwrap_or_else(|_| Err(Failure::runtime("worker panicked")))))
            .collect()
    });
    let mut worst = 0;
    let mut reports = Vec::new();
    for (path, result) in results {
        match result {
            Ok(r) => reports.push(r),
            Err(f) => {
                eprintln!("{}: {}", path.display(), f.message);
                worst = worst.max(f.code);
                reports.push(json!({ "config": path, "error": f.message, "exit_code": f.code }));
            }
        }
    }
    println!("{}", serde_json::to_string_pretty(&reports).expect("report serializes"));
    match worst {
        0 => Ok(()),
        code => Err(Failure { code, message: "one or more batch runs failed".into() }),
    }
}

fn validate_config(path: &Path) -> Result<(), Failure> {
    let config = ScenarioConfig::load(path)?;
    println!(
        "{}: valid ({} vehicles, {} phases, h = {} s, t_end = {} s)",
        path.display(),
        config.model.n,
        config.phases.len(),
        config.integration.h,
        config.integration.t_end
    );
    Ok(())
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, Failure> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Failure::invalid(format!("{name} must be a non-empty square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn stability_check(args: &StabilityArgs) -> Result<(), Failure> {
    let (problem, outcome, source) = if let Some(path) = &args.config {
        let config = ScenarioConfig::load(path)?;
        let (problem, outcome) = scenario::certify_attacked_nominal(&config)
            .ok_or_else(|| Failure::invalid("config has no attack, so the delay bounds are undefined"))?;
        (problem, outcome, path)
    } else {
        let path = args.matrices.as_ref().expect("clap enforces one source");
        let text = std::fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
        let file: MatrixFile =
            serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
        let problem = LmiProblem::new(matrix(&file.psi, "psi")?, matrix(&file.psi1, "psi1")?, file.bound, file.derivative_bound)
            .map_err(|e| Failure::invalid(e.to_string()))?;
        let outcome = search_certificate(&problem, &SearchBudget { seed: file.seed, ..SearchBudget::default() });
        (problem, outcome, path)
    };
    let report = match &outcome {
        SearchOutcome::Certified(cert) => {
            let check = verify(&problem, cert, DEFAULT_TOL).map_err(|e| Failure::runtime(e.to_string()))?;
            if !check.valid {
                return Err(Failure::runtime("search returned a certificate that fails re-verification"));
            }
            json!({
                "source": source,
                "outcome": "certified",
                "U": problem.bound,
                "d": problem.derivative_bound,
                "margin": check.margin,
                "q": rows(&cert.q),
                "s": rows(&cert.s),
                "h": rows(&cert.h),
            })
        }
        SearchOutcome::Inconclusive(r) => json!({
            "source": source,
            "outcome": "inconclusive",
            "U": problem.bound,
            "d": problem.derivative_bound,
            "best_margin": r.best_margin,
            "candidates_tried": r.candidates_tried,
            "note": r.note,
        }),
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn plot(trace: &Path, out: &Path) -> Result<(), Failure> {
    let data = PlotData::read_csv(trace).map_err(|e| Failure::invalid(e.to_string()))?;
    let files = scenario::write_charts(&data, out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors are invalid input; clap's own code 2 would read as a
    // runtime failure.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INVALID) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Simulate(args) => simulate(args),
        Command::ValidateConfig { path } => validate_config(path),
        Command::StabilityCheck(args) => stability_check(args),
        Command::Plot { trace, out } => plot(trace, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
