//! Command-line front end: `estimate`, `simulate` and `check-eif`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::conddens::{DensityConfig, DensityKind};
use crate::data::{load_csv, make_split};
use crate::eif::{Estimand, EstimandKind, LearnerMode};
use crate::error::{Result, VitlError};
use crate::estimators::{estimate, estimate_kfold, EstimateReport, EstimatorConfig, EstimatorKind};
use crate::learners::{LearnerConfig, LearnerKind};
use crate::sim::{run_experiment, DgpSpec, ExperimentConfig, ExperimentResult};
use crate::targeting::{TargetConfig, TolKind};
use crate::verify::{check_eif, EifCheckConfig, EifCheckRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_WARNING: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vitl", version, about = "Variable importance with targeted-learning confidence intervals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate an importance on a CSV file.
    Estimate(EstimateArgs),
    /// Run the coverage and bias simulation.
    Simulate(SimulateArgs),
    /// Check the influence functions against numerical Gateaux derivatives.
    CheckEif(CheckEifArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Regression learner: ridge or knn.
    #[arg(long, default_value = "ridge", env = "VITL_LEARNER")]
    pub learner: String,
    /// Ridge penalty.
    #[arg(long, default_value_t = 1e-6, env = "VITL_PENALTY")]
    pub penalty: f64,
    /// Neighbours for knn (default ceil(sqrt(n_fold))).
    #[arg(long, env = "VITL_KNN_K")]
    pub knn_k: Option<usize>,
    /// Conditional density kind: gaussian or partition.
    #[arg(long, default_value = "gaussian", env = "VITL_DENSITY")]
    pub density: String,
    /// Minimum leaf size for the partition density.
    #[arg(long, default_value_t = 30, env = "VITL_MIN_LEAF")]
    pub min_leaf: usize,
    /// Support points per conditioning value for influence integrals.
    #[arg(long, default_value_t = 256, env = "VITL_M")]
    pub m: usize,
    /// Grid points per axis in each targeting block.
    #[arg(long, default_value_t = 32, env = "VITL_TARGET_M")]
    pub target_m: usize,
    /// Significance level of the Wald interval.
    #[arg(long, default_value_t = 0.05, env = "VITL_ALPHA")]
    pub alpha: f64,
    /// Maximum targeting iterations.
    #[arg(long, default_value_t = 100, env = "VITL_MAX_ITER")]
    pub max_iter: usize,
    /// Targeting stopping rule: standard or strict.
    #[arg(long, default_value = "standard", env = "VITL_TOL")]
    pub tol: String,
    /// Influence function framing: fixed or regression.
    #[arg(long, default_value = "fixed", env = "VITL_EIF_MODE")]
    pub eif_mode: String,
    /// Compute the targeted standard error on the targeting part instead of a third part.
    #[arg(long, env = "VITL_NO_I3")]
    pub no_i3: bool,
    /// Redraw the targeting support every iteration (seeded).
    #[arg(long, env = "VITL_FRESH_DRAWS")]
    pub fresh_draws: bool,
}

impl ModelArgs {
    fn resolve(&self, seed: u64) -> Result<EstimatorConfig> {
        let kind: LearnerKind = self.learner.parse()?;
        let density: DensityKind = self.density.parse()?;
        let tol = match self.tol.as_str() {
            "standard" => TolKind::TmleStandard,
            "strict" => TolKind::Strict,
            other => return Err(VitlError::Parameter(format!("unknown tolerance `{other}` (standard|strict)"))),
        };
        let cfg = EstimatorConfig {
            learner: LearnerConfig { kind, penalty: self.penalty, k: self.knn_k },
            density: DensityConfig { kind: density, min_leaf: self.min_leaf, m: self.m },
            alpha: self.alpha,
            eif_mode: self.eif_mode.parse::<LearnerMode>()?,
            target: TargetConfig { max_iter: self.max_iter, tol, fresh_draws: self.fresh_draws.then_some(seed) },
            target_m: self.target_m,
            use_i3: !self.no_i3,
        };
        if !(self.penalty >= 0.0) {
            return Err(VitlError::Parameter(format!("penalty must be >= 0, got {}", self.penalty)));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn header(&self, out: &mut Vec<(String, String)>) {
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("learner", self.learner.clone());
        push("penalty", format!("{:?}", self.penalty));
        push("knn_k", self.knn_k.map_or("auto".into(), |k| k.to_string()));
        push("density", self.density.clone());
        push("min_leaf", self.min_leaf.to_string());
        push("m", self.m.to_string());
        push("target_m", self.target_m.to_string());
        push("alpha", format!("{:?}", self.alpha));
        push("max_iter", self.max_iter.to_string());
        push("tol", self.tol.clone());
        push("eif_mode", self.eif_mode.clone());
        push("use_i3", (!self.no_i3).to_string());
        push("fresh_draws", self.fresh_draws.to_string());
    }
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    /// Input CSV with a header row.
    #[arg(long, env = "VITL_DATA")]
    pub data: PathBuf,
    /// Response column.
    #[arg(long, env = "VITL_RESPONSE_COL")]
    pub response_col: String,
    /// Covariate whose importance is estimated; every other column becomes Z.
    #[arg(long, env = "VITL_INTEREST_COL")]
    pub interest_col: String,
    /// condperm, loco, margperm, refloss, condperm-loss, loco-loss or margperm-loss.
    #[arg(long, default_value = "condperm", env = "VITL_ESTIMAND")]
    pub estimand: String,
    /// plugin, onestep or tmle.
    #[arg(long, default_value = "tmle", env = "VITL_ESTIMATOR")]
    pub estimator: String,
    /// Number of sample-splitting parts for a single split.
    #[arg(long, default_value_t = 3, env = "VITL_PARTS")]
    pub parts: usize,
    /// Rotate fold roles over K folds instead of a single split.
    #[arg(long, env = "VITL_KFOLD")]
    pub kfold: Option<usize>,
    #[arg(long, default_value_t = 0, env = "VITL_SEED")]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write the report as a CSV row.
    #[arg(long, env = "VITL_OUTPUT")]
    pub output: Option<PathBuf>,
    /// Write the targeting trace as CSV.
    #[arg(long, env = "VITL_TRACE")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Comma-separated correlation grid.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9", env = "VITL_RHO")]
    pub rho: Vec<f64>,
    #[arg(long, default_value_t = 40, env = "VITL_REPS")]
    pub reps: usize,
    #[arg(long, default_value_t = 500, env = "VITL_N")]
    pub n: usize,
    /// Comma-separated estimators.
    #[arg(long, value_delimiter = ',', default_value = "onestep,tmle", env = "VITL_ESTIMATORS")]
    pub estimators: Vec<String>,
    #[arg(long, default_value = "condperm", env = "VITL_ESTIMAND")]
    pub estimand: String,
    #[arg(long, default_value_t = 5.0, env = "VITL_BETA")]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0, env = "VITL_NOISE_SD")]
    pub noise_sd: f64,
    /// Total covariate dimension (X plus Z).
    #[arg(long, default_value_t = 2, env = "VITL_DIM")]
    pub dim: usize,
    #[arg(long, default_value_t = 3, env = "VITL_PARTS")]
    pub parts: usize,
    #[arg(long, default_value_t = 20240, env = "VITL_SEED")]
    pub seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, env = "VITL_THREADS")]
    pub threads: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory for rows.csv, aggregates.csv and plot.svg.
    #[arg(long, default_value = ".", env = "VITL_OUT_DIR")]
    pub out_dir: PathBuf,
    /// Also write an SVG plot of coverage and bias.
    #[arg(long, env = "VITL_PLOT")]
    pub plot: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CheckEifArgs {
    /// Random discrete laws per kind.
    #[arg(long, default_value_t = 100, env = "VITL_TRIALS")]
    pub trials: usize,
    /// Comma-separated kinds (default: all four).
    #[arg(long, value_delimiter = ',', env = "VITL_KINDS")]
    pub kinds: Vec<String>,
    /// fixed or regression.
    #[arg(long, default_value = "fixed", env = "VITL_EIF_MODE")]
    pub eif_mode: String,
    #[arg(long, default_value_t = 20, env = "VITL_MAX_SUPPORT")]
    pub max_support: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5, env = "VITL_STEP")]
    pub step: f64,
    #[arg(long, default_value_t = 2024, env = "VITL_SEED")]
    pub seed: u64,
    /// Write the table as CSV.
    #[arg(long, env = "VITL_OUTPUT")]
    pub output: Option<PathBuf>,
}

fn header_text(command: &str, entries: &[(String, String)]) -> String {
    let mut s = format!("# vitl {command} {}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in entries {
        s.push_str(&format!("# {k} = {v}\n"));
    }
    s
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| VitlError::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_estimate(args: &EstimateArgs, stdout: &mut dyn Write) -> Result<EstimateReport<f64>> {
    let estimand: Estimand = args.estimand.parse()?;
    let kind: EstimatorKind = args.estimator.parse()?;
    let cfg = args.model.resolve(args.seed)?;
    let data = load_csv::<f64>(&args.data, &args.response_col, &args.interest_col)?;
    let report = match args.kfold {
        Some(k) => estimate_kfold(&data, k, estimand, kind, &cfg, args.seed)?,
        None => {
            let plan = make_split(data.n(), args.parts, args.seed)?;
            estimate(&data, &plan, estimand, kind, &cfg, args.seed)?
        }
    };
    let mut entries = vec![
        ("data".to_string(), args.data.display().to_string()),
        ("response_col".to_string(), args.response_col.clone()),
        ("interest_col".to_string(), args.interest_col.clone()),
        ("estimand".to_string(), estimand.to_string()),
        ("estimator".to_string(), kind.to_string()),
        ("scheme".to_string(), report.scheme.to_string()),
        ("parts".to_string(), args.parts.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ];
    args.model.header(&mut entries);
    let header = header_text("estimate", &entries);
    write!(stdout, "{header}{}", report.to_kv())?;
    writeln!(stdout, "degenerate = {}", report.degenerate)?;
    if report.clamped > 0 {
        writeln!(stdout, "clamped_weights = {}", report.clamped)?;
    }
    if let Some(path) = &args.output {
        let mut f = create(path)?;
        write!(f, "{header}{}\n{}\n", EstimateReport::<f64>::csv_header(), report.csv_row())?;
        f.flush()?;
    }
    if let Some(path) = &args.trace {
        let mut f = create(path)?;
        write!(f, "{header}")?;
        let traces: Vec<_> = match &report.trace {
            Some(t) => vec![t],
            None => report.folds.iter().filter_map(|f| f.trace.as_ref()).collect(),
        };
        for t in traces {
            t.write_csv(&mut f)?;
        }
        f.flush()?;
    }
    Ok(report)
}

/// Resolved simulation settings and the header echoed into every output file.
pub fn simulate_config(args: &SimulateArgs) -> Result<(ExperimentConfig, String)> {
    let estimand: Estimand = args.estimand.parse()?;
    let estimators = args.estimators.iter().map(|s| s.parse()).collect::<Result<Vec<EstimatorKind>>>()?;
    let cfg = ExperimentConfig {
        rhos: args.rho.clone(),
        reps: args.reps,
        n: args.n,
        estimators,
        estimand,
        dgp: DgpSpec { beta: args.beta, noise_sd: args.noise_sd, d: args.dim, ..DgpSpec::default() },
        estimator: args.model.resolve(args.seed)?,
        parts: args.parts,
        seed: args.seed,
        threads: args.threads,
    };
    let mut entries = vec![
        ("rho".to_string(), args.rho.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>().join(",")),
        ("reps".to_string(), args.reps.to_string()),
        ("n".to_string(), args.n.to_string()),
        ("estimators".to_string(), args.estimators.join(",")),
        ("estimand".to_string(), estimand.to_string()),
        ("beta".to_string(), format!("{:?}", args.beta)),
        ("noise_sd".to_string(), format!("{:?}", args.noise_sd)),
        ("dim".to_string(), args.dim.to_string()),
        ("parts".to_string(), args.parts.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ];
    args.model.header(&mut entries);
    Ok((cfg, header_text("simulate", &entries)))
}

pub fn cmd_simulate(args: &SimulateArgs, stdout: &mut dyn Write) -> Result<ExperimentResult> {
    let (cfg, header) = simulate_config(args)?;
    let result = run_experiment(&cfg)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let mut rows = create(&args.out_dir.join("rows.csv"))?;
    write!(rows, "{header}")?;
    result.write_rows_csv(&mut rows)?;
    rows.flush()?;
    let mut agg = create(&args.out_dir.join("aggregates.csv"))?;
    write!(agg, "{header}")?;
    result.write_aggregates_csv(&mut agg)?;
    agg.flush()?;
    if args.plot {
        let mut svg = create(&args.out_dir.join("plot.svg"))?;
        write!(svg, "<!--\n{header}-->\n{}", result.svg(cfg.estimator.alpha))?;
        svg.flush()?;
    }
    let mut out = stdout;
    write!(out, "{header}")?;
    result.write_aggregates_csv(&mut out)?;
    Ok(result)
}

fn write_table(rows: &[EifCheckRow], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "kind,trials,max_rel_err,max_mean_abs,tol,pass")?;
    for r in rows {
        writeln!(out, "{},{},{:e},{:e},{:e},{}", r.kind, r.trials, r.max_rel_err, r.max_mean_abs, r.tol, r.pass)?;
    }
    Ok(())
}

pub fn cmd_check_eif(args: &CheckEifArgs, stdout: &mut dyn Write) -> Result<Vec<EifCheckRow>> {
    let kinds = if args.kinds.is_empty() {
        EstimandKind::ALL.to_vec()
    } else {
        args.kinds.iter().map(|k| k.parse()).collect::<Result<Vec<EstimandKind>>>()?
    };
    let cfg = EifCheckConfig {
        trials: args.trials,
        kinds: kinds.clone(),
        mode: args.eif_mode.parse()?,
        max_support: args.max_support,
        step: args.step,
        seed: args.seed,
    };
    if !(args.step > 0.0) {
        return Err(VitlError::Parameter(format!("step must be > 0, got {}", args.step)));
    }
    let rows = check_eif(&cfg)?;
    let entries = vec![
        ("trials".to_string(), args.trials.to_string()),
        ("kinds".to_string(), kinds.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")),
        ("eif_mode".to_string(), args.eif_mode.clone()),
        ("max_support".to_string(), args.max_support.to_string()),
        ("step".to_string(), format!("{:?}", args.step)),
        ("seed".to_string(), args.seed.to_string()),
    ];
    let header = header_text("check-eif", &entries);
    write!(stdout, "{header}")?;
    write_table(&rows, stdout)?;
    if let Some(path) = &args.output {
        let mut f = create(path)?;
        write!(f, "{header}")?;
        write_table(&rows, &mut f)?;
        f.flush()?;
    }
    Ok(rows)
}

/// Parses `args` (including the program name), runs the subcommand and returns the exit code.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(stderr, "{e}") } else { write!(stdout, "{e}") };
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a, stdout).map(|r| {
            if r.warning() {
                let _ = writeln!(stderr, "warning: {}", if r.converged { "degenerate influence values" } else { "targeting did not converge" });
                EXIT_WARNING
            } else {
                EXIT_OK
            }
        }),
        Command::Simulate(a) => cmd_simulate(a, stdout).map(|r| {
            let bad: usize = r.aggregates.iter().map(|a| a.failed + a.nonconverged).sum();
            if bad > 0 {
                let _ = writeln!(stderr, "warning: {bad} repetitions failed or did not converge");
                EXIT_WARNING
            } else {
                EXIT_OK
            }
        }),
        Command::CheckEif(a) => cmd_check_eif(a, stdout).map(|rows| {
            if rows.iter().all(|r| r.pass) {
                EXIT_OK
            } else {
                let _ = writeln!(stderr, "check-eif: at least one kind exceeded its tolerance");
                EXIT_WARNING
            }
        }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let module = match &e {
                VitlError::MissingColumn(_) | VitlError::Ingestion { .. } | VitlError::Csv(_) | VitlError::Io(_) => "data",
                _ => match &cli.command {
                    Command::Estimate(_) => "estimate",
                    Command::Simulate(_) => "simulate",
                    Command::CheckEif(_) => "check-eif",
                },
            };
            let _ = writeln!(stderr, "error [{module}]: {e}");
            EXIT_INPUT
        }
    }
}
