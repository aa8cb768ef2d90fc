//! Command-line surface: dataset generation, cycle statistics, detection,
//! weak recovery (walks and BP) and the Monte Carlo experiment driver.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure
//! (divergence, infeasibility), 3 cap violation. All randomness derives
//! from --seed; outputs are byte-identical for any --threads value.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlcsbm::bp::{bp_estimate, run_bp, BpConfig, BpError, BpInit};
use mlcsbm::cycle_stats::{detection_test, report, CycleStatError};
use mlcsbm::factor_graph::{Caps, FactorGraphError, WedgeComposition};
use mlcsbm::harness::{
    run_moment_suite, run_power_curve, write_curve_csv, write_moments_csv, ExperimentConfig,
    HarnessError, Method,
};
use mlcsbm::model::{sample_dataset, Dataset, ModelError, ModelParams};
use mlcsbm::rng::SeedTree;
use mlcsbm::saw_recovery::{
    overlap, pilot_delta, weak_recovery_pipeline, RecoveryError, RecoveryResult, SigmaMode,
};
use mlcsbm::storage::{load_dataset, save_dataset, StorageError};

#[derive(Parser)]
#[command(name = "mlcsbm", version, about = "Multi-layer contextual SBM toolkit")]
struct Cli {
    /// Worker threads (default: all cores). Outputs never depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset and write it as a dataset directory.
    Generate(GenerateArgs),
    /// Compute one cycle statistic with its limiting moments.
    CycleStats(CycleStatsArgs),
    /// Run the cycle-statistic detection test.
    Detect(DetectArgs),
    /// Weak recovery via self-avoiding walks and the PSD program.
    RecoverSaw(RecoverSawArgs),
    /// Weak recovery via linearized belief propagation.
    RecoverBp(RecoverBpArgs),
    /// Monte Carlo power/overlap curve over an effective-SNR grid.
    Experiment(ExperimentArgs),
    /// Compare empirical cycle-statistic moments with the formulas.
    VerifyMoments(VerifyMomentsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    /// Number of layers; must match the lambda and d lists.
    #[arg(long)]
    m: usize,
    /// Per-layer SNR, comma separated.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long)]
    mu: f64,
    /// Per-layer average degree, comma separated.
    #[arg(long, value_delimiter = ',')]
    d: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CycleStatsArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Layer wedge counts k_1,...,k_m.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Covariate wedge count.
    #[arg(long)]
    ell: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k_total: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverSawArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long)]
    ell: usize,
    /// Program margin; estimated from pilot replicas when omitted.
    #[arg(long)]
    delta: Option<f64>,
    /// Pilot replicas for the margin estimate.
    #[arg(long, default_value_t = 8)]
    pilot: usize,
    /// Walks sampled per pair; exact averaging when omitted.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverBpArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 50)]
    tmax: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for recovery.json and trace.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 450)]
    p: usize,
    /// Per-layer average degree, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![3.0, 3.0, 3.0])]
    d: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    grid_min: f64,
    #[arg(long, default_value_t = 4.0)]
    grid_max: f64,
    #[arg(long, default_value_t = 10)]
    grid_points: usize,
    /// Draw the grid uniformly at random instead of equally spaced.
    #[arg(long, default_value_t = false)]
    random_grid: bool,
    /// SNR shares per channel (m+1 values summing to 1); uniform when omitted.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    replicas: usize,
    /// Any of: bp, cycle-test, saw.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["bp".to_string()])]
    methods: Vec<String>,
    #[arg(long, default_value_t = 50)]
    tmax: usize,
    #[arg(long, default_value_t = 4)]
    k_total: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_delimiter = ',')]
    saw_k: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    saw_ell: usize,
    #[arg(long, default_value_t = 0.05)]
    saw_delta: f64,
    #[arg(long)]
    saw_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyMomentsArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    m: usize,
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long)]
    mu: f64,
    #[arg(long, value_delimiter = ',')]
    d: Vec<f64>,
    /// Composition "k1,...,km;ell"; repeatable.
    #[arg(long = "comp", required = true)]
    comps: Vec<String>,
    #[arg(long, default_value_t = 200)]
    replicas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum AppError {
    Usage(String),
    Numerical(String),
    Cap(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Numerical(_) => 2,
            AppError::Cap(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Usage(s) | AppError::Numerical(s) | AppError::Cap(s) => s,
        }
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        AppError::Usage(e.to_string())
    }
}

impl From<StorageError> for AppError {
    fn from(e: StorageError) -> Self {
        AppError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Usage(e.to_string())
    }
}

impl From<csv::Error> for AppError {
    fn from(e: csv::Error) -> Self {
        AppError::Usage(e.to_string())
    }
}

impl From<FactorGraphError> for AppError {
    fn from(e: FactorGraphError) -> Self {
        match e {
            FactorGraphError::CapExceeded { .. } => AppError::Cap(e.to_string()),
            _ => AppError::Usage(e.to_string()),
        }
    }
}

impl From<CycleStatError> for AppError {
    fn from(e: CycleStatError) -> Self {
        match e {
            CycleStatError::Cap(inner) => inner.into(),
            CycleStatError::TruncationTooDeep { .. } => AppError::Cap(e.to_string()),
            CycleStatError::ZeroSnr | CycleStatError::BadAlpha(_) => {
                AppError::Usage(e.to_string())
            }
        }
    }
}

impl From<RecoveryError> for AppError {
    fn from(e: RecoveryError) -> Self {
        match e {
            RecoveryError::Infeasible { .. } | RecoveryError::FactorizationFailed => {
                AppError::Numerical(e.to_string())
            }
            RecoveryError::TooManyCovariateWedges(_) => AppError::Cap(e.to_string()),
            RecoveryError::FactorGraph(inner) => inner.into(),
            _ => AppError::Usage(e.to_string()),
        }
    }
}

impl From<BpError> for AppError {
    fn from(e: BpError) -> Self {
        match e {
            BpError::AtanhDomain(_) => AppError::Usage(e.to_string()),
            _ => AppError::Numerical(e.to_string()),
        }
    }
}

impl From<HarnessError> for AppError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::CycleStat(inner) => inner.into(),
            _ => AppError::Usage(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success codes.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<(), AppError> {
    match command {
        Command::Generate(args) => generate(args),
        Command::CycleStats(args) => cycle_stats(args),
        Command::Detect(args) => detect(args),
        Command::RecoverSaw(args) => recover_saw(args),
        Command::RecoverBp(args) => recover_bp(args),
        Command::Experiment(args) => experiment(args),
        Command::VerifyMoments(args) => verify_moments(args),
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), AppError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n")?;
    Ok(())
}

fn load(data: &Path) -> Result<Dataset, AppError> {
    Ok(load_dataset(data)?)
}

fn generate(args: GenerateArgs) -> Result<(), AppError> {
    if args.lambda.len() != args.m || args.d.len() != args.m {
        return Err(AppError::Usage(format!(
            "--m {} does not match --lambda ({}) / --d ({})",
            args.m,
            args.lambda.len(),
            args.d.len()
        )));
    }
    let params = ModelParams::new(args.lambda, args.mu, args.d, args.n, args.p)?;
    let ds = sample_dataset(&params, args.seed);
    save_dataset(&ds, &args.out)?;
    eprintln!("wrote dataset to {}", args.out.display());
    Ok(())
}

fn cycle_stats(args: CycleStatsArgs) -> Result<(), AppError> {
    let ds = load(&args.data)?;
    let comp = WedgeComposition::new(args.k, args.ell);
    let rep = report(&ds, &comp, &ds.params, &Caps::default())?;
    write_json(&rep, &args.out)?;
    eprintln!("y = {} (score {:.3})", rep.y, rep.score);
    Ok(())
}

fn detect(args: DetectArgs) -> Result<(), AppError> {
    let ds = load(&args.data)?;
    let out = detection_test(&ds, &ds.params, args.k_total, args.alpha, &Caps::default())?;
    write_json(&out, &args.out)?;
    eprintln!("reject = {}, score = {:.3}, comp = {}", out.reject, out.score, out.comp);
    Ok(())
}

fn recover_saw(args: RecoverSawArgs) -> Result<(), AppError> {
    let ds = load(&args.data)?;
    let comp = WedgeComposition::new(args.k, args.ell);
    let caps = Caps::default();
    let mode = match args.samples {
        Some(k) => SigmaMode::Sampled(k),
        None => SigmaMode::Exact,
    };
    let tree = SeedTree::from_seed(args.seed);
    let delta = match args.delta {
        Some(d) => d,
        None => pilot_delta(&ds.params, &comp, mode, args.pilot, &caps, &tree.child("pilot"))?,
    };
    let res = weak_recovery_pipeline(&ds, &comp, delta, mode, &caps, &tree.child("recover"))?;
    write_json(&res, &args.out)?;
    eprintln!(
        "overlap = {:.4}, delta = {:.4}, iterations = {}",
        res.overlap.unwrap_or(f64::NAN),
        delta,
        res.iterations
    );
    Ok(())
}

fn recover_bp(args: RecoverBpArgs) -> Result<(), AppError> {
    let ds = load(&args.data)?;
    let config = BpConfig { t_max: args.tmax, init: BpInit::Random, seed: args.seed };
    let run = run_bp(&ds, &config)?;
    let est = bp_estimate(&run.state);
    let ov = overlap(&est, &ds.sigma).ok();
    let res = RecoveryResult {
        sigma_hat: est.0,
        overlap: ov,
        delta_used: None,
        comp: None,
        mode: "bp".to_string(),
        iterations: args.tmax,
    };
    fs::create_dir_all(&args.out)?;
    write_json(&res, &args.out.join("recovery.json"))?;
    let mut w = csv::Writer::from_path(args.out.join("trace.csv")).map_err(AppError::from)?;
    w.write_record(["t", "eta_norm"]).map_err(AppError::from)?;
    for (t, norm) in run.trace.iter().enumerate() {
        w.write_record([t.to_string(), norm.to_string()]).map_err(AppError::from)?;
    }
    w.flush()?;
    eprintln!("overlap = {:.4}", ov.unwrap_or(f64::NAN));
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<(), AppError> {
    let m = args.d.len();
    let ratios = match args.ratios {
        Some(r) => r,
        None => vec![1.0 / (m + 1) as f64; m + 1],
    };
    let snr_grid = if args.random_grid {
        use rand::Rng;
        let mut rng = SeedTree::from_seed(args.seed).child("grid-draw").rng();
        let mut g: Vec<f64> =
            (0..args.grid_points).map(|_| rng.gen_range(args.grid_min..args.grid_max)).collect();
        g.sort_by(f64::total_cmp);
        g
    } else if args.grid_points == 1 {
        vec![args.grid_min]
    } else {
        let step = (args.grid_max - args.grid_min) / (args.grid_points - 1) as f64;
        (0..args.grid_points).map(|i| args.grid_min + step * i as f64).collect()
    };

    let mut methods = Vec::new();
    for name in &args.methods {
        match name.as_str() {
            "bp" => methods.push(Method::Bp { t_max: args.tmax }),
            "cycle-test" => {
                methods.push(Method::CycleTest { k_total: args.k_total, alpha: args.alpha })
            }
            "saw" => {
                let k = args
                    .saw_k
                    .clone()
                    .ok_or_else(|| AppError::Usage("--saw-k is required for saw".into()))?;
                let mode = match args.saw_samples {
                    Some(s) => SigmaMode::Sampled(s),
                    None => SigmaMode::Exact,
                };
                methods.push(Method::Saw {
                    comp: WedgeComposition::new(k, args.saw_ell),
                    delta: args.saw_delta,
                    mode,
                });
            }
            other => return Err(AppError::Usage(format!("unknown method {other:?}"))),
        }
    }

    let config = ExperimentConfig {
        n: args.n,
        p: args.p,
        d: args.d,
        snr_grid,
        ratios,
        replicas: args.replicas,
        seed: args.seed,
        methods,
        caps: Caps::default(),
    };
    let points = run_power_curve(&config)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file = fs::File::create(&args.out)?;
    write_curve_csv(&points, file)?;
    eprintln!("wrote {} rows to {}", points.len(), args.out.display());
    Ok(())
}

fn parse_comp(text: &str) -> Result<WedgeComposition, AppError> {
    let bad = || AppError::Usage(format!("bad composition {text:?}; expected \"k1,...,km;ell\""));
    let (ks, ell) = text.split_once(';').ok_or_else(bad)?;
    let k: Vec<usize> = ks
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let ell: usize = ell.trim().parse().map_err(|_| bad())?;
    Ok(WedgeComposition::new(k, ell))
}

fn verify_moments(args: VerifyMomentsArgs) -> Result<(), AppError> {
    if args.lambda.len() != args.m || args.d.len() != args.m {
        return Err(AppError::Usage("--m does not match --lambda / --d".into()));
    }
    let params = ModelParams::new(args.lambda, args.mu, args.d, args.n, args.p)?;
    let comps: Vec<WedgeComposition> =
        args.comps.iter().map(|t| parse_comp(t)).collect::<Result<_, _>>()?;
    for comp in &comps {
        if comp.k.len() != args.m {
            return Err(AppError::Usage(format!(
                "composition {comp} does not have {} layer slots",
                args.m
            )));
        }
    }
    let rows = run_moment_suite(&params, &comps, args.replicas, args.seed, &Caps::default())?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file = fs::File::create(&args.out)?;
    write_moments_csv(&rows, file)?;
    for row in &rows {
        eprintln!(
            "{}: mean {:.4} vs {:.4} (z = {:+.2}{})",
            row.comp,
            row.emp_mean,
            row.theo_mean,
            row.z_mean,
            if row.flagged { ", FLAGGED" } else { "" }
        );
    }
    Ok(())
}
