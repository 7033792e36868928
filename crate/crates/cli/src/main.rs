use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use horde_core::data::{
    gen_synthetic_dataset, split_holdout, BetaParams, DatasetSpec, Manifest, ScenarioKind, ScenarioSummary,
};
use horde_core::harness::{execute, Report, RunConfig, Workload};
use horde_core::prototypes::{EstimationHeuristic, EstimationKind};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "horde", version, about = "Class-incremental learning with repetition on toy streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stream manifest.
    Gen(GenArgs),
    /// Run methods over a stream and write per-run result files.
    Run(RunArgs),
    /// Aggregate result files into summary and accuracy-curve CSVs.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// cil, efcir-u or efcir-b.
    #[arg(long)]
    kind: ScenarioKind,
    /// Number of dataset classes.
    #[arg(long, default_value_t = 20)]
    classes: usize,
    /// Classes in the initial task; defaults to half the classes.
    #[arg(long)]
    initial: Option<usize>,
    /// Number of tasks after the initial one.
    #[arg(long)]
    tasks: usize,
    /// Classes per task of a class-incremental stream.
    #[arg(long, default_value_t = 2)]
    per_task: usize,
    /// Samples per incremental task of a repetition stream.
    #[arg(long, default_value_t = 400)]
    budget: usize,
    /// Repetition probability of every class (efcir-u).
    #[arg(long, default_value_t = 0.15)]
    p: f64,
    #[arg(long, default_value_t = 3.5)]
    alpha: f64,
    #[arg(long, default_value_t = 20.0)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the synthetic dataset.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 100)]
    samples_per_class: usize,
    /// Manifest path; defaults to `<output root>/manifest-<kind>-seed<seed>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; built-in defaults otherwise.
    config: Option<PathBuf>,
    /// Method to run; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
    /// Run every method with masked cross-entropy.
    #[arg(long)]
    mask_ce: bool,
    #[arg(long, value_delimiter = ',', alias = "seed")]
    seeds: Vec<u64>,
    /// Use this manifest instead of generating streams.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    kind: Option<ScenarioKind>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Pseudo-feature estimate for unknown prototype segments: zeros, random or original.
    #[arg(long)]
    heuristic: Option<EstimationKind>,
    #[arg(long)]
    random_scale: Option<f64>,
    /// Maximum number of feature extractors.
    #[arg(long)]
    fe_budget: Option<usize>,
    /// Error-rate threshold for horde_c.
    #[arg(long)]
    tau_e: Option<f64>,
    /// Worker threads for (method, seed) jobs.
    #[arg(long)]
    threads: Option<usize>,
    /// Results directory; defaults to the output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding result files.
    dir: PathBuf,
    /// Where to write the CSVs; defaults to the results directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Root for outputs when `--out` is absent.
fn output_root() -> PathBuf {
    std::env::var_os("HORDE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("results"))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Failure::Usage(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), Failure> {
    let initial = args.initial.unwrap_or(args.classes / 2);
    let mut cfg = RunConfig::default();
    cfg.dataset = DatasetSpec {
        num_classes: args.classes,
        samples_per_class: args.samples_per_class,
        ..DatasetSpec::toy(args.data_seed)
    };
    cfg.scenario.kind = args.kind;
    cfg.scenario.initial_classes = initial;
    cfg.scenario.tasks = args.tasks;
    cfg.scenario.classes_per_task = args.per_task;
    cfg.scenario.budget = args.budget;
    cfg.scenario.p = args.p;
    cfg.scenario.beta = BetaParams {
        alpha: args.alpha,
        beta: args.beta,
    };
    cfg.dataset.validate().map_err(Failure::usage)?;
    let dataset = gen_synthetic_dataset(&cfg.dataset).map_err(Failure::runtime)?;
    let split = split_holdout(&dataset, cfg.holdout_frac, cfg.dataset.seed).map_err(Failure::runtime)?;
    let scenario = cfg.scenario.generate(&split.train, args.seed).map_err(Failure::usage)?;
    let summary = ScenarioSummary::new(&scenario, Some(&split.train));
    let manifest = Manifest::new(scenario).with_dataset(cfg.dataset.clone(), cfg.holdout_frac);
    let path = args
        .out
        .unwrap_or_else(|| output_root().join(format!("manifest-{}-seed{}.json", args.kind.as_str(), args.seed)));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Failure::runtime)?;
    }
    manifest.write(&path).map_err(Failure::runtime)?;
    println!("{summary}");
    println!("wrote {}", path.display());
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, args: &RunArgs) -> Result<(), Failure> {
    if !args.method.is_empty() {
        cfg.methods = args.method.clone();
    }
    if args.mask_ce {
        for m in &mut cfg.methods {
            if !m.ends_with("_masked") {
                m.push_str("_masked");
            }
        }
    }
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if let Some(m) = &args.manifest {
        cfg.scenario.manifest = Some(m.clone());
    }
    let sc = &mut cfg.scenario;
    if let Some(k) = args.kind {
        sc.kind = k;
    }
    if let Some(c) = args.classes {
        cfg.dataset.num_classes = c;
    }
    if let Some(t) = args.tasks {
        sc.tasks = t;
    }
    if let Some(b) = args.budget {
        sc.budget = b;
    }
    if let Some(p) = args.p {
        sc.p = p;
    }
    if let Some(a) = args.alpha {
        sc.beta.alpha = a;
    }
    if let Some(b) = args.beta {
        sc.beta.beta = b;
    }
    if let Some(kind) = args.heuristic {
        cfg.horde.heuristic = EstimationHeuristic {
            kind,
            ..cfg.horde.heuristic
        };
    }
    if let Some(s) = args.random_scale {
        cfg.horde.heuristic.random_scale = s;
    }
    if let Some(b) = args.fe_budget {
        cfg.horde.budget = b;
    }
    if let Some(t) = args.tau_e {
        cfg.horde.tau_e = t;
    }
    if args.threads.is_some() {
        cfg.threads = args.threads;
    }
    if args.out.is_some() {
        cfg.output = args.out.clone();
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::read(path).map_err(Failure::usage)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &args)?;
    cfg.validate().map_err(Failure::usage)?;
    let out = cfg.output.clone().unwrap_or_else(output_root);
    let workload = Workload::prepare(&cfg).map_err(Failure::usage)?;
    let results = execute(&cfg, &workload, Some(&out)).map_err(Failure::runtime)?;
    let mut failed = 0;
    for r in &results {
        match (&r.error, &r.record) {
            (None, Some(rec)) => println!(
                "{} seed {}: avg accuracy {:.4}, avg forgetting {:.4}",
                r.method,
                r.seed,
                rec.avg_accuracy.unwrap_or(f64::NAN),
                rec.avg_forgetting.unwrap_or(f64::NAN)
            ),
            (err, _) => {
                failed += 1;
                eprintln!("{} seed {} failed: {}", r.method, r.seed, err.as_deref().unwrap_or("unknown"));
            }
        }
    }
    println!("results in {}", out.display());
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} runs failed", results.len())));
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    if !args.dir.is_dir() {
        return Err(Failure::Usage(format!("{} is not a directory", args.dir.display())));
    }
    let report = Report::from_dir(&args.dir).map_err(Failure::runtime)?;
    let out: &Path = args.out.as_deref().unwrap_or(&args.dir);
    std::fs::create_dir_all(out).map_err(Failure::runtime)?;
    let (summary, curves) = report.write(out).map_err(Failure::runtime)?;
    print!("{report}");
    println!("wrote {} and {}", summary.display(), curves.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
