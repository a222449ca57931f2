use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ccaud::data::{read_dump, FeatureDump, PoisonMode};
use ccaud::detector::Method;
use ccaud::dimred::ReductionMethod;
use ccaud::evaluate::AttackContext;
use ccaud::pipeline::{run_method, MethodRun, PipelineConfig, ThresholdChoice};
use ccaud::report::{write_run_dir, Report, RunManifest};
use ccaud::synthetic::{generate, SyntheticConfig};
use ccaud::Error;

const SWEEP_ALPHAS: [f64; 7] = [0.025, 0.05, 0.1, 0.2, 0.35, 0.5, 0.55];

#[derive(Parser, Debug)]
#[command(name = "ccaud", version, about = "Find poisoned samples in the training set of a backdoored classifier")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "CCAUD_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inspect one training set.
    Detect(DetectArgs),
    /// Write synthetic feature dumps.
    Synth(SynthArgs),
    /// Calibrate and run on several dumps, then tabulate averages.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Ccaud,
    Ac,
    Ci,
    All,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::Ccaud => vec![Method::Ccaud],
            MethodArg::Ac => vec![Method::Ac],
            MethodArg::Ci => vec![Method::Ci],
            MethodArg::All => vec![Method::Ccaud, Method::Ac, Method::Ci],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReductionArg {
    Umap,
    Pca,
}

#[derive(Args, Debug)]
struct EngineArgs {
    #[arg(long, value_enum, default_value = "ccaud")]
    method: MethodArg,
    /// Fixed decision threshold in [0, 1].
    #[arg(long, conflicts_with = "calibrate")]
    theta: Option<f64>,
    /// Pick the threshold on the validation set (the default).
    #[arg(long)]
    calibrate: bool,
    #[arg(long, default_value_t = 0.05)]
    target_fpr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// DBSCAN neighbourhood radius in the reduced space.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long, value_enum)]
    reduction: Option<ReductionArg>,
    #[arg(long)]
    target_dim: Option<usize>,
    #[arg(long)]
    n_neighbors: Option<usize>,
    #[arg(long)]
    min_dist: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl EngineArgs {
    fn pipeline(&self) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        let r = &mut cfg.pcd.reduction;
        if let Some(m) = self.reduction {
            r.method = match m {
                ReductionArg::Umap => ReductionMethod::Umap,
                ReductionArg::Pca => ReductionMethod::Pca,
            };
        }
        if let Some(v) = self.target_dim {
            r.target_dim = v;
        }
        if let Some(v) = self.n_neighbors {
            r.n_neighbors = v;
        }
        if let Some(v) = self.min_dist {
            r.min_dist = v;
        }
        if let Some(v) = self.epochs {
            r.epochs = v;
        }
        if let Some(v) = self.eps {
            cfg.pcd.dbscan.eps = v;
        }
        if let Some(v) = self.min_pts {
            cfg.pcd.dbscan.min_pts = v;
        }
        cfg.ci.reduction = cfg.pcd.reduction.clone();
        cfg.threshold = match self.theta {
            Some(t) => ThresholdChoice::Fixed(t),
            None => ThresholdChoice::Calibrate,
        };
        cfg.calibration.target_fpr = self.target_fpr;
        cfg.seed = self.seed;
        cfg
    }
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Directory holding `train/` and `val/` dumps.
    #[arg(long, conflicts_with_all = ["train", "val"], required_unless_present_all = ["train", "val"])]
    dump: Option<PathBuf>,
    #[arg(long, requires = "val")]
    train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    val: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
    /// Also write the 2-D embeddings of every class.
    #[arg(long)]
    emit_embedding: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Corrupted,
    Clean,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Poisoning ratio; omit for a benign dataset.
    #[arg(long, conflicts_with = "alpha_sweep")]
    alpha: Option<f64>,
    /// One dataset per ratio in 0.025, 0.05, 0.1, 0.2, 0.35, 0.5, 0.55.
    #[arg(long)]
    alpha_sweep: bool,
    #[arg(long, default_value_t = 0)]
    target: usize,
    /// Number of independent triggers, on targets `target`, `target + 1`, ...
    #[arg(long, default_value_t = 1)]
    multi_trigger: usize,
    #[arg(long, value_enum, default_value = "corrupted")]
    mode: ModeArg,
    /// Make the trigger survive the averaging filter.
    #[arg(long)]
    filter_invariant: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    val_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Dataset directories, each holding `train/` and `val/`.
    #[arg(long, num_args = 1.., required = true)]
    dumps: Vec<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    out: PathBuf,
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn classify(e: Error) -> Failure {
    let code = match &e {
        Error::Domain(_) | Error::Config(_) => 2,
        Error::MalformedDump { .. } => 3,
        Error::Io { .. } | Error::Json(_) => 1,
    };
    Failure {
        code,
        error: e.into(),
    }
}

fn config_failure(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn io_failure(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

/// Loading failures, including missing files, mean a malformed dump.
fn load(dir: &Path) -> Result<FeatureDump, Failure> {
    read_dump(dir).map_err(|e| match e {
        Error::Io { .. } | Error::Json(_) | Error::MalformedDump { .. } => Failure {
            code: 3,
            error: anyhow::Error::from(e).context(format!("cannot load dump {}", dir.display())),
        },
        other => classify(other),
    })
}

struct Inputs {
    name: String,
    train: FeatureDump,
    val: FeatureDump,
}

fn dataset_name(dir: &Path) -> String {
    dir.canonicalize()
        .ok()
        .as_deref()
        .unwrap_or(dir)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn load_inputs(name: String, train: &Path, val: &Path) -> Result<Inputs, Failure> {
    let train = load(train)?;
    let val = load(val)?;
    let (t, v) = (&train.dataset, &val.dataset);
    if t.num_classes() != v.num_classes() || t.feature_dim() != v.feature_dim() {
        return Err(config_failure(anyhow!(
            "training dump has l={} d={} but validation dump has l={} d={}",
            t.num_classes(),
            t.feature_dim(),
            v.num_classes(),
            v.feature_dim()
        )));
    }
    Ok(Inputs { name, train, val })
}

fn run_all(inputs: &[Inputs], methods: &[Method], cfg: &PipelineConfig) -> Result<Vec<(String, MethodRun)>, Failure> {
    let mut runs = Vec::new();
    for input in inputs {
        let ctx = AttackContext::from_dump(&input.name, &input.train);
        if !ctx.successful {
            log::warn!("{}: attack failed its gates; its records are excluded from averages", input.name);
        }
        for &m in methods {
            log::info!("{}: running {}", input.name, m);
            let run = run_method(m, &input.train.dataset, &input.val.dataset, &input.train.head, &ctx, cfg)
                .map_err(classify)?;
            log::info!("{}: {} theta={:.3}", input.name, m, run.theta);
            runs.push((input.name.clone(), run));
        }
    }
    Ok(runs)
}

fn config_json(cfg: &PipelineConfig, methods: &[Method]) -> Result<serde_json::Value, Failure> {
    let mut v = serde_json::to_value(cfg).map_err(|e| io_failure(e.into()))?;
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("methods".into(), serde_json::to_value(methods).map_err(|e| io_failure(e.into()))?);
    }
    Ok(v)
}

fn detect(args: &DetectArgs, workers: usize) -> Result<(), Failure> {
    let (name, train, val) = match (&args.dump, &args.train, &args.val) {
        (Some(d), _, _) => (dataset_name(d), d.join("train"), d.join("val")),
        (None, Some(t), Some(v)) => (dataset_name(t), t.clone(), v.clone()),
        _ => return Err(config_failure(anyhow!("pass --dump, or both --train and --val"))),
    };
    let inputs = vec![load_inputs(name, &train, &val)?];
    let methods = args.engine.method.methods();
    let mut cfg = args.engine.pipeline();
    cfg.keep_embeddings = args.emit_embedding;
    let runs = run_all(&inputs, &methods, &cfg)?;
    let manifest = RunManifest::new(
        "detect",
        cfg.seed,
        workers,
        vec![train.display().to_string(), val.display().to_string()],
        config_json(&cfg, &methods)?,
    );
    let report = Report::new(manifest, &runs);
    write_run_dir(&args.out, &report, &runs, args.emit_embedding).map_err(classify)?;
    for r in &report.runs {
        println!("{} theta={:.4} flagged={}", r.method, r.theta, r.flagged);
    }
    Ok(())
}

fn sweep(args: &SweepArgs, workers: usize) -> Result<(), Failure> {
    let mut inputs = Vec::new();
    for d in &args.dumps {
        inputs.push(load_inputs(dataset_name(d), &d.join("train"), &d.join("val"))?);
    }
    let (l, dim) = (inputs[0].train.dataset.num_classes(), inputs[0].train.dataset.feature_dim());
    for i in &inputs {
        if i.train.dataset.num_classes() != l || i.train.dataset.feature_dim() != dim {
            return Err(config_failure(anyhow!(
                "{} has l={} d={}, expected l={} d={}",
                i.name,
                i.train.dataset.num_classes(),
                i.train.dataset.feature_dim(),
                l,
                dim
            )));
        }
    }
    let mut names: Vec<&str> = inputs.iter().map(|i| i.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(config_failure(anyhow!("dataset directory names must be distinct")));
    }
    let methods = args.engine.method.methods();
    let cfg = args.engine.pipeline();
    let runs = run_all(&inputs, &methods, &cfg)?;
    let manifest = RunManifest::new(
        "sweep",
        cfg.seed,
        workers,
        args.dumps.iter().map(|d| d.display().to_string()).collect(),
        config_json(&cfg, &methods)?,
    );
    let report = Report::new(manifest, &runs);
    write_run_dir(&args.out, &report, &runs, false).map_err(classify)?;
    print!("{}", ccaud::report::aggregate_table_csv(&report.aggregates));
    Ok(())
}

fn synth_config(args: &SynthArgs, alpha: Option<f64>) -> SyntheticConfig {
    let mut cfg = SyntheticConfig::default().with_seed(args.seed);
    if let Some(v) = args.classes {
        cfg.num_classes = v;
    }
    if let Some(v) = args.dim {
        cfg.dim = v;
    }
    if let Some(v) = args.train_per_class {
        cfg.train_per_class = v;
    }
    if let Some(v) = args.val_per_class {
        cfg.val_per_class = v;
    }
    if let Some(v) = args.test_per_class {
        cfg.test_per_class = v;
    }
    cfg.label_mode = match args.mode {
        ModeArg::Corrupted => PoisonMode::Corrupted,
        ModeArg::Clean => PoisonMode::Clean,
    };
    if let Some(a) = alpha {
        for k in 0..args.multi_trigger {
            cfg = cfg.with_attack(args.target + k, a);
        }
        for atk in &mut cfg.attacks {
            atk.filter_invariant = args.filter_invariant;
        }
    }
    cfg
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    if args.multi_trigger == 0 {
        return Err(config_failure(anyhow!("--multi-trigger must be at least 1")));
    }
    let jobs: Vec<(PathBuf, SyntheticConfig)> = if args.alpha_sweep {
        SWEEP_ALPHAS
            .iter()
            .map(|&a| (args.out.join(format!("alpha_{}", a)), synth_config(args, Some(a))))
            .collect()
    } else {
        vec![(args.out.clone(), synth_config(args, args.alpha))]
    };
    for (_, cfg) in &jobs {
        cfg.validate().map_err(classify)?;
    }
    for (dir, cfg) in &jobs {
        let bundle = generate(cfg).map_err(classify)?;
        bundle.write(dir).map_err(classify)?;
        let config = serde_json::to_string_pretty(cfg).map_err(|e| io_failure(e.into()))?;
        std::fs::write(dir.join("synthetic.json"), config)
            .with_context(|| format!("writing {}", dir.display()))
            .map_err(io_failure)?;
        match bundle.meta().map_err(classify)?.gates {
            Some(g) => println!(
                "{} acc={:.4} clean_acc={:.4} asr={:?} successful={}",
                dir.display(),
                g.acc,
                g.clean_acc,
                g.asr,
                g.successful
            ),
            None => println!("{} benign", dir.display()),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        eprintln!("error: --workers must be positive");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
        eprintln!("error: cannot start worker pool: {}", e);
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Detect(a) => detect(a, workers),
        Command::Synth(a) => synth(a),
        Command::Sweep(a) => sweep(a, workers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
