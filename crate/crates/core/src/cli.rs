//! Command-line front end. `main` only maps results to exit codes.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::suite::GradCheckSuite;
use crate::autodiff::GradCheckReport;
use crate::config::{RunConfig, CONFIG_FILE};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::io::{
    generate_synthetic, load_tensor, save_tensor, Checkpoint, DType, Dataset, PermutationMode, Split,
    SyntheticConfig, CHECKPOINT_VERSION, MANIFEST_VERSION, TENSOR_VERSION,
};
use crate::model::Model;
use crate::retrieval::{evaluate_pairs, RecallReport};
use crate::sinkhorn::{sinkhorn_solve, Matrix, SinkhornConfig};
use crate::train::{train, TrainOutputs, BEST_CHECKPOINT_FILE, CHECKPOINT_FILE, METRICS_FILE};

pub const RECALL_FILE: &str = "recall.csv";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const SYNTHETIC_CONFIG_FILE: &str = "synthetic.json";

static VERSION: LazyLock<String> = LazyLock::new(|| {
    format!(
        "{} (tensor format v{TENSOR_VERSION}, checkpoint format v{CHECKPOINT_VERSION}, manifest v{MANIFEST_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
});

#[derive(Debug, Parser)]
#[command(name = "cvft", version = VERSION.as_str(), about = "Sinkhorn feature transport for cross-view retrieval")]
pub struct Cli {
    /// Worker threads; defaults to all cores. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with known cell permutations.
    GenerateSynthetic(GenerateArgs),
    /// Train a model and write metrics plus checkpoints.
    Train(TrainArgs),
    /// Retrieval recall of a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Solve one Sinkhorn problem for a cost matrix file.
    Sinkhorn(SinkhornArgs),
    /// Transport one ground grid with a trained model.
    Transport(TransportArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synthetic config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    /// h,w,c
    #[arg(long, value_parser = parse_shape)]
    pub input_shape: Option<[usize; 3]>,
    /// h,w,c; only h,w set the permuted cell grid.
    #[arg(long, value_parser = parse_shape)]
    pub feature_shape: Option<[usize; 3]>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub geo_spacing: Option<f64>,
    #[arg(long)]
    pub geo_jitter: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Fixed,
    PerPair,
    Identity,
}

impl From<ModeArg> for PermutationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fixed => PermutationMode::Fixed,
            ModeArg::PerPair => PermutationMode::PerPair,
            ModeArg::Identity => PermutationMode::Identity,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory for config, metrics and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Transport strategy name (cvft, identity).
    #[arg(long)]
    pub transport: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Random orientation shifts of ground inputs during training, in degrees.
    #[arg(long)]
    pub orient_augment: Option<f64>,
    /// Also keep a checkpoint per epoch.
    #[arg(long)]
    pub keep_every_epoch: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Val,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config; defaults to the config.json beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory for recall.csv and evaluation.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Geo-localization threshold in meters.
    #[arg(long)]
    pub geo_d: Option<f64>,
    /// Maximum orientation noise in degrees for the perturbed pass.
    #[arg(long)]
    pub orient_noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct SinkhornArgs {
    /// Square cost matrix tensor file.
    #[arg(long)]
    pub cost: PathBuf,
    /// Plan tensor output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub lambda: f64,
    /// Iteration count, or the cap when `--tol` is given.
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    /// Stop once both marginal residuals are within this tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TransportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Raw ground input grid.
    #[arg(long)]
    pub ground: PathBuf,
    /// Transported feature grid output.
    #[arg(long)]
    pub out_grid: PathBuf,
    /// Transport plan output; skipped for strategies without a plan.
    #[arg(long)]
    pub out_plan: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = crate::autodiff::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long, default_value_t = crate::autodiff::DEFAULT_TOLERANCE)]
    pub tol: f64,
    /// Only ops whose id contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("`{d}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    dims.try_into().map_err(|d: Vec<usize>| format!("expected h,w,c, got {} values", d.len()))
}

/// Runs a parsed command. `Ok(false)` means the command ran but its checks failed.
pub fn run(cli: Cli) -> Result<bool> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be ≥ 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::GenerateSynthetic(a) => generate(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::Sinkhorn(a) => solve(a).map(|_| true),
        Command::Transport(a) => transport(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(v) = a.count {
        cfg.count = v;
    }
    if let Some(v) = a.input_shape {
        cfg.input_shape = v;
    }
    if let Some(v) = a.feature_shape {
        cfg.feature_shape = v;
    }
    if let Some(v) = a.noise_sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.mode {
        cfg.mode = v.into();
    }
    if let Some(v) = a.val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(v) = a.geo_spacing {
        cfg.geo_spacing_m = v;
    }
    if let Some(v) = a.geo_jitter {
        cfg.geo_jitter_m = v;
    }
    let data = generate_synthetic(&cfg)?;
    data.write(&a.out)?;
    write_file(&a.out.join(SYNTHETIC_CONFIG_FILE), serde_json::to_string_pretty(&cfg)? + "\n")?;
    eprintln!(
        "wrote {} pairs ({} val) to {}",
        data.len(),
        data.indices(Split::Val).len(),
        a.out.display()
    );
    Ok(())
}

fn resolve_dataset(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.dataset {
        cfg.dataset = Some(v);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.gamma {
        cfg.train.gamma = v;
    }
    if let Some(v) = a.transport {
        cfg.model.transport.kind = v;
    }
    if let Some(v) = a.lambda {
        cfg.model.transport.sinkhorn.lambda = v;
    }
    if let Some(v) = a.iters {
        cfg.model.transport.sinkhorn.max_iterations = v;
    }
    if let Some(v) = a.orient_augment {
        cfg.train.orient_augment_degrees = v;
    }
    cfg.validate()?;
    cfg.dataset = Some(resolve_dataset(cfg.dataset_path()?)?);
    let dataset = Dataset::load(cfg.dataset_path()?)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    create_dir(&a.out)?;
    cfg.save(a.out.join(CONFIG_FILE))?;
    let outputs = TrainOutputs {
        dir: Some(a.out.clone()),
        keep_every_epoch: a.keep_every_epoch,
    };
    let result = train(&mut model, &dataset, &cfg.train, cfg.seed, &outputs, |rec| {
        let recall: Vec<String> = rec.recall.iter().map(|(k, v)| format!("r@{k} {v:.4}")).collect();
        eprintln!("epoch {:3}  loss {:.6}  {}", rec.epoch, rec.loss, recall.join("  "));
    })?;
    if let Some((epoch, r)) = result.best {
        eprintln!("best validation recall {r:.4} at epoch {epoch} ({BEST_CHECKPOINT_FILE})");
    }
    eprintln!("wrote {METRICS_FILE} and {CHECKPOINT_FILE} to {}", a.out.display());
    Ok(())
}

fn config_for_checkpoint(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    RunConfig::load(path)
}

fn load_model(checkpoint: &Path, cfg: &RunConfig) -> Result<Model> {
    let ckpt = Checkpoint::load(checkpoint)?;
    Model::from_params(cfg.model.clone(), ckpt.params)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = config_for_checkpoint(&a.checkpoint, a.config.as_deref())?;
    if let Some(v) = a.dataset {
        cfg.dataset = Some(resolve_dataset(&v)?);
    }
    if let Some(v) = a.ks {
        cfg.eval.ks = v;
    }
    if let Some(v) = a.geo_d {
        cfg.eval.geo_d_meters = v;
    }
    if let Some(v) = a.orient_noise {
        cfg.eval.orient_noise_degrees = v;
    }
    if let Some(v) = a.seed {
        cfg.eval.seed = v;
    }
    let model = load_model(&a.checkpoint, &cfg)?;
    let dataset = Dataset::load(cfg.dataset_path()?)?;
    let indices = match a.split {
        SplitArg::Val => dataset.indices(Split::Val),
        SplitArg::Train => dataset.indices(Split::Train),
        SplitArg::All => (0..dataset.len()).collect(),
    };
    let eval = evaluate_pairs(&model, &dataset, &indices, &cfg.eval)?;

    create_dir(&a.out)?;
    cfg.save(a.out.join(CONFIG_FILE))?;
    let mut csv = vec![RecallReport::csv_header().to_string()];
    csv.extend(eval.unperturbed.csv_rows("clean"));
    if let Some(p) = &eval.perturbed {
        csv.extend(p.csv_rows(&format!("orient{}", cfg.eval.orient_noise_degrees)));
    }
    write_file(&a.out.join(RECALL_FILE), csv.join("\n") + "\n")?;
    write_file(&a.out.join(EVALUATION_FILE), serde_json::to_string_pretty(&eval)? + "\n")?;

    let summary = |name: &str, r: &RecallReport| {
        let cols: Vec<String> = r.r_at.iter().map(|(k, v)| format!("r@{k} {v:.4}")).collect();
        eprintln!(
            "{name}: {} queries  {}  r@{}(1%) {:.4}",
            r.queries,
            cols.join("  "),
            r.top1_percent_k,
            r.top1_percent
        );
    };
    summary("clean", &eval.unperturbed);
    if let Some(p) = &eval.perturbed {
        summary(&format!("±{}°", cfg.eval.orient_noise_degrees), p);
    }
    Ok(())
}

fn solve(a: SinkhornArgs) -> Result<()> {
    let t = load_tensor(&a.cost)?;
    let &[rows, cols] = t.shape() else {
        return Err(Error::Format(format!("cost must be a square matrix, got shape {:?}", t.shape())));
    };
    if rows != cols {
        return Err(Error::Format(format!("cost must be a square matrix, got {rows}×{cols}")));
    }
    let cfg = match a.tol {
        Some(tol) => SinkhornConfig::to_tolerance(a.lambda, tol, a.iters),
        None => SinkhornConfig::fixed(a.lambda, a.iters),
    };
    cfg.validate()?;
    let plan = sinkhorn_solve(&Matrix::new(rows, cols, t.into_data())?, &cfg)?;
    let out = crate::tensor::Tensor::new(vec![rows, cols], plan.data().to_vec())?;
    save_tensor(&a.out, &out, DType::F64)?;
    eprintln!(
        "iterations_run={} row_residual={:e} col_residual={:e}",
        plan.iterations_run(),
        plan.row_residual(),
        plan.col_residual()
    );
    Ok(())
}

fn transport(a: TransportArgs) -> Result<()> {
    let cfg = config_for_checkpoint(&a.checkpoint, a.config.as_deref())?;
    let model = load_model(&a.checkpoint, &cfg)?;
    let ground = FeatureGrid::from_tensor(load_tensor(&a.ground)?)?;
    let (grid, plan) = model.transport_ground(&ground)?;
    save_tensor(&a.out_grid, &grid.to_tensor(), DType::F64)?;
    match (a.out_plan, plan) {
        (Some(path), Some(plan)) => {
            let n = plan.n();
            save_tensor(&path, &crate::tensor::Tensor::new(vec![n, n], plan.data().to_vec())?, DType::F64)?;
            eprintln!("plan residual {:e}", plan.max_residual());
        }
        (Some(_), None) => eprintln!("strategy `{}` has no transport plan; skipped", model.strategy_name()),
        (None, _) => {}
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let mut suite = GradCheckSuite::standard(a.seed);
    if let Some(f) = &a.filter {
        suite.retain_matching(f);
    }
    if suite.is_empty() {
        return Err(Error::Config("no gradcheck case matches the filter".into()));
    }
    let reports = suite.run(a.step, a.tol)?;
    let mut csv = String::from(GradCheckReport::csv_header());
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op_id.as_str()).collect();
    if failed.is_empty() {
        eprintln!("{} ops passed", reports.len());
    } else {
        eprintln!("{} of {} ops failed: {}", failed.len(), reports.len(), failed.join(", "));
    }
    Ok(failed.is_empty())
}
