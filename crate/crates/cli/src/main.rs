use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use gigapose_core::config::Config;
use gigapose_core::estimator::{EstimatorMode, RegressorWeights};
use gigapose_core::eval::{all_record_errors, record_errors_csv, robustness_curve, robustness_csv, ArThresholds};
use gigapose_core::featuregrid::PatchGeometry;
use gigapose_core::gt_corr::{reproject_correspondences, symmetrize};
use gigapose_core::manifest::{read_json, DepthPairManifest, GroundTruth, ModelSet};
use gigapose_core::pipeline::{bench, bop_csv, load_queries, parse_bop_csv, queries_from_templates, Pipeline};
use gigapose_core::store::TemplateStore;
use gigapose_core::synthetic::{SceneConfig, SyntheticScene};
use gigapose_core::Execution;

const THREADS_ENV: &str = "GIGAPOSE_THREADS";

#[derive(Parser)]
#[command(name = "gigapose", version, about = "Template-based coarse 6D pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a template directory and pack it into a store file.
    Onboard(OnboardArgs),
    /// Estimate poses for a query manifest and write BOP-style CSV.
    Infer(InferArgs),
    /// Score predictions against ground truth, per mask-IoU threshold.
    Eval(EvalArgs),
    /// Report per-stage latency percentiles as JSON lines.
    Bench(BenchArgs),
    /// Ground-truth patch correspondences from depth pairs.
    Gtcorr(GtcorrArgs),
    /// Write a synthetic scene (templates, queries, weights, ground truth).
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Key-value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<Config> {
        match &self.config {
            Some(p) => Config::from_file(p).with_context(|| format!("reading config {}", p.display())),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Args)]
struct OnboardArgs {
    /// Directory holding templates.json and its grids.
    #[arg(long)]
    templates: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    store: PathBuf,
    /// Query manifest (JSON).
    #[arg(long)]
    queries: PathBuf,
    /// Regressor weights; required in single-correspondence mode.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output CSV; `-` for stdout.
    #[arg(long, default_value = "-")]
    output: PathBuf,
    #[arg(long)]
    top_k: Option<usize>,
    /// `single` or `kabsch2`.
    #[arg(long)]
    mode: Option<EstimatorMode>,
    /// Write -1 in the time column.
    #[arg(long)]
    no_time: bool,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct EvalArgs {
    /// BOP-style CSV from `infer`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long)]
    models: PathBuf,
    /// Keep records whose predicted-mask IoU is below each threshold.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9,1.01")]
    iou_thresholds: Vec<f64>,
    /// Robustness table CSV; `-` for stdout.
    #[arg(long, default_value = "-")]
    output: PathBuf,
    /// Optional per-detection error CSV.
    #[arg(long)]
    per_record: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    store: PathBuf,
    /// Regressor weights; without them the two-correspondence estimator runs.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Query manifest; defaults to queries built from the store's templates.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n_queries: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Run each detection with the parallel kernels.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct GtcorrArgs {
    /// Depth pair manifest (JSON).
    #[arg(long)]
    pairs: PathBuf,
    /// Output JSON; `-` for stdout.
    #[arg(long, default_value = "-")]
    output: PathBuf,
    /// Keep only pairs found in both directions.
    #[arg(long)]
    symmetric: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 10)]
    detections: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Invariant descriptor width.
    #[arg(long, default_value_t = 64)]
    dim: usize,
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    if path.as_os_str() == "-" {
        std::io::stdout().lock().write_all(text.as_bytes())?;
    } else {
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn load_weights(path: &Path) -> Result<RegressorWeights> {
    let file = std::fs::File::open(path).with_context(|| format!("opening weights {}", path.display()))?;
    RegressorWeights::read(std::io::BufReader::new(file)).with_context(|| format!("loading GPWT weights {}", path.display()))
}

fn load_store(path: &Path) -> Result<TemplateStore> {
    TemplateStore::load(path).with_context(|| format!("loading store {}", path.display()))
}

fn onboard(args: OnboardArgs) -> Result<()> {
    let config = args.config.load()?;
    let store = TemplateStore::onboard(&args.templates, config.subdivisions, PatchGeometry::default())
        .with_context(|| format!("onboarding {}", args.templates.display()))?;
    store.save(&args.output)?;
    info!("object {}: {} templates -> {}", store.object_id(), store.len(), args.output.display());
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let mut config = args.config.load()?;
    if let Some(k) = args.top_k {
        config.top_k = k;
    }
    if let Some(mode) = args.mode {
        config.estimator_mode = mode;
    }
    let store = load_store(&args.store)?;
    let weights = args.weights.as_deref().map(load_weights).transpose()?;
    let pipeline = Pipeline::new(&store, weights.as_ref(), config)?;
    let queries = load_queries(&args.queries).with_context(|| format!("loading queries {}", args.queries.display()))?;
    let results = pipeline.infer_batch(&queries, Execution::default());
    let failed = results.iter().filter(|r| r.estimate.is_err()).count();
    info!("{} detections, {failed} failed", results.len());
    write_output(&args.output, &bop_csv(&results, !args.no_time))
}

fn eval(args: EvalArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.predictions)
        .with_context(|| format!("reading predictions {}", args.predictions.display()))?;
    let predictions = parse_bop_csv(&text)?;
    let gt: GroundTruth = read_json(&args.ground_truth)?;
    let models = read_json::<ModelSet>(&args.models)?.objects()?;
    let records = gt.records(&predictions)?;
    let rows = robustness_curve(&records, &models, &args.iou_thresholds, &ArThresholds::default())?;
    if let Some(path) = &args.per_record {
        let errors = all_record_errors(&records, &models)?;
        write_output(path, &record_errors_csv(&records, &errors))?;
    }
    write_output(&args.output, &robustness_csv(&rows))
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let mut config = args.config.load()?;
    let store = load_store(&args.store)?;
    let weights = args.weights.as_deref().map(load_weights).transpose()?;
    if weights.is_none() && config.estimator_mode == EstimatorMode::Single {
        info!("no weights given; benchmarking the two-correspondence estimator");
        config.estimator_mode = EstimatorMode::Kabsch2;
    }
    let pipeline = Pipeline::new(&store, weights.as_ref(), config)?;
    let queries = match &args.queries {
        Some(p) => load_queries(p)?,
        None => queries_from_templates(&store, args.n_queries),
    };
    let exec = if args.parallel { Execution::Parallel } else { Execution::Sequential };
    let (summaries, _) = bench(&pipeline, &queries, args.repeats, exec)?;
    let mut out = String::new();
    for s in summaries {
        out.push_str(&s.to_json_line());
        out.push('\n');
    }
    write_output(Path::new("-"), &out)
}

fn gtcorr(args: GtcorrArgs) -> Result<()> {
    let manifest: DepthPairManifest = read_json(&args.pairs)?;
    let base = args.pairs.parent().unwrap_or(Path::new("."));
    let geom = PatchGeometry::default();
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for (i, p) in manifest.pairs.iter().enumerate() {
        let source = p.source.load(base).with_context(|| format!("pair {i} source"))?;
        let target = p.target.load(base).with_context(|| format!("pair {i} target"))?;
        let mut corrs = reproject_correspondences(&source, &target, &geom)?;
        if args.symmetric {
            corrs = symmetrize(&corrs, &reproject_correspondences(&target, &source, &geom)?);
        }
        let list: Vec<_> = corrs
            .iter()
            .map(|c| {
                serde_json::json!({
                    "source": [c.query_index.row, c.query_index.col],
                    "target": [c.template_index.row, c.template_index.col],
                })
            })
            .collect();
        pairs.push(serde_json::json!({ "correspondences": list }));
    }
    let mut text = serde_json::to_string_pretty(&serde_json::json!({ "pairs": pairs }))?;
    text.push('\n');
    write_output(&args.output, &text)
}

fn synth(args: SynthArgs) -> Result<()> {
    let scene = SyntheticScene::generate(SceneConfig {
        n_detections: args.detections,
        seed: args.seed,
        dim: args.dim,
        ..SceneConfig::default()
    })?;
    scene.write_dir(&args.output)?;
    info!("wrote {} detections to {}", args.detections, args.output.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Onboard(a) => onboard(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Gtcorr(a) => gtcorr(a),
        Command::Synth(a) => synth(a),
    }
}
