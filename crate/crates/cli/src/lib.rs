//! Command-line front end: synthetic data, DBI model selection, training,
//! evaluation and prediction.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ptmvqa::checkpoint::Checkpoint;
use ptmvqa::dbi::{dbi_report, ClusterSpec, DbiReport, Selection};
use ptmvqa::evaluator::{cross_evaluate, evaluate, predict_bundle, EvalOptions, EvalReport, ViewAveraging};
use ptmvqa::feature_store::{gen_synthetic, load_dataset, split_dataset, DatasetBundle, Manifest, SplitFilter, SyntheticSpec};
use ptmvqa::losses::{InterMode, DEFAULT_ALPHA, DEFAULT_BETA};
use ptmvqa::model::DEFAULT_OUT;
use ptmvqa::trainer::{
    format_log, resolve_weights, train, CheckpointPolicy, TrainConfig, WeightMode, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS,
    DEFAULT_K, DEFAULT_LR, DEFAULT_WEIGHT_DECAY,
};
use ptmvqa::Exec;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for malformed invocations.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for invalid or inconsistent data.
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ptmvqa", version, about = "Video quality heads over frozen pre-trained features")]
pub struct Cli {
    /// Worker threads for data-parallel stages; falls back to PTMVQA_THREADS,
    /// then to one per core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run every stage on the calling thread. Results are identical either way.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (feature files, labels, manifest).
    GenSynthetic(GenArgs),
    /// Score every model by DBI and report weights and the selection.
    SelectModels(SelectArgs),
    /// Train heads and write checkpoint.ptmc, train_log.csv and effective_config.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split of its dataset.
    Evaluate(EvalArgs),
    /// Write per-video predictions as CSV.
    Predict(PredictArgs),
    /// Evaluate a checkpoint on every video of another dataset.
    CrossEvaluate(CrossArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    #[arg(long, default_value_t = 200)]
    pub videos: usize,
    #[arg(long, default_value_t = 2)]
    pub models: usize,
    /// Feature width of every model.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub views: usize,
    /// Signal strength per model, comma separated [default: 1 for the first model, 0 for the rest].
    #[arg(long, value_delimiter = ',')]
    pub signal: Option<Vec<f64>>,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Fraction of videos whose features encode a mirrored quality.
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the signal directions [default: --seed]; share it to build
    /// datasets with a common signal.
    #[arg(long)]
    pub direction_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Number of equal MOS clusters (2, 4 or 6).
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub clusters: ClusterArgs,
    /// Keep the N models with the lowest DBI.
    #[arg(long, conflicts_with = "threshold")]
    pub max_models: Option<usize>,
    /// Keep models whose DBI is at most this value.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Store each model's DBI in the manifest.
    #[arg(long)]
    pub write_manifest: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightsArg {
    Dbi,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterArg {
    Centroid,
    SampleTriplet,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Last,
    BestSrcc,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags and --set override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. --set base_lr=5e-3 (applied last).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Train only these models, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "max_models")]
    pub models: Option<Vec<String>>,
    /// Train on the N models with the lowest DBI.
    #[arg(long)]
    pub max_models: Option<usize>,
    #[arg(long, help = format!("Epochs [default: {DEFAULT_EPOCHS}]"))]
    pub epochs: Option<usize>,
    #[arg(long, help = format!("Batch size [default: {DEFAULT_BATCH_SIZE}]"))]
    pub batch_size: Option<usize>,
    #[arg(long, help = format!("Peak learning rate [default: {DEFAULT_LR}]"))]
    pub lr: Option<f64>,
    #[arg(long, help = format!("Decoupled weight decay [default: {DEFAULT_WEIGHT_DECAY}]"))]
    pub weight_decay: Option<f64>,
    #[arg(long, help = format!("Triplet margin alpha [default: {DEFAULT_ALPHA}]"))]
    pub alpha: Option<f64>,
    #[arg(long, help = format!("Metric-loss weight beta [default: {DEFAULT_BETA}]"))]
    pub beta: Option<f64>,
    #[arg(long, help = format!("Transformed feature width D [default: {DEFAULT_OUT}]"))]
    pub dim: Option<usize>,
    #[arg(long, help = format!("Number of MOS clusters, 2, 4 or 6 [default: {DEFAULT_K}]"))]
    pub k: Option<usize>,
    /// Seed for initialization, split and batching [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Aggregation weights [default: dbi].
    #[arg(long, value_enum)]
    pub weights: Option<WeightsArg>,
    /// Drop the intra-consistency term.
    #[arg(long)]
    pub no_intra: bool,
    /// Drop the inter-divisibility term (same as --inter off).
    #[arg(long, conflicts_with = "inter")]
    pub no_inter: bool,
    /// Inter-divisibility variant [default: centroid].
    #[arg(long, value_enum)]
    pub inter: Option<InterArg>,
    /// Which parameters to save [default: last].
    #[arg(long = "checkpoint-policy", value_enum)]
    pub checkpoint_policy: Option<PolicyArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl From<SplitArg> for SplitFilter {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitFilter::Train,
            SplitArg::Test => SplitFilter::Test,
            SplitArg::All => SplitFilter::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AveragingArg {
    /// Average per-view scores.
    Score,
    /// Score the view-averaged features.
    Feature,
}

impl From<AveragingArg> for ViewAveraging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Score => ViewAveraging::Score,
            AveragingArg::Feature => ViewAveraging::Feature,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScoringArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = AveragingArg::Score)]
    pub averaging: AveragingArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// Videos to score; the split is re-derived from the checkpoint's seed.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CrossArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Failure of a command, mapped to an exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<ptmvqa::Error> for CliError {
    fn from(e: ptmvqa::Error) -> Self {
        match e {
            ptmvqa::Error::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn write_file(path: &Path, contents: &str) -> CliResult {
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_count(cli: &Cli) -> CliResult<Option<usize>> {
    if let Some(n) = cli.threads {
        return Ok(Some(n));
    }
    match std::env::var("PTMVQA_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("PTMVQA_THREADS={v:?} is not a thread count"))),
        _ => Ok(None),
    }
}

/// Runs an already parsed command line.
pub fn execute(cli: &Cli) -> CliResult {
    let threads = thread_count(cli)?;
    if threads == Some(0) {
        return Err(CliError::Usage("thread count must be positive".into()));
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    with_pool(threads, || dispatch(&cli.command, exec))
}

#[cfg(feature = "parallel")]
fn with_pool(threads: Option<usize>, f: impl FnOnce() -> CliResult + Send) -> CliResult {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Data(format!("thread pool: {e}")))?
            .install(f),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_pool(_threads: Option<usize>, f: impl FnOnce() -> CliResult + Send) -> CliResult {
    f()
}

fn dispatch(command: &Command, exec: Exec) -> CliResult {
    match command {
        Command::GenSynthetic(a) => gen_synthetic_cmd(a),
        Command::SelectModels(a) => select_models_cmd(a, exec),
        Command::Train(a) => train_cmd(a, exec),
        Command::Evaluate(a) => evaluate_cmd(a, exec),
        Command::Predict(a) => predict_cmd(a, exec),
        Command::CrossEvaluate(a) => cross_evaluate_cmd(a, exec),
    }
}

fn gen_synthetic_cmd(a: &GenArgs) -> CliResult {
    let mut spec = SyntheticSpec::new(a.videos, a.models, a.dim, a.seed);
    spec.name = a.name.clone();
    spec.views = a.views;
    spec.noise_sigma = a.noise;
    spec.outlier_fraction = a.outliers;
    spec.direction_seed = a.direction_seed;
    if let Some(signal) = &a.signal {
        if signal.len() != a.models {
            return Err(CliError::Usage(format!("--signal has {} values for {} models", signal.len(), a.models)));
        }
        spec.signal_strength = signal.clone();
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let bundle = gen_synthetic(&spec)?;
    let manifest = ptmvqa::feature_store::write_synthetic(&bundle, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn selection(max_models: Option<usize>, threshold: Option<f64>) -> Selection {
    match (max_models, threshold) {
        (Some(n), _) => Selection::MaxModels(n),
        (None, Some(t)) => Selection::Threshold(t),
        (None, None) => Selection::All,
    }
}

fn select_models_cmd(a: &SelectArgs, exec: Exec) -> CliResult {
    let bundle = load_dataset(&a.manifest)?;
    let spec = ClusterSpec::preset(a.clusters.k)?;
    let report = dbi_report(&bundle, &spec, selection(a.max_models, a.threshold), exec)?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    match &a.out {
        Some(path) => write_file(path, &json)?,
        None => print!("{json}"),
    }
    if a.write_manifest {
        store_dbi(&a.manifest, &report)?;
    }
    Ok(())
}

fn store_dbi(manifest_path: &Path, report: &DbiReport) -> CliResult {
    let mut manifest = Manifest::read(manifest_path)?;
    for model in &mut manifest.models {
        model.dbi = report.models.iter().find(|m| m.model_id == model.model_id).map(|m| m.psi);
    }
    manifest.write(manifest_path)?;
    Ok(())
}

/// Builds the training config: defaults, then the config file, then flags,
/// then `--set` overrides.
pub fn effective_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! take {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { config.$field = v; })*
        };
    }
    take!(epochs => epochs, batch_size => batch_size, lr => base_lr, weight_decay => weight_decay,
          alpha => alpha, beta => beta, dim => dim, seed => seed);
    if let Some(k) = a.k {
        config.k = k;
        config.intervals = None;
    }
    if let Some(w) = a.weights {
        config.weights = match w {
            WeightsArg::Dbi => WeightMode::Dbi,
            WeightsArg::Uniform => WeightMode::Uniform,
        };
    }
    if a.no_intra {
        config.intra = false;
    }
    if a.no_inter {
        config.inter = InterMode::Off;
    }
    if let Some(i) = a.inter {
        config.inter = match i {
            InterArg::Centroid => InterMode::Centroid,
            InterArg::SampleTriplet => InterMode::SampleTriplet,
            InterArg::Off => InterMode::Off,
        };
    }
    if let Some(p) = a.checkpoint_policy {
        config.checkpoint = match p {
            PolicyArg::Last => CheckpointPolicy::Last,
            PolicyArg::BestSrcc => CheckpointPolicy::BestSrcc,
        };
    }
    apply_overrides(config, &a.set)
}

fn apply_overrides(config: TrainConfig, sets: &[String]) -> CliResult<TrainConfig> {
    if sets.is_empty() {
        return Ok(config);
    }
    let mut value = serde_json::to_value(&config).expect("config serializes");
    let map = value.as_object_mut().expect("config is an object");
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {set:?}")))?;
        let key = key.trim();
        if !map.contains_key(key) {
            return Err(CliError::Usage(format!("--set: unknown config key {key:?}")));
        }
        let parsed = serde_json::from_str(raw.trim()).unwrap_or_else(|_| serde_json::Value::String(raw.trim().into()));
        map.insert(key.to_owned(), parsed);
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("--set: {e}")))
}

fn pick_models(bundle: DatasetBundle, a: &TrainArgs, spec: &ClusterSpec, exec: Exec) -> CliResult<DatasetBundle> {
    if let Some(models) = &a.models {
        let ids: Vec<&str> = models.iter().map(String::as_str).collect();
        return Ok(bundle.select_models(&ids)?);
    }
    if let Some(n) = a.max_models {
        let report = dbi_report(&bundle, spec, Selection::MaxModels(n), exec)?;
        let ids: Vec<&str> = report.selected().iter().map(|m| m.model_id.as_str()).collect();
        return Ok(bundle.select_models(&ids)?);
    }
    Ok(bundle)
}

fn train_cmd(a: &TrainArgs, exec: Exec) -> CliResult {
    let mut config = effective_config(a)?;
    config.exec = exec;
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let spec = config.cluster_spec()?;
    let bundle = pick_models(load_dataset(&a.manifest)?, a, &spec, exec)?;
    let bundle = split_dataset(bundle, config.train_fraction, config.seed)?;
    let weights = resolve_weights(&bundle, config.weights, &spec, exec)?;
    let outcome = train(&bundle, &config, &weights)?;
    let checkpoint = outcome.checkpoint(&bundle, &config)?;

    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    checkpoint.write(a.out.join("checkpoint.ptmc"))?;
    write_file(&a.out.join("train_log.csv"), &format_log(&outcome.history))?;
    let mut cfg_json = serde_json::to_string_pretty(&config).expect("config serializes");
    cfg_json.push('\n');
    write_file(&a.out.join("effective_config.json"), &cfg_json)?;

    let models = outcome
        .model_ids
        .iter()
        .zip(&outcome.weights)
        .map(|(m, w)| format!("{m}={w:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    println!("models: {models}");
    if let Some(last) = outcome.history.last() {
        let fmt = |x: Option<f64>| x.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"));
        println!(
            "epoch {}: loss {:.5}, test PLCC {}, SRCC {}",
            last.epoch,
            last.loss.total,
            fmt(last.test_plcc),
            fmt(last.test_srcc)
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn load_scoring(s: &ScoringArgs, split: SplitFilter) -> CliResult<(Checkpoint, DatasetBundle)> {
    let checkpoint = Checkpoint::read(&s.checkpoint)?;
    let bundle = load_dataset(&s.manifest)?;
    let bundle = if split == SplitFilter::All {
        bundle
    } else {
        split_dataset(bundle, checkpoint.train_fraction, checkpoint.split_seed)?
    };
    Ok((checkpoint, bundle))
}

fn print_report(report: &EvalReport, json: Option<&Path>) -> CliResult {
    println!("{}", EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    if let Some(path) = json {
        let mut text = report.to_json();
        text.push('\n');
        write_file(path, &text)?;
    }
    Ok(())
}

fn evaluate_cmd(a: &EvalArgs, exec: Exec) -> CliResult {
    let split = SplitFilter::from(a.split);
    let (checkpoint, bundle) = load_scoring(&a.scoring, split)?;
    let opts = EvalOptions { averaging: a.scoring.averaging.into(), exec };
    let report = evaluate(&checkpoint, &bundle, split, opts)?;
    print_report(&report, a.json.as_deref())
}

fn predict_cmd(a: &PredictArgs, exec: Exec) -> CliResult {
    let split = SplitFilter::from(a.split);
    let (checkpoint, bundle) = load_scoring(&a.scoring, split)?;
    let opts = EvalOptions { averaging: a.scoring.averaging.into(), exec };
    let rows = predict_bundle(&checkpoint, &bundle, split, opts)?;
    let mut csv = String::from("video_id,mos,pred\n");
    for (id, mos, pred) in rows {
        csv.push_str(&format!("{id},{mos},{pred}\n"));
    }
    match &a.out {
        Some(path) => write_file(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cross_evaluate_cmd(a: &CrossArgs, exec: Exec) -> CliResult {
    let checkpoint = Checkpoint::read(&a.scoring.checkpoint)?;
    let opts = EvalOptions { averaging: a.scoring.averaging.into(), exec };
    let report = cross_evaluate(&checkpoint, &a.scoring.manifest, opts)?;
    print_report(&report, a.json.as_deref())
}
