//! Command-line interface: `gen-data`, `train`, `report`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or configuration,
//! 3 training aborted on a non-finite loss or update.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    dataset_checksum, exponential_profile, load_dataset, manifest_path, pareto_profile, save_dataset, CountProfile,
    DataError, DatasetManifest, ExponentConvention, GaussianMixture, LongTailDataset,
};
use crate::registry::methods;
use crate::trainer::{derive_seed, train_and_evaluate, EvalReport, StepRecord, TrainConfig};
use crate::{Error, Result};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DBLTR_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "dbltr", version, about = "Dual-branch long-tailed recognition experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate a long-tailed Gaussian-mixture training set and a balanced test set.
    GenData(GenDataArgs),
    /// Train one method (or an ablation grid) over several seeds.
    Train(TrainArgs),
    /// Tabulate Many/Medium/Few/Overall accuracy from run manifests.
    Report(ReportArgs),
    /// List registered methods.
    Methods,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    Exponential,
    Pareto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exponent {
    LastIndex,
    PerHundred,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "exponential")]
    pub profile: ProfileKind,
    /// Explicit per-class counts, head first; overrides --profile.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Head-class count of the exponential profile.
    #[arg(long, default_value_t = 500)]
    pub base: usize,
    /// Imbalance factor of the exponential profile.
    #[arg(long, default_value_t = 100.0)]
    pub mu: f64,
    #[arg(long, value_enum, default_value = "last-index")]
    pub exponent: Exponent,
    /// Largest class of the Pareto profile.
    #[arg(long, default_value_t = 1280)]
    pub max: usize,
    /// Smallest class of the Pareto profile.
    #[arg(long, default_value_t = 5)]
    pub min: usize,
    #[arg(long, default_value_t = 6.0)]
    pub power: f64,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Distance between any two class means.
    #[arg(long, default_value_t = 5.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples per class in the balanced test set; 0 skips it.
    #[arg(long, default_value_t = 200)]
    pub test_per_class: usize,
    /// Training set path; the test set goes next to it as `<stem>.test.<ext>`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Metric / intra / inter on-off grid, six rows.
    ColbLosses,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training set written by `gen-data`.
    pub dataset: PathBuf,
    /// Evaluation set; defaults to the training set.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// JSON config with flat keys (or a run manifest, whose config is reused).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Registered method preset, applied after the config file.
    #[arg(long)]
    pub method: Option<String>,
    /// Seeds as a list and/or ranges, e.g. `0-4` or `1,3,7`.
    #[arg(long, default_value = "0-4")]
    pub seeds: String,
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
    /// Run name used in output file names; defaults to the method.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Also write a checkpoint per seed.
    #[arg(long)]
    pub checkpoints: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Flag overrides, applied last.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Weight of the inter-branch loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// LDAM margin scale.
    #[arg(long)]
    pub margin_scale: Option<f64>,
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub n_support: Option<usize>,
    #[arg(long)]
    pub n_query: Option<usize>,
    /// Constant branch weight instead of the parabolic schedule.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub backbone: Option<Vec<usize>>,
    /// Any config key, `key=value` with a JSON value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub manifests: Vec<PathBuf>,
    /// CSV output; defaults to `report.csv` in the output directory.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "runs")]
    pub out_dir: PathBuf,
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub overall: MeanStd,
    pub many: Option<MeanStd>,
    pub medium: Option<MeanStd>,
    pub few: Option<MeanStd>,
}

impl Aggregate {
    pub fn from_reports(reports: &[SeedReport]) -> Option<Self> {
        let pick = |f: fn(&EvalReport) -> Option<f64>| {
            let v: Option<Vec<f64>> = reports.iter().map(|r| f(&r.report)).collect();
            v.and_then(|v| MeanStd::of(&v))
        };
        Some(Self {
            overall: pick(|r| Some(r.overall))?,
            many: pick(|r| r.many),
            medium: pick(|r| r.medium),
            few: pick(|r| r.few),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub sha256: String,
    pub samples: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub report: EvalReport,
    pub loss_csv: PathBuf,
    pub steps: usize,
}

/// Everything needed to reproduce and compare one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u16,
    pub name: String,
    pub method: Option<String>,
    /// `seed` is replaced by each entry of `seeds`.
    pub config: TrainConfig,
    pub dataset: DatasetRef,
    pub test_dataset: Option<DatasetRef>,
    pub seeds: Vec<u64>,
    pub reports: Vec<SeedReport>,
    pub aggregate: Aggregate,
    pub wall_clock_seconds: f64,
    #[serde(default)]
    pub notes: Vec<String>,
}

pub const RUN_FORMAT: &str = "dbltr-run";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(&args).map(|_| ()),
        Command::Train(args) => train_cmd(&args).map(|_| ()),
        Command::Report(args) => {
            let table = report(&args)?;
            print!("{table}");
            Ok(())
        }
        Command::Methods => {
            let reg = methods();
            for name in reg.names() {
                println!("{name:10} {}", reg.get(name)?.description());
            }
            Ok(())
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Aborted(_) => 3,
        Error::Data(DataError::Io { .. }) => 1,
        _ => 2,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(path, json + "\n").map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// `d.bin` → `d.test.bin`.
pub fn test_set_path(train: &Path) -> PathBuf {
    let stem = train.file_stem().unwrap_or_default().to_string_lossy();
    let name = match train.extension() {
        Some(ext) => format!("{stem}.test.{}", ext.to_string_lossy()),
        None => format!("{stem}.test"),
    };
    train.with_file_name(name)
}

/// Writes the training set (and the balanced test set) with manifests.
pub fn gen_data(args: &GenDataArgs) -> Result<Vec<DatasetManifest>> {
    let profile = match &args.counts {
        Some(counts) => CountProfile::new(counts.clone())?,
        None => match args.profile {
            ProfileKind::Exponential => {
                let convention = match args.exponent {
                    Exponent::LastIndex => ExponentConvention::LastIndex,
                    Exponent::PerHundred => ExponentConvention::PerHundred,
                };
                exponential_profile(args.base, args.mu, args.classes, convention)?
            }
            ProfileKind::Pareto => pareto_profile(args.classes, args.max, args.min, args.power)?,
        },
    };
    if !(args.separation > 0.0) || !(args.sigma > 0.0) {
        return Err(DataError::Validation("separation and sigma must be positive".into()).into());
    }
    let mixture = GaussianMixture::new(profile.num_classes(), args.dim, args.separation, args.sigma, args.seed)?;
    let generator = serde_json::to_value(args).ok();
    let train = mixture.sample(&profile, derive_seed(args.seed, 1))?;
    let mut out = vec![save_dataset(&train, &args.output, generator.clone())?];
    if args.test_per_class > 0 {
        let balanced = CountProfile::new(vec![args.test_per_class; profile.num_classes()])?;
        let test = mixture.sample(&balanced, derive_seed(args.seed, 2))?;
        out.push(save_dataset(&test, &test_set_path(&args.output), generator)?);
    }
    Ok(out)
}

/// Loads a dataset and, when its sidecar exists, checks the recorded checksum.
pub fn load_checked(path: &Path) -> Result<(LongTailDataset, DatasetRef)> {
    let ds = load_dataset(path)?;
    let sha256 = dataset_checksum(&ds);
    let sidecar = manifest_path(path);
    if sidecar.exists() {
        let m: DatasetManifest = read_json(&sidecar)?;
        if m.sha256 != sha256 {
            return Err(DataError::Validation(format!(
                "{}: checksum {sha256} does not match manifest {}",
                path.display(),
                m.sha256
            ))
            .into());
        }
    }
    let r = DatasetRef {
        path: path.to_path_buf(),
        sha256,
        samples: ds.len(),
        classes: ds.num_classes(),
    };
    Ok((ds, r))
}

/// `0-4`, `1,3,7`, `0-2,9`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seeds `{spec}`"));
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                );
                if b < a {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

/// Defaults, then the config file, then the method preset, then flags.
///
/// `--epochs` also rescales warmup and milestones, except those given
/// explicitly in the file or on the command line.
pub fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let mut explicit = std::collections::BTreeSet::new();
    if let Some(path) = &args.config {
        let file: serde_json::Value = read_json(path)?;
        let file = match file.get("format").and_then(|f| f.as_str()) {
            Some(RUN_FORMAT) => file.get("config").cloned().unwrap_or_default(),
            _ => file,
        };
        let serde_json::Value::Object(map) = file else {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        };
        for (k, v) in map {
            explicit.insert(k.clone());
            value[k] = v;
        }
    }
    let mut config: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(m) = &args.method {
        methods().get(m)?.apply(&mut config);
    }
    let o = &args.overrides;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = &o.$flag { config.$field = v.clone().into(); })*
        };
    }
    if let Some(epochs) = o.epochs {
        let (warmup, milestones) = (config.warmup_epochs, config.milestones.clone());
        config.rescale_epochs(epochs);
        if explicit.contains("warmup_epochs") {
            config.warmup_epochs = warmup;
        }
        if explicit.contains("milestones") {
            config.milestones = milestones;
        }
    }
    set!(batch_size => batch_size, lr => base_lr, warmup_epochs => warmup_epochs,
        milestones => milestones, temperature => temperature, lambda => inter_weight,
        margin_scale => margin_scale, n_way => n_way, n_support => n_support, n_query => n_query,
        alpha => alpha_override, backbone => backbone_widths);
    if !o.set.is_empty() {
        let mut value = serde_json::to_value(&config).expect("config serializes");
        for kv in &o.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            if value.get(k).is_none() {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            value[k] = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
        }
        config = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    }
    config.validate()?;
    Ok(config)
}

pub const LOSS_CSV_HEADER: &str =
    "epoch,step,lr,alpha,l_imb,l_m,l_intra,l_inter,l_con,total,head_count,inter_skipped,episode_resampled";

/// Per-step loss history; reals carry 17 significant digits.
pub fn loss_csv(history: &[StepRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in history {
        let b = &r.breakdown;
        let _ = writeln!(
            s,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{}",
            r.epoch,
            r.step,
            r.lr,
            b.alpha,
            b.l_imb,
            b.l_m,
            b.l_intra,
            b.l_inter,
            b.l_con,
            b.total,
            r.head_count,
            b.inter_skipped,
            r.episode_resampled
        );
    }
    s
}

/// One row of the contrastive-loss ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub metric: bool,
    pub intra: bool,
    pub inter: bool,
}

pub const COLB_ABLATION: [AblationRow; 6] = [
    AblationRow {
        name: "none",
        metric: false,
        intra: false,
        inter: false,
    },
    AblationRow {
        name: "m",
        metric: true,
        intra: false,
        inter: false,
    },
    AblationRow {
        name: "m+intra",
        metric: true,
        intra: true,
        inter: false,
    },
    AblationRow {
        name: "m+inter",
        metric: true,
        intra: false,
        inter: true,
    },
    AblationRow {
        name: "intra+inter",
        metric: false,
        intra: true,
        inter: true,
    },
    AblationRow {
        name: "all",
        metric: true,
        intra: true,
        inter: true,
    },
];

impl AblationRow {
    pub fn apply(&self, c: &mut TrainConfig) {
        c.colb = self.metric || self.intra || self.inter;
        c.use_metric = self.metric;
        c.use_intra = self.intra;
        c.use_inter = self.inter;
    }
}

struct Loaded {
    train: LongTailDataset,
    train_ref: DatasetRef,
    test: Option<(LongTailDataset, DatasetRef)>,
}

fn run_seeds(
    name: &str,
    method: Option<String>,
    config: &TrainConfig,
    seeds: &[u64],
    data: &Loaded,
    args: &TrainArgs,
) -> Result<RunManifest> {
    let start = Instant::now();
    let one = |seed: u64| -> Result<SeedReport> {
        let c = TrainConfig { seed, ..config.clone() };
        let csv_path = args.out_dir.join(format!("{name}.seed{seed}.loss.csv"));
        let outcome = train_and_evaluate(&data.train, data.test.as_ref().map(|t| &t.0), &c);
        let outcome = match outcome {
            Ok(o) => o,
            Err(Error::Aborted(a)) => {
                fs::write(&csv_path, loss_csv(&a.history)).map_err(io_err(&csv_path))?;
                return Err(Error::Aborted(a));
            }
            Err(e) => return Err(e),
        };
        fs::write(&csv_path, loss_csv(&outcome.history)).map_err(io_err(&csv_path))?;
        if args.checkpoints {
            outcome
                .params
                .save(&args.out_dir.join(format!("{name}.seed{seed}.ckpt")))?;
        }
        Ok(SeedReport {
            seed,
            report: outcome.report,
            loss_csv: csv_path,
            steps: outcome.history.len(),
        })
    };
    let jobs = args.jobs.max(1);
    let mut reports = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(jobs) {
        let results: Vec<Result<SeedReport>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || one(seed))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Invalid("worker panicked".into())))
                })
                .collect()
        });
        for r in results {
            reports.push(r?);
        }
    }
    let aggregate = Aggregate::from_reports(&reports).ok_or_else(|| Error::Invalid("no seeds".into()))?;
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        version: 1,
        name: name.to_string(),
        method,
        config: config.clone(),
        dataset: data.train_ref.clone(),
        test_dataset: data.test.as_ref().map(|t| t.1.clone()),
        seeds: seeds.to_vec(),
        reports,
        aggregate,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        notes: Vec::new(),
    };
    Ok(manifest)
}

pub fn run_manifest_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(format!("{name}.manifest.json"))
}

/// Trains every requested configuration. Returns the manifests written.
pub fn train_cmd(args: &TrainArgs) -> Result<Vec<RunManifest>> {
    let config = resolve_config(args)?;
    let seeds = parse_seeds(&args.seeds)?;
    let (train, train_ref) = load_checked(&args.dataset)?;
    let test = args.test.as_deref().map(load_checked).transpose()?;
    if let Some((t, _)) = &test {
        if t.num_classes() != train.num_classes() || t.dim() != train.dim() {
            return Err(DataError::Validation(format!(
                "test set has {} classes of dim {}, training set {} of dim {}",
                t.num_classes(),
                t.dim(),
                train.num_classes(),
                train.dim()
            ))
            .into());
        }
    }
    let data = Loaded { train, train_ref, test };
    fs::create_dir_all(&args.out_dir).map_err(io_err(&args.out_dir))?;
    let base = args
        .name
        .clone()
        .or_else(|| args.method.clone())
        .unwrap_or_else(|| "run".into());

    let manifests = match args.ablate {
        None => vec![run_seeds(&base, args.method.clone(), &config, &seeds, &data, args)?],
        Some(Ablation::ColbLosses) => {
            let mut rows = Vec::with_capacity(COLB_ABLATION.len());
            for row in COLB_ABLATION {
                let mut c = config.clone();
                row.apply(&mut c);
                rows.push(run_seeds(
                    &format!("{base}.{}", row.name),
                    args.method.clone(),
                    &c,
                    &seeds,
                    &data,
                    args,
                )?);
            }
            let notes = ablation_notes(&rows);
            rows.last_mut().expect("six rows").notes = notes;
            rows
        }
    };
    for m in &manifests {
        write_json(&run_manifest_path(&args.out_dir, &m.name), m)?;
    }
    Ok(manifests)
}

/// Compares the full-loss row against the others, seed by seed, on overall
/// accuracy. Empty when the full row wins in at least all but one seed and the
/// metric-only row beats the single-branch row on the Few split.
pub fn ablation_notes(rows: &[RunManifest]) -> Vec<String> {
    let mut notes = Vec::new();
    let Some((full, others)) = rows.split_last() else {
        return notes;
    };
    let seeds = full.seeds.len();
    let mut lost = Vec::new();
    for (i, r) in full.reports.iter().enumerate() {
        let winner = others
            .iter()
            .filter(|o| o.reports[i].report.overall > r.report.overall)
            .max_by(|a, b| a.reports[i].report.overall.total_cmp(&b.reports[i].report.overall));
        if let Some(w) = winner {
            lost.push(format!(
                "seed {}: `{}` {:.4} > full {:.4}",
                r.seed, w.name, w.reports[i].report.overall, r.report.overall
            ));
        }
    }
    let wins = seeds - lost.len();
    if seeds >= 2 && wins + 1 < seeds {
        notes.push(format!(
            "deviation: full three-loss row has the best overall accuracy in {wins} of {seeds} seeds ({})",
            lost.join("; ")
        ));
    }
    let few = |name: &str| {
        rows.iter()
            .find(|r| r.name.ends_with(&format!(".{name}")))
            .and_then(|r| r.aggregate.few.map(|f| f.mean))
    };
    if let (Some(m), Some(none)) = (few("m"), few("none")) {
        if m <= none {
            notes.push(format!(
                "deviation: metric-only Few accuracy {m:.4} does not exceed the single-branch row {none:.4}"
            ));
        }
    }
    notes
}

fn fmt_cell(v: Option<MeanStd>) -> String {
    match v {
        Some(m) => format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std),
        None => "-".into(),
    }
}

fn csv_cells(v: Option<MeanStd>) -> String {
    match v {
        Some(m) => format!("{:.16e},{:.16e}", m.mean, m.std),
        None => ",".into(),
    }
}

/// Renders the comparison table and writes the CSV. Rows are sorted by mean
/// overall accuracy, best first.
pub fn report(args: &ReportArgs) -> Result<String> {
    let mut runs: Vec<RunManifest> = args.manifests.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    for (path, m) in args.manifests.iter().zip(&runs) {
        if m.format != RUN_FORMAT {
            return Err(Error::Invalid(format!("{}: not a run manifest", path.display())));
        }
        let recomputed = Aggregate::from_reports(&m.reports);
        if recomputed.as_ref() != Some(&m.aggregate) {
            return Err(Error::Invalid(format!(
                "{}: aggregate does not match its per-seed reports",
                path.display()
            )));
        }
    }
    let first = &runs[0];
    for (path, m) in args.manifests.iter().zip(&runs).skip(1) {
        let test_sha = |m: &RunManifest| m.test_dataset.as_ref().map(|d| d.sha256.clone());
        if m.dataset.sha256 != first.dataset.sha256 || test_sha(m) != test_sha(first) {
            return Err(Error::Invalid(format!(
                "{} was run on a different dataset than {} (checksums differ)",
                path.display(),
                args.manifests[0].display()
            )));
        }
    }
    runs.sort_by(|a, b| b.aggregate.overall.mean.total_cmp(&a.aggregate.overall.mean));

    let width = runs.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let mut table = format!(
        "{:width$}  {:>13}  {:>13}  {:>13}  {:>13}  seeds\n",
        "method", "Many", "Medium", "Few", "Overall"
    );
    let mut csv = String::from(
        "name,method,seeds,many_mean,many_std,medium_mean,medium_std,few_mean,few_std,overall_mean,overall_std\n",
    );
    for r in &runs {
        let a = &r.aggregate;
        let _ = writeln!(
            table,
            "{:width$}  {:>13}  {:>13}  {:>13}  {:>13}  {}",
            r.name,
            fmt_cell(a.many),
            fmt_cell(a.medium),
            fmt_cell(a.few),
            fmt_cell(Some(a.overall)),
            r.seeds.len()
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.name,
            r.method.as_deref().unwrap_or(""),
            r.seeds.len(),
            csv_cells(a.many),
            csv_cells(a.medium),
            csv_cells(a.few),
            csv_cells(Some(a.overall))
        );
    }
    let csv_path = args.csv.clone().unwrap_or_else(|| args.out_dir.join("report.csv"));
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    Ok(table)
}
