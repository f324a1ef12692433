//! Command-line entry points.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{preset, ConfigError, SslLossKind, TrainConfig};
use crate::data::{load_dataset, make_split, DataError, Dataset, LabeledSplit};
use crate::metrics::{plot_accuracy_curves, read_log, run_stats, summarize, CurveLog, MetricsError, RunStats, LAST_WINDOW};
use crate::trainer::{
    evaluate, load_checkpoint, model_spec, run, RunOptions, RunSummary, TrainError, TrainState, CONFIG_FILE,
    FINAL_CHECKPOINT, METRICS_FILE, SPLIT_FILE,
};

pub const DATA_ROOT_ENV: &str = "DOUBLEMATCH_DATA";

pub const EXIT_OK: i32 = 0;
pub const EXIT_TRAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "doublematch", version, about = "Semi-supervised training with pseudo-labels and a self-supervised feature loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a run's checkpoint on the test set.
    Eval(EvalArgs),
    /// Compare the four feature-loss variants on one split.
    AblateLoss(AblateLossArgs),
    /// Paired runs with and without the pseudo-label loss.
    AblatePseudo(AblatePseudoArgs),
    /// Min and last-20-median error across runs.
    Summarize(SummarizeArgs),
    /// Accuracy-vs-step plot.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Named preset, e.g. cifar100-10000 or desk-synthetic.
    #[arg(long)]
    pub preset: Option<String>,
    /// Key-value config file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Directory holding the published dataset files.
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue an interrupted run in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many steps, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to evaluate; defaults to the run's final checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateLossArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// w_s for the cosine loss.
    #[arg(long, default_value_t = ABLATION_LOSSES[0].w_s)]
    pub w_s_cosine: f64,
    /// w_s for the mean squared error.
    #[arg(long, default_value_t = ABLATION_LOSSES[1].w_s)]
    pub w_s_mse: f64,
    /// w_s for the softmax cross-entropy with λ = 1.
    #[arg(long, default_value_t = ABLATION_LOSSES[2].w_s)]
    pub w_s_softmax: f64,
    /// w_s for the softmax cross-entropy with λ = 0.1.
    #[arg(long, default_value_t = ABLATION_LOSSES[3].w_s)]
    pub w_s_softmax_sharp: f64,
    /// Run the variants on concurrent threads.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct AblatePseudoArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Labeled-set sizes; defaults to the config's num_labels.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<usize>,
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Metric CSV files or run directories.
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// `LABEL=RUN_DIR`, or a bare run directory labelled by its w_s. Repeatable.
    #[arg(long = "run", required = true)]
    pub runs: Vec<String>,
}

/// One row of the feature-loss comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossVariant {
    pub name: &'static str,
    pub kind: SslLossKind,
    pub temperature: f64,
    pub w_s: f64,
}

/// Feature-loss variants with their tuned weights (CIFAR-100, 10,000 labels).
pub const ABLATION_LOSSES: [LossVariant; 4] = [
    LossVariant {
        name: "cosine",
        kind: SslLossKind::Cosine,
        temperature: 1.0,
        w_s: 10.0,
    },
    LossVariant {
        name: "mse",
        kind: SslLossKind::Mse,
        temperature: 1.0,
        w_s: 0.25,
    },
    LossVariant {
        name: "softmax-l1",
        kind: SslLossKind::SoftmaxCe,
        temperature: 1.0,
        w_s: 1.0,
    },
    LossVariant {
        name: "softmax-l0.1",
        kind: SslLossKind::SoftmaxCe,
        temperature: 0.1,
        w_s: 0.5,
    },
];

/// Full-scale error rates of the four variants, in the order above.
pub const REFERENCE_LOSS_ERRORS: [f64; 4] = [21.22, 23.91, 23.23, 23.57];

/// Full-scale accuracy reductions from removing the pseudo-label loss on
/// CIFAR-100, by label count.
pub const REFERENCE_PSEUDO_REDUCTIONS: [(usize, f64); 4] = [(400, 8.46), (1000, 3.81), (2500, 2.20), (10_000, 0.39)];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("run directory {dir} is incomplete: missing {missing}")]
    Manifest { dir: PathBuf, missing: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Data(DataError::NoRoot(_) | DataError::UnknownDataset(_)) => EXIT_USAGE,
            CliError::Train(TrainError::Config(_)) => EXIT_USAGE,
            _ => EXIT_TRAIN,
        }
    }
}

/// Preset, then config file, then `--set` overrides; validated.
pub fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &args.preset {
        Some(name) => preset(name)?,
        None => TrainConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn data_root_for(cfg: &TrainConfig, root: Option<&Path>) -> Result<(), CliError> {
    if cfg.dataset != "synthetic-shapes" && root.is_none() {
        return Err(CliError::Usage(format!(
            "dataset {} needs --data-root (or the {DATA_ROOT_ENV} environment variable)",
            cfg.dataset
        )));
    }
    Ok(())
}

fn load_data(cfg: &TrainConfig, root: Option<&Path>) -> Result<Dataset, CliError> {
    data_root_for(cfg, root)?;
    Ok(load_dataset(cfg, root)?)
}

fn split_for(cfg: &TrainConfig, ds: &Dataset) -> Result<LabeledSplit, CliError> {
    Ok(make_split(&ds.train.labels, ds.num_classes, cfg.num_labels, cfg.fold)?)
}

/// Files every finished run directory must contain.
pub const MANIFEST: [&str; 4] = [CONFIG_FILE, SPLIT_FILE, METRICS_FILE, FINAL_CHECKPOINT];

pub fn check_manifest(dir: &Path) -> Result<(), CliError> {
    let missing: Vec<&str> = MANIFEST.iter().copied().filter(|f| !dir.join(f).exists()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Manifest {
            dir: dir.to_path_buf(),
            missing: missing.join(", "),
        })
    }
}

/// Create `dir` with the config snapshot already inside, by renaming a fully
/// written sibling into place.
fn create_run_dir(dir: &Path, cfg: &TrainConfig) -> Result<(), CliError> {
    if dir.exists() {
        let empty = std::fs::read_dir(dir).map(|mut d| d.next().is_none()).unwrap_or(false);
        if !empty {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --resume or choose another --out",
                dir.display()
            )));
        }
        std::fs::remove_dir(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    }
    let io = |e: std::io::Error| CliError::Usage(format!("cannot create {}: {e}", dir.display()));
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let name = dir.file_name().ok_or_else(|| CliError::Usage(format!("bad output path {}", dir.display())))?;
    let staging = dir.with_file_name(format!(".{}.staging", name.to_string_lossy()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(io)?;
    }
    std::fs::create_dir(&staging).map_err(io)?;
    std::fs::write(staging.join(CONFIG_FILE), cfg.to_text()).map_err(io)?;
    std::fs::rename(&staging, dir).map_err(io)?;
    Ok(())
}

fn train_one(cfg: &TrainConfig, ds: &Dataset, out: &Path, resume: bool, stop_after: Option<u64>, progress: bool) -> Result<RunSummary, CliError> {
    if !resume || !out.exists() {
        create_run_dir(out, cfg)?;
    } else {
        let saved = std::fs::read_to_string(out.join(CONFIG_FILE)).unwrap_or_default();
        if saved != cfg.to_text() {
            return Err(CliError::Usage(format!(
                "config differs from the snapshot in {}; cannot resume",
                out.display()
            )));
        }
    }
    let split = split_for(cfg, ds)?;
    let summary = run(
        cfg,
        ds,
        &split,
        &RunOptions {
            out_dir: out.to_path_buf(),
            resume,
            stop_after,
            progress,
        },
    )?;
    if summary.finished {
        check_manifest(out)?;
    }
    Ok(summary)
}

fn describe(stats: &Option<RunStats>) -> String {
    match stats {
        Some(s) => format!(
            "final {:.2}%  min {:.2}%  last-{LAST_WINDOW} median {:.2}%{}",
            s.final_error,
            s.min_error,
            s.last_median,
            if s.fallback { " (fewer evaluations than the window)" } else { "" }
        ),
        None => "no evaluations yet".into(),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunSummary, CliError> {
    let cfg = resolve_config(&args.config)?;
    let ds = load_data(&cfg, args.config.data_root.as_deref())?;
    let summary = train_one(&cfg, &ds, &args.out, args.resume, args.stop_after, !args.quiet)?;
    println!("{}: {} steps, {}", args.out.display(), summary.steps, describe(&summary.stats));
    Ok(summary)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<f64, CliError> {
    let text = std::fs::read_to_string(args.run.join(CONFIG_FILE))
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.run.join(CONFIG_FILE).display())))?;
    let cfg = TrainConfig::parse_str(&text)?;
    let ds = load_data(&cfg, args.data_root.as_deref())?;
    let mut state = TrainState::<f32>::new(&cfg, model_spec(&cfg, ds.image_size())?);
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| args.run.join(FINAL_CHECKPOINT));
    load_checkpoint(&mut state, &cfg, &ckpt)?;
    let err = evaluate(&state, &ds.test, cfg.eval_batch_size)? * 100.0;
    println!("step {}: test error {err:.2}% (EMA weights)", state.step);
    Ok(err)
}

/// Run `jobs` sequentially, or on scoped threads when `parallel` is set.
fn run_all<J: Sync>(jobs: &[J], parallel: bool, f: impl Fn(&J) -> Result<RunSummary, CliError> + Sync) -> Result<Vec<RunSummary>, CliError> {
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.iter().map(|j| s.spawn(|| f(j))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        })
    } else {
        jobs.iter().map(f).collect()
    }
}

/// Result of the feature-loss comparison.
#[derive(Debug, Clone)]
pub struct LossAblation {
    pub variants: Vec<(LossVariant, TrainConfig, RunSummary)>,
    pub table: String,
}

pub fn loss_variants(args: &AblateLossArgs) -> Vec<LossVariant> {
    let weights = [args.w_s_cosine, args.w_s_mse, args.w_s_softmax, args.w_s_softmax_sharp];
    ABLATION_LOSSES
        .iter()
        .zip(weights)
        .map(|(v, w_s)| LossVariant { w_s, ..*v })
        .collect()
}

pub fn cmd_ablate_loss(args: &AblateLossArgs) -> Result<LossAblation, CliError> {
    let base = resolve_config(&args.config)?;
    let ds = load_data(&base, args.config.data_root.as_deref())?;
    let jobs: Vec<(LossVariant, TrainConfig)> = loss_variants(args)
        .into_iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.ssl_loss_kind = v.kind;
            cfg.softmax_temperature = v.temperature;
            cfg.w_s = v.w_s;
            (v, cfg)
        })
        .collect();
    for (_, cfg) in &jobs {
        cfg.validate()?;
    }
    let summaries = run_all(&jobs, args.parallel, |(v, cfg)| {
        train_one(cfg, &ds, &args.out.join(v.name), false, None, !args.quiet)
    })?;
    let mut table = String::from("loss            lambda   w_s      final    min      last-20\n");
    for ((v, _), s) in jobs.iter().zip(&summaries) {
        let (f, m, l) = s
            .stats
            .map(|st| (st.final_error, st.min_error, st.last_median))
            .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        writeln!(table, "{:<15} {:<8} {:<8} {f:<8.2} {m:<8.2} {l:.2}", v.name, v.temperature, v.w_s).unwrap();
    }
    std::fs::write(args.out.join("table.txt"), &table).map_err(|e| CliError::Usage(e.to_string()))?;
    print!("{table}");
    Ok(LossAblation {
        variants: jobs.into_iter().zip(summaries).map(|((v, c), s)| (v, c, s)).collect(),
        table,
    })
}

/// One label count of the pseudo-label ablation.
#[derive(Debug, Clone)]
pub struct PseudoPair {
    pub num_labels: usize,
    pub with: (TrainConfig, RunSummary),
    pub without: (TrainConfig, RunSummary),
    /// Accuracy lost by removing the pseudo-label loss, in points, from the
    /// last-20 median errors.
    pub reduction: f64,
}

#[derive(Debug, Clone)]
pub struct PseudoAblation {
    pub pairs: Vec<PseudoPair>,
    /// Set when the reduction at the smallest label count is below the one at
    /// the largest.
    pub trend_warning: Option<String>,
    pub table: String,
}

pub fn cmd_ablate_pseudo(args: &AblatePseudoArgs) -> Result<PseudoAblation, CliError> {
    let base = resolve_config(&args.config)?;
    let ds = load_data(&base, args.config.data_root.as_deref())?;
    let w_s_overridden = args.config.overrides.iter().any(|o| o.trim_start().starts_with("w_s"));
    let counts = if args.labels.is_empty() { vec![base.num_labels] } else { args.labels.clone() };
    let mut jobs = Vec::new();
    for &n in &counts {
        let mut cfg = base.clone();
        cfg.num_labels = n;
        if !w_s_overridden {
            if let Ok(p) = preset(&format!("{}-{n}", base.dataset)) {
                cfg.w_s = p.w_s;
            }
        }
        for enabled in [true, false] {
            let mut c = cfg.clone();
            c.enable_pseudo_label_loss = enabled;
            c.validate()?;
            let dir = args.out.join(format!("labels-{n}")).join(if enabled { "with" } else { "without" });
            jobs.push((c, dir));
        }
    }
    let summaries = run_all(&jobs, args.parallel, |(cfg, dir)| train_one(cfg, &ds, dir, false, None, !args.quiet))?;
    let mut pairs = Vec::new();
    let mut table = String::from("labels   with     without  reduction\n");
    for (i, &n) in counts.iter().enumerate() {
        let w = &summaries[2 * i];
        let wo = &summaries[2 * i + 1];
        let err = |s: &RunSummary| s.stats.map(|st| st.last_median).unwrap_or(f64::NAN);
        let reduction = err(wo) - err(w);
        writeln!(table, "{n:<8} {:<8.2} {:<8.2} {reduction:.2}", err(w), err(wo)).unwrap();
        pairs.push(PseudoPair {
            num_labels: n,
            with: (jobs[2 * i].0.clone(), w.clone()),
            without: (jobs[2 * i + 1].0.clone(), wo.clone()),
            reduction,
        });
    }
    let trend_warning = if pairs.len() >= 2 {
        let smallest = pairs.iter().min_by_key(|p| p.num_labels).unwrap();
        let largest = pairs.iter().max_by_key(|p| p.num_labels).unwrap();
        (smallest.reduction < largest.reduction).then(|| {
            format!(
                "warning: reduction at {} labels ({:.2}) is below the reduction at {} labels ({:.2})",
                smallest.num_labels, smallest.reduction, largest.num_labels, largest.reduction
            )
        })
    } else {
        None
    };
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::write(args.out.join("table.txt"), &table).map_err(|e| CliError::Usage(e.to_string()))?;
    print!("{table}");
    if let Some(w) = &trend_warning {
        eprintln!("{w}");
    }
    Ok(PseudoAblation {
        pairs,
        trend_warning,
        table,
    })
}

fn metrics_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(METRICS_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn cmd_summarize(args: &SummarizeArgs) -> Result<String, CliError> {
    let logs = args
        .logs
        .iter()
        .map(|p| read_log(&metrics_path(p)))
        .collect::<Result<Vec<_>, _>>()?;
    for (p, l) in args.logs.iter().zip(&logs) {
        let s = run_stats(l, LAST_WINDOW)?;
        println!("{}: {}", p.display(), describe(&Some(s)));
    }
    let text = summarize(&logs)?.to_string();
    println!("{text}");
    Ok(text)
}

pub fn cmd_plot(args: &PlotArgs) -> Result<(), CliError> {
    let mut curves = Vec::new();
    let mut groups: Vec<String> = Vec::new();
    for spec in &args.runs {
        let (label, dir) = match spec.split_once('=') {
            Some((l, d)) if !Path::new(spec).exists() => (Some(l.to_string()), PathBuf::from(d)),
            _ => (None, PathBuf::from(spec)),
        };
        let cfg_text = std::fs::read_to_string(dir.join(CONFIG_FILE)).ok();
        let cfg = cfg_text.as_deref().map(TrainConfig::parse_str).transpose()?;
        let method = label.unwrap_or_else(|| match &cfg {
            Some(c) => format!("w_s={}", c.w_s),
            None => dir.display().to_string(),
        });
        let dataset = cfg.map(|c| c.dataset).unwrap_or_else(|| "run".into());
        if !groups.contains(&method) {
            groups.push(method.clone());
        }
        curves.push(CurveLog {
            dataset,
            method,
            rows: read_log(&metrics_path(&dir))?,
        });
    }
    let names: Vec<&str> = groups.iter().map(String::as_str).collect();
    plot_accuracy_curves(&curves, &names, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::AblateLoss(a) => cmd_ablate_loss(a).map(|_| ()),
        Command::AblatePseudo(a) => cmd_ablate_pseudo(a).map(|_| ()),
        Command::Summarize(a) => cmd_summarize(a).map(|_| ()),
        Command::Plot(a) => cmd_plot(a),
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_args(preset: Option<&str>, config: Option<PathBuf>, sets: &[&str]) -> ConfigArgs {
        ConfigArgs {
            preset: preset.map(String::from),
            config,
            overrides: sets.iter().map(|s| s.to_string()).collect(),
            data_root: None,
        }
    }

    #[test]
    fn precedence_set_over_config_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        std::fs::write(&file, "w_s = 3\nmu = 2\n").unwrap();
        let cfg = resolve_config(&config_args(Some("cifar100-10000"), Some(file.clone()), &["w_s=0"])).unwrap();
        assert_eq!(cfg.w_s, 0.0);
        assert_eq!(cfg.mu, 2);
        assert_eq!(cfg.gamma, 5.0 / 8.0);
        let cfg = resolve_config(&config_args(Some("cifar100-10000"), Some(file), &[])).unwrap();
        assert_eq!(cfg.w_s, 3.0);
        let err = resolve_config(&config_args(Some("nope"), None, &[])).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        let err = resolve_config(&config_args(None, None, &["gamma=2"])).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn ablation_defaults_match_reference_weights() {
        let weights: Vec<f64> = ABLATION_LOSSES.iter().map(|v| v.w_s).collect();
        assert_eq!(weights, vec![10.0, 0.25, 1.0, 0.5]);
        let cli = Cli::try_parse_from(["doublematch", "ablate-loss", "--out", "x"]).unwrap();
        let Command::AblateLoss(a) = cli.command else { panic!() };
        let v = loss_variants(&a);
        assert_eq!(v, ABLATION_LOSSES.to_vec());
        // the reference ordering: cosine best, MSE worst
        let best = REFERENCE_LOSS_ERRORS.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(best, REFERENCE_LOSS_ERRORS[0]);
        assert!(REFERENCE_PSEUDO_REDUCTIONS.windows(2).all(|w| w[0].1 > w[1].1));
    }

    #[test]
    fn missing_data_root_is_a_usage_error_naming_the_flag() {
        let cfg = preset("cifar10-40").unwrap();
        let err = load_data(&cfg, None).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        assert!(err.to_string().contains("--data-root"));
    }

    #[test]
    fn parse_errors_exit_two() {
        assert_eq!(main_with_args(["doublematch", "train"]), EXIT_USAGE);
        assert_eq!(main_with_args(["doublematch", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn run_dir_refuses_to_clobber() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r");
        let cfg = TrainConfig::default();
        create_run_dir(&out, &cfg).unwrap();
        assert_eq!(std::fs::read_to_string(out.join(CONFIG_FILE)).unwrap(), cfg.to_text());
        assert!(create_run_dir(&out, &cfg).is_err());
        assert!(check_manifest(&out).is_err());
    }
}
