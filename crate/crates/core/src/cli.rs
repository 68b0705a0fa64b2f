//! Command-line front end: `flora <verb> [flags]`.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on runtime
//! failures. Logs go to stderr (verbosity from `FLORA_LOG`), results to
//! stdout or to the files named by the flags.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::arch::{build_architecture, default_input_size, ArchError, HeadKind, ARCH_NAMES};
use crate::data::{scan_dataset, split_dataset, synth_dataset, AugmentConfig, DataError, DatasetIndex, DEFAULT_FRACTIONS};
use crate::metrics::dump_misclassified;
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::service::{self, ServiceError};
use crate::train::{
    evaluate, finetune, load_checkpoint, run_sweep, save_checkpoint, train, CheckpointError, Subset, SweepData,
    SweepSpec, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where samples come from: a class-per-directory tree or `synth:CxNxS[:seed]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DataSpec {
    Synth {
        classes: usize,
        per_class: usize,
        size: usize,
        seed: u64,
    },
    Dir(PathBuf),
}

impl FromStr for DataSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let Some(rest) = s.strip_prefix("synth:") else {
            return Ok(DataSpec::Dir(PathBuf::from(s)));
        };
        let bad = || format!("expected synth:<classes>x<per-class>x<size>[:seed], got {s:?}");
        let (dims, seed) = match rest.split_once(':') {
            Some((d, seed)) => (d, seed.parse().map_err(|_| bad())?),
            None => (rest, 0),
        };
        let parts: Vec<usize> = dims.split('x').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let [classes, per_class, size] = parts[..] else {
            return Err(bad());
        };
        if classes < 2 || per_class == 0 || size < 4 {
            return Err(format!("{s:?}: need at least 2 classes, 1 image per class and size 4"));
        }
        Ok(DataSpec::Synth {
            classes,
            per_class,
            size,
            seed,
        })
    }
}

impl DataSpec {
    pub fn load(&self) -> Result<DatasetIndex> {
        Ok(match self {
            DataSpec::Synth {
                classes,
                per_class,
                size,
                seed,
            } => synth_dataset(*classes, *per_class, *size, *seed)?,
            DataSpec::Dir(root) => {
                let index = scan_dataset(root)?;
                if !index.exclusions.is_empty() {
                    log::warn!("{}", index.exclusion_report());
                }
                index
            }
        })
    }

    /// A disjoint synthetic set of the same shape, for held-out evaluation.
    fn held_out(&self) -> Option<DataSpec> {
        match self {
            DataSpec::Synth {
                classes,
                per_class,
                size,
                seed,
            } => Some(DataSpec::Synth {
                classes: *classes,
                per_class: *per_class,
                size: *size,
                seed: seed.wrapping_add(1),
            }),
            DataSpec::Dir(_) => None,
        }
    }
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = OptimizerKind::ALL.iter().map(|k| k.as_str()).collect();
        format!("unknown optimizer {s:?}; valid names: {}", names.join(", "))
    })
}

/// A comma-separated flag value.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct List<T>(pub Vec<T>);

fn parse_optimizer_list(s: &str) -> std::result::Result<List<OptimizerKind>, String> {
    if s == "all" {
        return Ok(List(OptimizerKind::ALL.to_vec()));
    }
    s.split(',').map(|p| parse_optimizer(p.trim())).collect::<std::result::Result<_, _>>().map(List)
}

fn parse_ratio(s: &str) -> std::result::Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("expected a number, got {s:?}"))?;
    if (0.0..1.0).contains(&r) {
        Ok(r)
    } else {
        Err(format!("freeze ratio must lie in [0, 1), got {r}"))
    }
}

fn parse_ratio_list(s: &str) -> std::result::Result<List<f64>, String> {
    s.split(',').map(|p| parse_ratio(p.trim())).collect::<std::result::Result<_, _>>().map(List)
}

fn parse_arch(s: &str) -> std::result::Result<String, String> {
    if ARCH_NAMES.contains(&s) {
        Ok(s.to_string())
    } else {
        Err(format!("unknown architecture {s:?}; valid names: {}", ARCH_NAMES.join(", ")))
    }
}

fn parse_arch_list(s: &str) -> std::result::Result<List<String>, String> {
    s.split(',').map(|p| parse_arch(p.trim())).collect::<std::result::Result<_, _>>().map(List)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadArg {
    Gap,
    Flatten,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Gap => HeadKind::Gap,
            HeadArg::Flatten => HeadKind::Flatten,
        }
    }
}

fn parse_head_list(s: &str) -> std::result::Result<List<HeadArg>, String> {
    s.split(',')
        .map(|p| HeadArg::from_str(p.trim(), false).map_err(|_| format!("unknown head {p:?}; valid: gap, flatten")))
        .collect::<std::result::Result<_, _>>()
        .map(List)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentArg {
    /// On for directory data, off for synthetic data.
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetArg {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Debug, Parser)]
#[command(name = "flora", version, about = "Flower-species CNN toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Train every architecture x optimizer x freeze x head cell and write a result table.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print layer and parameter counts without allocating weights.
    Paramcount(ParamcountArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
    /// Time forward passes of a checkpoint.
    Bench(BenchArgs),
    /// Write a synthetic class-per-directory PNG dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonTrainArgs {
    /// Dataset directory (one sub-directory per class) or synth:<C>x<N>x<S>[:seed].
    #[arg(long, value_parser = DataSpec::from_str)]
    pub data: DataSpec,
    /// Training epochs.
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Seed for initialization, splitting, shuffling and augmentation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Square model input side; defaults to the architecture's native size (32 for mini models).
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Online augmentation of training and validation batches.
    #[arg(long, value_enum, default_value_t = AugmentArg::Auto)]
    pub augment: AugmentArg,
    /// Rayon worker threads; 1 gives single-worker runs. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_arch)]
    pub arch: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonTrainArgs,
    /// One of sgd, rmsprop, adam, adadelta, adagrad, adamax, nadam.
    #[arg(long, value_parser = parse_optimizer, default_value = "sgd")]
    pub optimizer: OptimizerKind,
    /// Learning rate; defaults to the optimizer's standard value.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fraction of base layers, from the input side, kept frozen.
    #[arg(long, value_parser = parse_ratio, default_value = "0")]
    pub freeze: f64,
    #[arg(long, value_enum, default_value_t = HeadArg::Gap)]
    pub head: HeadArg,
    /// Start from this checkpoint's base weights and attach a fresh head.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Comma-separated architecture names.
    #[arg(long, value_parser = parse_arch_list)]
    pub archs: List<String>,
    /// Comma-separated optimizer names, or "all".
    #[arg(long, value_parser = parse_optimizer_list, default_value = "all")]
    pub optimizers: List<OptimizerKind>,
    /// Comma-separated freeze ratios.
    #[arg(long, value_parser = parse_ratio_list, default_value = "0")]
    pub freezes: List<f64>,
    /// Comma-separated heads (gap, flatten).
    #[arg(long, value_parser = parse_head_list, default_value = "gap")]
    pub heads: List<HeadArg>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonTrainArgs,
    /// Warm-start cells of an architecture from a checkpoint: ARCH=PATH, repeatable.
    #[arg(long = "pretrained")]
    pub pretrained: Vec<String>,
    /// CSV result table path.
    #[arg(long, default_value = "sweep.csv")]
    pub out_table: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_parser = DataSpec::from_str)]
    pub data: DataSpec,
    /// Which split of directory data to evaluate (80/10/10 split by --seed).
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    pub subset: SubsetArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Write every misclassified sample, most confident first.
    #[arg(long)]
    pub dump_misclassified: Option<PathBuf>,
    /// Write metrics and the confusion matrix as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ParamcountArgs {
    #[arg(long, value_parser = parse_arch)]
    pub arch: String,
    #[arg(long, value_enum, default_value_t = HeadArg::Gap)]
    pub head: HeadArg,
    #[arg(long, default_value_t = 16)]
    pub classes: usize,
    #[arg(long, value_parser = parse_ratio, default_value = "0")]
    pub freeze: f64,
    /// Square input side; defaults to the architecture's native size.
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = service::DEFAULT_BENCH_RUNS)]
    pub runs: usize,
    #[arg(long, default_value_t = service::DEFAULT_BENCH_WARMUP)]
    pub warmup: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parses `args` (including the program name) and runs the verb.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("FLORA_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn print_config<T: Serialize>(verb: &str, args: &T, extra: &[(&str, String)]) {
    let mut text = format!("{verb} configuration:\n");
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(args) {
        for (k, v) in map {
            let _ = writeln!(text, "  {k}: {v}");
        }
    }
    for (k, v) in extra {
        let _ = writeln!(text, "  {k}: {v}");
    }
    eprint!("{text}");
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Invalid("--threads must be >= 1".into()));
        }
        // Fails only if the pool already exists, e.g. in-process re-runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Paramcount(a) => cmd_paramcount(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Train, validation and test ids. Directory data is split 80/10/10;
/// synthetic data trains on everything and tests on a disjoint synthetic set.
struct Prepared {
    index: DatasetIndex,
    train: Vec<usize>,
    validation: Vec<usize>,
    test_index: Option<DatasetIndex>,
    test: Vec<usize>,
}

fn prepare(spec: &DataSpec, seed: u64) -> Result<Prepared> {
    let index = spec.load()?;
    match spec.held_out() {
        Some(held) => {
            let test_index = held.load()?;
            Ok(Prepared {
                train: (0..index.len()).collect(),
                validation: Vec::new(),
                test: (0..test_index.len()).collect(),
                test_index: Some(test_index),
                index,
            })
        }
        None => {
            let split = split_dataset(&index, DEFAULT_FRACTIONS, seed)?;
            Ok(Prepared {
                train: split.train,
                validation: split.validation,
                test: split.test,
                test_index: None,
                index,
            })
        }
    }
}

impl Prepared {
    fn train(&self) -> Subset<'_> {
        Subset::new(&self.index, &self.train)
    }

    fn validation(&self) -> Option<Subset<'_>> {
        (!self.validation.is_empty()).then(|| Subset::new(&self.index, &self.validation))
    }

    fn test(&self) -> Subset<'_> {
        Subset::new(self.test_index.as_ref().unwrap_or(&self.index), &self.test)
    }
}

fn train_config(common: &CommonTrainArgs, optimizer: OptimizerConfig, freeze: f64) -> TrainConfig {
    let augment = match (common.augment, &common.data) {
        (AugmentArg::On, _) | (AugmentArg::Auto, DataSpec::Dir(_)) => Some(AugmentConfig::standard()),
        _ => None,
    };
    TrainConfig {
        epochs: common.epochs,
        batch_size: common.batch_size,
        optimizer,
        freeze_ratio: freeze,
        seed: common.seed,
        augment,
        augment_validation: true,
    }
}

fn input_size_for(arch: &str, explicit: Option<usize>) -> usize {
    explicit.unwrap_or_else(|| default_input_size(arch))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    set_threads(a.common.threads)?;
    let mut optimizer = OptimizerConfig::new(a.optimizer);
    if let Some(lr) = a.lr {
        optimizer = optimizer.with_learning_rate(lr);
    }
    let config = train_config(&a.common, optimizer, a.freeze);
    let size = input_size_for(&a.arch, a.common.input_size);
    print_config(
        "train",
        &a,
        &[
            ("input", format!("{size}x{size}x3")),
            ("resolved", serde_json::to_string(&config).unwrap_or_default()),
        ],
    );
    config.validate()?;
    let data = prepare(&a.common.data, a.common.seed)?;
    log::info!(
        "{} classes; train {} / validation {} / test {} samples",
        data.index.num_classes(),
        data.train.len(),
        data.validation.len(),
        data.test.len()
    );
    let ckpt = match &a.pretrained {
        Some(path) => {
            let source = load_checkpoint(path)?;
            if source.model.descriptor().name != a.arch {
                return Err(CliError::Invalid(format!(
                    "--pretrained holds {}, but --arch is {}",
                    source.model.descriptor().name,
                    a.arch
                )));
            }
            finetune(&source, a.head.into(), data.train(), data.validation(), &config)?
        }
        None => {
            let desc = build_architecture(&a.arch, [size, size, 3], data.index.num_classes(), a.head.into())?;
            train(&desc, data.train(), data.validation(), &config)?
        }
    };
    let mut ckpt = ckpt;
    ckpt.class_names = data.index.class_names.clone();
    for r in &ckpt.history {
        let val = match (r.val_loss, r.val_acc) {
            (Some(l), Some(acc)) => format!(" val_loss {l:.4} val_acc {acc:.4}"),
            _ => String::new(),
        };
        log::debug!("epoch {} loss {:.4} acc {:.4}{val}", r.epoch, r.train_loss, r.train_acc);
    }
    if let Some(last) = ckpt.history.last() {
        println!("final epoch {}: train loss {:.4}, train accuracy {:.4}", last.epoch, last.train_loss, last.train_acc);
    }
    if !data.test.is_empty() {
        let eval = evaluate(&ckpt.model, data.test(), config.batch_size)?;
        println!("held-out test ({} samples):\n{}", data.test.len(), eval.metrics.report());
    }
    save_checkpoint(&a.out, &ckpt)?;
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    set_threads(a.common.threads)?;
    let mut spec = SweepSpec::new(a.archs.0.clone(), a.optimizers.0.clone(), a.freezes.0.clone());
    spec.heads = a.heads.0.iter().map(|&h| h.into()).collect();
    spec.input_size = a.common.input_size;
    spec.config = train_config(&a.common, OptimizerConfig::new(OptimizerKind::Sgd), 0.0);
    for item in &a.pretrained {
        let (arch, path) = item
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("--pretrained expects ARCH=PATH, got {item:?}")))?;
        spec.pretrained.insert(arch.to_string(), load_checkpoint(path)?);
    }
    print_config(
        "sweep",
        &a,
        &[
            ("cells", spec.cells().len().to_string()),
            ("resolved", serde_json::to_string(&spec.config).unwrap_or_default()),
        ],
    );
    let data = prepare(&a.common.data, a.common.seed)?;
    let sweep_data = SweepData {
        train: data.train(),
        validation: data.validation(),
        test: data.test(),
    };
    let result = run_sweep(&spec, sweep_data, |row| match &row.error {
        None => log::info!(
            "{} {} freeze {} {}: accuracy {:.4}",
            row.architecture,
            row.optimizer,
            row.freeze_ratio,
            row.head,
            row.accuracy.unwrap_or(f64::NAN)
        ),
        Some(e) => log::warn!("{} {} freeze {} {}: failed: {e}", row.architecture, row.optimizer, row.freeze_ratio, row.head),
    })?;
    std::fs::write(&a.out_table, result.to_csv()).map_err(io_err(&a.out_table))?;
    print!("{}", result.render_table());
    println!("table written to {}", a.out_table.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: String,
    samples: usize,
    loss: f64,
    metrics: &'a crate::metrics::MacroMetrics,
    class_names: &'a [String],
    confusion: Vec<Vec<u64>>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    print_config("eval", &a, &[]);
    let ckpt = load_checkpoint(&a.ckpt)?;
    let index = a.data.load()?;
    if index.class_names != ckpt.class_names {
        return Err(CliError::Invalid(format!(
            "dataset classes {:?} differ from checkpoint classes {:?}",
            index.class_names, ckpt.class_names
        )));
    }
    let ids: Vec<usize> = match a.subset {
        SubsetArg::All => (0..index.len()).collect(),
        subset => {
            let split = split_dataset(&index, DEFAULT_FRACTIONS, a.seed)?;
            match subset {
                SubsetArg::Train => split.train,
                SubsetArg::Validation => split.validation,
                _ => split.test,
            }
        }
    };
    if ids.is_empty() {
        return Err(CliError::Invalid("selected subset is empty".into()));
    }
    let eval = evaluate(&ckpt.model, Subset::new(&index, &ids), a.batch_size)?;
    println!("samples: {}\nloss: {:.4}\n{}", ids.len(), eval.loss, eval.metrics.report());
    println!("{}", eval.confusion.render(&ckpt.class_names).map_err(TrainError::from)?);
    if let Some(path) = &a.dump_misclassified {
        let wrong = dump_misclassified(&eval.predictions, &ckpt.class_names);
        let mut text = String::from("sample\tactual\tpredicted\tconfidence\n");
        for m in &wrong {
            let _ = writeln!(text, "{}\t{}\t{}\t{:.4}", m.sample_id, m.actual, m.predicted, m.confidence);
        }
        std::fs::write(path, text).map_err(io_err(path))?;
        println!("{} misclassified samples written to {}", wrong.len(), path.display());
    }
    if let Some(path) = &a.report {
        let k = eval.confusion.size();
        let report = EvalReport {
            checkpoint: a.ckpt.display().to_string(),
            samples: ids.len(),
            loss: eval.loss,
            metrics: &eval.metrics,
            class_names: &ckpt.class_names,
            confusion: (0..k).map(|i| (0..k).map(|j| eval.confusion.get(i, j)).collect()).collect(),
        };
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Invalid(e.to_string()))?;
        std::fs::write(path, json).map_err(io_err(path))?;
    }
    Ok(())
}

/// Formats an integer with comma thousands separators.
pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn cmd_paramcount(a: ParamcountArgs) -> Result<()> {
    let size = input_size_for(&a.arch, a.input_size);
    print_config("paramcount", &a, &[("input", format!("{size}x{size}x3"))]);
    let desc = build_architecture(&a.arch, [size, size, 3], a.classes, a.head.into())?;
    let plan = desc.apply_freeze(a.freeze)?;
    let counts = desc.count_parameters(Some(&plan));
    let feature = desc.shapes()[desc.base_len - 1].clone();
    println!("architecture: {}", desc.name);
    println!("input: {size}x{size}x3");
    println!("head: {}", desc.head.as_str());
    println!("classes: {}", desc.num_classes);
    println!("layers: {}", desc.count_layers());
    println!("base feature map: {feature:?}");
    println!("frozen layers: {} (ratio {})", plan.frozen_nodes, plan.ratio);
    println!("total parameters: {}", group_thousands(counts.total));
    println!("trainable parameters: {}", group_thousands(counts.trainable));
    println!("non-trainable parameters: {}", group_thousands(counts.non_trainable));
    if a.arch == "xception" && desc.head == HeadKind::Flatten {
        let other = if size == 224 { 299 } else { 224 };
        let alt = build_architecture(&a.arch, [other, other, 3], a.classes, HeadKind::Flatten)?;
        let alt_total = alt.count_parameters(Some(&alt.apply_freeze(a.freeze)?)).total;
        let alt_feature = &alt.shapes()[alt.base_len - 1];
        println!(
            "note: the flatten head depends on the input size. The published flatten total for this model (22,467,128 with 16 classes) \
             matches a 224x224 input; the native 299x299 input gives a larger feature map. \
             At {other}x{other}: feature map {alt_feature:?}, total {}.",
            group_thousands(alt_total)
        );
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    print_config("serve", &a, &[]);
    let handle = service::load_model(&a.ckpt)?;
    let info = handle.info();
    log::info!(
        "{} with {} classes, {} parameters",
        info.architecture,
        info.num_classes,
        group_thousands(info.parameters.total)
    );
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Invalid(format!("cannot start runtime: {e}")))?;
    let addr = SocketAddr::new(a.host, a.port);
    runtime
        .block_on(service::serve(handle, addr))
        .map_err(|source| CliError::Invalid(format!("server on {addr} failed: {source}")))
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    print_config("bench", &a, &[]);
    let handle = service::load_model(&a.ckpt)?;
    let report = handle.benchmark(a.runs, a.warmup)?;
    print!("{}", report.render(handle.name()));
    if let Some(path) = &a.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Invalid(e.to_string()))?;
        std::fs::write(path, json).map_err(io_err(path))?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    print_config("synth", &a, &[]);
    let index = synth_dataset(a.classes, a.per_class, a.size, a.seed)?;
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..index.len() {
        let label = index.samples[i].label;
        let n = per_class.entry(label).or_default();
        let dir = a.out_dir.join(&index.class_names[label]);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let img = index.load(i, (a.size, a.size))?;
        let raw: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let path = dir.join(format!("img_{:04}.png", *n));
        let buf = image::RgbImage::from_raw(a.size as u32, a.size as u32, raw)
            .ok_or_else(|| CliError::Invalid("image buffer size mismatch".into()))?;
        buf.save(&path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        *n += 1;
    }
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "wrote {} images in {} classes to {}", index.len(), a.classes, a.out_dir.display());
    Ok(())
}
