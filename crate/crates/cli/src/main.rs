//! `tabtune`: fit, predict, evaluate, compare and benchmark tabular
//! classifiers from the command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 training error.
//! Standard output carries only results; diagnostics go to standard error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use tabtune_core::dataset::{load_csv, load_table_csv, train_test_split, DataError, SchemaHints, SplitSpec};
use tabtune_core::leaderboard::{parse_configs, LeaderboardError, SuiteManifest, TabularLeaderboard};
use tabtune_core::metrics::DEFAULT_BINS;
use tabtune_core::models::registry::{Strategy, CATALOG};
use tabtune_core::models::PeftStatus;
use tabtune_core::pipeline::{parse_pairs, ErrorCategory, PipelineConfig, PipelineError, TabularPipeline};
use tabtune_core::tuning::TuningStrategy;

#[derive(Parser)]
#[command(name = "tabtune", version, about = "Adapt and evaluate tabular in-context learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a pipeline on a CSV file and save it.
    Fit(FitArgs),
    /// Predict labels or probabilities with a saved pipeline.
    Predict(PredictArgs),
    /// Report performance, calibration and fairness metrics.
    Evaluate(EvaluateArgs),
    /// Compare configurations on one train/test split.
    Leaderboard(LeaderboardArgs),
    /// Run configurations over a suite of datasets and aggregate ranks.
    Benchmark(BenchmarkArgs),
    /// Print the model registry: capabilities and default hyperparameters.
    Models,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    target: String,
    /// Flat dotted-key config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    /// inference, finetune or peft.
    #[arg(long)]
    strategy: Option<String>,
    /// sft or meta-learning.
    #[arg(long)]
    mode: Option<String>,
    /// none, smote, random_over, random_under, tomek, kmeans or knn (neighborhood cleaning).
    #[arg(long)]
    resample: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra config entries, e.g. `--set tuning_params.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Drop this column from the features before preprocessing.
    #[arg(long = "exclude-sensitive", value_name = "COLUMN")]
    exclude_sensitive: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model_file: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write class probabilities instead of labels.
    #[arg(long)]
    proba: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model_file: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the target column the pipeline was fitted on.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    calibration: bool,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    fairness_col: Option<String>,
    /// Class name or index treated as the favorable outcome.
    #[arg(long, default_value = "1")]
    positive_class: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankBy {
    Accuracy,
    Precision,
    Recall,
    #[value(name = "f1_score")]
    F1Score,
    #[value(name = "roc_auc_score")]
    RocAucScore,
    #[value(name = "expected_calibration_error")]
    ExpectedCalibrationError,
    #[value(name = "maximum_calibration_error")]
    MaximumCalibrationError,
    #[value(name = "brier_score_loss")]
    BrierScoreLoss,
    #[value(name = "fit_seconds")]
    FitSeconds,
    #[value(name = "predict_seconds")]
    PredictSeconds,
}

impl RankBy {
    fn key(self) -> &'static str {
        match self {
            RankBy::Accuracy => "accuracy",
            RankBy::Precision => "precision",
            RankBy::Recall => "recall",
            RankBy::F1Score => "f1_score",
            RankBy::RocAucScore => "roc_auc_score",
            RankBy::ExpectedCalibrationError => "expected_calibration_error",
            RankBy::MaximumCalibrationError => "maximum_calibration_error",
            RankBy::BrierScoreLoss => "brier_score_loss",
            RankBy::FitSeconds => "fit_seconds",
            RankBy::PredictSeconds => "predict_seconds",
        }
    }
}

#[derive(Args)]
struct LeaderboardArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    target: String,
    /// One TOML table per configuration.
    #[arg(long)]
    configs: PathBuf,
    #[arg(long, value_enum, default_value = "accuracy")]
    rank_by: RankBy,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    configs: PathBuf,
    #[arg(long, value_enum, default_value = "accuracy")]
    rank_by: RankBy,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

fn code_for(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Usage => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Training => 4,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self { code: code_for(e.category()), message: e.to_string() }
    }
}

impl From<LeaderboardError> for Failure {
    fn from(e: LeaderboardError) -> Self {
        Self { code: code_for(e.category()), message: e.to_string() }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self { code: 3, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self { code: 3, message: e.to_string() }
    }
}

/// `%.9g`-style formatting: nine significant digits, trailing zeros trimmed.
fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s }
    } else {
        format!("{v:.8e}")
    }
}

fn cmd_fit(args: FitArgs) -> Result<(), Failure> {
    let mut config = PipelineConfig::new("", TuningStrategy::Inference);
    if let Some(path) = &args.config {
        config.apply(&parse_pairs(&std::fs::read_to_string(path)?)?)?;
    }
    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(m) = args.model {
        overrides.push(("model_name".into(), m));
    }
    if let Some(s) = args.strategy {
        overrides.push(("tuning_strategy".into(), s));
    }
    if let Some(m) = args.mode {
        overrides.push(("tuning_params.finetune_mode".into(), m));
    }
    if let Some(r) = args.resample {
        overrides.push(("sampling.method".into(), r));
    }
    if let Some(s) = args.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    config.apply(&overrides)?;
    if config.model_name.is_empty() {
        return Err(Failure::usage("no model given: pass --model or set model_name in --config"));
    }
    let mut pipeline = TabularPipeline::new(config)?;
    let train = load_csv(&args.data, &args.target, &SchemaHints::new())?;
    let report = pipeline.fit_excluding(&train, &args.exclude_sensitive)?.clone();
    pipeline.save(&args.out)?;

    let mut lines = vec![
        ("model", pipeline.config().model_name.clone()),
        ("strategy", report.strategy.clone()),
        ("optimizer_steps", report.optimizer_steps.to_string()),
        ("skipped", report.skipped.to_string()),
    ];
    if let Some(loss) = report.losses.last() {
        lines.push(("final_loss", sig9(*loss)));
    }
    if let Some(peft) = &report.peft {
        match &peft.status {
            PeftStatus::Applied { targets } => {
                lines.push(("peft_status", "applied".into()));
                lines.push(("peft_targets", targets.len().to_string()));
            }
            PeftStatus::Fallback { reason } => {
                lines.push(("peft_status", "fallback".into()));
                lines.push(("peft_reason", reason.clone()));
            }
        }
        lines.push(("trainable_params", peft.trainable_params.to_string()));
        lines.push(("total_params", peft.total_params.to_string()));
    }
    lines.push(("out", args.out.display().to_string()));
    for (k, v) in lines {
        println!("{k}={v}");
    }
    if let Ok(t) = pipeline.timings() {
        eprintln!("fit took {:.3}s", t.total().as_secs_f64());
    }
    Ok(())
}

fn hints_for(pipeline: &TabularPipeline) -> Result<SchemaHints, Failure> {
    Ok(pipeline.preprocessor()?.column_kinds().into_iter().collect())
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), Failure> {
    let pipeline = TabularPipeline::load(&args.model_file)?;
    let hints = hints_for(&pipeline)?;
    let table = load_table_csv(&args.data, &hints, Some(pipeline.target_name()?))?;
    let pred = pipeline.predict_proba(&table)?;
    let mut text = String::new();
    if args.proba {
        let header: Vec<String> = (0..pred.n_classes()).map(|k| format!("p{k}")).collect();
        text.push_str(&format!("row,{}\n", header.join(",")));
        for (i, row) in pred.proba().iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|&p| sig9(p)).collect();
            text.push_str(&format!("{i},{}\n", cells.join(",")));
        }
    } else {
        let names = pipeline.class_names()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row", "label"]).map_err(|e| Failure { code: 3, message: e.to_string() })?;
        for (i, &label) in pred.labels().iter().enumerate() {
            w.write_record([i.to_string(), names[label].clone()]).map_err(|e| Failure { code: 3, message: e.to_string() })?;
        }
        text = String::from_utf8(w.into_inner().map_err(|e| Failure { code: 3, message: e.to_string() })?)
            .expect("csv output is utf-8");
    }
    write_output(args.out.as_deref(), &text)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let pipeline = TabularPipeline::load(&args.model_file)?;
    let target = args.target.clone().unwrap_or(pipeline.target_name()?.to_string());
    let mut hints = hints_for(&pipeline)?;
    if let Some(col) = &args.fairness_col {
        // groups are compared by raw text, so never reinterpret the column
        hints.entry(col.clone()).or_insert(tabtune_core::dataset::ColumnKind::Categorical);
    }
    let test = load_csv(&args.data, &target, &hints)?;
    let mut report = pipeline.evaluate(&test)?;
    if args.calibration {
        if args.bins == 0 {
            return Err(Failure::usage("--bins must be at least 1"));
        }
        report.merge(pipeline.evaluate_calibration(&test, args.bins)?);
    }
    if let Some(col) = &args.fairness_col {
        let names = pipeline.class_names()?;
        let positive = match names.iter().position(|n| *n == args.positive_class) {
            Some(k) => k,
            None => args
                .positive_class
                .parse::<usize>()
                .ok()
                .filter(|&k| k < names.len())
                .ok_or_else(|| Failure::usage(format!("--positive-class `{}` is neither a class name nor an index", args.positive_class)))?,
        };
        report.merge(pipeline.evaluate_fairness(&test, col, positive)?);
    }
    print!("{}", report.to_table());
    Ok(())
}

fn board_from_configs(path: &Path, seed: u64, threads: Option<usize>) -> Result<TabularLeaderboard, Failure> {
    if threads == Some(0) {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    let mut board = TabularLeaderboard::new(seed).with_threads(threads);
    for (name, config) in parse_configs(&std::fs::read_to_string(path)?)? {
        board.add_named(&name, config)?;
    }
    Ok(board)
}

fn cmd_leaderboard(args: LeaderboardArgs) -> Result<(), Failure> {
    let board = board_from_configs(&args.configs, args.seed, args.threads)?;
    let data = load_csv(&args.data, &args.target, &SchemaHints::new())?;
    let split = SplitSpec { test_fraction: args.test_fraction, stratified: true, seed: args.seed };
    let (train, test) = train_test_split(&data, &split)?;
    let result = board.run(&train, &test, args.rank_by.key())?;
    for x in &result.excluded {
        eprintln!("warning: {} excluded: {:?}", x.display_name, x.issue);
    }
    print!("{}", result.to_table());
    Ok(())
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<(), Failure> {
    let board = board_from_configs(&args.configs, args.seed, args.threads)?;
    let manifest = SuiteManifest::from_path(&args.suite)?;
    let result = board.run_suite(&manifest, args.rank_by.key())?;
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    result.write_outputs(&args.out, &format!("at unix time {now}"))?;
    for c in result.cells.iter().filter(|c| c.issue.is_some()) {
        eprintln!("warning: {} on {} excluded: {:?}", c.entry, c.dataset, c.issue.as_ref().expect("filtered"));
    }
    print!("{}", result.summary_text());
    Ok(())
}

fn cmd_models() {
    let strategies = Strategy::ALL;
    let name_w = CATALOG.iter().map(|m| m.name.len()).max().unwrap_or(5);
    let mut header = format!("{:<name_w$}", "model");
    for s in strategies {
        header.push_str(&format!("  {:<13}", s.as_str()));
    }
    println!("{}", header.trim_end());
    for m in CATALOG {
        let mut line = format!("{:<name_w$}", m.name);
        for s in strategies {
            line.push_str(&format!("  {:<13}", m.support(s).symbol()));
        }
        println!("{}", line.trim_end());
    }
    for m in CATALOG {
        println!();
        let note = if m.runnable { "" } else { " (reference only)" };
        println!("[{}]{note} {}", m.name, m.summary);
        println!("  preprocessing = {}", m.profile);
        for (k, v) in m.architecture {
            println!("  architecture.{k} = {v}");
        }
        for (section, kv) in m.defaults {
            for (k, v) in *kv {
                println!("  {section}.{k} = {v}");
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Leaderboard(a) => cmd_leaderboard(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Models => {
            cmd_models();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
