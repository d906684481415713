//! `ldrpm` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::complexity;
use crate::config::{self, TrainConfig};
use crate::dataset::{self, Split};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::model::{checkpoint, ModelConfig, Network, Variant};
use crate::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;
pub const RUN_MANIFEST: &str = "run_manifest.txt";

#[derive(Debug, Parser)]
#[command(
    name = "ldrpm",
    version,
    about = "Lightweight point-machine sound diagnosis networks",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic 1212-sample corpus with its train/val/test split.
    GenData(GenDataArgs),
    /// Train one network and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate saved weights on a dataset split.
    Eval(EvalArgs),
    /// Print per-layer parameter and FLOPs counts.
    Count(CountArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate all four ablation variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Seed for generation and splitting.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples per waveform (10 kHz nominal rate).
    #[arg(long, default_value_t = 8192)]
    input_length: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Network variant: cnt, cnt-mdsc, cnt-bsa or ld-rpmnet.
    #[arg(long, default_value = "ld-rpmnet")]
    model: Variant,
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Timed inference passes on the test split (0 skips timing).
    #[arg(long, default_value_t = train::TIMING_PASSES)]
    timing_passes: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    weights: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Split to score: train, val or test.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Timed inference passes (0 skips timing).
    #[arg(long, default_value_t = train::TIMING_PASSES)]
    timing_passes: usize,
    /// Also write metrics.csv and confusion.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct CountArgs {
    /// Network variant: cnt, cnt-mdsc, cnt-bsa or ld-rpmnet.
    #[arg(long, default_value = "ld-rpmnet")]
    model: Variant,
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the table as CSV (layer,params,flops).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check a single op; the whole suite runs when omitted.
    #[arg(long)]
    op: Option<String>,
    /// Seed for inputs and parameters.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key = value config file; conv_kind and attn_kind are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Timed inference passes per variant (0 skips timing).
    #[arg(long, default_value_t = train::TIMING_PASSES)]
    timing_passes: usize,
    #[command(flatten)]
    out: OutArgs,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Count(a) => count_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() && !force {
        return Err(Error::OutputExists(dir.to_path_buf()));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

struct RunManifest {
    command: String,
    seed: u64,
    config: String,
    started: u64,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: String) -> Self {
        RunManifest { command: command.to_string(), seed, config, started: now() }
    }

    fn write(&self, dir: &Path, outputs: &[&str]) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "started = {}", self.started);
        let _ = writeln!(s, "finished = {}", now());
        let _ = writeln!(s, "outputs = {}", outputs.join(", "));
        let _ = writeln!(s, "[config]");
        s.push_str(&self.config);
        std::fs::write(dir.join(RUN_MANIFEST), s)?;
        Ok(())
    }
}

fn resolve(config: Option<&Path>, variant: Option<Variant>, seed: Option<u64>) -> Result<(ModelConfig, TrainConfig)> {
    let (mut m, mut t) = match config {
        Some(p) => config::load_config(p)?,
        None => (ModelConfig::default(), TrainConfig::default()),
    };
    if let Some(v) = variant {
        m = m.with_variant(v);
    }
    if let Some(s) = seed {
        t.seed = s;
    }
    Ok((m, t))
}

fn load_data(dir: &Path, model: &ModelConfig) -> Result<dataset::SampleSet> {
    let set = dataset::load(dir)?;
    match set.input_length() {
        Some(n) if n == model.input_length => Ok(set),
        Some(n) => Err(Error::Config(format!(
            "dataset waveforms have {n} samples but the model expects input_length {}",
            model.input_length
        ))),
        None => Err(Error::Input(format!("{} holds no samples", dir.display()))),
    }
}

fn print_metrics(m: &train::MetricsReport) {
    println!("accuracy    {:.4}", m.accuracy);
    println!("precision   {:.4}", m.precision);
    println!("recall      {:.4}", m.recall);
    println!("f1          {:.4}", m.f1);
    println!("inference_s {:.6}", m.inference_s);
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    prepare_out(&a.out.out, a.out.force)?;
    let manifest = RunManifest::new("gen-data", a.seed, format!("input_length = {}\n", a.input_length));
    let set = dataset::split(dataset::generate(a.seed, a.input_length)?, a.seed)?;
    dataset::save(&set, &a.out.out)?;
    manifest.write(&a.out.out, &[dataset::io::MANIFEST])?;
    let (tr, va, te) = set.split_sizes();
    println!("{} samples ({tr} train, {va} val, {te} test) written to {}", set.len(), a.out.out.display());
    Ok(EXIT_OK)
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let (model, tc) = resolve(a.config.as_deref(), Some(a.model), a.seed)?;
    let set = load_data(&a.data, &model)?;
    prepare_out(&a.out.out, a.out.force)?;
    let manifest = RunManifest::new("train", tc.seed, config::to_text(&model, &tc)?);
    let mut net = Network::build(&model, tc.seed)?;
    let outcome = train::train_with(&mut net, &set, &tc, |e| {
        eprintln!("epoch {:>3}  loss {:.4}  val_acc {:.4}", e.epoch, e.train_loss, e.val_acc);
    })?;
    let dir = &a.out.out;
    outcome.write_trace(&dir.join("trace.csv"))?;
    checkpoint::save(&net, &dir.join("weights.bin"))?;
    let metrics = train::evaluate(&mut net, &set, Split::Test, a.timing_passes)?;
    metrics.write_csv(&dir.join("metrics.csv"))?;
    metrics.confusion.write_csv(&dir.join("confusion.csv"))?;
    manifest.write(dir, &["trace.csv", "weights.bin", "metrics.csv", "confusion.csv"])?;
    println!("best epoch  {} (val_acc {:.4})", outcome.best_epoch, outcome.best_val_acc);
    print_metrics(&metrics);
    Ok(EXIT_OK)
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let mut net = checkpoint::load(&a.weights)?;
    let set = load_data(&a.data, &net.config)?;
    if let Some(dir) = &a.out {
        prepare_out(dir, a.force)?;
    }
    let metrics = train::evaluate(&mut net, &set, a.split, a.timing_passes)?;
    if let Some(dir) = &a.out {
        let manifest = RunManifest::new("eval", 0, config::model_to_text(&net.config)?);
        metrics.write_csv(&dir.join("metrics.csv"))?;
        metrics.confusion.write_csv(&dir.join("confusion.csv"))?;
        manifest.write(dir, &["metrics.csv", "confusion.csv"])?;
    }
    print_metrics(&metrics);
    Ok(EXIT_OK)
}

fn count_cmd(a: CountArgs) -> Result<i32> {
    let (model, _) = resolve(a.config.as_deref(), Some(a.model), None)?;
    let net = Network::build(&model, 0)?;
    let report = complexity::count(&net, model.input_length)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "model: {}", a.model)?;
    out.write_all(report.to_table().as_bytes())?;
    if let Some(path) = &a.csv {
        report.write_csv(std::fs::File::create(path)?)?;
    }
    Ok(EXIT_OK)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<i32> {
    let ops: Vec<&str> = match &a.op {
        Some(op) => vec![op.as_str()],
        None => gradcheck::SUITE.to_vec(),
    };
    let mut ok = true;
    for op in ops {
        let err = gradcheck::gradcheck(op, a.seed)?;
        let pass = err <= gradcheck::TOLERANCE;
        ok &= pass;
        println!("{op:<18} {err:.3e} {}", if pass { "ok" } else { "FAIL" });
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
}

fn ablate_cmd(a: AblateArgs) -> Result<i32> {
    let (model, tc) = resolve(a.config.as_deref(), None, a.seed)?;
    let set = load_data(&a.data, &model)?;
    prepare_out(&a.out.out, a.out.force)?;
    let manifest = RunManifest::new("ablate", tc.seed, config::to_text(&model, &tc)?);
    let rows = train::ablate(&set, &model, &tc, a.timing_passes, |v, e| {
        eprintln!("{v:<10} epoch {:>3}  loss {:.4}  val_acc {:.4}", e.epoch, e.train_loss, e.val_acc);
    })?;
    let dir = &a.out.out;
    train::write_ablation(&rows, &dir.join("ablation.csv"))?;
    let mut outputs = vec!["ablation.csv".to_string()];
    for r in &rows {
        let name = format!("trace_{}.csv", r.variant);
        r.outcome.write_trace(&dir.join(&name))?;
        outputs.push(name);
    }
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    manifest.write(dir, &outputs)?;
    println!("{:<10} {:>8} {:>10} {:>10} {:>12}", "method", "accuracy", "params(M)", "flops(M)", "inference_s");
    for r in &rows {
        println!(
            "{:<10} {:>8.4} {:>10.2} {:>10.2} {:>12.6}",
            r.variant.name(),
            r.metrics.accuracy,
            r.complexity.params_millions(),
            r.complexity.flops_millions(),
            r.metrics.inference_s
        );
    }
    Ok(EXIT_OK)
}
