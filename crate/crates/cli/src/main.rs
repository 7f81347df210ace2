//! `ehrseq`: synthesize, preprocess, batch, train, evaluate and
//! gradient-check from the command line.
//!
//! Failures print a single `error kind=<kind> message="..."` line on stderr
//! and exit with the code for that kind.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ehrseq_core::batching::BatchDump;
use ehrseq_core::ingest::{parse_csv, FeatureSchema, Split};
use ehrseq_core::loss::LossKind;
use ehrseq_core::pipeline::{
    evaluate_table, fit, load_split, preprocess, scoring_batches, sequences, training_batches, BatchMethod, Prepared,
    RunConfig,
};
use ehrseq_core::seqnet::{grad_check, random_problem, Checkpoint, ModelConfig, ModelParams, DEFAULT_STEP};
use ehrseq_core::synth::{generate, SynthConfig};
use ehrseq_core::train::train;
use serde::Serialize;

const CONFIG_ECHO: &str = "config.json";
const MODEL_FILE: &str = "model.json";
const HISTORY_FILE: &str = "history.jsonl";
const METRICS_FILE: &str = "metrics.json";

#[derive(Parser)]
#[command(name = "ehrseq", version, about = "Deterioration prediction from irregular EHR sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the seed of the loaded config or preset.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON config; a run config for preprocess/train/eval, a generator
    /// config for synth.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as CSV, with a `.schema.json` sidecar.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Window, split, standardize and encode a CSV into a data directory.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Schema JSON; defaults to `<input stem>.schema.json`.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value = "exp1.1")]
        preset: String,
    },
    /// Build batches for one split and print a summary or dump them.
    Batch {
        #[command(flatten)]
        common: Common,
        /// Data directory written by `preprocess`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, default_value_t = 21)]
        timestamp: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Print one line per batch instead of writing the dump.
        #[arg(long)]
        inspect: bool,
    },
    /// Train on a data directory; writes model, history and config.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "exp1.1")]
        preset: String,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from an existing checkpoint instead of a fresh init.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a split with a checkpoint and write the metrics JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        arch: ArchArg,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Sliding,
    Dense,
    Smart,
}

impl From<MethodArg> for BatchMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Sliding => BatchMethod::Sliding,
            MethodArg::Dense => BatchMethod::Dense,
            MethodArg::Smart => BatchMethod::Smart,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Lstm,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage,
    Io,
    Config,
    Data,
    Shape,
    Other,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Io => "io",
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Shape => "shape",
            Kind::Other => "other",
        }
    }

    fn code(self) -> u8 {
        match self {
            Kind::Other => 1,
            Kind::Usage => 2,
            Kind::Io => 3,
            Kind::Config => 4,
            Kind::Data | Kind::Shape => 5,
        }
    }
}

struct Failure {
    kind: Kind,
    message: String,
}

impl From<ehrseq_core::Error> for Failure {
    fn from(e: ehrseq_core::Error) -> Self {
        use ehrseq_core::Error as E;
        let kind = match &e {
            E::Io(_) => Kind::Io,
            E::Csv(c) if c.is_io_error() => Kind::Io,
            E::Config(_) => Kind::Config,
            E::Shape(_) => Kind::Shape,
            E::Schema(_) | E::Row { .. } | E::Csv(_) | E::Json(_) | E::Empty(_) | E::Checkpoint(_) => Kind::Data,
            E::UndefinedMetric(_) | E::NonFiniteLoss { .. } => Kind::Data,
            E::StaleCache(_) => Kind::Other,
        };
        Failure { kind, message: e.to_string() }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn fail(kind: Kind, message: impl Into<String>) -> Failure {
    Failure { kind, message: message.into() }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| fail(Kind::Io, format!("{}: {e}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    let file = File::open(path).map_err(io_at(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| fail(Kind::Config, format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| fail(Kind::Other, e.to_string()))? + "\n";
    std::fs::write(path, text).map_err(io_at(path))
}

fn require_out(common: &Common) -> Outcome<&Path> {
    common.out.as_deref().ok_or_else(|| fail(Kind::Usage, "--out is required for this command"))
}

fn make_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(io_at(dir))
}

/// Run config from `--config`, else the named preset, with `--seed` applied.
fn run_config(common: &Common, preset: &str) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => read_json::<RunConfig>(path)?,
        None => RunConfig::preset(preset)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Outcome<Split> {
    s.parse().map_err(|e: ehrseq_core::Error| fail(Kind::Usage, e.to_string()))
}

fn schema_sidecar(csv: &Path) -> PathBuf {
    csv.with_extension("schema.json")
}

fn cmd_synth(common: &Common, patients: Option<usize>) -> Outcome {
    let out = require_out(common)?;
    let mut cfg = match &common.config {
        Some(path) => read_json::<SynthConfig>(path)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = patients {
        cfg.n_patients = n;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let table = generate(&cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(parent)?;
    }
    let file = File::create(out).map_err(io_at(out))?;
    table.write_csv(BufWriter::new(file))?;
    write_json(&schema_sidecar(out), &table.schema)?;
    write_json(&out.with_extension("config.json"), &cfg)?;
    println!("wrote {} encounters, {} rows to {}", table.encounters.len(), table.n_records(), out.display());
    Ok(())
}

fn cmd_preprocess(common: &Common, input: &Path, schema: Option<&Path>, preset: &str) -> Outcome {
    let out = require_out(common)?;
    let cfg = run_config(common, preset)?;
    let schema_path = schema.map(Path::to_path_buf).unwrap_or_else(|| schema_sidecar(input));
    let schema: FeatureSchema = read_json(&schema_path)?;
    let raw = parse_csv(BufReader::new(File::open(input).map_err(io_at(input))?), &schema)?;
    let prepared = preprocess(&raw, &cfg.data, cfg.seed)?;
    prepared.save(out)?;
    write_json(&out.join(CONFIG_ECHO), &cfg)?;
    for split in Split::ALL {
        let t = prepared.split(split);
        println!("{}: {} encounters, {} rows", split.name(), t.encounters.len(), t.n_records());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_batch(common: &Common, data: &Path, split: &str, method: MethodArg, w: usize, b: usize, inspect: bool) -> Outcome {
    let (_, table) = load_split(data, parse_split(split)?)?;
    let encs = sequences(&table)?;
    let batching =
        ehrseq_core::pipeline::BatchingConfig { method: method.into(), timestamp: w, batch_size: b };
    let set = match method {
        // sliding samples are regrouped into minibatches exactly as in training
        MethodArg::Sliding | MethodArg::Smart => training_batches(&encs, &batching, common.seed.unwrap_or(0))?,
        MethodArg::Dense => scoring_batches(&encs, BatchMethod::Dense, &batching)?,
    };
    let name = match method {
        MethodArg::Sliding => "sliding",
        MethodArg::Dense => "dense",
        MethodArg::Smart => "smart",
    };
    if inspect {
        let stdout = std::io::stdout();
        let mut w = stdout.lock();
        let write = |w: &mut std::io::StdoutLock, line: String| writeln!(w, "{line}").map_err(|e| fail(Kind::Io, e.to_string()));
        write(&mut w, format!("method={name} batches={} samples={}", set.batches.len(), set.n_samples()))?;
        for (i, batch) in set.batches.iter().enumerate() {
            let [n, t, f] = batch.features.shape();
            let pads: usize = batch.pad_counts().iter().sum();
            let pos = batch.labels.iter().filter(|&&y| y == 1).count();
            write(&mut w, format!("batch {i}: shape [{n}, {t}, {f}] padded_steps={pads} positives={pos}"))?;
        }
        return Ok(());
    }
    let out = require_out(common)?;
    write_json(out, &BatchDump::new(name, &set))
}

fn cmd_train(common: &Common, data: &Path, preset: &str, epochs: Option<usize>, resume: Option<&Path>) -> Outcome {
    let out = require_out(common)?;
    let mut cfg = run_config(common, preset)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let prepared = Prepared::load(data)?;
    let (model, history) = match resume {
        None => fit(&prepared, &cfg)?,
        Some(path) => {
            let model = Checkpoint::load(path)?.to_model()?;
            let train_set = training_batches(&sequences(&prepared.train)?, &cfg.batching, cfg.seed)?;
            let val_set = scoring_batches(&sequences(&prepared.validation)?, cfg.batching.method, &cfg.batching)?;
            let mut tc = cfg.train.clone();
            tc.loss = ehrseq_core::pipeline::resolve_loss(&cfg, &train_set)?;
            train(model, &train_set, &val_set, &tc, cfg.seed)?
        }
    };
    make_dir(out)?;
    Checkpoint::from_model(&model).save(&out.join(MODEL_FILE))?;
    std::fs::write(out.join(HISTORY_FILE), history.to_json_lines()).map_err(io_at(out))?;
    write_json(&out.join(CONFIG_ECHO), &cfg)?;
    let best = history.best_epoch.map_or("none".to_string(), |e| e.to_string());
    println!("trained {} epochs, best epoch {best}, model at {}", history.epochs.len(), out.join(MODEL_FILE).display());
    Ok(())
}

fn cmd_eval(common: &Common, model: &Path, data: &Path, split: &str) -> Outcome {
    let params = Checkpoint::load(model)?.to_model()?;
    // without --config, reuse the config echoed next to the checkpoint
    let cfg = match &common.config {
        Some(_) => run_config(common, "exp1.1")?,
        None => {
            let echoed = model.parent().unwrap_or(Path::new(".")).join(CONFIG_ECHO);
            let mut cfg: RunConfig = read_json(&echoed)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            cfg
        }
    };
    let (_, table) = load_split(data, parse_split(split)?)?;
    let report = evaluate_table(&params, &table, &cfg)?;
    match &common.out {
        Some(dir) => {
            make_dir(dir)?;
            std::fs::write(dir.join(METRICS_FILE), report.to_json()).map_err(io_at(dir))?;
            write_json(&dir.join(CONFIG_ECHO), &cfg)?;
        }
        None => print!("{}", report.to_json()),
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRecord {
    arch: &'static str,
    seed: u64,
    step: f64,
    parameters: usize,
    max_relative_error: f64,
}

fn cmd_gradcheck(common: &Common, arch: ArchArg, step: f64) -> Outcome {
    let seed = common.seed.unwrap_or(0);
    let width = 3;
    let (name, cfg) = match arch {
        ArchArg::Lstm => ("lstm", ModelConfig::lstm(width, 2, 8, 0.2)),
        ArchArg::Transformer => ("transformer", ModelConfig::transformer(width, 1, 2, 4, 6, 0.2)),
    };
    let model = ModelParams::init(&cfg, seed)?;
    let (x, mask, labels) = random_problem(seed, 4, 6, width);
    let err = grad_check(&model, &x, &mask, &labels, &LossKind::Bce { weights: None }, step)?;
    let record = GradcheckRecord { arch: name, seed, step, parameters: model.parameter_count(), max_relative_error: err };
    println!("max_relative_error={err:e}");
    if let Some(out) = &common.out {
        make_dir(out)?;
        write_json(&out.join("gradcheck.json"), &record)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Synth { common, patients } => cmd_synth(common, *patients),
        Command::Preprocess { common, input, schema, preset } => cmd_preprocess(common, input, schema.as_deref(), preset),
        Command::Batch { common, data, split, method, timestamp, batch_size, inspect } => {
            cmd_batch(common, data, split, *method, *timestamp, *batch_size, *inspect)
        }
        Command::Train { common, data, preset, epochs, resume } => {
            cmd_train(common, data, preset, *epochs, resume.as_deref())
        }
        Command::Eval { common, model, data, split } => cmd_eval(common, model, data, split),
        Command::Gradcheck { common, arch, step } => cmd_gradcheck(common, *arch, *step),
    }
}

fn report(f: &Failure) -> ExitCode {
    let message = f.message.replace('\n', " ");
    eprintln!("error kind={} message={:?}", f.kind.name(), message.trim());
    ExitCode::from(f.kind.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report(&fail(Kind::Usage, first));
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}
