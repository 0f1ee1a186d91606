//! `mstnet` command-line harness.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use mstnet::data::{self, GeneratorConfig, Split};
use mstnet::train::{self, ablation_table, EpochRecord};
use mstnet::{Checkpoint, Error, ModelConfig};

mod overrides;

#[derive(Parser, Debug)]
#[command(name = "mstnet", version, about = "Multimodal EEG/MRI/tabular classifier on synthetic cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and print its manifest path.
    Generate(GenerateArgs),
    /// Train one model. Takes `--config FILE` and `--key value` overrides.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train the full model and the four ablations on one seed.
    Ablate(ConfigArgs),
    /// Summarize a manifest or checkpoint.
    Inspect {
        path: PathBuf,
    },
}

/// Generator flags. With `--config`, the file supplies the base values and
/// only flags given explicitly override it.
#[derive(clap::Args, Debug)]
struct GenerateArgs {
    /// Generator settings as TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 128)]
    eeg_len: usize,
    #[arg(long, default_value_t = 8)]
    eeg_channels: usize,
    /// Volume extents `D,H,W`.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 32, 32])]
    volume: Vec<usize>,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Dominant EEG frequency of each class, `NC,MCI,AD`.
    #[arg(long, value_delimiter = ',', default_values_t = [3, 7, 12])]
    class_freqs: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    phase_jitter: f64,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// `[--config FILE] [--key value]...`; any field of the model
    /// configuration can be overridden, including `data` and `run_dir`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "ARGS")]
    args: Vec<String>,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
    split: SplitArg,
    /// Also write the metrics as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn main() -> ExitCode {
    let parsed = Cli::command()
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m).map(|cli| (cli, m)));
    let (cli, matches) = match parsed {
        Ok(p) => p,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `mstnet --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command, matches: &ArgMatches) -> Result<(), Failure> {
    match cmd {
        Command::Generate(a) => {
            let sub = matches.subcommand_matches("generate").expect("generate matches");
            generate(a, sub)
        }
        Command::Train(a) => {
            let cfg = overrides::resolve(&a.args)?;
            train_cmd(&cfg)
        }
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => {
            let cfg = overrides::resolve(&a.args)?;
            ablate(&cfg)
        }
        Command::Inspect { path } => inspect(&path),
    }
}

fn triple(name: &str, v: &[usize]) -> Result<[usize; 3], Failure> {
    v.try_into()
        .map_err(|_| Failure::Usage(format!("--{name} takes exactly three comma-separated values")))
}

fn generate(a: GenerateArgs, m: &ArgMatches) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => GeneratorConfig::default(),
    };
    let given = |id: &str| a.config.is_none() || m.value_source(id) == Some(ValueSource::CommandLine);
    if given("n") {
        cfg.n = a.n;
    }
    if given("seed") {
        cfg.seed = a.seed;
    }
    if given("noise") {
        cfg.noise = a.noise;
    }
    if given("eeg_len") {
        cfg.eeg_len = a.eeg_len;
    }
    if given("eeg_channels") {
        cfg.eeg_channels = a.eeg_channels;
    }
    if given("volume") {
        cfg.volume = triple("volume", &a.volume)?;
    }
    if given("train_fraction") {
        cfg.train_fraction = a.train_fraction;
    }
    if given("class_freqs") {
        cfg.class_freqs = triple("class-freqs", &a.class_freqs)?;
    }
    if given("phase_jitter") {
        cfg.phase_jitter = a.phase_jitter;
    }
    let ds = data::generate(&cfg)?;
    let manifest = data::write_dataset(&ds, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn require_paths(cfg: &ModelConfig) -> Result<(PathBuf, PathBuf), Failure> {
    if cfg.data.is_empty() {
        return Err(Failure::Usage("no dataset given; pass `--data <manifest>`".into()));
    }
    if cfg.run_dir.is_empty() {
        return Err(Failure::Usage("no run directory given; pass `--run-dir <dir>`".into()));
    }
    Ok((PathBuf::from(&cfg.data), PathBuf::from(&cfg.run_dir)))
}

fn progress_line(prefix: &str, r: &EpochRecord) {
    let eval = r
        .eval
        .as_ref()
        .map(|e| format!(" eval_loss {:.4} acc {:.3} mcc {:.3}", e.loss, e.metrics.accuracy, e.metrics.mcc))
        .unwrap_or_default();
    eprintln!("{prefix}epoch {:>4} train_loss {:.4}{eval} ({:.1}s)", r.epoch, r.train_loss, r.wall_seconds);
}

fn train_cmd(cfg: &ModelConfig) -> Result<(), Failure> {
    let (data_path, run_dir) = require_paths(cfg)?;
    let dataset = data::load_dataset(&data_path)?;
    let outcome = train::train_run(cfg, &dataset, &run_dir, &mut |r| progress_line("", r))?;
    println!("run directory: {}", run_dir.display());
    println!("config hash:   {}", outcome.log.config_hash);
    let best = outcome.best_checkpoint.as_ref().unwrap_or(&outcome.final_checkpoint);
    let ev = best.evaluate_split(&dataset, Split::Eval)?;
    println!("best checkpoint (epoch {}) on the eval split:", best.epoch);
    print!("{}", ev.metrics);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let dataset = data::load_dataset(&a.data)?;
    let ev = match a.split {
        SplitArg::Train => ckpt.evaluate_split(&dataset, Split::Train)?,
        SplitArg::Eval => ckpt.evaluate_split(&dataset, Split::Eval)?,
        SplitArg::All => {
            mstnet::InputDims::of(&dataset).check_compatible(&ckpt.net.dims)?;
            ckpt.evaluate(&dataset.samples.iter().collect::<Vec<_>>())?
        }
    };
    println!("{} samples, loss {:.6}", ev.labels.len(), ev.loss);
    print!("{}", ev.metrics);
    println!();
    print!("{}", ev.confusion);
    if let Some(out) = a.out {
        let text = format!("{}\n{}\n", mstnet::metrics::Metrics::CSV_HEADER, ev.metrics.csv_row());
        fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    }
    Ok(())
}

fn ablate(cfg: &ModelConfig) -> Result<(), Failure> {
    let (data_path, run_dir) = require_paths(cfg)?;
    let dataset = data::load_dataset(&data_path)?;
    let rows = train::ablate(cfg, &dataset, &run_dir, &mut |ab, r| progress_line(&format!("[{}] ", ab.slug()), r))?;
    print!("{}", ablation_table(&rows));
    println!("written to {}", run_dir.join("ablation.csv").display());
    Ok(())
}

fn inspect(path: &Path) -> Result<(), Failure> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(mstnet::checkpoint::MAGIC.as_bytes()) {
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        let dims = &ckpt.net.dims;
        println!("checkpoint   {}", path.display());
        println!("epoch        {}", ckpt.epoch);
        println!("config hash  {}", ckpt.config().hash());
        println!("eeg          {} x {}", dims.eeg_len, dims.eeg_channels);
        println!("volume       {:?}", dims.volume);
        println!(
            "tabular      {} numerical, {} categorical",
            dims.schema.numerical.len(),
            dims.schema.categorical.len()
        );
        println!("tensors      {}", ckpt.params.len());
        println!("trainable    {}", ckpt.params.num_trainable());
        for p in ckpt.params.iter() {
            let frozen = if p.trainable { "" } else { " (frozen)" };
            println!("  {:<40} {:?}{frozen}", p.name, p.value.shape());
        }
    } else {
        let m = data::read_manifest(path)?;
        let mut counts = [0usize; 3];
        let mut splits = [0usize; 2];
        for s in &m.samples {
            if let Some(k) = m.class_labels.iter().position(|l| l == &s.label) {
                counts[k.min(2)] += 1;
            }
            splits[(s.split == Split::Eval) as usize] += 1;
        }
        println!("manifest     {}", path.display());
        println!("version      {}", m.version);
        println!("seed         {}", m.seed);
        println!("samples      {} (train {}, eval {})", m.n_samples, splits[0], splits[1]);
        println!("classes      {}", m.class_labels.iter().zip(counts).map(|(l, c)| format!("{l}={c}")).collect::<Vec<_>>().join(" "));
        println!("eeg          {} x {}", m.eeg.length, m.eeg.channels);
        println!("volume       {:?}", m.volume.dims);
        println!("numerical    {}", m.schema.numerical.join(", "));
        for c in &m.schema.categorical {
            println!("categorical  {} [{}]", c.name, c.vocabulary.join(", "));
        }
    }
    Ok(())
}
