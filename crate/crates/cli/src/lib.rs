//! Implementation of the `sagrnn` command-line tool.

pub mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sagrnn::checkpoint::Checkpoint;
use sagrnn::cue::CueAnalyzer;
use sagrnn::evaluate::{evaluate_estimates, EvalReport};
use sagrnn::gradcheck::{default_cases, run_suite, TOLERANCE};
use sagrnn::model::separate;
use sagrnn::sim::{
    gen_dataset, load_split, DatasetConfig, Example, Split, DEFAULT_SAMPLE_RATE, MANIFEST_FILE,
};
use sagrnn::train::{LogEvent, TrainConfig, Trainer};
use sagrnn::wav::{read_wav, write_wav};
use sagrnn::Tensor;

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad input or configuration (exit 2).
    Usage(String),
    /// Runtime or numeric failure (exit 1).
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<sagrnn::Error> for Failure {
    fn from(e: sagrnn::Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sagrnn",
    version,
    about = "Binaural speaker separation with a self-attentive gated RNN"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.blocks=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Master seed; overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic binaural dataset.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the best-validation checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Training log; defaults to the checkpoint path with a `.log` extension.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Worker threads for per-example gradients.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Separate a two-channel mixture into one binaural file per speaker.
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Two-channel 8 kHz WAV mixture.
        #[arg(long = "in")]
        input: PathBuf,
        /// Receives `<stem>_s<k>.wav` for each speaker.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        /// JSON report output.
        #[arg(long)]
        report: PathBuf,
        /// One of train, valid, test.
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Worker threads for separation.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| format!("unknown split `{s}`"))
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn manifest_path(data: &Path) -> Result<PathBuf, Failure> {
    let p = if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    };
    require(&p, "manifest")?;
    Ok(p)
}

fn echo_config(text: &str) {
    eprintln!("# effective configuration");
    for line in text.lines() {
        eprintln!("#   {line}");
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Train {
            config,
            data,
            ckpt_out,
            log,
            jobs,
        } => {
            let log = log.unwrap_or_else(|| ckpt_out.with_extension("log"));
            train(&config, &data, &ckpt_out, &log, jobs)
        }
        Command::Separate {
            ckpt,
            input,
            out_dir,
        } => separate_file(&ckpt, &input, &out_dir).map(|_| ()),
        Command::Evaluate {
            ckpt,
            data,
            report,
            split,
            jobs,
        } => evaluate(&ckpt, &data, &report, split, jobs),
        Command::Gradcheck => gradcheck(),
    }
}

fn simulate(args: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let (cfg, text): (DatasetConfig, String) =
        config::load(args.config.as_deref(), &args.sets, args.seed)?;
    echo_config(&text);
    gen_dataset(&cfg, out)?;
    println!("{}", out.join(MANIFEST_FILE).display());
    Ok(())
}

fn train(
    args: &ConfigArgs,
    data: &Path,
    ckpt_out: &Path,
    log_path: &Path,
    jobs: usize,
) -> Result<(), Failure> {
    let (cfg, text): (TrainConfig, String) =
        config::load(args.config.as_deref(), &args.sets, args.seed)?;
    echo_config(&text);
    let manifest = manifest_path(data)?;
    let (_, train_set) = load_split(&manifest, Split::Train)?;
    let (_, valid_set) = load_split(&manifest, Split::Valid)?;
    if train_set.is_empty() {
        return Err(Failure::Usage(format!(
            "{} has no training scenes",
            manifest.display()
        )));
    }

    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = std::fs::File::create(log_path).map_err(|e| io_err(log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    for line in text.lines() {
        writeln!(log, "# {line}").map_err(|e| io_err(log_path, e))?;
    }

    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.jobs = jobs.max(1);
    let mut write_failure = None;
    let report = trainer.fit(&train_set, &valid_set, &mut |ev| {
        let line = match ev {
            LogEvent::Step(r) => r.to_string(),
            LogEvent::Epoch(r) => {
                eprintln!("{r}");
                format!("# {r}")
            }
        };
        if let Err(e) = writeln!(log, "{line}") {
            write_failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_failure {
        return Err(io_err(log_path, e));
    }
    log.flush().map_err(|e| io_err(log_path, e))?;

    Checkpoint::new(cfg.model, report.best_params, trainer.state).save(ckpt_out)?;
    match (report.best_epoch, report.best_valid_delta_snr_db) {
        (Some(e), Some(d)) => eprintln!("best epoch {e}: valid ΔSNR {d:.3} dB"),
        _ => eprintln!("no validation set; kept the final parameters"),
    }
    println!("{}", ckpt_out.display());
    Ok(())
}

/// Separates `input` and returns the written per-speaker files.
pub fn separate_file(ckpt: &Path, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    require(ckpt, "checkpoint")?;
    require(input, "input")?;
    let ck = Checkpoint::load(ckpt)?;
    let (channels, rate) = read_wav(input)?;
    if channels.len() != 2 {
        return Err(Failure::Usage(format!(
            "{}: expected 2 channels, found {}",
            input.display(),
            channels.len()
        )));
    }
    if rate != DEFAULT_SAMPLE_RATE {
        return Err(Failure::Usage(format!(
            "{}: expected {DEFAULT_SAMPLE_RATE} Hz, found {rate} Hz",
            input.display()
        )));
    }
    let est = separate(&ck.params, &ck.config, &channels[0], &channels[1])?;
    let t = est.shape()[2];
    let stem = input
        .file_stem()
        .map_or("mixture".into(), |s| s.to_string_lossy().into_owned());
    let mut written = Vec::new();
    for (k, spk) in est.data().chunks(2 * t).enumerate() {
        let path = out_dir.join(format!("{stem}_s{}.wav", k + 1));
        write_wav(&path, &[&spk[..t], &spk[t..]], rate)?;
        println!("{}", path.display());
        written.push(path);
    }
    Ok(written)
}

/// Separates every example; examples are split into contiguous runs, one
/// per worker, so the output order never depends on `jobs`.
fn separate_all(ck: &Checkpoint, examples: &[Example], jobs: usize) -> sagrnn::Result<Vec<Tensor>> {
    let one = |ex: &Example| separate(&ck.params, &ck.config, &ex.left, &ex.right);
    let jobs = jobs.clamp(1, examples.len().max(1));
    if jobs == 1 {
        return examples.iter().map(one).collect();
    }
    let per = examples.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(per)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<sagrnn::Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(examples.len());
        for h in handles {
            out.extend(h.join().expect("separation worker panicked")?);
        }
        Ok(out)
    })
}

fn evaluate(
    ckpt: &Path,
    data: &Path,
    report_path: &Path,
    split: Split,
    jobs: usize,
) -> Result<(), Failure> {
    require(ckpt, "checkpoint")?;
    let manifest = manifest_path(data)?;
    let ck = Checkpoint::load(ckpt)?;
    let (m, examples) = load_split(&manifest, split)?;
    if examples.is_empty() {
        return Err(Failure::Usage(format!(
            "{} has no {} scenes",
            manifest.display(),
            split.name()
        )));
    }
    let mut echo = String::new();
    let _ = writeln!(echo, "split = \"{}\"", split.name());
    echo.push_str(&toml::to_string(&ck.config).map_err(|e| Failure::Runtime(e.to_string()))?);
    echo_config(&echo);

    let analyzer = CueAnalyzer::new(m.config.sample_rate as f64)?;
    let estimates = separate_all(&ck, &examples, jobs)?;
    let report: EvalReport = evaluate_estimates(&analyzer, &examples, &estimates)?;
    if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(report_path, json + "\n").map_err(|e| io_err(report_path, e))?;
    print!("{}", report.table());

    let undefined: Vec<String> = report
        .utterances
        .iter()
        .filter_map(|r| {
            r.error
                .as_ref()
                .map(|e| format!("{} speaker {}: {e}", r.id, r.speaker))
        })
        .collect();
    if undefined.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "{} rows with undefined cues:\n  {}",
            undefined.len(),
            undefined.join("\n  ")
        )))
    }
}

fn gradcheck() -> Result<(), Failure> {
    let report = run_suite(&default_cases(), TOLERANCE)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check failed at tolerance {TOLERANCE:e}"
        )))
    }
}
