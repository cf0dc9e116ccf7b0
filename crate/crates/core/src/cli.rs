//! The `kgs` command-line driver.
//!
//! ```text
//! kgs synth  --preset rolldice-lite --seed 7 --out data/
//! kgs train  --data data/ --out run/ [--config cfg.json] [--iterations N] [--ablate no-kr]
//! kgs eval   --checkpoint run/checkpoint_final --data data/ [--out run/]
//! kgs ablate --data data/ --out grid/ [--variants full,no-kr] [--tau 1e-5,2e-5]
//! ```
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 I/O or malformed
//! file, 4 numerical failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::synth::{generate_dataset, preset, read_dataset, write_dataset, SceneSpec, PRESETS};
use crate::train::{FrameMetrics, StepRecord, TrainState};

pub const FINAL_CHECKPOINT: &str = "checkpoint_final";
pub const ABORT_CHECKPOINT: &str = "checkpoint_abort";

#[derive(Debug, Parser)]
#[command(name = "kgs", version, about = "Dynamic Gaussian splatting from motion-blurred video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Optimize a scene on a dataset.
    Train(TrainArgs),
    /// Render held-out sharp frames and report PSNR/SSIM.
    Eval(EvalArgs),
    /// Train and evaluate a grid of method variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat dotted-key JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to KGS_THREADS, then all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub iterations: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Built-in scene (rolldice-lite, static-lite, decomp, single).
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,
    /// SceneSpec JSON file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Method variant: full, no-cf, no-kr, no-reg, no-ani or tau=<value>.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the dataset's own ground-truth Gaussians (static scenes).
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for metrics.csv and partition.txt (default: next to the
    /// checkpoint, or the dataset for --oracle).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variants.
    #[arg(long, default_value = "full,no-cf,no-kr,no-reg,no-ani", value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Comma-separated decomposition thresholds, each trained as a variant.
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<f64>,
}

/// Resolves `--threads`, then `KGS_THREADS`; `None` means all cores.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("KGS_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("KGS_THREADS={v:?} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads.filter(|&n| n > 0) {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.iterations {
        cfg.train.iterations = n;
    }
    cfg.threads = thread_count(common.threads)?.unwrap_or(cfg.threads);
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<SceneSpec> {
    let mut spec = match (&args.preset, &args.spec) {
        (Some(name), None) => preset(name, args.seed.unwrap_or(0))?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SceneSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        _ => {
            return Err(Error::Config(format!(
                "give --preset ({}) or --spec FILE",
                PRESETS.join(", ")
            )))
        }
    };
    if let (Some(s), Some(_)) = (args.seed, &args.spec) {
        spec.seed = s;
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let data = pool(thread_count(args.threads)?)?.install(|| generate_dataset(&spec))?;
    write_dataset(&data, &args.out)?;
    log::info!("wrote {} frames of {:?} to {}", spec.frames, spec.name, args.out.display());
    Ok(spec)
}

/// Writers for the per-run logs. `train_log.csv` holds only deterministic
/// columns so that runs can be compared byte for byte; wall-clock time goes
/// to `timing.csv`.
struct RunLogs {
    log: BufWriter<File>,
    timing: BufWriter<File>,
    log_path: PathBuf,
    timing_path: PathBuf,
    start: Instant,
}

impl RunLogs {
    fn create(out: &Path, append: bool) -> Result<Self> {
        let open = |name: &str, header: &str| -> Result<(BufWriter<File>, PathBuf)> {
            let p = out.join(name);
            let exists = p.exists();
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            let mut w = BufWriter::new(f);
            if !(append && exists) {
                writeln!(w, "{header}").map_err(|e| Error::io(&p, e))?;
            }
            Ok((w, p))
        };
        let (log, log_path) = open("train_log.csv", StepRecord::CSV_HEADER)?;
        let (timing, timing_path) = open("timing.csv", "iteration,wall_ms")?;
        Ok(RunLogs {
            log,
            timing,
            log_path,
            timing_path,
            start: Instant::now(),
        })
    }

    fn record(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.log, "{}", r.csv_row()).map_err(|e| Error::io(&self.log_path, e))?;
        writeln!(self.timing, "{},{}", r.iteration, self.start.elapsed().as_millis())
            .map_err(|e| Error::io(&self.timing_path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(&self.log_path, e))?;
        self.timing.flush().map_err(|e| Error::io(&self.timing_path, e))
    }
}

/// Trains `state` to completion, writing logs and checkpoints into `out`.
/// On a numerical failure the pre-step state is saved as
/// `checkpoint_abort` before the error is returned.
pub fn run_training(state: &mut TrainState, data: &crate::synth::Dataset, out: &Path, append: bool) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join("config.json"), &state.config.to_json_string())?;
    let mut logs = RunLogs::create(out, append)?;
    let every = state.config.train.checkpoint_every;
    while state.iteration < state.config.train.iterations {
        let before = state.clone();
        match state.step(data) {
            Ok(rec) => {
                logs.record(&rec)?;
                if every > 0 && state.iteration % every == 0 {
                    logs.flush()?;
                    checkpoint::save(state, &out.join(format!("checkpoint_{:06}", state.iteration)))?;
                }
            }
            Err(e) => {
                logs.flush()?;
                if matches!(e, Error::Numerical { .. }) {
                    checkpoint::save(&before, &out.join(ABORT_CHECKPOINT))?;
                }
                return Err(e);
            }
        }
    }
    logs.flush()?;
    checkpoint::save(state, &out.join(FINAL_CHECKPOINT))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainState> {
    let data = read_dataset(&args.data)?;
    let (mut state, append) = match &args.resume {
        Some(p) => {
            let mut s = checkpoint::load(p)?;
            if let Some(n) = args.common.iterations {
                s.config.train.iterations = n;
            }
            s.config.threads = thread_count(args.common.threads)?.unwrap_or(s.config.threads);
            (s, true)
        }
        None => {
            let mut cfg = load_config(&args.common)?;
            if let Some(v) = &args.ablate {
                Variant::parse(v)?.apply(&mut cfg);
            }
            (TrainState::new(cfg, &data)?, false)
        }
    };
    let threads = Some(state.config.threads).filter(|&n| n > 0);
    pool(threads)?.install(|| run_training(&mut state, &data, &args.out, append))?;
    Ok(state)
}

/// Evaluates `state` on the held-out frames of `data` and writes
/// `metrics.csv` and `partition.txt` into `out`.
pub fn write_evaluation(state: &TrainState, data: &crate::synth::Dataset, out: &Path) -> Result<Vec<FrameMetrics>> {
    let rows = state.evaluate(data)?;
    create_dir(out)?;
    let mut csv = String::from(FrameMetrics::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_text(&out.join("metrics.csv"), &csv)?;
    let partition = if state.scores.is_empty() {
        state.decomposition_scores().map(|s| {
            crate::decomposition::classify(&s, state.config.decomposition.tau)
        })?
    } else {
        state.partition()
    };
    partition.write_dump(&out.join("partition.txt"))?;
    Ok(rows)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<FrameMetrics>> {
    let data = read_dataset(&args.data)?;
    let state = match (&args.checkpoint, args.oracle) {
        (_, true) => TrainState::oracle(RunConfig::default(), &data.spec)?,
        (Some(p), false) => checkpoint::load(p)?,
        (None, false) => return Err(Error::Config("give --checkpoint or --oracle".into())),
    };
    let out = match (&args.out, &args.checkpoint) {
        (Some(o), _) => o.clone(),
        (None, Some(p)) if !args.oracle => p.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        _ => args.data.clone(),
    };
    let threads = thread_count(args.threads)?.or(Some(state.config.threads).filter(|&n| n > 0));
    let rows = pool(threads)?.install(|| write_evaluation(&state, &data, &out))?;
    let (p, s) = FrameMetrics::mean(&rows);
    println!("mean PSNR {p:.3} dB, mean SSIM {s:.4} over {} held-out frames", rows.len());
    Ok(rows)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub tau: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub gaussians: usize,
    pub dynamic: usize,
    pub seconds: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "variant,tau,psnr,ssim,gaussians,dynamic,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.4},{:.4},{},{},{:.1}",
            self.variant, self.tau, self.psnr, self.ssim, self.gaussians, self.dynamic, self.seconds
        )
    }
}

/// Trains and evaluates each variant from the same base config and data.
pub fn run_ablation(
    base: &RunConfig,
    data: &crate::synth::Dataset,
    variants: &[Variant],
    out: &Path,
) -> Result<Vec<AblationRow>> {
    create_dir(out)?;
    let mut rows = Vec::new();
    for v in variants {
        let mut cfg = base.clone();
        v.apply(&mut cfg);
        let dir = out.join(v.name());
        let start = Instant::now();
        let mut state = TrainState::new(cfg, data)?;
        run_training(&mut state, data, &dir, false)?;
        let seconds = start.elapsed().as_secs_f64();
        let metrics = write_evaluation(&state, data, &dir)?;
        let (psnr, ssim) = FrameMetrics::mean(&metrics);
        let row = AblationRow {
            variant: v.name(),
            tau: state.config.decomposition.tau,
            psnr,
            ssim,
            gaussians: state.gaussians.len(),
            dynamic: state.dynamic_count(),
            seconds,
        };
        log::info!("{}", row.csv_row());
        rows.push(row);
    }
    let mut csv = String::from(AblationRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    Ok(rows)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let data = read_dataset(&args.data)?;
    let cfg = load_config(&args.common)?;
    let mut variants = args.variants.iter().map(|s| Variant::parse(s)).collect::<Result<Vec<_>>>()?;
    variants.extend(args.tau.iter().map(|&t| Variant::Tau(t)));
    if variants.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }
    let threads = Some(cfg.threads).filter(|&n| n > 0);
    let rows = pool(threads)?.install(|| run_ablation(&cfg, &data, &variants, &args.out))?;
    println!("{}", AblationRow::CSV_HEADER);
    for r in &rows {
        println!("{}", r.csv_row());
    }
    Ok(rows)
}

/// Entry point of the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| ()),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(a).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
