//! Command-line front end shared by the `macow` binary and the tests.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dequant::DensityModel;
use crate::error::{Error, Result};
use crate::io::{write_image_grid, Checkpoint, Dataset};
use crate::model::{DequantMode, ModelConfig};
use crate::tensor::Real;
use crate::train::{build_rng, evaluate, fit, LrSchedule, OptimState, TrainRunConfig};
use crate::verify::{bench_sample, run_suite, BenchConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "macow", version, about = "Masked convolutional generative flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Unif,
    Var,
}

impl From<Mode> for DequantMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Unif => DequantMode::Uniform,
            Mode::Var => DequantMode::Variational,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model, writing a checkpoint and a CSV log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint (also the input with --resume).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dequantization mode, overriding the config.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Step counter value at which to stop.
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        checkpoint_interval: u64,
        /// CSV log path (default: checkpoint path with `.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from the state stored in --checkpoint.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Bits per dimension of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Noise samples per datum; above 1 the importance-weighted bound is used.
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Draw samples from a checkpoint into a PPM/PGM grid.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cols: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Sampling-time scaling across image sizes, as CSV.
    Bench {
        /// Base model config; its image size is replaced by each of --sizes.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the oracle suite; exits 3 if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Crc { .. } | Error::Version(_) | Error::Data(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

/// Parses `argv` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    let precision = match &cmd {
        Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Sample { common, .. }
        | Command::Verify { common } => common.precision,
        Command::Bench { .. } => Precision::F32,
    };
    match precision {
        Precision::F32 => execute::<f32>(cmd),
        Precision::F64 => execute::<f64>(cmd),
    }
}

fn execute<T: Real>(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train {
            data,
            config,
            checkpoint,
            mode,
            steps,
            batch_size,
            checkpoint_interval,
            log,
            resume,
            common,
        } => {
            let (mut dm, mut opt) = if resume {
                let ck = Checkpoint::<T>::load(&checkpoint)?;
                if ck.seed != common.seed {
                    return Err(Error::Validation(format!(
                        "checkpoint was trained with seed {}, not {}",
                        ck.seed, common.seed
                    )));
                }
                if config.is_some() && requested_config(config.as_deref(), mode)? != ck.config {
                    return Err(Error::Config("--config differs from the checkpoint's config".into()));
                }
                (ck.model()?, ck.optim)
            } else {
                let cfg = requested_config(config.as_deref(), mode)?;
                (
                    DensityModel::<T>::build(&cfg, &mut build_rng(common.seed))?,
                    OptimState::new(LrSchedule::default()),
                )
            };
            if let Some(m) = mode {
                if dm.config().dequant != DequantMode::from(m) {
                    return Err(Error::Config("--mode differs from the checkpoint's config".into()));
                }
            }
            let ds = Dataset::load(&data, dm.config().n_bits)?;
            let run = TrainRunConfig {
                batch_size,
                steps,
                seed: common.seed,
                checkpoint_interval,
                checkpoint_path: Some(checkpoint.clone()),
                log_path: Some(log.unwrap_or_else(|| checkpoint.with_extension("csv"))),
                prefetch: true,
                ..TrainRunConfig::default()
            };
            let out = fit(&mut dm, &mut opt, &ds, None, &run)?;
            if let Some(last) = out.rows.last() {
                println!("step {} loss {:.4} nats bpd {:.4}", last.step, last.loss_nats, last.bpd);
            }
            if !out.skipped.is_empty() {
                println!("skipped {} non-finite steps", out.skipped.len());
            }
            Ok(EXIT_OK)
        }
        Command::Eval {
            data,
            checkpoint,
            k,
            batch_size,
            common,
        } => {
            let dm = Checkpoint::<T>::load(&checkpoint)?.model()?;
            let ds = Dataset::load(&data, dm.config().n_bits)?;
            let bpd = evaluate(&dm, &ds, k, batch_size, common.seed)?;
            println!("{bpd:.6}");
            Ok(EXIT_OK)
        }
        Command::Sample {
            checkpoint,
            n,
            temperature,
            out,
            cols,
            common,
        } => {
            let dm = Checkpoint::<T>::load(&checkpoint)?.model()?;
            let x = sample_pixels(&dm, n, temperature, common.seed)?;
            let cols = cols.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize);
            write_image_grid(&x, dm.config().n_bits, cols.max(1), &out)?;
            Ok(EXIT_OK)
        }
        Command::Bench {
            config,
            sizes,
            n,
            repeats,
            out,
            seed,
        } => {
            let mut cfg = BenchConfig {
                sizes,
                batch: n,
                repeats,
                seed,
                ..BenchConfig::default()
            };
            if let Some(p) = config {
                cfg.base = ModelConfig::load(&p)?;
            }
            let csv = bench_sample(&cfg)?.to_csv();
            match out {
                Some(p) => write_text(&p, &csv)?,
                None => print!("{csv}"),
            }
            Ok(EXIT_OK)
        }
        Command::Verify { common } => {
            let report = run_suite::<T>(common.seed);
            for c in &report.checks {
                println!("{c}");
            }
            Ok(if report.all_passed() { EXIT_OK } else { EXIT_VERIFY })
        }
    }
}

/// Samples in pixel units, nominally `[0, 2^n_bits)`; the image grid floors
/// and clamps them.
pub fn sample_pixels<T: Real>(
    dm: &DensityModel<T>,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<crate::tensor::Tensor<T>> {
    if n == 0 {
        return Err(Error::Validation("--n must be at least 1".into()));
    }
    dm.flow.sample(n, temperature, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The config file (or the default) with `--mode` applied.
fn requested_config(path: Option<&Path>, mode: Option<Mode>) -> Result<ModelConfig> {
    let mut cfg = match path {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(m) = mode {
        cfg.dequant = m.into();
        cfg.validate()?;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
