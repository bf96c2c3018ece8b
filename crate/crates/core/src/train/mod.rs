//! Optimization of a [`DensityModel`]: Adam with warmup and decay, guarded
//! steps, CSV logging, checkpoints and evaluation.

mod optim;

pub use optim::{clip_global_norm, global_norm, LrSchedule, Moments, OptimState};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::dequant::{bits_per_dim, elbo_bound, iw_bound, to_real, DensityModel};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, Dataset};
use crate::tensor::{Real, Tensor};

pub const CSV_HEADER: &str = "step,loss_nats,bpd,lr,grad_norm";

/// Random stream reserved for the data-dependent initialization batch.
pub const INIT_STREAM: u64 = u64::MAX;

/// Random stream used to draw the initial model parameters.
pub const BUILD_STREAM: u64 = u64::MAX - 1;

/// Generator for the initial parameters of a model trained with `seed`.
pub fn build_rng(seed: u64) -> ChaCha8Rng {
    step_rng(seed, BUILD_STREAM)
}

/// Noise generator for training step `step`: one ChaCha stream per step, so
/// any step can be replayed from the seed alone.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Clone, Debug)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    /// Step counter value at which training stops.
    pub steps: u64,
    pub seed: u64,
    /// Evaluate on the held-out set every this many steps (0 = never).
    pub eval_interval: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_interval: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub prefetch: bool,
    pub max_grad_norm: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            batch_size: 32,
            steps: 2000,
            seed: 0,
            eval_interval: 0,
            checkpoint_interval: 0,
            checkpoint_path: None,
            log_path: None,
            prefetch: false,
            max_grad_norm: 100.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss_nats: f64,
    pub bpd: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss_nats, self.bpd, self.lr, self.grad_norm
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Steps whose update was skipped because of a non-finite loss or gradient.
    pub skipped: Vec<u64>,
    pub clipped: usize,
}

/// What one guarded step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied {
        loss: f64,
        grad_norm: f64,
        clipped: bool,
    },
    Skipped,
}

/// Per-item mean objective, its gradients for every trainable parameter
/// (in [`DensityModel::params`] order) and their global norm.
pub fn loss_and_grads<T: Real>(
    dm: &DensityModel<T>,
    x: &Tensor<T>,
    noise: &Tensor<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let loss = dm.nll_objective(&tape, x, noise)?;
    let value = loss.value().item().as_f64();
    let grads = tape.backward(loss)?;
    let out = dm
        .params()
        .into_iter()
        .filter(|p| p.trainable)
        .map(|p| {
            grads
                .param(p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect();
    Ok((value, out))
}

/// One optimizer step on pixels `x` with the given noise. Non-finite losses
/// or gradients skip the update but still advance the step counter.
pub fn train_step<T: Real>(
    dm: &mut DensityModel<T>,
    opt: &mut OptimState<T>,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    max_grad_norm: f64,
) -> Result<StepOutcome> {
    let (loss, mut grads) = match loss_and_grads(dm, x, noise) {
        Ok(v) => v,
        Err(Error::NonFinite(op)) => {
            log::warn!(
                "step {}: non-finite value in {op}, skipping update",
                opt.step + 1
            );
            opt.step += 1;
            return Ok(StepOutcome::Skipped);
        }
        Err(e) => return Err(e),
    };
    let norm = global_norm(&grads);
    if !norm.is_finite() || !loss.is_finite() {
        log::warn!(
            "step {}: non-finite gradient norm, skipping update",
            opt.step + 1
        );
        opt.step += 1;
        return Ok(StepOutcome::Skipped);
    }
    let clipped = clip_global_norm(&mut grads, norm, max_grad_norm);
    if clipped {
        log::info!(
            "step {}: clipped gradient norm {norm:.3} to {max_grad_norm}",
            opt.step + 1
        );
    }
    opt.update(&mut dm.params_mut(), &grads)?;
    Ok(StepOutcome::Applied {
        loss,
        grad_norm: norm,
        clipped,
    })
}

fn open_log(run: &TrainRunConfig, start: u64) -> Result<Option<BufWriter<File>>> {
    let Some(path) = &run.log_path else {
        return Ok(None);
    };
    let file = if start == 0 || !path.exists() {
        let mut f = File::create(path)?;
        writeln!(f, "{CSV_HEADER}")?;
        f
    } else {
        OpenOptions::new().append(true).open(path)?
    };
    Ok(Some(BufWriter::new(file)))
}

/// Data-dependent ActNorm initialization on the batch of step `step`, with
/// noise from the reserved init stream.
pub fn initialize<T: Real>(
    dm: &mut DensityModel<T>,
    data: &Dataset,
    batch: usize,
    seed: u64,
    step: u64,
) -> Result<()> {
    let x = to_real::<T>(&data.batch_for_step(step, batch, seed)?, dm.config().n_bits)?;
    let noise = dm.draw_noise(x.shape().n(), &mut step_rng(seed, INIT_STREAM));
    dm.initialize(&x, &noise)
}

/// Trains until `opt.step == run.steps`, starting from whatever step `opt`
/// records, so a restored checkpoint resumes exactly where it stopped.
pub fn fit<T: Real>(
    dm: &mut DensityModel<T>,
    opt: &mut OptimState<T>,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    run: &TrainRunConfig,
) -> Result<TrainLog> {
    if run.batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let cfg = dm.config().clone();
    if data.image_shape() != cfg.image || data.n_bits() != cfg.n_bits {
        return Err(Error::Data(format!(
            "dataset is {:?} at {} bits, model expects {:?} at {} bits",
            data.image_shape(),
            data.n_bits(),
            cfg.image,
            cfg.n_bits
        )));
    }
    let start = opt.step;
    if !dm.is_initialized() {
        initialize(dm, data, run.batch_size, run.seed, start)?;
    }
    let mut csv = open_log(run, start)?;
    let mut log = TrainLog::default();
    let dims = cfg.dims();
    for batch in data.stream(
        start,
        run.steps.max(start),
        run.batch_size,
        run.seed,
        run.prefetch,
    ) {
        let step = opt.step;
        let x = to_real::<T>(&batch?, cfg.n_bits)?;
        let noise = dm.draw_noise(x.shape().n(), &mut step_rng(run.seed, step));
        let lr = opt.next_lr();
        match train_step(dm, opt, &x, &noise, run.max_grad_norm)? {
            StepOutcome::Applied {
                loss,
                grad_norm,
                clipped,
            } => {
                let row = LogRow {
                    step: opt.step,
                    loss_nats: loss,
                    bpd: bits_per_dim(loss, dims)?,
                    lr,
                    grad_norm,
                };
                if let Some(w) = csv.as_mut() {
                    writeln!(w, "{}", row.csv())?;
                }
                log.rows.push(row);
                log.clipped += usize::from(clipped);
            }
            StepOutcome::Skipped => log.skipped.push(opt.step),
        }
        if run.checkpoint_interval > 0 && opt.step % run.checkpoint_interval == 0 {
            if let Some(path) = &run.checkpoint_path {
                if let Some(w) = csv.as_mut() {
                    w.flush()?;
                }
                Checkpoint::capture(dm, opt, run.seed).save(path)?;
            }
        }
        if let (Some(ev), true) = (
            eval_data,
            run.eval_interval > 0 && opt.step % run.eval_interval == 0,
        ) {
            let bpd = evaluate(dm, ev, 1, run.batch_size, run.seed)?;
            log::info!("step {}: eval bpd {bpd:.4}", opt.step);
        }
    }
    if let Some(w) = csv.as_mut() {
        w.flush()?;
    }
    if let Some(path) = &run.checkpoint_path {
        Checkpoint::capture(dm, opt, run.seed).save(path)?;
    }
    Ok(log)
}

/// Per-item bounds on `-log P(x)` in nats, `K = k` noise draws per item:
/// the single-sample bound for `k == 1`, the importance-weighted bound else.
pub fn nll_bounds<T: Real>(
    dm: &DensityModel<T>,
    data: &Dataset,
    k: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Validation(
            "need at least one sample per datum".into(),
        ));
    }
    let mut out = Vec::with_capacity(data.len());
    for (i, b) in data.sequential_batches(batch)?.into_iter().enumerate() {
        let x = to_real::<T>(&b, dm.config().n_bits)?;
        let mut rng = step_rng(seed, i as u64);
        for lw in dm.log_weights(&x, k, &mut rng)? {
            out.push(if k == 1 {
                elbo_bound(&lw)
            } else {
                iw_bound(&lw)
            });
        }
    }
    Ok(out)
}

/// Mean bound over the dataset in bits per dimension.
pub fn evaluate<T: Real>(
    dm: &DensityModel<T>,
    data: &Dataset,
    k: usize,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let b = nll_bounds(dm, data, k, batch, seed)?;
    bits_per_dim(b.iter().sum::<f64>() / b.len() as f64, dm.config().dims())
}
