//! Multi-scale models built from masked-convolution steps.

mod config;
mod step;

pub use config::{parse_depths, DequantMode, ModelConfig, MultiScale};
pub use step::{MacowStep, StepSpec};

use rand::Rng;

use crate::autodiff::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{apply, FinalPrior, FlowLayer, InverseStats, SplitPrior, Squeeze};
use crate::tensor::{Real, Shape, Tensor};

/// One stage of the forward pipeline.
#[derive(Clone, Debug)]
pub enum Stage<T: Real> {
    Squeeze,
    Step(Box<MacowStep<T>>),
    Split(SplitPrior<T>),
}

impl<T: Real> Stage<T> {
    pub fn describe(&self) -> String {
        match self {
            Stage::Squeeze => "squeeze".into(),
            Stage::Step(s) => s.describe(),
            Stage::Split(s) => format!(
                "split({}/{})",
                s.out_channels(),
                s.out_channels() + s.keep_channels()
            ),
        }
    }
}

/// Latents in the order they leave the model: one per split, then the final one.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle<T: Real> {
    pub zs: Vec<Tensor<T>>,
}

impl<T: Real> LatentBundle<T> {
    pub fn total_dims(&self) -> usize {
        self.zs.iter().map(|z| z.len()).sum()
    }

    pub fn shapes(&self) -> Vec<Shape> {
        self.zs.iter().map(|z| z.shape()).collect()
    }
}

/// Taped forward pass.
pub struct Encoded<'t, T: Real> {
    pub zs: Vec<Var<'t, T>>,
    /// Per-item sum of all layer log-determinants.
    pub logdet: Var<'t, T>,
    /// Per-item log density of all latents under their priors.
    pub log_prior: Var<'t, T>,
}

impl<'t, T: Real> Encoded<'t, T> {
    pub fn log_prob(&self) -> Result<Var<'t, T>> {
        self.log_prior.add(&self.logdet)
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    config: ModelConfig,
    stages: Vec<Stage<T>>,
    prior: FinalPrior<T>,
}

fn step_spec(cfg: &ModelConfig, channels: usize) -> StepSpec {
    StepSpec {
        channels,
        units: cfg.units_per_step,
        kernel: cfg.kernel,
        coupling: cfg.coupling,
        hidden: cfg.hidden_channels,
    }
}

impl<T: Real> Model<T> {
    /// Builds the multi-scale layout selected by `cfg.multiscale`.
    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Model::build_multiscale(cfg, cfg.multiscale.m(), rng)
    }

    /// Per level: squeeze, then blocks of steps, with `1/m` of the level's
    /// channels factored out after every block except the model's last.
    pub fn build_multiscale<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        m: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if m < 2 || m % 2 != 0 {
            return Err(Error::Config(format!(
                "M must be even and at least 2, got {m}"
            )));
        }
        let mut c = cfg.image.2;
        let mut stages = Vec::new();
        for (l, blocks) in cfg.depths.iter().enumerate() {
            if blocks.len() > m / 2 {
                return Err(Error::Config(format!("level {l} has more than M/2 blocks")));
            }
            stages.push(Stage::Squeeze);
            c *= 4;
            let level_c = c;
            for (b, &depth) in blocks.iter().enumerate() {
                for s in 0..depth {
                    let prefix = format!("flow.l{l}.b{b}.s{s}");
                    stages.push(Stage::Step(Box::new(MacowStep::new(
                        &prefix,
                        step_spec(cfg, c),
                        rng,
                    )?)));
                }
                let last = l + 1 == cfg.levels && b + 1 == blocks.len();
                if !last {
                    if level_c % m != 0 {
                        return Err(Error::Config(format!(
                            "level {l}: {level_c} channels not divisible by {m}"
                        )));
                    }
                    let split = SplitPrior::new(&format!("flow.l{l}.b{b}.split"), c, level_c / m)?;
                    c -= level_c / m;
                    stages.push(Stage::Split(split));
                }
            }
        }
        Ok(Model {
            config: cfg.clone(),
            stages,
            prior: FinalPrior::new("flow.prior", c),
        })
    }

    /// The half-split layout built directly: one block per level and half the
    /// channels factored out after every level but the last.
    pub fn build_original<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut c = cfg.image.2;
        let mut stages = Vec::new();
        for (l, blocks) in cfg.depths.iter().enumerate() {
            if blocks.len() != 1 {
                return Err(Error::Config(format!(
                    "level {l} must have exactly one block"
                )));
            }
            stages.push(Stage::Squeeze);
            c *= 4;
            for s in 0..blocks[0] {
                let prefix = format!("flow.l{l}.b0.s{s}");
                stages.push(Stage::Step(Box::new(MacowStep::new(
                    &prefix,
                    step_spec(cfg, c),
                    rng,
                )?)));
            }
            if l + 1 < cfg.levels {
                if c % 2 != 0 {
                    return Err(Error::Config(format!("level {l}: odd channel count {c}")));
                }
                stages.push(Stage::Split(SplitPrior::new(
                    &format!("flow.l{l}.b0.split"),
                    c,
                    c / 2,
                )?));
                c /= 2;
            }
        }
        Ok(Model {
            config: cfg.clone(),
            stages,
            prior: FinalPrior::new("flow.prior", c),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage<T>] {
        &mut self.stages
    }

    pub fn prior(&self) -> &FinalPrior<T> {
        &self.prior
    }

    pub fn prior_mut(&mut self) -> &mut FinalPrior<T> {
        &mut self.prior
    }

    /// Stage descriptions followed by the final prior.
    pub fn describe_layers(&self) -> Vec<String> {
        let mut v: Vec<String> = self.stages.iter().map(|s| s.describe()).collect();
        v.push(format!("prior({})", self.prior.channels()));
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Squeeze => {}
                Stage::Step(st) => out.extend(st.params()),
                Stage::Split(sp) => out.extend(sp.params()),
            }
        }
        out.extend(self.prior.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            match s {
                Stage::Squeeze => {}
                Stage::Step(st) => out.extend(st.params_mut()),
                Stage::Split(sp) => out.extend(sp.params_mut()),
            }
        }
        out.extend(self.prior.params_mut());
        out
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let (h, w, c) = self.config.image;
        if shape.h() != h || shape.w() != w || shape.c() != c {
            return Err(Error::Shape(format!(
                "model expects [n,{h},{w},{c}] input, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Latent shapes for a batch of `n`, in bundle order.
    pub fn latent_shapes(&self, n: usize) -> Vec<Shape> {
        let (mut h, mut w, mut c) = self.config.image;
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Squeeze => {
                    h /= 2;
                    w /= 2;
                    c *= 4;
                }
                Stage::Step(_) => {}
                Stage::Split(sp) => {
                    out.push(Shape::new(n, h, w, sp.out_channels()));
                    c = sp.keep_channels();
                }
            }
        }
        out.push(Shape::new(n, h, w, c));
        out
    }

    /// Runs data-dependent initialization (ActNorm statistics) on `x`.
    pub fn initialize(&mut self, x: &Tensor<T>) -> Result<()> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        for s in &mut self.stages {
            h = match s {
                Stage::Squeeze => h.squeeze2x2()?,
                Stage::Step(st) => st.init_forward(&h, None)?,
                Stage::Split(sp) => h.slice_channels(0, sp.keep_channels())?,
            };
        }
        Ok(())
    }

    /// Taped forward pass `z = f(x)`.
    pub fn forward<'t>(&self, x: Var<'t, T>) -> Result<Encoded<'t, T>> {
        self.check_input(x.shape())?;
        let n = x.shape().n();
        let tape = x.tape();
        let mut h = x;
        let mut zs = Vec::new();
        let mut logdet = tape.constant(Tensor::zeros(Shape::new(n, 1, 1, 1)));
        let mut log_prior = tape.constant(Tensor::zeros(Shape::new(n, 1, 1, 1)));
        for s in &self.stages {
            match s {
                Stage::Squeeze => h = h.squeeze2x2()?,
                Stage::Step(st) => {
                    let (y, ld) = st.forward(h, None)?;
                    logdet = logdet.add(&ld)?;
                    h = y;
                }
                Stage::Split(sp) => {
                    let (keep, z, lp) = sp.forward(h)?;
                    log_prior = log_prior.add(&lp)?;
                    zs.push(z);
                    h = keep;
                }
            }
        }
        log_prior = log_prior.add(&self.prior.log_prob(h)?)?;
        zs.push(h);
        Ok(Encoded {
            zs,
            logdet,
            log_prior,
        })
    }

    /// `(latents, per-item logdet)`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(LatentBundle<T>, Vec<T>)> {
        let tape = Tape::new();
        let enc = self.forward(tape.constant(x.clone()))?;
        let zs = enc.zs.iter().map(|z| (*z.value()).clone()).collect();
        Ok((LatentBundle { zs }, enc.logdet.value().data().to_vec()))
    }

    /// Exact `log p(x)` in nats per batch item.
    pub fn log_prob(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let tape = Tape::new();
        let enc = self.forward(tape.constant(x.clone()))?;
        let lp = enc.log_prob()?;
        let v = lp.value().data().to_vec();
        Ok(v)
    }

    /// Every layer's forward logdet in execution order, steps expanded into
    /// their members.
    pub fn trace_logdets(&self, x: &Tensor<T>) -> Result<Vec<(String, Vec<T>)>> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Squeeze => {
                    let (y, ld) = apply(&Squeeze, &h, None)?;
                    out.push(("squeeze".into(), ld));
                    h = y;
                }
                Stage::Step(st) => {
                    let (y, parts) = st.traced_logdets(&h)?;
                    out.extend(parts);
                    h = y;
                }
                Stage::Split(sp) => h = h.slice_channels(0, sp.keep_channels())?,
            }
        }
        Ok(out)
    }

    fn check_bundle(&self, bundle: &LatentBundle<T>) -> Result<usize> {
        let n = bundle.zs.first().map(|z| z.shape().n()).unwrap_or(0);
        let want = self.latent_shapes(n);
        if bundle.shapes() != want {
            return Err(Error::Shape(format!(
                "latent shapes {:?} do not match model {:?}",
                bundle.shapes(),
                want
            )));
        }
        Ok(n)
    }

    /// `x = f^{-1}(z)`.
    pub fn decode(&self, bundle: &LatentBundle<T>) -> Result<Tensor<T>> {
        self.decode_counted(bundle, &mut InverseStats::default())
    }

    pub fn decode_counted(
        &self,
        bundle: &LatentBundle<T>,
        stats: &mut InverseStats,
    ) -> Result<Tensor<T>> {
        self.check_bundle(bundle)?;
        let mut splits = bundle.zs[..bundle.zs.len() - 1].iter().rev();
        let mut h = bundle.zs.last().expect("bundle has a final latent").clone();
        for s in self.stages.iter().rev() {
            h = match s {
                Stage::Squeeze => h.unsqueeze2x2()?,
                Stage::Step(st) => st.inverse_counted(&h, None, stats)?,
                Stage::Split(sp) => {
                    let z = splits.next().expect("checked by latent shapes");
                    sp.merge(&h, z)?
                }
            };
        }
        Ok(h)
    }

    /// Draws `n` samples with every prior's standard deviation scaled by
    /// `temperature`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        self.sample_counted(n, temperature, rng, &mut InverseStats::default())
    }

    pub fn sample_counted<R: Rng + ?Sized>(
        &self,
        n: usize,
        temperature: f64,
        rng: &mut R,
        stats: &mut InverseStats,
    ) -> Result<Tensor<T>> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::Validation(format!(
                "temperature must be >= 0, got {temperature}"
            )));
        }
        let final_shape = *self.latent_shapes(n).last().expect("at least one latent");
        let mut h = self.prior.sample(final_shape, temperature, rng)?;
        for s in self.stages.iter().rev() {
            h = match s {
                Stage::Squeeze => h.unsqueeze2x2()?,
                Stage::Step(st) => st.inverse_counted(&h, None, stats)?,
                Stage::Split(sp) => sp.sample(&h, temperature, rng)?,
            };
        }
        Ok(h)
    }

    /// Masked-convolution slice evaluations one decode performs: each unit
    /// sweeps twice along rows (even units) or columns (odd units) at its
    /// step's resolution.
    pub fn analytic_inverse_conv_count(&self) -> usize {
        let (mut h, mut w, _) = self.config.image;
        let mut count = 0;
        for s in &self.stages {
            match s {
                Stage::Squeeze => {
                    h /= 2;
                    w /= 2;
                }
                Stage::Step(st) => {
                    count += (0..st.units.len())
                        .map(|i| if i % 2 == 0 { 2 * h } else { 2 * w })
                        .sum::<usize>()
                }
                Stage::Split(_) => {}
            }
        }
        count
    }
}
