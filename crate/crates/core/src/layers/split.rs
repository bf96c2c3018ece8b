use rand::Rng;

use crate::autodiff::{Param, Var};
use crate::error::{Error, Result};
use crate::tensor::conv::ConvGeometry;
use crate::tensor::{Real, Shape, Tensor};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-item `sum log N(z; mu, exp(log_sigma)^2)`, shape `[n, 1, 1, 1]`.
pub fn gaussian_log_prob<'t, T: Real>(
    z: Var<'t, T>,
    mu: Var<'t, T>,
    log_sigma: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let white = z.sub(&mu)?.mul(&log_sigma.neg()?.exp()?)?;
    let per = white
        .square()?
        .mul_scalar(-0.5)?
        .sub(&log_sigma)?
        .add_scalar(-HALF_LN_2PI)?;
    let per = per.broadcast_to(z.shape())?;
    per.sum_per_item()
}

/// Untaped standard-normal log density summed per item.
pub fn standard_normal_log_prob<T: Real>(z: &Tensor<T>) -> Vec<f64> {
    let n = z.shape().n();
    let per = z.shape().item_len();
    (0..n)
        .map(|b| {
            z.data()[b * per..(b + 1) * per]
                .iter()
                .map(|v| -0.5 * v.as_f64().powi(2) - HALF_LN_2PI)
                .sum()
        })
        .collect()
}

/// Factors out the last `out_channels` channels and scores them under a
/// Gaussian whose mean and log-scale are predicted from the kept channels by
/// a zero-initialized 3x3 convolution.
#[derive(Clone, Debug)]
pub struct SplitPrior<T: Real> {
    keep: usize,
    out: usize,
    weight: Param<T>,
    bias: Param<T>,
}

impl<T: Real> SplitPrior<T> {
    pub fn new(prefix: &str, channels: usize, out_channels: usize) -> Result<Self> {
        if out_channels == 0 || out_channels >= channels {
            return Err(Error::Validation(format!(
                "cannot factor {out_channels} of {channels} channels"
            )));
        }
        let keep = channels - out_channels;
        Ok(SplitPrior {
            keep,
            out: out_channels,
            weight: Param::new(
                format!("{prefix}.prior.weight"),
                Tensor::zeros(Shape::new(3, 3, keep, 2 * out_channels)),
            ),
            bias: Param::new(
                format!("{prefix}.prior.bias"),
                Tensor::zeros(Shape::vector(2 * out_channels)),
            ),
        })
    }

    pub fn keep_channels(&self) -> usize {
        self.keep
    }

    pub fn out_channels(&self) -> usize {
        self.out
    }

    fn check(&self, c: usize) -> Result<()> {
        if c != self.keep + self.out {
            return Err(Error::Shape(format!(
                "split expects {} channels, got {c}",
                self.keep + self.out
            )));
        }
        Ok(())
    }

    fn params_for<'t>(&self, keep: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tape = keep.tape();
        let h = keep.conv2d(
            &tape.param(&self.weight),
            Some(&tape.param(&self.bias)),
            None,
            ConvGeometry::centered(3, 3),
        )?;
        Ok((
            h.slice_channels(0, self.out)?,
            h.slice_channels(self.out, self.out)?,
        ))
    }

    /// `(kept, factored, log p(factored | kept))`.
    pub fn forward<'t>(&self, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        self.check(x.shape().c())?;
        let keep = x.slice_channels(0, self.keep)?;
        let z = x.slice_channels(self.keep, self.out)?;
        let (mu, log_sigma) = self.params_for(keep)?;
        let lp = gaussian_log_prob(z, mu, log_sigma)?;
        Ok((keep, z, lp))
    }

    /// Reassembles `x` from the kept channels and a given factored latent.
    pub fn merge(&self, keep: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        if keep.shape().c() != self.keep || z.shape().c() != self.out {
            return Err(Error::Shape(format!(
                "split merge got {:?} and {:?}",
                keep.shape(),
                z.shape()
            )));
        }
        Tensor::concat_channels(&[keep, z])
    }

    /// Draws the factored channels as `mu + temperature * sigma * eps`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        keep: &Tensor<T>,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let tape = crate::autodiff::Tape::new();
        let (mu, log_sigma) = self.params_for(tape.constant(keep.clone()))?;
        let eps = Tensor::<T>::randn(mu.shape(), temperature, rng);
        let z = mu
            .value()
            .add(&log_sigma.value().map(|v| v.exp()).mul(&eps)?)?;
        self.merge(keep, &z)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Learned per-channel diagonal Gaussian over the final latent.
#[derive(Clone, Debug)]
pub struct FinalPrior<T: Real> {
    pub mean: Param<T>,
    pub log_std: Param<T>,
}

impl<T: Real> FinalPrior<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        FinalPrior {
            mean: Param::new(
                format!("{prefix}.mean"),
                Tensor::zeros(Shape::vector(channels)),
            ),
            log_std: Param::new(
                format!("{prefix}.log_std"),
                Tensor::zeros(Shape::vector(channels)),
            ),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.value.shape().c()
    }

    pub fn log_prob<'t>(&self, z: Var<'t, T>) -> Result<Var<'t, T>> {
        if z.shape().c() != self.channels() {
            return Err(Error::Shape(format!(
                "final prior expects {} channels, got {:?}",
                self.channels(),
                z.shape()
            )));
        }
        let tape = z.tape();
        let mu = tape.param(&self.mean).broadcast_to(z.shape())?;
        let ls = tape.param(&self.log_std).broadcast_to(z.shape())?;
        gaussian_log_prob(z, mu, ls)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        shape: Shape,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let eps = Tensor::<T>::randn(shape, temperature, rng);
        let std = self.log_std.value.map(|v| v.exp());
        eps.mul(&std)?.add(&self.mean.value)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.mean, &self.log_std]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.mean, &mut self.log_std]
    }
}
