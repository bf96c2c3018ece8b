//! Turning discrete pixels into continuous inputs, and the resulting
//! likelihood bounds.

mod variational;

pub use variational::{DequantFlow, VariationalDequantizer};

use rand::Rng;

use crate::autodiff::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::gaussian_log_prob;
use crate::model::{DequantMode, Model, ModelConfig};
use crate::tensor::{Real, Shape, Tensor};

/// Continuous input `y = x + u` together with `log q(u | x)` per item.
#[derive(Clone, Debug)]
pub struct DequantSample<T: Real> {
    pub y: Tensor<T>,
    pub log_q: Vec<T>,
    /// Noise entries pushed back inside `[eps, 1 - eps]`.
    pub clamped: usize,
}

/// Smallest distance kept between `u` and the ends of `[0, 1]`, chosen so
/// that `x + u` stays below `x + 1` in `T` for every pixel value.
pub fn noise_margin<T: Real>(n_bits: u32) -> f64 {
    let ulp = T::epsilon().as_f64() * (1u64 << n_bits) as f64;
    1e-6f64.max(2.0 * ulp)
}

/// Reduces 8-bit pixels to `n_bits` by integer division.
pub fn quantize(x: &Tensor<u8>, n_bits: u32) -> Result<Tensor<u8>> {
    if !(1..=8).contains(&n_bits) {
        return Err(Error::Validation(format!(
            "n_bits must be in 1..=8, got {n_bits}"
        )));
    }
    let shift = 8 - n_bits;
    Tensor::from_vec(x.shape(), x.data().iter().map(|v| v >> shift).collect())
}

/// Pixel values as reals, checked to lie in `[0, 2^n_bits)`.
pub fn to_real<T: Real>(x: &Tensor<u8>, n_bits: u32) -> Result<Tensor<T>> {
    let levels = 1u32 << n_bits;
    if let Some(v) = x.data().iter().find(|v| u32::from(**v) >= levels) {
        return Err(Error::Data(format!(
            "pixel value {v} outside [0, {levels})"
        )));
    }
    Tensor::from_vec(
        x.shape(),
        x.data().iter().map(|&v| T::lit(f64::from(v))).collect(),
    )
}

fn check_pixels<T: Real>(x: &Tensor<T>, n_bits: u32) -> Result<()> {
    let top = (1u64 << n_bits) as f64;
    for v in x.data() {
        let f = v.as_f64();
        if f < 0.0 || f >= top || f.fract() != 0.0 {
            return Err(Error::Data(format!(
                "pixel value {f} is not an integer in [0, {top})"
            )));
        }
    }
    Ok(())
}

/// `y = x + u`, `u ~ Unif[0, 1)`, `log q = 0`.
pub fn uniform_dequantize<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    n_bits: u32,
    rng: &mut R,
) -> Result<DequantSample<T>> {
    let u = Tensor::<T>::rand_uniform(x.shape(), 0.0, 1.0, rng);
    uniform_with_noise(x, &u, n_bits)
}

/// [`uniform_dequantize`] with the noise supplied.
pub fn uniform_with_noise<T: Real>(
    x: &Tensor<T>,
    u: &Tensor<T>,
    n_bits: u32,
) -> Result<DequantSample<T>> {
    check_pixels(x, n_bits)?;
    let hi = T::lit(1.0 - noise_margin::<T>(n_bits));
    let mut clamped = 0;
    let u = u.map(|v| if v > hi { hi } else { v });
    for v in u.data() {
        if *v == hi {
            clamped += 1;
        }
    }
    Ok(DequantSample {
        y: x.add(&u)?,
        log_q: vec![T::zero(); x.shape().n()],
        clamped,
    })
}

/// `nll / (dims ln 2)`.
pub fn bits_per_dim(nll_nats: f64, dims: usize) -> Result<f64> {
    if dims == 0 {
        return Err(Error::Validation("bits per dim of zero dimensions".into()));
    }
    Ok(nll_nats / (dims as f64 * std::f64::consts::LN_2))
}

/// How pixels are made continuous.
#[derive(Clone, Debug)]
pub enum Dequantizer<T: Real> {
    Uniform,
    Variational(Box<VariationalDequantizer<T>>),
}

impl<T: Real> Dequantizer<T> {
    pub fn mode(&self) -> DequantMode {
        match self {
            Dequantizer::Uniform => DequantMode::Uniform,
            Dequantizer::Variational(_) => DequantMode::Variational,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Dequantizer::Uniform => Vec::new(),
            Dequantizer::Variational(v) => v.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Dequantizer::Uniform => Vec::new(),
            Dequantizer::Variational(v) => v.params_mut(),
        }
    }
}

/// Per-item terms of the dequantized objective on one tape.
pub struct LossTerms<'t, T: Real> {
    /// `-log p(y) + log q(u | x)`, shape `[n, 1, 1, 1]`.
    pub loss: Var<'t, T>,
    pub log_p: Var<'t, T>,
    pub log_q: Var<'t, T>,
    pub clamped: usize,
}

/// A flow over continuous inputs paired with its dequantizer.
#[derive(Clone, Debug)]
pub struct DensityModel<T: Real> {
    pub flow: Model<T>,
    pub dequant: Dequantizer<T>,
}

impl<T: Real> DensityModel<T> {
    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let flow = Model::build(cfg, rng)?;
        let dequant = match cfg.dequant {
            DequantMode::Uniform => Dequantizer::Uniform,
            DequantMode::Variational => {
                Dequantizer::Variational(Box::new(VariationalDequantizer::new(cfg, rng)?))
            }
        };
        Ok(DensityModel { flow, dequant })
    }

    pub fn config(&self) -> &ModelConfig {
        self.flow.config()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.flow.params();
        p.extend(self.dequant.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.flow.params_mut();
        p.extend(self.dequant.params_mut());
        p
    }

    pub fn param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Shape of the noise consumed for a batch of `n`.
    pub fn noise_shape(&self, n: usize) -> Shape {
        let (h, w, c) = self.config().image;
        match &self.dequant {
            Dequantizer::Uniform => Shape::new(n, h, w, c),
            Dequantizer::Variational(_) => Shape::new(n, h / 2, w / 2, 4 * c),
        }
    }

    /// Uniform noise in `[0, 1)` or standard-normal base noise.
    pub fn draw_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        let shape = self.noise_shape(n);
        match &self.dequant {
            Dequantizer::Uniform => Tensor::rand_uniform(shape, 0.0, 1.0, rng),
            Dequantizer::Variational(_) => Tensor::randn(shape, 1.0, rng),
        }
    }

    /// Untaped dequantization with given noise.
    pub fn dequantize(&self, x: &Tensor<T>, noise: &Tensor<T>) -> Result<DequantSample<T>> {
        let n_bits = self.config().n_bits;
        match &self.dequant {
            Dequantizer::Uniform => uniform_with_noise(x, noise, n_bits),
            Dequantizer::Variational(v) => v.dequantize(x, noise),
        }
    }

    /// Data-dependent initialization of every ActNorm from one batch.
    pub fn initialize(&mut self, x: &Tensor<T>, noise: &Tensor<T>) -> Result<()> {
        if let Dequantizer::Variational(v) = &mut self.dequant {
            v.initialize(x, noise)?;
        }
        let y = self.dequantize(x, noise)?.y;
        self.flow.initialize(&y)
    }

    pub fn is_initialized(&self) -> bool {
        self.params()
            .iter()
            .filter(|p| p.name.ends_with(".initialized"))
            .all(|p| p.value.item() != T::zero())
    }

    /// Records the single-sample objective for integer pixels `x`.
    pub fn loss_terms<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Tensor<T>,
        noise: &Tensor<T>,
    ) -> Result<LossTerms<'t, T>> {
        let n = x.shape().n();
        let (y, log_q, clamped) = match &self.dequant {
            Dequantizer::Uniform => {
                let s = uniform_with_noise(x, noise, self.config().n_bits)?;
                (
                    tape.constant(s.y),
                    tape.constant(Tensor::zeros(Shape::new(n, 1, 1, 1))),
                    s.clamped,
                )
            }
            Dequantizer::Variational(v) => v.dequantize_taped(tape, x, noise)?,
        };
        let log_p = self.flow.forward(y)?.log_prob()?;
        let loss = log_q.sub(&log_p)?;
        Ok(LossTerms {
            loss,
            log_p,
            log_q,
            clamped,
        })
    }

    /// Mean over the batch of the per-item objective, in nats.
    pub fn nll_objective<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Tensor<T>,
        noise: &Tensor<T>,
    ) -> Result<Var<'t, T>> {
        self.loss_terms(tape, x, noise)?.loss.mean(&[0, 1, 2, 3])
    }

    /// Per-item `log p(y_k) - log q(u_k | x)` for `k` noise draws.
    pub fn log_weights<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let n = x.shape().n();
        let mut out = vec![Vec::with_capacity(k); n];
        for _ in 0..k {
            let noise = self.draw_noise(n, rng);
            let tape = Tape::new();
            let t = self.loss_terms(&tape, x, &noise)?;
            for (i, v) in t.loss.value().data().iter().enumerate() {
                out[i].push(-v.as_f64());
            }
        }
        Ok(out)
    }
}

/// `-log((1/K) sum_k exp(a_k))`: the `K`-sample importance-weighted bound on
/// `-log P(x)`.
pub fn iw_bound(log_w: &[f64]) -> f64 {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = log_w.iter().map(|a| (a - m).exp()).sum();
    -(m + (s / log_w.len() as f64).ln())
}

/// `-(1/K) sum_k a_k`: the average single-sample bound over the same draws.
pub fn elbo_bound(log_w: &[f64]) -> f64 {
    -log_w.iter().sum::<f64>() / log_w.len() as f64
}

/// Untaped `log N(z; 0, I)` per item as a `[n, 1, 1, 1]` tensor.
pub(crate) fn base_log_prob<'t, T: Real>(tape: &'t Tape<T>, eps: &Tensor<T>) -> Result<Var<'t, T>> {
    let z = tape.constant(eps.clone());
    let zero = tape.constant(Tensor::zeros(eps.shape()));
    gaussian_log_prob(z, zero, zero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_bookkeeping() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 5.0);
        let u = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 0.3);
        let s = uniform_with_noise(&x, &u, 5).unwrap();
        assert_eq!(s.y.item(), 5.3);
        assert_eq!(s.y.item().floor(), 5.0);
        assert_eq!(s.log_q, vec![0.0]);
    }

    #[test]
    fn uniform_noise_mean_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::full(Shape::new(10, 10, 10, 100), 3.0);
        let s = uniform_dequantize(&x, 5, &mut rng).unwrap();
        let mean = s.y.sub(&x).unwrap().sum_all() / x.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        assert!(s.y.data().iter().all(|v| v.floor() == 3.0));
    }

    #[test]
    fn f32_floor_survives_top_pixel() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), 255.0);
        let u = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), 0.99999994);
        let s = uniform_with_noise(&x, &u, 8).unwrap();
        assert_eq!(s.y.item().floor(), 255.0);
        assert_eq!(s.clamped, 1);
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 32.0);
        let u = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        assert!(matches!(uniform_with_noise(&x, &u, 5), Err(Error::Data(_))));
        let raw = Tensor::<u8>::full(Shape::new(1, 1, 1, 1), 40);
        assert!(to_real::<f64>(&raw, 5).is_err());
        assert_eq!(quantize(&raw, 5).unwrap().data(), &[5]);
    }

    #[test]
    fn bpd_conventions() {
        assert!((bits_per_dim(10.0 * std::f64::consts::LN_2, 10).unwrap() - 1.0).abs() < 1e-15);
        assert!((bits_per_dim(3.0 * 256f64.ln(), 3).unwrap() - 8.0).abs() < 1e-12);
        assert!(bits_per_dim(1.0, 0).is_err());
    }

    #[test]
    fn iw_bound_is_below_average() {
        let a = [-3.0, -1.0, -2.5, -0.2];
        assert!(iw_bound(&a) <= elbo_bound(&a));
        assert!((iw_bound(&[-2.0]) - 2.0).abs() < 1e-15);
        assert!((iw_bound(&[-2.0, -2.0]) - 2.0).abs() < 1e-15);
    }
}
