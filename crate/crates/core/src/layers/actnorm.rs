use crate::autodiff::{Param, Var};
use crate::error::{Error, Result};
use crate::layers::{scaled_total, FlowLayer, InverseStats, LayerKind};
use crate::tensor::{Real, Shape, Tensor};

const STD_FLOOR: f64 = 1e-6;

/// Per-channel affine normalization `y = s * x + b`.
///
/// Starts as the identity; [`FlowLayer::init_forward`] on the first batch
/// sets `s, b` so that each output channel has zero mean and unit variance.
#[derive(Clone, Debug)]
pub struct ActNorm<T: Real> {
    pub scale: Param<T>,
    pub bias: Param<T>,
    initialized: Param<T>,
}

impl<T: Real> ActNorm<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        ActNorm {
            scale: Param::new(
                format!("{prefix}.scale"),
                Tensor::ones(Shape::vector(channels)),
            ),
            bias: Param::new(
                format!("{prefix}.bias"),
                Tensor::zeros(Shape::vector(channels)),
            ),
            initialized: Param::buffer(
                format!("{prefix}.initialized"),
                Tensor::zeros(Shape::SCALAR),
            ),
        }
    }

    /// Explicit parameters, marked as initialized.
    pub fn with_params(prefix: &str, scale: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let c = scale.shape().c();
        if scale.shape() != Shape::vector(c) || bias.shape() != Shape::vector(c) {
            return Err(Error::Shape("actnorm params must be [1,1,1,c]".into()));
        }
        let mut a = ActNorm::new(prefix, c);
        a.scale.value = scale;
        a.bias.value = bias;
        a.initialized.value = Tensor::scalar(T::one());
        Ok(a)
    }

    pub fn channels(&self) -> usize {
        self.scale.value.shape().c()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized.value.item() != T::zero()
    }

    fn check_scale(&self) -> Result<()> {
        if self.scale.value.data().iter().any(|s| *s == T::zero()) {
            return Err(Error::NotInvertible("actnorm scale contains 0".into()));
        }
        Ok(())
    }

    /// Sets `s = 1 / std`, `b = -mean / std` from the statistics of `x`.
    pub fn initialize(&mut self, x: &Tensor<T>) -> Result<()> {
        let c = self.channels();
        if x.shape().c() != c {
            return Err(Error::Dimension {
                op: "actnorm init",
                lhs: x.shape(),
                rhs: Shape::vector(c),
            });
        }
        let count = (x.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for px in x.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for px in x.data().chunks(c) {
            for k in 0..c {
                var[k] += (px[k].as_f64() - mean[k]).powi(2);
            }
        }
        let mut scale = Vec::with_capacity(c);
        let mut bias = Vec::with_capacity(c);
        for k in 0..c {
            let mut std = (var[k] / count).sqrt();
            if std < STD_FLOOR {
                log::warn!(
                    "{}: channel {k} has std {std:e} at init, flooring to {STD_FLOOR:e}",
                    self.scale.name
                );
                std = STD_FLOOR;
            }
            scale.push(T::lit(1.0 / std));
            bias.push(T::lit(-mean[k] / std));
        }
        self.scale.value = Tensor::from_vec(Shape::vector(c), scale)?;
        self.bias.value = Tensor::from_vec(Shape::vector(c), bias)?;
        self.initialized.value = Tensor::scalar(T::one());
        Ok(())
    }
}

impl<T: Real> FlowLayer<T> for ActNorm<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::ActNorm
    }

    fn forward<'t>(
        &self,
        x: Var<'t, T>,
        _cond: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check_scale()?;
        let tape = x.tape();
        let s = tape.param(&self.scale);
        let b = tape.param(&self.bias);
        let y = x.mul(&s)?.add(&b)?;
        let shape = x.shape();
        let logdet = scaled_total(s.log_abs()?, (shape.h() * shape.w()) as f64, shape.n())?;
        Ok((y, logdet))
    }

    fn inverse_counted(
        &self,
        y: &Tensor<T>,
        _cond: Option<&Tensor<T>>,
        _stats: &mut InverseStats,
    ) -> Result<Tensor<T>> {
        self.check_scale()?;
        y.sub(&self.bias.value)?.div(&self.scale.value)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.scale, &self.bias, &self.initialized]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.scale, &mut self.bias, &mut self.initialized]
    }

    fn describe(&self) -> String {
        "actnorm".into()
    }

    fn init_forward(&mut self, x: &Tensor<T>, _cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if !self.is_initialized() {
            self.initialize(x)?;
        }
        self.check_scale()?;
        x.mul(&self.scale.value)?.add(&self.bias.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::apply;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::vector(v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 3, 2), 1.0, &mut rng);
        let a = ActNorm::with_params("a", vec_t(&[1.0, 1.0]), vec_t(&[0.0, 0.0])).unwrap();
        let (y, ld) = apply(&a, &x, None).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, vec![0.0, 0.0]);
        assert_eq!(a.inverse(&y, None).unwrap(), x);
    }

    #[test]
    fn diagonal_logdet() {
        let x = Tensor::<f64>::ones(Shape::new(1, 2, 2, 2));
        let a = ActNorm::with_params("a", vec_t(&[2.0, 2.0]), vec_t(&[0.0, 0.0])).unwrap();
        let (y, ld) = apply(&a, &x, None).unwrap();
        assert!((ld[0] - 4.0 * (2f64.ln() + 2f64.ln())).abs() < 1e-12);
        assert!((ld[0] - 5.5452).abs() < 1e-4);
        assert_eq!(a.inverse(&y, None).unwrap(), x);
    }

    #[test]
    fn data_init_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(Shape::new(8, 4, 4, 3), 3.0, &mut rng).map(|v| v + 5.0);
        let mut a = ActNorm::new("a", 3);
        assert!(!a.is_initialized());
        let y = a.init_forward(&x, None).unwrap();
        assert!(a.is_initialized());
        let count = (y.len() / 3) as f64;
        for k in 0..3 {
            let vals: Vec<f64> = y.data().iter().skip(k).step_by(3).copied().collect();
            let m: f64 = vals.iter().sum::<f64>() / count;
            let v: f64 = vals.iter().map(|t| (t - m).powi(2)).sum::<f64>() / count;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_channel_is_floored() {
        let x = Tensor::<f64>::full(Shape::new(2, 2, 2, 1), 3.0);
        let mut a = ActNorm::new("a", 1);
        a.init_forward(&x, None).unwrap();
        assert!((a.scale.value.item() - 1e6).abs() < 1e-3);
    }

    #[test]
    fn zero_scale_is_not_invertible() {
        let a = ActNorm::with_params("a", vec_t(&[0.0, 1.0]), vec_t(&[0.0, 0.0])).unwrap();
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 1, 2));
        assert!(matches!(apply(&a, &x, None), Err(Error::NotInvertible(_))));
        assert!(matches!(a.inverse(&x, None), Err(Error::NotInvertible(_))));
    }
}
