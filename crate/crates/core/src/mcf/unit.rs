use crate::autodiff::{Param, Var};
use crate::error::{Error, Result};
use crate::layers::{apply, ActNorm, FlowLayer, InverseStats, LayerKind};
use crate::mcf::flow::MaskedConvFlow;
use crate::mcf::mask::{MaskSpec, Orientation};
use crate::tensor::{Real, Tensor};

/// ActNorm followed by two masked convolutional flows of different
/// orientations.
#[derive(Clone, Debug)]
pub struct McfUnit<T: Real> {
    pub actnorm: ActNorm<T>,
    pub first: MaskedConvFlow<T>,
    pub second: MaskedConvFlow<T>,
}

impl<T: Real> McfUnit<T> {
    pub fn new(
        prefix: &str,
        a: MaskSpec,
        b: MaskSpec,
        channels: usize,
        cond_channels: usize,
    ) -> Result<Self> {
        if a.orientation == b.orientation {
            return Err(Error::Validation(format!(
                "unit needs two different orientations, got {} twice",
                a.orientation
            )));
        }
        Ok(McfUnit {
            actnorm: ActNorm::new(&format!("{prefix}.actnorm"), channels),
            first: MaskedConvFlow::new(
                &format!("{prefix}.mcf_{}", a.orientation),
                a,
                channels,
                cond_channels,
            )?,
            second: MaskedConvFlow::new(
                &format!("{prefix}.mcf_{}", b.orientation),
                b,
                channels,
                cond_channels,
            )?,
        })
    }

    /// Unit `index` of a step: even units pair (top, bottom), odd units
    /// (left, right). `kernel` is the vertical kernel; horizontal masks use
    /// its transpose.
    pub fn standard(
        prefix: &str,
        index: usize,
        kernel: (usize, usize),
        channels: usize,
        cond_channels: usize,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let (a, b) = if index % 2 == 0 {
            (
                MaskSpec::new(Orientation::Top, kh, kw)?,
                MaskSpec::new(Orientation::Bottom, kh, kw)?,
            )
        } else {
            (
                MaskSpec::new(Orientation::Left, kw, kh)?,
                MaskSpec::new(Orientation::Right, kw, kh)?,
            )
        };
        McfUnit::new(prefix, a, b, channels, cond_channels)
    }
}

impl<T: Real> FlowLayer<T> for McfUnit<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::McfUnit
    }

    fn forward<'t>(
        &self,
        x: Var<'t, T>,
        cond: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (h, l0) = self.actnorm.forward(x, None)?;
        let (h, l1) = self.first.forward(h, cond)?;
        let (y, l2) = self.second.forward(h, cond)?;
        Ok((y, l0.add(&l1)?.add(&l2)?))
    }

    fn inverse_counted(
        &self,
        y: &Tensor<T>,
        cond: Option<&Tensor<T>>,
        stats: &mut InverseStats,
    ) -> Result<Tensor<T>> {
        let h = self.second.inverse_counted(y, cond, stats)?;
        let h = self.first.inverse_counted(&h, cond, stats)?;
        self.actnorm.inverse_counted(&h, None, stats)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.actnorm.params();
        p.extend(self.first.params());
        p.extend(self.second.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.actnorm.params_mut();
        p.extend(self.first.params_mut());
        p.extend(self.second.params_mut());
        p
    }

    fn describe(&self) -> String {
        format!(
            "unit[actnorm,{},{}]",
            self.first.describe(),
            self.second.describe()
        )
    }

    fn init_forward(&mut self, x: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let h = self.actnorm.init_forward(x, None)?;
        let h = apply(&self.first, &h, cond)?.0;
        Ok(apply(&self.second, &h, cond)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_init_composes_known_scalings() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = McfUnit::<f64>::standard("u", 0, (2, 5), 2, 0).unwrap();
        let x = Tensor::randn(Shape::new(2, 4, 4, 2), 1.0, &mut rng);
        let (y, ld) = apply(&u, &x, None).unwrap();
        let s = 1.0 / (1.0 + (-2.0f64).exp());
        assert!(y.max_abs_diff(&x.scale(s * s)) < 1e-14);
        assert!((ld[0] - 2.0 * 32.0 * s.ln()).abs() < 1e-12);
    }

    #[test]
    fn logdet_is_sum_of_members_and_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut u = McfUnit::<f64>::standard("u", 1, (2, 3), 3, 0).unwrap();
        u.first.randomize(0.3, &mut rng);
        u.second.randomize(0.3, &mut rng);
        let x = Tensor::randn(Shape::new(2, 5, 6, 3), 1.0, &mut rng);
        u.init_forward(&x, None).unwrap();
        let (y, ld) = apply(&u, &x, None).unwrap();
        let (h0, a) = apply(&u.actnorm, &x, None).unwrap();
        let (h1, b) = apply(&u.first, &h0, None).unwrap();
        let (h2, c) = apply(&u.second, &h1, None).unwrap();
        assert_eq!(h2, y);
        for i in 0..2 {
            assert!((ld[i] - (a[i] + b[i] + c[i])).abs() < 1e-10);
        }
        let mut stats = InverseStats::default();
        let back = u.inverse_counted(&y, None, &mut stats).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-8);
        assert_eq!(stats.conv_applications, 12);
    }

    #[test]
    fn same_orientation_rejected() {
        let t = MaskSpec::with_default_kernel(Orientation::Top);
        assert!(McfUnit::<f64>::new("u", t, t, 2, 0).is_err());
    }
}
