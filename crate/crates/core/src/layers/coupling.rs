use rand::Rng;

use crate::autodiff::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{zero_logdet, FlowLayer, InverseStats, LayerKind};
use crate::tensor::conv::ConvGeometry;
use crate::tensor::{Real, Shape, Tensor};

/// Offset added to the raw scale before the sigmoid; `sigmoid(2) ~ 0.881`.
pub const SCALE_OFFSET: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingMode {
    Affine,
    Additive,
}

impl std::fmt::Display for CouplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CouplingMode::Affine => write!(f, "affine"),
            CouplingMode::Additive => write!(f, "additive"),
        }
    }
}

/// `conv3x3 -> ELU -> conv1x1 -> ELU -> conv3x3`, last layer zero-initialized.
#[derive(Clone, Debug)]
pub struct CouplingNet<T: Real> {
    w1: Param<T>,
    b1: Param<T>,
    w2: Param<T>,
    b2: Param<T>,
    w3: Param<T>,
    b3: Param<T>,
}

impl<T: Real> CouplingNet<T> {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let std1 = (1.0 / (9 * cin) as f64).sqrt();
        let std2 = (1.0 / hidden as f64).sqrt();
        CouplingNet {
            w1: Param::new(
                format!("{prefix}.conv1.weight"),
                Tensor::randn(Shape::new(3, 3, cin, hidden), std1, rng),
            ),
            b1: Param::new(
                format!("{prefix}.conv1.bias"),
                Tensor::zeros(Shape::vector(hidden)),
            ),
            w2: Param::new(
                format!("{prefix}.conv2.weight"),
                Tensor::randn(Shape::new(1, 1, hidden, hidden), std2, rng),
            ),
            b2: Param::new(
                format!("{prefix}.conv2.bias"),
                Tensor::zeros(Shape::vector(hidden)),
            ),
            w3: Param::new(
                format!("{prefix}.conv3.weight"),
                Tensor::zeros(Shape::new(3, 3, hidden, cout)),
            ),
            b3: Param::new(
                format!("{prefix}.conv3.bias"),
                Tensor::zeros(Shape::vector(cout)),
            ),
        }
    }

    pub fn forward<'t>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let h = x
            .conv2d(
                &tape.param(&self.w1),
                Some(&tape.param(&self.b1)),
                None,
                ConvGeometry::centered(3, 3),
            )?
            .elu()?;
        let h = h
            .conv2d(
                &tape.param(&self.w2),
                Some(&tape.param(&self.b2)),
                None,
                ConvGeometry::centered(1, 1),
            )?
            .elu()?;
        h.conv2d(
            &tape.param(&self.w3),
            Some(&tape.param(&self.b3)),
            None,
            ConvGeometry::centered(3, 3),
        )
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

/// Channel coupling: `x_a` (first `ceil(c/2)` channels) passes through and
/// drives a network producing the transform of `x_b`.
///
/// Affine: `y_b = sigmoid(raw + 2) * x_b + shift`. Additive: `y_b = x_b + shift`.
#[derive(Clone, Debug)]
pub struct Coupling<T: Real> {
    mode: CouplingMode,
    channels: usize,
    cond_channels: usize,
    net: CouplingNet<T>,
}

impl<T: Real> Coupling<T> {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        mode: CouplingMode,
        channels: usize,
        hidden: usize,
        cond_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(Error::Validation(format!(
                "coupling needs at least 2 channels, got {channels}"
            )));
        }
        let (ca, cb) = split_sizes(channels);
        let cout = match mode {
            CouplingMode::Affine => 2 * cb,
            CouplingMode::Additive => cb,
        };
        Ok(Coupling {
            mode,
            channels,
            cond_channels,
            net: CouplingNet::new(
                &format!("{prefix}.net"),
                ca + cond_channels,
                hidden,
                cout,
                rng,
            ),
        })
    }

    pub fn mode(&self) -> CouplingMode {
        self.mode
    }

    pub fn net_mut(&mut self) -> &mut CouplingNet<T> {
        &mut self.net
    }

    fn check(&self, shape: Shape, cond: Option<Shape>) -> Result<()> {
        if shape.c() != self.channels {
            return Err(Error::Shape(format!(
                "coupling built for {} channels, got {shape:?}",
                self.channels
            )));
        }
        let cc = cond.map(|s| s.c()).unwrap_or(0);
        if cc != self.cond_channels {
            return Err(Error::Shape(format!(
                "coupling expects {} conditioning channels, got {cc}",
                self.cond_channels
            )));
        }
        Ok(())
    }

    fn net_out<'t>(&self, xa: Var<'t, T>, cond: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let input = match cond {
            Some(c) => Var::concat_channels(&[xa, c])?,
            None => xa,
        };
        let out = self.net.forward(input)?;
        if !out.value().all_finite() {
            return Err(Error::NonFinite("coupling net"));
        }
        Ok(out)
    }
}

/// `(ceil(c/2), floor(c/2))`
pub fn split_sizes(c: usize) -> (usize, usize) {
    let ca = c.div_ceil(2);
    (ca, c - ca)
}

impl<T: Real> FlowLayer<T> for Coupling<T> {
    fn kind(&self) -> LayerKind {
        match self.mode {
            CouplingMode::Affine => LayerKind::AffineCoupling,
            CouplingMode::Additive => LayerKind::AdditiveCoupling,
        }
    }

    fn forward<'t>(
        &self,
        x: Var<'t, T>,
        cond: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check(x.shape(), cond.map(|c| c.shape()))?;
        let (ca, cb) = split_sizes(self.channels);
        let xa = x.slice_channels(0, ca)?;
        let xb = x.slice_channels(ca, cb)?;
        let out = self.net_out(xa, cond)?;
        let n = x.shape().n();
        let (yb, logdet) = match self.mode {
            CouplingMode::Affine => {
                let log_s = out
                    .slice_channels(0, cb)?
                    .add_scalar(SCALE_OFFSET)?
                    .log_sigmoid()?;
                let shift = out.slice_channels(cb, cb)?;
                let yb = xb.mul(&log_s.exp()?)?.add(&shift)?;
                (yb, log_s.sum_per_item()?)
            }
            CouplingMode::Additive => (xb.add(&out)?, zero_logdet(x.tape(), n)),
        };
        Ok((Var::concat_channels(&[xa, yb])?, logdet))
    }

    fn inverse_counted(
        &self,
        y: &Tensor<T>,
        cond: Option<&Tensor<T>>,
        _stats: &mut InverseStats,
    ) -> Result<Tensor<T>> {
        self.check(y.shape(), cond.map(|c| c.shape()))?;
        let (ca, cb) = split_sizes(self.channels);
        let ya = y.slice_channels(0, ca)?;
        let yb = y.slice_channels(ca, cb)?;
        let tape = Tape::new();
        let out = self.net_out(
            tape.constant(ya.clone()),
            cond.map(|c| tape.constant(c.clone())),
        )?;
        let out = out.value();
        let xb = match self.mode {
            CouplingMode::Affine => {
                let s = out
                    .slice_channels(0, cb)?
                    .map(|r| crate::autodiff::func::sigmoid(r + T::lit(SCALE_OFFSET)));
                if s.data().iter().any(|v| *v == T::zero()) {
                    return Err(Error::NotInvertible(
                        "coupling scale underflowed to 0".into(),
                    ));
                }
                yb.sub(&out.slice_channels(cb, cb)?)?.div(&s)?
            }
            CouplingMode::Additive => yb.sub(&out)?,
        };
        Tensor::concat_channels(&[&ya, &xb])
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }

    fn describe(&self) -> String {
        format!("coupling({})", self.mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::apply;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturb<T: Real>(layer: &mut Coupling<T>, rng: &mut ChaCha8Rng) {
        for p in layer.params_mut() {
            let noise = Tensor::<T>::randn(p.value.shape(), 0.2, rng);
            p.value = p.value.add(&noise).unwrap();
        }
    }

    #[test]
    fn zero_init_affine_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Coupling::<f64>::new("c", CouplingMode::Affine, 4, 8, 0, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(2, 3, 3, 4), 1.0, &mut rng);
        let (y, ld) = apply(&c, &x, None).unwrap();
        let s = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((s - 0.8808).abs() < 1e-4);
        let expected = (3.0 * 3.0 * 4.0 / 2.0) * s.ln();
        for v in ld {
            assert!((v - expected).abs() < 1e-12);
        }
        for (a, b) in x.data().chunks(4).zip(y.data().chunks(4)) {
            assert_eq!(a[..2], b[..2]);
            assert!((b[2] - s * a[2]).abs() < 1e-14);
        }
    }

    #[test]
    fn additive_logdet_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Coupling::<f64>::new("c", CouplingMode::Additive, 4, 8, 0, &mut rng).unwrap();
        perturb(&mut c, &mut rng);
        let x = Tensor::randn(Shape::new(2, 3, 3, 4), 1.0, &mut rng);
        let (y, ld) = apply(&c, &x, None).unwrap();
        assert_eq!(ld, vec![0.0, 0.0]);
        assert!(c.inverse(&y, None).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn odd_channel_split_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Coupling::<f64>::new("c", CouplingMode::Affine, 3, 8, 2, &mut rng).unwrap();
        perturb(&mut c, &mut rng);
        let x = Tensor::randn(Shape::new(2, 4, 4, 3), 1.0, &mut rng);
        let cond = Tensor::randn(Shape::new(2, 4, 4, 2), 1.0, &mut rng);
        let (y, _) = apply(&c, &x, Some(&cond)).unwrap();
        assert!(c.inverse(&y, Some(&cond)).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn too_few_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(Coupling::<f64>::new("c", CouplingMode::Affine, 1, 8, 0, &mut rng).is_err());
    }

    #[test]
    fn wrong_conditioning_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Coupling::<f64>::new("c", CouplingMode::Affine, 2, 4, 1, &mut rng).unwrap();
        let x = Tensor::zeros(Shape::new(1, 2, 2, 2));
        assert!(apply(&c, &x, None).is_err());
    }
}
