use rand::Rng;

use crate::autodiff::{func, Param, Var};
use crate::error::{Error, Result};
use crate::layers::{FlowLayer, InverseStats, LayerKind};
use crate::mcf::mask::{MaskSpec, Orientation};
use crate::tensor::conv::conv2d_region;
use crate::tensor::{Real, Shape, Tensor};

/// Offset added to the raw scale before the sigmoid.
pub const SCALE_OFFSET: f64 = 2.0;

/// Elementwise affine flow whose scale and shift at each position come from
/// one masked convolution over already-ordered neighbors:
/// `y_t = s(x_ctx) * x_t + b(x_ctx)` with `s = sigmoid(raw + 2)`.
///
/// The s- and b-networks share the mask. Optional conditioning channels are
/// appended to the convolution input and masked the same way.
#[derive(Clone, Debug)]
pub struct MaskedConvFlow<T: Real> {
    spec: MaskSpec,
    channels: usize,
    cond_channels: usize,
    pub s_weight: Param<T>,
    pub s_bias: Param<T>,
    pub b_weight: Param<T>,
    pub b_bias: Param<T>,
    taps: Vec<bool>,
}

impl<T: Real> MaskedConvFlow<T> {
    /// Zero-initialized networks: the flow starts as `y = sigmoid(2) x`.
    pub fn new(
        prefix: &str,
        spec: MaskSpec,
        channels: usize,
        cond_channels: usize,
    ) -> Result<Self> {
        let taps = spec.taps()?;
        let cin = channels + cond_channels;
        let w_shape = Shape::new(spec.kh, spec.kw, cin, channels);
        Ok(MaskedConvFlow {
            spec,
            channels,
            cond_channels,
            s_weight: Param::new(format!("{prefix}.s.weight"), Tensor::zeros(w_shape)),
            s_bias: Param::new(
                format!("{prefix}.s.bias"),
                Tensor::zeros(Shape::vector(channels)),
            ),
            b_weight: Param::new(format!("{prefix}.b.weight"), Tensor::zeros(w_shape)),
            b_bias: Param::new(
                format!("{prefix}.b.bias"),
                Tensor::zeros(Shape::vector(channels)),
            ),
            taps,
        })
    }

    /// Replaces all four parameter tensors with Gaussian draws of scale `std`.
    pub fn randomize<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for p in [
            &mut self.s_weight,
            &mut self.s_bias,
            &mut self.b_weight,
            &mut self.b_bias,
        ] {
            p.value = Tensor::randn(p.value.shape(), std, rng);
        }
    }

    pub fn spec(&self) -> &MaskSpec {
        &self.spec
    }

    pub fn orientation(&self) -> Orientation {
        self.spec.orientation
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cond_channels(&self) -> usize {
        self.cond_channels
    }

    fn check(&self, shape: Shape, cond: Option<Shape>) -> Result<()> {
        if shape.c() != self.channels {
            return Err(Error::Shape(format!(
                "masked conv flow built for {} channels, got {shape:?}",
                self.channels
            )));
        }
        match cond {
            None if self.cond_channels == 0 => Ok(()),
            Some(cs)
                if cs.c() == self.cond_channels
                    && cs.n() == shape.n()
                    && cs.h() == shape.h()
                    && cs.w() == shape.w() =>
            {
                Ok(())
            }
            other => Err(Error::Shape(format!(
                "masked conv flow expects {} conditioning channels matching {shape:?}, got {other:?}",
                self.cond_channels
            ))),
        }
    }

    /// Stacked `[s_raw | b]` weights, so one convolution yields both nets.
    fn fused_weights(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((
            Tensor::concat_channels(&[&self.s_weight.value, &self.b_weight.value])?,
            Tensor::concat_channels(&[&self.s_bias.value, &self.b_bias.value])?,
        ))
    }
}

impl<T: Real> FlowLayer<T> for MaskedConvFlow<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::MaskedConv(self.spec.orientation)
    }

    fn forward<'t>(
        &self,
        x: Var<'t, T>,
        cond: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check(x.shape(), cond.map(|c| c.shape()))?;
        let tape = x.tape();
        let input = match cond {
            Some(c) => Var::concat_channels(&[x, c])?,
            None => x,
        };
        let w = Var::concat_channels(&[tape.param(&self.s_weight), tape.param(&self.b_weight)])?;
        let b = Var::concat_channels(&[tape.param(&self.s_bias), tape.param(&self.b_bias)])?;
        let out = input.conv2d_taps(
            &w,
            Some(&b),
            Some(self.taps.as_slice().into()),
            self.spec.geometry(),
        )?;
        let c = self.channels;
        let log_s = out
            .slice_channels(0, c)?
            .add_scalar(SCALE_OFFSET)?
            .log_sigmoid()?;
        let shift = out.slice_channels(c, c)?;
        let y = x.mul(&log_s.exp()?)?.add(&shift)?;
        Ok((y, log_s.sum_per_item()?))
    }

    /// Slice-wise sweep: one masked convolution per row (vertical masks) or
    /// column (horizontal masks), each evaluated only on that slice.
    fn inverse_counted(
        &self,
        y: &Tensor<T>,
        cond: Option<&Tensor<T>>,
        stats: &mut InverseStats,
    ) -> Result<Tensor<T>> {
        self.check(y.shape(), cond.map(|c| c.shape()))?;
        let [n, h, w, c] = y.shape().0;
        let (wf, bf) = self.fused_weights()?;
        let geom = self.spec.geometry();
        // conv input buffer: recovered x channels followed by conditioning
        let mut buf = match cond {
            Some(cd) => Tensor::concat_channels(&[&Tensor::zeros(y.shape()), cd])?,
            None => Tensor::zeros(y.shape()),
        };
        let (slices, vertical) = if self.spec.orientation.is_vertical() {
            (h, true)
        } else {
            (w, false)
        };
        let reverse = matches!(
            self.spec.orientation,
            Orientation::Bottom | Orientation::Right
        );
        let offset = T::lit(SCALE_OFFSET);
        for k in 0..slices {
            let idx = if reverse { slices - 1 - k } else { k };
            let (rows, cols) = if vertical {
                (idx..idx + 1, 0..w)
            } else {
                (0..h, idx..idx + 1)
            };
            let out = conv2d_region(
                &buf,
                &wf,
                Some(&bf),
                Some(&self.taps),
                &geom,
                rows.clone(),
                cols.clone(),
            )?;
            stats.conv_applications += 1;
            let od = out.data();
            let (sh, sw) = (rows.len(), cols.len());
            for b in 0..n {
                for (ri, r) in rows.clone().enumerate() {
                    for (ci, col) in cols.clone().enumerate() {
                        let o = ((b * sh + ri) * sw + ci) * 2 * c;
                        for ch in 0..c {
                            let s = func::sigmoid(od[o + ch] + offset);
                            if s == T::zero() {
                                return Err(Error::NotInvertible(
                                    "masked conv scale underflowed to 0".into(),
                                ));
                            }
                            let v = (y.at(b, r, col, ch) - od[o + c + ch]) / s;
                            buf.set(b, r, col, ch, v);
                        }
                    }
                }
            }
        }
        if self.cond_channels == 0 {
            Ok(buf)
        } else {
            buf.slice_channels(0, c)
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.s_weight, &self.s_bias, &self.b_weight, &self.b_bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.s_weight,
            &mut self.s_bias,
            &mut self.b_weight,
            &mut self.b_bias,
        ]
    }

    fn describe(&self) -> String {
        format!(
            "mcf({},{}x{})",
            self.spec.orientation, self.spec.kh, self.spec.kw
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::apply;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_flow(o: Orientation, c: usize, cc: usize, seed: u64) -> MaskedConvFlow<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = MaskedConvFlow::new("m", MaskSpec::with_default_kernel(o), c, cc).unwrap();
        f.randomize(0.3, &mut rng);
        f
    }

    #[test]
    fn zero_init_scales_by_sigmoid_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 2), 1.0, &mut rng);
        let s = 1.0 / (1.0 + (-2.0f64).exp());
        for o in Orientation::ALL {
            let f =
                MaskedConvFlow::<f64>::new("m", MaskSpec::with_default_kernel(o), 2, 0).unwrap();
            let (y, ld) = apply(&f, &x, None).unwrap();
            assert!(y.max_abs_diff(&x.scale(s)) < 1e-15);
            for v in &ld {
                assert!((v - 24.0 * s.ln()).abs() < 1e-12);
            }
            assert!(f.inverse(&y, None).unwrap().max_abs_diff(&x) < 1e-14);
        }
    }

    #[test]
    fn roundtrip_all_orientations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(Shape::new(2, 6, 6, 3), 1.0, &mut rng);
        for (i, o) in Orientation::ALL.into_iter().enumerate() {
            let f = random_flow(o, 3, 0, 10 + i as u64);
            let (y, _) = apply(&f, &x, None).unwrap();
            let mut stats = InverseStats::default();
            let back = f.inverse_counted(&y, None, &mut stats).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-8, "{o}");
            assert_eq!(stats.conv_applications, 6);
        }
    }

    #[test]
    fn conditional_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(Shape::new(2, 4, 6, 2), 1.0, &mut rng);
        let cond = Tensor::<f64>::randn(Shape::new(2, 4, 6, 3), 1.0, &mut rng);
        for o in Orientation::ALL {
            let f = random_flow(o, 2, 3, 3);
            let (y, _) = apply(&f, &x, Some(&cond)).unwrap();
            assert!(f.inverse(&y, Some(&cond)).unwrap().max_abs_diff(&x) < 1e-10);
            assert!(apply(&f, &x, None).is_err());
        }
    }

    #[test]
    fn single_pixel_change_stays_in_forward_cone() {
        let f = random_flow(Orientation::Top, 1, 0, 4);
        let zero = Tensor::<f64>::zeros(Shape::new(1, 5, 5, 1));
        let mut poked = zero.clone();
        poked.set(0, 2, 2, 0, 1.0);
        let (y0, _) = apply(&f, &zero, None).unwrap();
        let (y1, _) = apply(&f, &poked, None).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let changed = y0.at(0, r, c, 0) != y1.at(0, r, c, 0);
                // the pixel itself, or the row just below within kernel reach
                let inside = (r == 2 && c == 2) || (r == 3 && (c as isize - 2).abs() <= 2);
                assert!(!changed || inside, "({r},{c}) changed");
            }
        }
    }

    #[test]
    fn wrong_channels_rejected() {
        let f = random_flow(Orientation::Left, 2, 0, 5);
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 4, 3));
        assert!(matches!(apply(&f, &x, None), Err(Error::Shape(_))));
    }
}
