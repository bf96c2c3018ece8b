use rand::Rng;

use crate::autodiff::{Param, Tape, Var};
use crate::dequant::{base_log_prob, noise_margin, DequantSample};
use crate::error::{Error, Result};
use crate::layers::{apply, Coupling, CouplingMode, FlowLayer, InverseStats, LayerKind};
use crate::mcf::McfUnit;
use crate::model::ModelConfig;
use crate::tensor::conv::ConvGeometry;
use crate::tensor::{Real, Shape, Tensor};

/// Conditional flow of the dequantizer: masked-convolution units then an
/// affine coupling, every network also reading the context channels.
#[derive(Clone, Debug)]
pub struct DequantFlow<T: Real> {
    pub units: Vec<McfUnit<T>>,
    pub coupling: Coupling<T>,
}

impl<T: Real> DequantFlow<T> {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        channels: usize,
        cond_channels: usize,
        units: usize,
        kernel: (usize, usize),
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let units = (0..units)
            .map(|i| {
                McfUnit::standard(
                    &format!("{prefix}.unit{i}"),
                    i,
                    kernel,
                    channels,
                    cond_channels,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let coupling = Coupling::new(
            &format!("{prefix}.coupling"),
            CouplingMode::Affine,
            channels,
            hidden,
            cond_channels,
            rng,
        )?;
        Ok(DequantFlow { units, coupling })
    }

    fn layers(&self) -> Vec<&dyn FlowLayer<T>> {
        let mut v: Vec<&dyn FlowLayer<T>> =
            self.units.iter().map(|u| u as &dyn FlowLayer<T>).collect();
        v.push(&self.coupling);
        v
    }
}

impl<T: Real> FlowLayer<T> for DequantFlow<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::DequantFlow
    }

    fn forward<'t>(
        &self,
        x: Var<'t, T>,
        cond: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let mut h = x;
        let mut total: Option<Var<'t, T>> = None;
        for l in self.layers() {
            let (y, ld) = l.forward(h, cond)?;
            total = Some(match total {
                Some(t) => t.add(&ld)?,
                None => ld,
            });
            h = y;
        }
        Ok((h, total.expect("coupling is always present")))
    }

    fn inverse_counted(
        &self,
        y: &Tensor<T>,
        cond: Option<&Tensor<T>>,
        stats: &mut InverseStats,
    ) -> Result<Tensor<T>> {
        let mut h = y.clone();
        for l in self.layers().into_iter().rev() {
            h = l.inverse_counted(&h, cond, stats)?;
        }
        Ok(h)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers().into_iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for u in self.units.iter_mut() {
            out.extend(u.params_mut());
        }
        out.extend(self.coupling.params_mut());
        out
    }

    fn describe(&self) -> String {
        format!("dequant_flow(T={})", self.units.len())
    }

    fn init_forward(&mut self, x: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for u in self.units.iter_mut() {
            h = u.init_forward(&h, cond)?;
        }
        Ok(apply(&self.coupling, &h, cond)?.0)
    }
}

/// `q(u | x)`: standard-normal noise on the squeezed grid pushed through a
/// [`DequantFlow`] conditioned on a context computed from `x`, then
/// unsqueezed and squashed by a sigmoid.
#[derive(Clone, Debug)]
pub struct VariationalDequantizer<T: Real> {
    n_bits: u32,
    image: (usize, usize, usize),
    ctx_w1: Param<T>,
    ctx_b1: Param<T>,
    ctx_w2: Param<T>,
    ctx_b2: Param<T>,
    pub flow: DequantFlow<T>,
}

impl<T: Real> VariationalDequantizer<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (h, w, c) = cfg.image;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "dequantizer needs even image extents, got {h}x{w}"
            )));
        }
        let c4 = 4 * c;
        let hid = cfg.dequant_hidden_channels;
        let ctx = cfg.dequant_context_channels;
        let std1 = (1.0 / (9 * c4) as f64).sqrt();
        let std2 = (1.0 / (9 * hid) as f64).sqrt();
        Ok(VariationalDequantizer {
            n_bits: cfg.n_bits,
            image: cfg.image,
            ctx_w1: Param::new(
                "dequant.context.conv1.weight",
                Tensor::randn(Shape::new(3, 3, c4, hid), std1, rng),
            ),
            ctx_b1: Param::new(
                "dequant.context.conv1.bias",
                Tensor::zeros(Shape::vector(hid)),
            ),
            ctx_w2: Param::new(
                "dequant.context.conv2.weight",
                Tensor::randn(Shape::new(3, 3, hid, ctx), std2, rng),
            ),
            ctx_b2: Param::new(
                "dequant.context.conv2.bias",
                Tensor::zeros(Shape::vector(ctx)),
            ),
            flow: DequantFlow::new(
                "dequant.flow",
                c4,
                ctx,
                cfg.dequant_units,
                cfg.kernel,
                hid,
                rng,
            )?,
        })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = vec![&self.ctx_w1, &self.ctx_b1, &self.ctx_w2, &self.ctx_b2];
        p.extend(self.flow.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = vec![
            &mut self.ctx_w1,
            &mut self.ctx_b1,
            &mut self.ctx_w2,
            &mut self.ctx_b2,
        ];
        p.extend(self.flow.params_mut());
        p
    }

    fn check(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<()> {
        let (h, w, c) = self.image;
        let s = x.shape();
        if s.h() != h || s.w() != w || s.c() != c {
            return Err(Error::Shape(format!(
                "dequantizer built for {h}x{w}x{c}, got {s:?}"
            )));
        }
        if eps.shape() != Shape::new(s.n(), h / 2, w / 2, 4 * c) {
            return Err(Error::Shape(format!(
                "noise shape {:?} does not match {s:?}",
                eps.shape()
            )));
        }
        let top = (1u64 << self.n_bits) as f64;
        if x.data().iter().any(|v| {
            let f = v.as_f64();
            f < 0.0 || f >= top || f.fract() != 0.0
        }) {
            return Err(Error::Data(format!(
                "pixels must be integers in [0, {top})"
            )));
        }
        Ok(())
    }

    /// Context features on the squeezed grid.
    pub fn context<'t>(&self, tape: &'t Tape<T>, x: &Tensor<T>) -> Result<Var<'t, T>> {
        let scale = T::lit((1u64 << self.n_bits) as f64);
        let half = T::lit(0.5);
        let xn = x.map(|v| v / scale - half).squeeze2x2()?;
        let geom = ConvGeometry::centered(3, 3);
        tape.constant(xn)
            .conv2d(
                &tape.param(&self.ctx_w1),
                Some(&tape.param(&self.ctx_b1)),
                None,
                geom,
            )?
            .elu()?
            .conv2d(
                &tape.param(&self.ctx_w2),
                Some(&tape.param(&self.ctx_b2)),
                None,
                geom,
            )
    }

    /// ActNorm initialization of the flow on one batch of base noise.
    pub fn initialize(&mut self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<()> {
        self.check(x, eps)?;
        let tape = Tape::new();
        let ctx = (*self.context(&tape, x)?.value()).clone();
        self.flow.init_forward(eps, Some(&ctx))?;
        Ok(())
    }

    /// Taped `(y, log q, clamp count)` for pixels `x` and base noise `eps`.
    pub fn dequantize_taped<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Tensor<T>,
        eps: &Tensor<T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, usize)> {
        self.check(x, eps)?;
        let ctx = self.context(tape, x)?;
        let (raw, logdet) = self.flow.forward(tape.constant(eps.clone()), Some(ctx))?;
        let raw = raw.unsqueeze2x2()?;
        let margin = noise_margin::<T>(self.n_bits);
        let sig = raw.sigmoid()?;
        let clamped = sig
            .value()
            .data()
            .iter()
            .filter(|v| v.as_f64() < margin || v.as_f64() > 1.0 - margin)
            .count();
        if clamped > 0 {
            log::debug!(
                "dequantizer clamped {clamped} noise values into [{margin:e}, 1 - {margin:e}]"
            );
        }
        let u = sig.clamp(margin, 1.0 - margin)?;
        let log_jac = raw
            .log_sigmoid()?
            .add(&raw.neg()?.log_sigmoid()?)?
            .sum_per_item()?;
        let log_q = base_log_prob(tape, eps)?.sub(&logdet)?.sub(&log_jac)?;
        let y = u.add(&tape.constant(x.clone()))?;
        Ok((y, log_q, clamped))
    }

    pub fn dequantize(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<DequantSample<T>> {
        let tape = Tape::new();
        let (y, log_q, clamped) = self.dequantize_taped(&tape, x, eps)?;
        let y = (*y.value()).clone();
        let log_q = log_q.value().data().to_vec();
        Ok(DequantSample { y, log_q, clamped })
    }

    /// Evaluates `log q(u | x)` for given noise `u` by inverting the flow:
    /// `raw = logit(u)`, `eps = flow^{-1}(raw)`, then the change of variables
    /// with the sigmoid Jacobian taken directly from `u`.
    pub fn log_q_of(&self, x: &Tensor<T>, u: &Tensor<T>) -> Result<(Vec<f64>, Tensor<T>)> {
        if u.shape() != x.shape()
            || u.data()
                .iter()
                .any(|v| !(v.as_f64() > 0.0 && v.as_f64() < 1.0))
        {
            return Err(Error::Validation(
                "noise must lie strictly inside (0, 1)".into(),
            ));
        }
        let tape = Tape::new();
        let ctx = (*self.context(&tape, x)?.value()).clone();
        let raw = u.map(|v| (v / (T::one() - v)).ln()).squeeze2x2()?;
        let eps = self.flow.inverse(&raw, Some(&ctx))?;
        let (_, logdet) = apply(&self.flow, &eps, Some(&ctx))?;
        let n = x.shape().n();
        let per = x.shape().item_len();
        let out = (0..n)
            .map(|b| {
                let base: f64 = eps.data()[b * per..(b + 1) * per]
                    .iter()
                    .map(|e| -0.5 * e.as_f64().powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln())
                    .sum();
                let jac: f64 = u.data()[b * per..(b + 1) * per]
                    .iter()
                    .map(|v| (v.as_f64() * (1.0 - v.as_f64())).ln())
                    .sum();
                base - logdet[b].as_f64() - jac
            })
            .collect();
        Ok((out, eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig::parse(
            "levels = 1\ndepths = [1]\nmultiscale = original\nimage = 4x4x1\nn_bits = 3\n\
             dequant_units = 1\ndequant_hidden_channels = 4\ndequant_context_channels = 2\n",
        )
        .unwrap()
    }

    fn pixels(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(n, 4, 4, 1), |_| rng.gen_range(0..8) as f64)
    }

    #[test]
    fn identity_init_is_logistic_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = VariationalDequantizer::<f64>::new(&toy_cfg(), &mut rng).unwrap();
        let x = pixels(&mut rng, 2);
        let eps = Tensor::randn(Shape::new(2, 2, 2, 4), 1.0, &mut rng);
        let s = d.dequantize(&x, &eps).unwrap();
        // one unit scales all channels by sigmoid(2)^2, the coupling scales the
        // second half once more
        let a = 1.0 / (1.0 + (-2.0f64).exp());
        let scales = [a * a, a * a, a * a * a, a * a * a];
        let mut expect = vec![0.0; 2];
        for b in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    for c in 0..4 {
                        let e = eps.at(b, i, j, c);
                        let k = scales[c];
                        let r = k * e;
                        let u = 1.0 / (1.0 + (-r).exp());
                        // density of u = sigmoid(k e), e ~ N(0, 1)
                        let log_n = -0.5 * e * e - 0.5 * (2.0 * std::f64::consts::PI).ln();
                        expect[b] += log_n - k.ln() - (u * (1.0 - u)).ln();
                        let (di, dj) = (c / 2, c % 2);
                        let y = s.y.at(b, 2 * i + di, 2 * j + dj, 0);
                        assert!((y - x.at(b, 2 * i + di, 2 * j + dj, 0) - u).abs() < 1e-12);
                    }
                }
            }
        }
        for b in 0..2 {
            assert!(
                (s.log_q[b] - expect[b]).abs() < 1e-9,
                "{} vs {}",
                s.log_q[b],
                expect[b]
            );
        }
    }

    #[test]
    fn reevaluation_matches_after_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = VariationalDequantizer::<f64>::new(&toy_cfg(), &mut rng).unwrap();
        for p in d.params_mut() {
            if p.trainable {
                let noise = Tensor::randn(p.value.shape(), 0.1, &mut rng);
                p.value = p.value.add(&noise).unwrap();
            }
        }
        let x = pixels(&mut rng, 3);
        let eps = Tensor::randn(Shape::new(3, 2, 2, 4), 1.0, &mut rng);
        let s = d.dequantize(&x, &eps).unwrap();
        assert!(s
            .y
            .data()
            .iter()
            .zip(x.data())
            .all(|(y, x)| y.floor() == *x));
        let u = s.y.sub(&x).unwrap();
        let (lq, eps_back) = d.log_q_of(&x, &u).unwrap();
        assert!(eps_back.max_abs_diff(&eps) < 1e-8);
        for b in 0..3 {
            assert!((lq[b] - s.log_q[b]).abs() < 1e-8);
        }
    }
}
