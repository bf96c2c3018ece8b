//! One small, randomly parameterized instance of every shipped layer kind,
//! checked for log-det correctness and round-trip accuracy.

use rand::Rng;

use crate::dequant::DequantFlow;
use crate::error::{Error, Result};
use crate::layers::{
    apply, ActNorm, Coupling, CouplingMode, FlowLayer, Inv1x1, LayerKind, Squeeze,
};
use crate::mcf::{MaskSpec, MaskedConvFlow, McfUnit};
use crate::model::{MacowStep, StepSpec};
use crate::tensor::{Shape, Tensor};
use crate::verify::oracles::brute_force_logdet;

/// `[1, 4, 4, 2]`: 32 dims, well inside the dense-oracle limit.
const CASE_SHAPE: Shape = Shape([1, 4, 4, 2]);

pub struct LayerCase {
    pub kind: LayerKind,
    pub layer: Box<dyn FlowLayer<f64>>,
    pub input: Tensor<f64>,
    pub cond: Option<Tensor<f64>>,
}

#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub kind: LayerKind,
    pub describe: String,
    pub analytic: f64,
    pub brute: f64,
    pub roundtrip: f64,
}

impl LayerCheck {
    pub fn logdet_error(&self) -> f64 {
        (self.analytic - self.brute).abs() / self.brute.abs().max(1.0)
    }
}

/// Adds Gaussian noise to every trainable parameter so that zero-initialized
/// networks are exercised too.
pub fn perturb<R: Rng + ?Sized>(layer: &mut dyn FlowLayer<f64>, std: f64, rng: &mut R) {
    for p in layer.params_mut() {
        if p.trainable {
            let noise = Tensor::randn(p.value.shape(), std, rng);
            p.value = p.value.add(&noise).expect("same shape");
        }
    }
}

/// Builds the case for `kind`. The match is exhaustive on purpose: a new
/// layer kind does not compile until it is registered here.
pub fn layer_case<R: Rng + ?Sized>(kind: LayerKind, rng: &mut R) -> Result<LayerCase> {
    let c = CASE_SHAPE.c();
    let mut cond = None;
    let mut layer: Box<dyn FlowLayer<f64>> = match kind {
        LayerKind::ActNorm => Box::new(ActNorm::new("case.actnorm", c)),
        LayerKind::Inv1x1 => Box::new(Inv1x1::new("case.inv1x1", c, rng)),
        LayerKind::AffineCoupling => Box::new(Coupling::new(
            "case.coupling",
            CouplingMode::Affine,
            c,
            4,
            0,
            rng,
        )?),
        LayerKind::AdditiveCoupling => Box::new(Coupling::new(
            "case.coupling",
            CouplingMode::Additive,
            c,
            4,
            0,
            rng,
        )?),
        LayerKind::MaskedConv(o) => Box::new(MaskedConvFlow::new(
            "case.mcf",
            MaskSpec::with_default_kernel(o),
            c,
            0,
        )?),
        LayerKind::McfUnit => Box::new(McfUnit::standard("case.unit", 1, (2, 3), c, 0)?),
        LayerKind::MacowStep => Box::new(MacowStep::new(
            "case.step",
            StepSpec {
                channels: c,
                units: 2,
                kernel: (2, 3),
                coupling: CouplingMode::Affine,
                hidden: 4,
            },
            rng,
        )?),
        LayerKind::Squeeze => Box::new(Squeeze),
        LayerKind::DequantFlow => {
            cond = Some(Tensor::randn(CASE_SHAPE.with_c(1), 1.0, rng));
            Box::new(DequantFlow::new("case.dequant", c, 1, 2, (2, 3), 4, rng)?)
        }
    };
    perturb(layer.as_mut(), 0.3, rng);
    if layer.kind() != kind {
        return Err(Error::Validation(format!(
            "case for {kind:?} built a {:?}",
            layer.kind()
        )));
    }
    Ok(LayerCase {
        kind,
        layer,
        input: Tensor::randn(CASE_SHAPE, 1.0, rng),
        cond,
    })
}

/// A case for every entry of [`LayerKind::ALL`].
pub fn registry<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<LayerCase>> {
    LayerKind::ALL.iter().map(|&k| layer_case(k, rng)).collect()
}

pub fn check_case(case: &LayerCase) -> Result<LayerCheck> {
    let cond = case.cond.as_ref();
    let (y, ld) = apply(case.layer.as_ref(), &case.input, cond)?;
    let brute = brute_force_logdet(
        |t| Ok(apply(case.layer.as_ref(), t, cond)?.0.into_vec()),
        &case.input,
    )?;
    let back = case.layer.inverse(&y, cond)?;
    Ok(LayerCheck {
        kind: case.kind,
        describe: case.layer.describe(),
        analytic: ld[0],
        brute,
        roundtrip: back.max_abs_diff(&case.input),
    })
}
