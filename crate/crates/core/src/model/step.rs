use rand::Rng;

use crate::autodiff::{Param, Var};
use crate::error::Result;
use crate::layers::{
    apply, ActNorm, Coupling, CouplingMode, FlowLayer, Inv1x1, InverseStats, LayerKind,
};
use crate::mcf::McfUnit;
use crate::tensor::{Real, Tensor};

/// `T` masked-convolution units followed by ActNorm, an invertible 1x1
/// convolution and a coupling layer.
#[derive(Clone, Debug)]
pub struct MacowStep<T: Real> {
    pub units: Vec<McfUnit<T>>,
    pub actnorm: ActNorm<T>,
    pub inv1x1: Inv1x1<T>,
    pub coupling: Coupling<T>,
}

/// Shape parameters shared by every step of one level.
#[derive(Clone, Copy, Debug)]
pub struct StepSpec {
    pub channels: usize,
    pub units: usize,
    pub kernel: (usize, usize),
    pub coupling: CouplingMode,
    pub hidden: usize,
}

impl<T: Real> MacowStep<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, spec: StepSpec, rng: &mut R) -> Result<Self> {
        let units = (0..spec.units)
            .map(|i| {
                McfUnit::standard(
                    &format!("{prefix}.unit{i}"),
                    i,
                    spec.kernel,
                    spec.channels,
                    0,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MacowStep {
            units,
            actnorm: ActNorm::new(&format!("{prefix}.actnorm"), spec.channels),
            inv1x1: Inv1x1::new(&format!("{prefix}.inv1x1"), spec.channels, rng),
            coupling: Coupling::new(
                &format!("{prefix}.coupling"),
                spec.coupling,
                spec.channels,
                spec.hidden,
                0,
                rng,
            )?,
        })
    }

    fn layers(&self) -> Vec<&dyn FlowLayer<T>> {
        let mut v: Vec<&dyn FlowLayer<T>> =
            self.units.iter().map(|u| u as &dyn FlowLayer<T>).collect();
        v.push(&self.actnorm);
        v.push(&self.inv1x1);
        v.push(&self.coupling);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut dyn FlowLayer<T>> {
        let mut v: Vec<&mut dyn FlowLayer<T>> = self
            .units
            .iter_mut()
            .map(|u| u as &mut dyn FlowLayer<T>)
            .collect();
        v.push(&mut self.actnorm);
        v.push(&mut self.inv1x1);
        v.push(&mut self.coupling);
        v
    }

    /// Per-member `(description, logdet)` for the forward pass on `x`.
    pub fn traced_logdets(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<(String, Vec<T>)>)> {
        let mut h = x.clone();
        let mut out = Vec::new();
        for l in self.layers() {
            let (y, ld) = apply(l, &h, None)?;
            out.push((l.describe(), ld));
            h = y;
        }
        Ok((h, out))
    }
}

impl<T: Real> FlowLayer<T> for MacowStep<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::MacowStep
    }

    fn forward<'t>(
        &self,
        x: Var<'t, T>,
        _cond: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let mut h = x;
        let mut total: Option<Var<'t, T>> = None;
        for l in self.layers() {
            let (y, ld) = l.forward(h, None)?;
            total = Some(match total {
                Some(t) => t.add(&ld)?,
                None => ld,
            });
            h = y;
        }
        Ok((h, total.expect("a step has at least three layers")))
    }

    fn inverse_counted(
        &self,
        y: &Tensor<T>,
        _cond: Option<&Tensor<T>>,
        stats: &mut InverseStats,
    ) -> Result<Tensor<T>> {
        let mut h = y.clone();
        for l in self.layers().into_iter().rev() {
            h = l.inverse_counted(&h, None, stats)?;
        }
        Ok(h)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers().into_iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for p in self.units.iter_mut() {
            out.extend(p.params_mut());
        }
        out.extend(self.actnorm.params_mut());
        out.extend(self.inv1x1.params_mut());
        out.extend(self.coupling.params_mut());
        out
    }

    fn describe(&self) -> String {
        format!("step(T={},{})", self.units.len(), self.coupling.describe())
    }

    fn init_forward(&mut self, x: &Tensor<T>, _cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in self.layers_mut() {
            h = l.init_forward(&h, None)?;
        }
        Ok(h)
    }
}
