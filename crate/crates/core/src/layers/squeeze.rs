use crate::autodiff::{Param, Var};
use crate::error::Result;
use crate::layers::{zero_logdet, FlowLayer, InverseStats, LayerKind};
use crate::tensor::{Real, Tensor};

/// Space-to-depth `[n, h, w, c] -> [n, h/2, w/2, 4c]`, volume preserving.
///
/// Output channel `(2 di + dj) c + ch` holds input pixel `(2i + di, 2j + dj)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Squeeze;

impl<T: Real> FlowLayer<T> for Squeeze {
    fn kind(&self) -> LayerKind {
        LayerKind::Squeeze
    }

    fn forward<'t>(
        &self,
        x: Var<'t, T>,
        _cond: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let n = x.shape().n();
        Ok((x.squeeze2x2()?, zero_logdet(x.tape(), n)))
    }

    fn inverse_counted(
        &self,
        y: &Tensor<T>,
        _cond: Option<&Tensor<T>>,
        _stats: &mut InverseStats,
    ) -> Result<Tensor<T>> {
        y.unsqueeze2x2()
    }

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    fn describe(&self) -> String {
        "squeeze".into()
    }
}
