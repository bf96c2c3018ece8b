//! Invertible flow layers and the contract they share.

mod actnorm;
mod coupling;
mod inv1x1;
mod split;
mod squeeze;

pub use actnorm::ActNorm;
pub use coupling::{Coupling, CouplingMode, CouplingNet};
pub use inv1x1::{random_orthogonal, Inv1x1};
pub use split::{gaussian_log_prob, standard_normal_log_prob, FinalPrior, SplitPrior};
pub use squeeze::Squeeze;

use crate::autodiff::{Param, Tape, Var};
use crate::error::Result;
use crate::mcf::Orientation;
use crate::tensor::{Real, Shape, Tensor};

/// Every kind of invertible layer the library ships.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    ActNorm,
    Inv1x1,
    AffineCoupling,
    AdditiveCoupling,
    MaskedConv(Orientation),
    McfUnit,
    MacowStep,
    Squeeze,
    DequantFlow,
}

impl LayerKind {
    pub const ALL: [LayerKind; 12] = [
        LayerKind::ActNorm,
        LayerKind::Inv1x1,
        LayerKind::AffineCoupling,
        LayerKind::AdditiveCoupling,
        LayerKind::MaskedConv(Orientation::Top),
        LayerKind::MaskedConv(Orientation::Bottom),
        LayerKind::MaskedConv(Orientation::Left),
        LayerKind::MaskedConv(Orientation::Right),
        LayerKind::McfUnit,
        LayerKind::MacowStep,
        LayerKind::Squeeze,
        LayerKind::DequantFlow,
    ];
}

/// Bookkeeping collected while inverting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InverseStats {
    /// Evaluations of a masked-convolution s()/b() network pair.
    pub conv_applications: usize,
}

/// An invertible map `y = f(x)` with a tractable log-Jacobian-determinant.
///
/// `forward` records on the tape that owns `x` and returns `(y, logdet)` with
/// logdet shaped `[n, 1, 1, 1]` (nats per batch element). `cond` is an
/// optional conditioning input that is fed to internal networks but is not
/// itself transformed.
pub trait FlowLayer<T: Real>: Send + Sync {
    fn kind(&self) -> LayerKind;

    fn forward<'t>(
        &self,
        x: Var<'t, T>,
        cond: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)>;

    fn inverse_counted(
        &self,
        y: &Tensor<T>,
        cond: Option<&Tensor<T>>,
        stats: &mut InverseStats,
    ) -> Result<Tensor<T>>;

    fn params(&self) -> Vec<&Param<T>>;

    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    /// Short human-readable description used in layer listings.
    fn describe(&self) -> String;

    fn inverse(&self, y: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.inverse_counted(y, cond, &mut InverseStats::default())
    }

    /// Forward pass that performs any pending data-dependent initialization.
    fn init_forward(&mut self, x: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        Ok(apply(self, x, cond)?.0)
    }
}

/// Evaluates a layer's forward pass outside of any training tape.
pub fn apply<T: Real, L: FlowLayer<T> + ?Sized>(
    layer: &L,
    x: &Tensor<T>,
    cond: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let cv = cond.map(|c| tape.constant(c.clone()));
    let (y, ld) = layer.forward(xv, cv)?;
    let y = (*y.value()).clone();
    let ld = ld.value().data().to_vec();
    Ok((y, ld))
}

/// Zero log-determinant of shape `[n, 1, 1, 1]`.
pub(crate) fn zero_logdet<'t, T: Real>(tape: &'t Tape<T>, n: usize) -> Var<'t, T> {
    tape.constant(Tensor::zeros(Shape::new(n, 1, 1, 1)))
}

/// `sum(v) * k` broadcast to `[n, 1, 1, 1]`.
pub(crate) fn scaled_total<'t, T: Real>(v: Var<'t, T>, k: f64, n: usize) -> Result<Var<'t, T>> {
    v.sum_all()?
        .mul_scalar(k)?
        .broadcast_to(Shape::new(n, 1, 1, 1))
}
