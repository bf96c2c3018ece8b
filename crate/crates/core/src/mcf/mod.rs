//! Masked convolutional flows: directional masks, the elementwise flow they
//! drive, and the unit that pairs two of them behind an ActNorm.

mod flow;
mod mask;
mod unit;

pub use flow::{MaskedConvFlow, SCALE_OFFSET};
pub use mask::{build_mask, MaskSpec, Orientation};
pub use unit::McfUnit;
