use crate::error::{Error, Result};
use crate::tensor::conv::ConvGeometry;
use crate::tensor::{Real, Shape, Tensor};

/// Which side of the target position a masked convolution may read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// Rows above; inverted by sweeping rows downward.
    Top,
    /// Rows below; inverted by sweeping rows upward.
    Bottom,
    /// Columns to the left; inverted left to right.
    Left,
    /// Columns to the right; inverted right to left.
    Right,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [
        Orientation::Top,
        Orientation::Bottom,
        Orientation::Left,
        Orientation::Right,
    ];

    pub fn is_vertical(self) -> bool {
        matches!(self, Orientation::Top | Orientation::Bottom)
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Top => "top",
            Orientation::Bottom => "bottom",
            Orientation::Left => "left",
            Orientation::Right => "right",
        }
    }

    /// Default kernel: 2x5 for vertical orientations, 5x2 for horizontal.
    pub fn default_kernel(self) -> (usize, usize) {
        if self.is_vertical() {
            (2, 5)
        } else {
            (5, 2)
        }
    }
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Kernel shape, orientation and the kernel tap aligned with the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub kh: usize,
    pub kw: usize,
    pub orientation: Orientation,
    pub anchor: (usize, usize),
}

impl MaskSpec {
    /// Spec with the default anchor for `orientation`.
    ///
    /// `top` anchors at `(kh-1, kw/2)`; the others are the 180/90/270 degree
    /// rotations of that layout.
    pub fn new(orientation: Orientation, kh: usize, kw: usize) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return Err(Error::Validation(format!("kernel {kh}x{kw} is empty")));
        }
        let anchor = match orientation {
            Orientation::Top => (kh - 1, kw / 2),
            Orientation::Bottom => (0, kw - 1 - kw / 2),
            Orientation::Left => (kh - 1 - kh / 2, kw - 1),
            Orientation::Right => (kh / 2, 0),
        };
        Ok(MaskSpec {
            kh,
            kw,
            orientation,
            anchor,
        })
    }

    pub fn with_default_kernel(orientation: Orientation) -> Self {
        let (kh, kw) = orientation.default_kernel();
        MaskSpec::new(orientation, kh, kw).expect("default kernel is non-empty")
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kh: self.kh,
            kw: self.kw,
            anchor: self.anchor,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kh == 0 || self.kw == 0 {
            return Err(Error::Validation(format!(
                "kernel {}x{} is empty",
                self.kh, self.kw
            )));
        }
        if self.anchor.0 >= self.kh || self.anchor.1 >= self.kw {
            return Err(Error::Validation(format!(
                "anchor {:?} outside {}x{} kernel",
                self.anchor, self.kh, self.kw
            )));
        }
        Ok(())
    }

    /// Whether kernel tap `(ky, kx)` is readable.
    pub fn visible(&self, ky: usize, kx: usize) -> bool {
        let (ay, ax) = self.anchor;
        match self.orientation {
            Orientation::Top => ky < ay,
            Orientation::Bottom => ky > ay,
            Orientation::Left => kx < ax,
            Orientation::Right => kx > ax,
        }
    }

    /// Row-major tap mask.
    pub fn taps(&self) -> Result<Vec<bool>> {
        self.validate()?;
        Ok((0..self.kh * self.kw)
            .map(|i| self.visible(i / self.kw, i % self.kw))
            .collect())
    }

    /// Input offsets `(dy, dx)` relative to the target that the mask reads.
    pub fn offsets(&self) -> Result<Vec<(isize, isize)>> {
        self.validate()?;
        let (ay, ax) = (self.anchor.0 as isize, self.anchor.1 as isize);
        let mut out = Vec::new();
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                if self.visible(ky, kx) {
                    out.push((ky as isize - ay, kx as isize - ax));
                }
            }
        }
        Ok(out)
    }
}

/// The binary `[1, 1, kh, kw]` mask described by `spec`.
pub fn build_mask<T: Real>(spec: &MaskSpec) -> Result<Tensor<T>> {
    let taps = spec.taps()?;
    Tensor::from_vec(
        Shape::new(1, 1, spec.kh, spec.kw),
        taps.into_iter()
            .map(|t| if t { T::one() } else { T::zero() })
            .collect(),
    )
}
