//! "Same"-padded 2-D convolution over NHWC tensors with an optional binary
//! kernel mask and an explicit kernel anchor.
//!
//! `out[b, i, j, o] = bias[o] + sum_{ky, kx, c} mask[ky, kx] * w[ky, kx, c, o]
//!     * x[b, i + ky - ay, j + kx - ax, c]`, reading zeros outside the image.

use std::ops::Range;

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Kernel extents plus the kernel position aligned with the output pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub anchor: (usize, usize),
}

impl ConvGeometry {
    /// Centered anchor `(kh / 2, kw / 2)`.
    pub fn centered(kh: usize, kw: usize) -> Self {
        ConvGeometry {
            kh,
            kw,
            anchor: (kh / 2, kw / 2),
        }
    }
}

/// Converts a `[1, 1, kh, kw]` 0/1 tensor into a tap mask.
pub fn mask_taps<T: Real>(mask: &Tensor<T>, kh: usize, kw: usize) -> Result<Vec<bool>> {
    if mask.shape() != Shape::new(1, 1, kh, kw) {
        return Err(Error::Dimension {
            op: "conv2d mask",
            lhs: mask.shape(),
            rhs: Shape::new(1, 1, kh, kw),
        });
    }
    mask.data()
        .iter()
        .map(|&v| {
            if v == T::zero() {
                Ok(false)
            } else if v == T::one() {
                Ok(true)
            } else {
                Err(Error::Validation(format!("mask entry {v} is not 0 or 1")))
            }
        })
        .collect()
}

fn check_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    mask: Option<&[bool]>,
    geom: &ConvGeometry,
) -> Result<()> {
    let [kh, kw, cin, cout] = w.shape().0;
    if kh != geom.kh || kw != geom.kw || cin != x.shape().c() {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: x.shape(),
            rhs: w.shape(),
        });
    }
    if geom.anchor.0 >= kh || geom.anchor.1 >= kw {
        return Err(Error::Validation(format!(
            "anchor {:?} outside {kh}x{kw} kernel",
            geom.anchor
        )));
    }
    if let Some(b) = bias {
        if b.shape() != Shape::vector(cout) {
            return Err(Error::Dimension {
                op: "conv2d bias",
                lhs: b.shape(),
                rhs: Shape::vector(cout),
            });
        }
    }
    if let Some(m) = mask {
        if m.len() != kh * kw {
            return Err(Error::Validation(format!(
                "mask has {} taps, kernel has {}",
                m.len(),
                kh * kw
            )));
        }
    }
    Ok(())
}

/// Full "same" convolution.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    mask: Option<&[bool]>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let [_, h, wd, _] = x.shape().0;
    conv2d_region(x, w, bias, mask, geom, 0..h, 0..wd)
}

/// Convolution evaluated only at output rows `rows` and columns `cols`.
///
/// Returns `[n, rows.len(), cols.len(), cout]`.
pub fn conv2d_region<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    mask: Option<&[bool]>,
    geom: &ConvGeometry,
    rows: Range<usize>,
    cols: Range<usize>,
) -> Result<Tensor<T>> {
    check_shapes(x, w, bias, mask, geom)?;
    let [n, h, wd, cin] = x.shape().0;
    let cout = w.shape().c();
    if rows.end > h || cols.end > wd {
        return Err(Error::Shape(format!(
            "conv region {rows:?}x{cols:?} outside {:?}",
            x.shape()
        )));
    }
    let (ay, ax) = geom.anchor;
    let (kh, kw) = (geom.kh, geom.kw);
    let out_shape = Shape::new(n, rows.len(), cols.len(), cout);
    let mut out = vec![T::zero(); out_shape.numel()];
    let xd = x.data();
    let wdat = w.data();
    let xs = x.shape().strides();
    let mut o = 0;
    for b in 0..n {
        for oy in rows.clone() {
            for ox in cols.clone() {
                let px = &mut out[o..o + cout];
                if let Some(bias) = bias {
                    px.copy_from_slice(bias.data());
                }
                for ky in 0..kh {
                    let iy = oy as isize + ky as isize - ay as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        if let Some(m) = mask {
                            if !m[ky * kw + kx] {
                                continue;
                            }
                        }
                        let ix = ox as isize + kx as isize - ax as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xo = b * xs[0] + iy as usize * xs[1] + ix as usize * xs[2];
                        let xin = &xd[xo..xo + cin];
                        let wt =
                            &wdat[(ky * kw + kx) * cin * cout..(ky * kw + kx + 1) * cin * cout];
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == T::zero() {
                                continue;
                            }
                            let wr = &wt[ci * cout..(ci + 1) * cout];
                            for (p, &wv) in px.iter_mut().zip(wr) {
                                *p = *p + xv * wv;
                            }
                        }
                    }
                }
                o += cout;
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradients of a full "same" convolution: `(d x, d w, d bias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    mask: Option<&[bool]>,
    geom: &ConvGeometry,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_shapes(x, w, None, mask, geom)?;
    let [n, h, wd, cin] = x.shape().0;
    let cout = w.shape().c();
    if gy.shape() != Shape::new(n, h, wd, cout) {
        return Err(Error::Dimension {
            op: "conv2d_backward",
            lhs: gy.shape(),
            rhs: Shape::new(n, h, wd, cout),
        });
    }
    let (ay, ax) = geom.anchor;
    let (kh, kw) = (geom.kh, geom.kw);
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); cout];
    let xd = x.data();
    let wdat = w.data();
    let gd = gy.data();
    let xs = x.shape().strides();
    let mut o = 0;
    for b in 0..n {
        for oy in 0..h {
            for ox in 0..wd {
                let g = &gd[o..o + cout];
                o += cout;
                for (acc, &gv) in gb.iter_mut().zip(g) {
                    *acc = *acc + gv;
                }
                if g.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                for ky in 0..kh {
                    let iy = oy as isize + ky as isize - ay as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        if let Some(m) = mask {
                            if !m[ky * kw + kx] {
                                continue;
                            }
                        }
                        let ix = ox as isize + kx as isize - ax as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xo = b * xs[0] + iy as usize * xs[1] + ix as usize * xs[2];
                        let tap = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let wr = &wdat[tap + ci * cout..tap + (ci + 1) * cout];
                            let mut acc = T::zero();
                            for (&wv, &gv) in wr.iter().zip(g) {
                                acc = acc + wv * gv;
                            }
                            gx[xo + ci] = gx[xo + ci] + acc;
                            let xv = xd[xo + ci];
                            if xv != T::zero() {
                                let gwr = &mut gw[tap + ci * cout..tap + (ci + 1) * cout];
                                for (a, &gv) in gwr.iter_mut().zip(g) {
                                    *a = *a + xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw)?,
        Tensor::from_vec(Shape::vector(cout), gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent nested-loop reference with explicit zero padding.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &[f64],
        anchor: (usize, usize),
    ) -> Tensor<f64> {
        let [n, h, wd, cin] = x.shape().0;
        let [kh, kw, _, cout] = w.shape().0;
        let mut padded = vec![vec![vec![vec![0.0; cin]; wd + kw]; h + kh]; n];
        for b in 0..n {
            for i in 0..h {
                for j in 0..wd {
                    for c in 0..cin {
                        padded[b][i + anchor.0][j + anchor.1][c] = x.at(b, i, j, c);
                    }
                }
            }
        }
        Tensor::from_fn(Shape::new(n, h, wd, cout), |[b, i, j, o]| {
            let mut s = bias[o];
            for ky in 0..kh {
                for kx in 0..kw {
                    for c in 0..cin {
                        s += w.at(ky, kx, c, o) * padded[b][i + ky][j + kx][c];
                    }
                }
            }
            s
        })
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(Shape::new(3, 3, 2, 4), 1.0, &mut rng);
        let b = Tensor::from_vec(Shape::vector(4), vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), None, &ConvGeometry::centered(3, 3)).unwrap();
        for px in y.data().chunks(4) {
            assert_eq!(px, b.data());
        }
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 3), 1.0, &mut rng);
        let w = Tensor::from_fn(
            Shape::new(1, 1, 3, 3),
            |[_, _, i, o]| if i == o { 1.0 } else { 0.0 },
        );
        let y = conv2d(&x, &w, None, Some(&[true]), &ConvGeometry::centered(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(Shape::new(1, 3, 3, 1), 1.0, &mut rng);
        let w = Tensor::randn(Shape::new(3, 3, 1, 1), 1.0, &mut rng);
        let b = Tensor::from_vec(Shape::vector(1), vec![0.25]).unwrap();
        let y = conv2d(&x, &w, Some(&b), None, &ConvGeometry::centered(3, 3)).unwrap();
        let r = naive_conv(&x, &w, &[0.25], (1, 1));
        assert!(y.max_abs_diff(&r) < 1e-14);
    }

    #[test]
    fn matches_oracle_with_offcenter_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(Shape::new(2, 4, 5, 3), 1.0, &mut rng);
        let w = Tensor::randn(Shape::new(2, 5, 3, 2), 1.0, &mut rng);
        let geom = ConvGeometry {
            kh: 2,
            kw: 5,
            anchor: (1, 2),
        };
        let y = conv2d(&x, &w, None, None, &geom).unwrap();
        let r = naive_conv(&x, &w, &[0.0, 0.0], (1, 2));
        assert!(y.max_abs_diff(&r) < 1e-13);
    }

    #[test]
    fn region_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(Shape::new(2, 5, 6, 2), 1.0, &mut rng);
        let w = Tensor::randn(Shape::new(2, 3, 2, 3), 1.0, &mut rng);
        let geom = ConvGeometry {
            kh: 2,
            kw: 3,
            anchor: (1, 1),
        };
        let full = conv2d(&x, &w, None, None, &geom).unwrap();
        let part = conv2d_region(&x, &w, None, None, &geom, 2..3, 0..6).unwrap();
        for b in 0..2 {
            for j in 0..6 {
                for o in 0..3 {
                    assert_eq!(part.at(b, 0, j, o), full.at(b, 2, j, o));
                }
            }
        }
    }

    #[test]
    fn rejects_non_binary_mask() {
        let m = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 0.5]).unwrap();
        assert!(matches!(mask_taps(&m, 1, 2), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 3, 2));
        let w = Tensor::<f64>::zeros(Shape::new(3, 3, 3, 1));
        assert!(conv2d(&x, &w, None, None, &ConvGeometry::centered(3, 3)).is_err());
    }
}
