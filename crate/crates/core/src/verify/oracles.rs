//! Reference computations that deliberately avoid the fast paths: dense
//! finite-difference Jacobians and position-by-position inversion.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mcf::{MaskedConvFlow, Orientation};
use crate::tensor::{Shape, Tensor};

/// Largest input the dense oracles accept.
pub const MAX_DENSE_DIMS: usize = 64;
/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// `|det J|` below this counts as singular.
pub const SINGULAR_DET: f64 = 1e-300;

/// Row-major `d x d` Jacobian of `f` at `x` by central differences
/// (column `j` is `(f(x + eps e_j) - f(x - eps e_j)) / 2 eps`).
pub fn dense_jacobian<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Vec<f64>>,
{
    let d = x.len();
    if d > MAX_DENSE_DIMS {
        return Err(Error::Validation(format!(
            "dense Jacobian limited to {MAX_DENSE_DIMS} dims, input has {d}"
        )));
    }
    let mut jac = vec![0.0; d * d];
    let mut probe = x.clone();
    for j in 0..d {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[j] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[j] = orig;
        if up.len() != d || down.len() != d {
            return Err(Error::Shape(format!(
                "map is {d} -> {} dims, not square",
                up.len()
            )));
        }
        for i in 0..d {
            jac[i * d + j] = (up[i] - down[i]) / (2.0 * eps);
        }
    }
    Ok(jac)
}

/// `ln |det J|` from an LU factorization with partial pivoting.
pub fn log_abs_det_dense(jac: &[f64], d: usize) -> Result<f64> {
    let lu = DMatrix::from_row_slice(d, d, jac).lu();
    let u = lu.u();
    let log_det: f64 = (0..d).map(|i| u[(i, i)].abs().ln()).sum();
    if !(log_det > SINGULAR_DET.ln()) {
        return Err(Error::NotInvertible(format!(
            "Jacobian is numerically singular (ln|det| = {log_det})"
        )));
    }
    Ok(log_det)
}

/// `ln |det df/dx|` at `x` for a map between equally sized flat vectors.
pub fn brute_force_logdet<F>(f: F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Vec<f64>>,
{
    let jac = dense_jacobian(f, x, FD_EPS)?;
    log_abs_det_dense(&jac, x.len())
}

/// Result of [`sequential_inversion_oracle`].
#[derive(Clone, Debug)]
pub struct SequentialInverse {
    pub x: Tensor<f64>,
    /// One per spatial position.
    pub conv_applications: usize,
}

/// Spatial positions in the order in which a masked flow of orientation `o`
/// can recover them.
pub fn autoregressive_order(o: Orientation, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(h * w);
    match o {
        Orientation::Top | Orientation::Bottom => {
            for r in 0..h {
                for c in 0..w {
                    out.push((r, c));
                }
            }
        }
        Orientation::Left | Orientation::Right => {
            for c in 0..w {
                for r in 0..h {
                    out.push((r, c));
                }
            }
        }
    }
    if matches!(o, Orientation::Bottom | Orientation::Right) {
        out.reverse();
    }
    out
}

/// Kernel taps the flow may read, recomputed from the spec fields alone.
fn readable(o: Orientation, anchor: (usize, usize), ky: usize, kx: usize) -> bool {
    match o {
        Orientation::Top => ky < anchor.0,
        Orientation::Bottom => ky > anchor.0,
        Orientation::Left => kx < anchor.1,
        Orientation::Right => kx > anchor.1,
    }
}

/// Per output channel `(s, b)` of the flow at `(row, col)` of item `b`,
/// summed tap by tap from the unmasked weights over `x` (plus `cond`).
pub fn direct_scale_shift(
    flow: &MaskedConvFlow<f64>,
    x: &Tensor<f64>,
    cond: Option<&Tensor<f64>>,
    b: usize,
    row: usize,
    col: usize,
) -> Vec<(f64, f64)> {
    let spec = *flow.spec();
    let [_, h, w, c] = x.shape().0;
    let cin = c + flow.cond_channels();
    // weights are [ky, kx, ci, co]
    let widx =
        |ky: usize, kx: usize, ci: usize, co: usize| ((ky * spec.kw + kx) * cin + ci) * c + co;
    let (sw, bw) = (flow.s_weight.value.data(), flow.b_weight.value.data());
    (0..c)
        .map(|co| {
            let mut s_raw = flow.s_bias.value.data()[co];
            let mut shift = flow.b_bias.value.data()[co];
            for ky in 0..spec.kh {
                for kx in 0..spec.kw {
                    if !readable(spec.orientation, spec.anchor, ky, kx) {
                        continue;
                    }
                    let ir = row as isize + ky as isize - spec.anchor.0 as isize;
                    let ic = col as isize + kx as isize - spec.anchor.1 as isize;
                    if ir < 0 || ic < 0 || ir as usize >= h || ic as usize >= w {
                        continue;
                    }
                    let (ir, ic) = (ir as usize, ic as usize);
                    for ci in 0..cin {
                        let v = if ci < c {
                            x.at(b, ir, ic, ci)
                        } else {
                            cond.expect("conditioning channels present")
                                .at(b, ir, ic, ci - c)
                        };
                        s_raw += sw[widx(ky, kx, ci, co)] * v;
                        shift += bw[widx(ky, kx, ci, co)] * v;
                    }
                }
            }
            (1.0 / (1.0 + (-(s_raw + 2.0)).exp()), shift)
        })
        .collect()
}

/// Inverts a masked convolutional flow one position at a time, evaluating
/// the scale and shift at each position by direct summation. Reading a
/// position that has not been recovered yet is reported as an error.
pub fn sequential_inversion_oracle(
    flow: &MaskedConvFlow<f64>,
    y: &Tensor<f64>,
    cond: Option<&Tensor<f64>>,
) -> Result<SequentialInverse> {
    let [n, h, w, c] = y.shape().0;
    let cc = cond.map(|t| t.shape().c()).unwrap_or(0);
    if c != flow.channels() || cc != flow.cond_channels() {
        return Err(Error::Shape(format!(
            "oracle input {:?} does not match flow ({} + {} channels)",
            y.shape(),
            flow.channels(),
            flow.cond_channels()
        )));
    }
    let spec = *flow.spec();
    let (ay, ax) = spec.anchor;
    let mut x = Tensor::<f64>::zeros(Shape::new(n, h, w, c));
    let mut done = vec![false; h * w];
    let mut count = 0;
    for (r, col) in autoregressive_order(spec.orientation, h, w) {
        count += 1;
        for ky in 0..spec.kh {
            for kx in 0..spec.kw {
                if !readable(spec.orientation, spec.anchor, ky, kx) {
                    continue;
                }
                let (ir, ic) = (
                    r as isize + ky as isize - ay as isize,
                    col as isize + kx as isize - ax as isize,
                );
                if ir >= 0
                    && ic >= 0
                    && (ir as usize) < h
                    && (ic as usize) < w
                    && !done[ir as usize * w + ic as usize]
                {
                    return Err(Error::Validation(format!(
                        "order inconsistency: ({r},{col}) reads unrecovered ({ir},{ic})"
                    )));
                }
            }
        }
        for b in 0..n {
            for (co, (scale, shift)) in direct_scale_shift(flow, &x, cond, b, r, col)
                .into_iter()
                .enumerate()
            {
                x.set(b, r, col, co, (y.at(b, r, col, co) - shift) / scale);
            }
        }
        done[r * w + col] = true;
    }
    Ok(SequentialInverse {
        x,
        conv_applications: count,
    })
}
