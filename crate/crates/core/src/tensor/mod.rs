//! Dense rank-4 tensors in `[batch, height, width, channels]` layout.
//!
//! Vectors and matrices are embedded as degenerate shapes: a per-channel
//! vector is `[1, 1, 1, c]`, a `c x c` matrix is `[1, 1, c, c]`.

pub mod conv;
pub mod mcwt;
mod real;

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

pub use real::{DType, Element, Real};

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, h, w, c] = self.0;
        write!(f, "[{n},{h},{w},{c}]")
    }
}

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    /// `[1, 1, 1, c]`
    pub fn vector(c: usize) -> Self {
        Shape([1, 1, 1, c])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn h(&self) -> usize {
        self.0[1]
    }
    pub fn w(&self) -> usize {
        self.0[2]
    }
    pub fn c(&self) -> usize {
        self.0[3]
    }

    /// Row-major strides.
    pub fn strides(&self) -> [usize; 4] {
        let [_, h, w, c] = self.0;
        [h * w * c, w * c, c, 1]
    }

    pub fn with_c(&self, c: usize) -> Self {
        Shape([self.0[0], self.0[1], self.0[2], c])
    }

    pub fn with_n(&self, n: usize) -> Self {
        Shape([n, self.0[1], self.0[2], self.0[3]])
    }

    /// Per-element volume `h * w * c`.
    pub fn item_len(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }

    /// Broadcast result shape: every axis must agree or be 1 on one side.
    pub fn broadcast(&self, other: &Shape, op: &'static str) -> Result<Shape> {
        let mut out = [0; 4];
        for d in 0..4 {
            let (a, b) = (self.0[d], other.0[d]);
            out[d] = if a == b {
                a
            } else if a == 1 {
                b
            } else if b == 1 {
                a
            } else {
                return Err(Error::Dimension {
                    op,
                    lhs: *self,
                    rhs: *other,
                });
            };
        }
        Ok(Shape(out))
    }

    /// Strides for reading this shape as if it were broadcast to `target`.
    fn broadcast_strides(&self, target: &Shape) -> [usize; 4] {
        let s = self.strides();
        let mut out = [0; 4];
        for d in 0..4 {
            out[d] = if self.0[d] == 1 && target.0[d] != 1 {
                0
            } else {
                s[d]
            };
        }
        out
    }
}

/// A dense row-major rank-4 array.
#[derive(Clone, PartialEq)]
pub struct Tensor<E = f64> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: fmt::Debug> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: E) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<E> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn offset(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        let s = self.shape.strides();
        n * s[0] + h * s[1] + w * s[2] + c
    }

    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> E {
        self.data[self.offset(n, h, w, c)]
    }

    pub fn set(&mut self, n: usize, h: usize, w: usize, c: usize, v: E) {
        let o = self.offset(n, h, w, c);
        self.data[o] = v;
    }

    /// Same data under a new shape of equal volume.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Batch elements `start..start+len`.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.shape.n() {
            return Err(Error::Shape(format!(
                "batch slice {start}..{} out of range for {:?}",
                start + len,
                self.shape
            )));
        }
        let item = self.shape.item_len();
        Ok(Tensor {
            shape: self.shape.with_n(len),
            data: self.data[start * item..(start + len) * item].to_vec(),
        })
    }

    /// Gathers batch elements by index.
    pub fn gather_batch(&self, idx: &[usize]) -> Self {
        let item = self.shape.item_len();
        let mut data = Vec::with_capacity(idx.len() * item);
        for &i in idx {
            data.extend_from_slice(&self.data[i * item..(i + 1) * item]);
        }
        Tensor {
            shape: self.shape.with_n(idx.len()),
            data,
        }
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(parts: &[&Tensor<E>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.with_n(1) != first.shape.with_n(1) {
                return Err(Error::Dimension {
                    op: "concat_batch",
                    lhs: first.shape,
                    rhs: p.shape,
                });
            }
            n += p.shape.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: first.shape.with_n(n),
            data,
        })
    }

    /// Elements `start..start+len` of the channel axis.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.shape.c();
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} invalid for {:?}",
                start + len,
                self.shape
            )));
        }
        let rows = self.data.len() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * c + start..r * c + start + len]);
        }
        Ok(Tensor {
            shape: self.shape.with_c(len),
            data,
        })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<E>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let mut total_c = 0;
        for p in parts {
            if p.shape.with_c(1) != first.shape.with_c(1) {
                return Err(Error::Dimension {
                    op: "concat_channels",
                    lhs: first.shape,
                    rhs: p.shape,
                });
            }
            total_c += p.shape.c();
        }
        let rows = first.shape.numel() / first.shape.c();
        let mut data = Vec::with_capacity(rows * total_c);
        for r in 0..rows {
            for p in parts {
                let c = p.shape.c();
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        Ok(Tensor {
            shape: first.shape.with_c(total_c),
            data,
        })
    }

    /// Trades each 2x2 spatial block for 4x the channels, in
    /// (top-left, top-right, bottom-left, bottom-right) order.
    pub fn squeeze2x2(&self) -> Result<Self> {
        let [n, h, w, c] = self.shape.0;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "squeeze needs even spatial extents, got {:?}",
                self.shape
            )));
        }
        let out_shape = Shape::new(n, h / 2, w / 2, 4 * c);
        let mut data = vec![E::default(); self.data.len()];
        let os = out_shape.strides();
        for b in 0..n {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    for k in 0..4 {
                        let (di, dj) = (k / 2, k % 2);
                        let src = self.offset(b, 2 * i + di, 2 * j + dj, 0);
                        let dst = b * os[0] + i * os[1] + j * os[2] + k * c;
                        data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
                    }
                }
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Inverse of [`Tensor::squeeze2x2`].
    pub fn unsqueeze2x2(&self) -> Result<Self> {
        let [n, h, w, c4] = self.shape.0;
        if c4 % 4 != 0 {
            return Err(Error::Shape(format!(
                "unsqueeze needs channels divisible by 4, got {:?}",
                self.shape
            )));
        }
        let c = c4 / 4;
        let out_shape = Shape::new(n, 2 * h, 2 * w, c);
        let mut data = vec![E::default(); self.data.len()];
        let os = out_shape.strides();
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..4 {
                        let (di, dj) = (k / 2, k % 2);
                        let src = self.offset(b, i, j, k * c);
                        let dst = b * os[0] + (2 * i + di) * os[1] + (2 * j + dj) * os[2];
                        data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
                    }
                }
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor::full(Shape::SCALAR, v)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, h, w, c] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for a in 0..n {
            for b in 0..h {
                for d in 0..w {
                    for e in 0..c {
                        data.push(f([a, b, d, e]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// I.i.d. standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::lit(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    /// I.i.d. `Unif[lo, hi)` entries.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::lit(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    /// Converts to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Elementwise binary op with broadcasting over all four axes.
    pub fn zip_with(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape,
                data,
            });
        }
        let out = self.shape.broadcast(&other.shape, op)?;
        let sa = self.shape.broadcast_strides(&out);
        let sb = other.shape.broadcast_strides(&out);
        let [n, h, w, c] = out.0;
        let mut data = Vec::with_capacity(out.numel());
        for i0 in 0..n {
            for i1 in 0..h {
                for i2 in 0..w {
                    let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                    let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                    for i3 in 0..c {
                        data.push(f(
                            self.data[base_a + i3 * sa[3]],
                            other.data[base_b + i3 * sb[3]],
                        ));
                    }
                }
            }
        }
        Ok(Tensor { shape: out, data })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// Sums over `axes`, keeping them as extent-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        let out = reduced_shape(self.shape, axes)?;
        if out == self.shape {
            return Ok(self.clone());
        }
        let so = out.broadcast_strides(&self.shape);
        let mut data = vec![T::zero(); out.numel()];
        let [n, h, w, c] = self.shape.0;
        let mut idx = 0;
        for i0 in 0..n {
            for i1 in 0..h {
                for i2 in 0..w {
                    let base = i0 * so[0] + i1 * so[1] + i2 * so[2];
                    for i3 in 0..c {
                        data[base + i3 * so[3]] = data[base + i3 * so[3]] + self.data[idx];
                        idx += 1;
                    }
                }
            }
        }
        Ok(Tensor { shape: out, data })
    }

    /// Sums away every axis along which `self` is larger than `target`.
    pub fn reduce_to(&self, target: Shape) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let axes: Vec<usize> = (0..4)
            .filter(|&d| target.0[d] == 1 && self.shape.0[d] != 1)
            .collect();
        let r = self.sum_axes(&axes)?;
        if r.shape != target {
            return Err(Error::Dimension {
                op: "reduce_to",
                lhs: self.shape,
                rhs: target,
            });
        }
        Ok(r)
    }

    pub fn broadcast_to(&self, target: Shape) -> Result<Self> {
        let out = self.shape.broadcast(&target, "broadcast_to")?;
        if out != target {
            return Err(Error::Dimension {
                op: "broadcast_to",
                lhs: self.shape,
                rhs: target,
            });
        }
        Tensor::zeros(target).add(self)
    }

    /// Per-position channel mixing `y[p, o] = sum_i W[o, i] x[p, i]`, with
    /// `W` stored as `[1, 1, c_out, c_in]`.
    pub fn channel_matmul(&self, w: &Tensor<T>) -> Result<Self> {
        let [_, _, co, ci] = w.shape.0;
        if w.shape.n() != 1 || w.shape.h() != 1 || ci != self.shape.c() {
            return Err(Error::Dimension {
                op: "channel_matmul",
                lhs: self.shape,
                rhs: w.shape,
            });
        }
        let rows = self.data.len() / ci;
        let mut data = vec![T::zero(); rows * co];
        for r in 0..rows {
            let x = &self.data[r * ci..(r + 1) * ci];
            let y = &mut data[r * co..(r + 1) * co];
            for (o, yo) in y.iter_mut().enumerate() {
                let wr = &w.data[o * ci..(o + 1) * ci];
                let mut acc = T::zero();
                for (a, b) in wr.iter().zip(x) {
                    acc = acc + *a * *b;
                }
                *yo = acc;
            }
        }
        Ok(Tensor {
            shape: self.shape.with_c(co),
            data,
        })
    }
}

/// Shape after reducing `axes` with kept dimensions.
pub fn reduced_shape(shape: Shape, axes: &[usize]) -> Result<Shape> {
    let mut out = shape.0;
    for &a in axes {
        if a > 3 {
            return Err(Error::InvalidAxis(a));
        }
        out[a] = 1;
    }
    Ok(Shape(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: Shape) -> Tensor<f64> {
        let n = shape.numel();
        Tensor::from_vec(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(Shape::new(1, 2, 2, 1), vec![0.0; 3]).is_err());
    }

    #[test]
    fn squeeze_shape_and_roundtrip() {
        let x = iota(Shape::new(1, 4, 4, 2));
        let s = x.squeeze2x2().unwrap();
        assert_eq!(s.shape(), Shape::new(1, 2, 2, 8));
        assert_eq!(s.unsqueeze2x2().unwrap(), x);
    }

    #[test]
    fn squeeze_block_order_matches_hand_enumeration() {
        // 4x4x1 iota:
        //  0  1  2  3
        //  4  5  6  7
        //  8  9 10 11
        // 12 13 14 15
        let x = iota(Shape::new(1, 4, 4, 1));
        let s = x.squeeze2x2().unwrap();
        let expected = [
            0.0, 1.0, 4.0, 5.0, // block (0,0): TL TR BL BR
            2.0, 3.0, 6.0, 7.0, // block (0,1)
            8.0, 9.0, 12.0, 13.0, // block (1,0)
            10.0, 11.0, 14.0, 15.0, // block (1,1)
        ];
        assert_eq!(s.data(), &expected);
    }

    #[test]
    fn squeeze_rejects_odd_extent() {
        let x = iota(Shape::new(1, 3, 4, 1));
        assert!(x.squeeze2x2().is_err());
    }

    #[test]
    fn broadcasting_rules() {
        let a = iota(Shape::new(2, 1, 1, 3));
        let b = iota(Shape::new(1, 2, 1, 1));
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 2, 1, 3));
        assert_eq!(c.at(1, 1, 0, 2), 5.0 + 1.0);
        let bad = iota(Shape::new(3, 1, 1, 1));
        assert!(a.add(&bad).is_err());
    }

    #[test]
    fn sum_axes_and_reduce_to() {
        let x = Tensor::<f64>::ones(Shape::new(1, 2, 2, 3));
        assert_eq!(x.sum_axes(&[0, 1, 2, 3]).unwrap().item(), 12.0);
        let r = x.reduce_to(Shape::vector(3)).unwrap();
        assert_eq!(r.data(), &[4.0, 4.0, 4.0]);
        assert!(matches!(x.sum_axes(&[4]), Err(Error::InvalidAxis(4))));
    }

    #[test]
    fn channel_slice_concat_roundtrip() {
        let x = iota(Shape::new(2, 2, 2, 5));
        let a = x.slice_channels(0, 3).unwrap();
        let b = x.slice_channels(3, 2).unwrap();
        assert_eq!(Tensor::concat_channels(&[&a, &b]).unwrap(), x);
    }

    #[test]
    fn channel_matmul_swap() {
        let x = iota(Shape::new(1, 1, 2, 2));
        let w = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let y = x.channel_matmul(&w).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 3.0, 2.0]);
    }
}
