//! Dense LU factorization with partial pivoting, for the small channel
//! matrices of the invertible 1x1 convolution. Works in `f64` regardless of
//! model precision.

use crate::error::{Error, Result};

/// `P A = L U` packed into one row-major buffer (unit-diagonal `L` below,
/// `U` on and above the diagonal).
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    /// Factorizes the row-major `n x n` matrix `a`.
    pub fn new(a: &[f64], n: usize) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::Shape(format!(
                "{} entries for a {n}x{n} matrix",
                a.len()
            )));
        }
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for r in k + 1..n {
                let v = lu[r * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            if pivot == 0.0 {
                continue;
            }
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                for c in k + 1..n {
                    lu[r * n + c] -= f * lu[k * n + c];
                }
            }
        }
        Ok(Lu { n, lu, perm, sign })
    }

    /// `ln |det A|` (negative infinity when singular).
    pub fn log_abs_det(&self) -> f64 {
        (0..self.n)
            .map(|i| self.lu[i * self.n + i].abs().ln())
            .sum()
    }

    pub fn det(&self) -> f64 {
        self.sign
            * (0..self.n)
                .map(|i| self.lu[i * self.n + i])
                .product::<f64>()
    }

    /// Errors unless `|det A|` is at least `tol`.
    pub fn ensure_invertible(&self, tol: f64) -> Result<()> {
        let lad = self.log_abs_det();
        if !(lad >= tol.ln()) {
            return Err(Error::NotInvertible(format!(
                "|det W| = {:e} below {tol:e}",
                lad.exp()
            )));
        }
        Ok(())
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.lu[i * n + k] * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                x[i] -= self.lu[i * n + k] * x[k];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    /// Row-major `A^{-1}`.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e);
            for r in 0..n {
                inv[r * n + c] = col[r];
            }
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_permutation_determinants() {
        let lu = Lu::new(&[2.0, 0.0, 0.0, 3.0], 2).unwrap();
        assert!((lu.det() - 6.0).abs() < 1e-15);
        assert!((lu.log_abs_det() - 6f64.ln()).abs() < 1e-15);
        let swap = Lu::new(&[0.0, 1.0, 1.0, 0.0], 2).unwrap();
        assert_eq!(swap.det(), -1.0);
        assert_eq!(swap.log_abs_det(), 0.0);
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = [4.0, 1.0, -2.0, 0.5, 3.0, 1.0, 2.0, -1.0, 5.0];
        let inv = Lu::new(&a, 3).unwrap().inverse();
        for r in 0..3 {
            for c in 0..3 {
                let v: f64 = (0..3).map(|k| a[r * 3 + k] * inv[k * 3 + c]).sum();
                let e = if r == c { 1.0 } else { 0.0 };
                assert!((v - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_is_rejected() {
        let lu = Lu::new(&[1.0, 2.0, 2.0, 4.0], 2).unwrap();
        assert!(lu.ensure_invertible(1e-12).is_err());
    }
}
