use rand::Rng;

use crate::autodiff::{Param, Var};
use crate::error::{Error, Result};
use crate::layers::{FlowLayer, InverseStats, LayerKind};
use crate::linalg::Lu;
use crate::tensor::{Real, Shape, Tensor};

/// Smallest `|det W|` accepted before the layer reports itself singular.
pub const DET_TOL: f64 = 1e-12;

/// Invertible 1x1 convolution `y[i, j] = W x[i, j]` with a dense `c x c`
/// matrix stored as `[1, 1, c, c]` (row = output channel).
#[derive(Clone, Debug)]
pub struct Inv1x1<T: Real> {
    pub weight: Param<T>,
}

/// Random orthogonal `c x c` matrix (Gram-Schmidt on a Gaussian draw).
pub fn random_orthogonal<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Tensor<f64> = Tensor::randn(Shape::new(1, 1, c, c), 1.0, rng);
        let mut q = g.into_vec();
        let mut ok = true;
        for r in 0..c {
            for p in 0..r {
                let dot: f64 = (0..c).map(|k| q[r * c + k] * q[p * c + k]).sum();
                for k in 0..c {
                    q[r * c + k] -= dot * q[p * c + k];
                }
            }
            let norm: f64 = (0..c).map(|k| q[r * c + k].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for k in 0..c {
                q[r * c + k] /= norm;
            }
        }
        if ok {
            return q;
        }
    }
}

impl<T: Real> Inv1x1<T> {
    /// Random rotation init.
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, rng: &mut R) -> Self {
        let q = random_orthogonal(channels, rng);
        Inv1x1 {
            weight: Param::new(
                format!("{prefix}.weight"),
                Tensor::from_vec(
                    Shape::new(1, 1, channels, channels),
                    q.into_iter().map(T::lit).collect(),
                )
                .unwrap(),
            ),
        }
    }

    /// Explicit row-major matrix.
    pub fn with_matrix(prefix: &str, channels: usize, w: &[f64]) -> Result<Self> {
        Ok(Inv1x1 {
            weight: Param::new(
                format!("{prefix}.weight"),
                Tensor::from_vec(
                    Shape::new(1, 1, channels, channels),
                    w.iter().map(|&v| T::lit(v)).collect(),
                )?,
            ),
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.value.shape().c()
    }

    fn lu(&self) -> Result<Lu> {
        let lu = Lu::new(&self.weight.value.to_f64_vec(), self.channels())?;
        lu.ensure_invertible(DET_TOL)?;
        Ok(lu)
    }
}

impl<T: Real> FlowLayer<T> for Inv1x1<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Inv1x1
    }

    fn forward<'t>(
        &self,
        x: Var<'t, T>,
        _cond: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.lu()?;
        let shape = x.shape();
        if shape.c() != self.channels() {
            return Err(Error::Dimension {
                op: "inv1x1",
                lhs: shape,
                rhs: self.weight.value.shape(),
            });
        }
        let w = x.tape().param(&self.weight);
        let y = x.channel_matmul(&w)?;
        let logdet = w
            .log_abs_det()?
            .mul_scalar((shape.h() * shape.w()) as f64)?
            .broadcast_to(Shape::new(shape.n(), 1, 1, 1))?;
        Ok((y, logdet))
    }

    fn inverse_counted(
        &self,
        y: &Tensor<T>,
        _cond: Option<&Tensor<T>>,
        _stats: &mut InverseStats,
    ) -> Result<Tensor<T>> {
        let c = self.channels();
        let inv = self.lu()?.inverse();
        let w_inv = Tensor::from_vec(
            Shape::new(1, 1, c, c),
            inv.into_iter().map(T::lit).collect(),
        )?;
        y.channel_matmul(&w_inv)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight]
    }

    fn describe(&self) -> String {
        "inv1x1".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::apply;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input() -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Tensor::randn(Shape::new(2, 2, 2, 2), 1.0, &mut rng)
    }

    #[test]
    fn identity() {
        let l = Inv1x1::<f64>::with_matrix("w", 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = input();
        let (y, ld) = apply(&l, &x, None).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, vec![0.0, 0.0]);
        assert_eq!(l.inverse(&y, None).unwrap(), x);
    }

    #[test]
    fn swap_permutes_channels() {
        let l = Inv1x1::<f64>::with_matrix("w", 2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let x = input();
        let (y, ld) = apply(&l, &x, None).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            assert_eq!(a[0], b[1]);
            assert_eq!(a[1], b[0]);
        }
        assert_eq!(ld, vec![0.0, 0.0]);
        assert_eq!(l.inverse(&y, None).unwrap(), x);
    }

    #[test]
    fn diagonal_logdet() {
        let l = Inv1x1::<f64>::with_matrix("w", 2, &[2.0, 0.0, 0.0, 3.0]).unwrap();
        let x = input();
        let (y, ld) = apply(&l, &x, None).unwrap();
        assert!((ld[0] - 4.0 * 6f64.ln()).abs() < 1e-12);
        assert!((ld[0] - 7.1670).abs() < 1e-4);
        assert!(l.inverse(&y, None).unwrap().max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn random_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = Inv1x1::<f64>::with_matrix("w", 3, &w).unwrap();
        let x = Tensor::randn(Shape::new(2, 3, 3, 3), 1.0, &mut rng);
        let (y, _) = apply(&l, &x, None).unwrap();
        assert!(l.inverse(&y, None).unwrap().max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn orthogonal_init_has_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = Inv1x1::<f64>::new("w", 4, &mut rng);
        let lu = Lu::new(&l.weight.value.to_f64_vec(), 4).unwrap();
        assert!(lu.log_abs_det().abs() < 1e-12);
    }

    #[test]
    fn singular_rejected() {
        let l = Inv1x1::<f64>::with_matrix("w", 2, &[1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(
            apply(&l, &input(), None),
            Err(Error::NotInvertible(_))
        ));
        assert!(matches!(
            l.inverse(&input(), None),
            Err(Error::NotInvertible(_))
        ));
    }
}
