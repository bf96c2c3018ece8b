use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Central-difference gradient `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`
/// for every coordinate of `x`.
///
/// `f` is evaluated twice at `x` first; differing results mean `f` is not
/// deterministic and the estimate would be meaningless.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if !(eps > 0.0) {
        return Err(Error::Validation(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let a = f(x)?;
    let b = f(x)?;
    if a.to_bits_eq(b) {
        let mut probe = x.clone();
        let mut grad = Vec::with_capacity(x.len());
        let h = T::lit(eps);
        for i in 0..x.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe)?;
            probe.data_mut()[i] = orig - h;
            let down = f(&probe)?;
            probe.data_mut()[i] = orig;
            grad.push(T::lit((up.as_f64() - down.as_f64()) / (2.0 * eps)));
        }
        Tensor::from_vec(x.shape(), grad)
    } else {
        Err(Error::NonDeterministic(format!(
            "repeated evaluation gave {a} then {b}"
        )))
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Real> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        self.as_f64().to_bits() == other.as_f64().to_bits()
    }
}

/// Norm-wise relative error `|a - b|_2 / max(|a|_2, |b|_2)` (0 when both vanish).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
