use crate::autodiff::Param;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Linear warmup to `lr0` over `warmup` updates, then exponential decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub warmup: u64,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            lr0: 1e-3,
            warmup: 500,
            decay: 0.999_997,
        }
    }
}

impl LrSchedule {
    /// `lr0 * min(1, step / warmup)` up to `warmup`, `lr0 * decay^(step - warmup)` after.
    pub fn lr(&self, step: u64) -> f64 {
        if step <= self.warmup {
            if self.warmup == 0 {
                self.lr0
            } else {
                self.lr0 * step as f64 / self.warmup as f64
            }
        } else {
            self.lr0 * self.decay.powf((step - self.warmup) as f64)
        }
    }
}

/// Adam moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Real> {
    pub name: String,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Bias-corrected Adam with a learning-rate schedule.
///
/// `step` counts completed training steps; update `k` (1-based) uses
/// `schedule.lr(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(schedule: LrSchedule) -> Self {
        OptimState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.lr(self.step + 1)
    }

    /// Applies one update to the trainable `params` with matching `grads`
    /// and advances the step counter.
    pub fn update(&mut self, params: &mut [&mut Param<T>], grads: &[Tensor<T>]) -> Result<()> {
        let trainable: Vec<&mut &mut Param<T>> =
            params.iter_mut().filter(|p| p.trainable).collect();
        if trainable.len() != grads.len() {
            return Err(Error::Validation(format!(
                "{} trainable parameters but {} gradients",
                trainable.len(),
                grads.len()
            )));
        }
        if self.moments.is_empty() {
            self.moments = trainable
                .iter()
                .map(|p| Moments {
                    name: p.name.clone(),
                    m: Tensor::zeros(p.value.shape()),
                    v: Tensor::zeros(p.value.shape()),
                })
                .collect();
        }
        if self.moments.len() != trainable.len() {
            return Err(Error::Validation(
                "optimizer state does not match the parameter list".into(),
            ));
        }
        let k = self.step + 1;
        let lr = self.schedule.lr(k);
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(k as f64);
        let c2 = 1.0 - b2.powf(k as f64);
        for ((p, g), mo) in trainable
            .into_iter()
            .zip(grads)
            .zip(self.moments.iter_mut())
        {
            if mo.name != p.name || g.shape() != p.value.shape() {
                return Err(Error::Validation(format!(
                    "optimizer slot {} does not match parameter {}",
                    mo.name, p.name
                )));
            }
            let (md, vd, pd) = (mo.m.data_mut(), mo.v.data_mut(), p.value.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i].as_f64();
                let m = b1 * md[i].as_f64() + (1.0 - b1) * gi;
                let v = b2 * vd[i].as_f64() + (1.0 - b2) * gi * gi;
                md[i] = T::lit(m);
                vd[i] = T::lit(v);
                let upd = lr * (m / c1) / ((v / c2).sqrt() + self.eps);
                pd[i] = T::lit(pd[i].as_f64() - upd);
            }
        }
        self.step = k;
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns
/// whether clipping happened.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], norm: f64, max_norm: f64) -> bool {
    if norm <= max_norm || norm == 0.0 {
        return false;
    }
    let k = T::lit(max_norm / norm);
    for g in grads.iter_mut() {
        *g = g.scale(k);
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn schedule_points() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(250) - 5e-4).abs() < 1e-18);
        assert_eq!(s.lr(500), 1e-3);
        assert!((s.lr(501) - 1e-3 * 0.999997).abs() < 1e-18);
        // continuous at the end of warmup
        assert!((s.lr(500) - s.lr(501)).abs() < 1e-8);
    }

    fn scalar_param(v: f64) -> Param<f64> {
        Param::new("p", Tensor::scalar(v))
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_param(1.5);
        let mut opt = OptimState::new(LrSchedule::default());
        for _ in 0..5 {
            opt.update(&mut [&mut p], &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(p.value.item(), 1.5);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        // independent scalar simulation of the Adam recursions
        let sched = LrSchedule {
            lr0: 1e-2,
            warmup: 0,
            decay: 1.0,
        };
        let mut p = scalar_param(0.0);
        let mut opt = OptimState::new(sched);
        let g = 0.37;
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        let mut last = 0.0;
        for k in 1..=200 {
            let before = p.value.item();
            opt.update(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            x -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            last = before - p.value.item();
        }
        assert!((p.value.item() - x).abs() < 1e-12);
        assert!((last - 1e-2).abs() < 1e-6);
    }

    #[test]
    fn one_step_decreases_quadratic() {
        let sched = LrSchedule {
            lr0: 0.1,
            warmup: 0,
            decay: 1.0,
        };
        let mut p = Param::new(
            "p",
            Tensor::from_vec(Shape::vector(2), vec![1.0, -2.0]).unwrap(),
        );
        let loss = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
        let before = loss(&p.value);
        let g = p.value.scale(2.0);
        OptimState::new(sched).update(&mut [&mut p], &[g]).unwrap();
        assert!(loss(&p.value) < before);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::<f64>::from_vec(Shape::vector(2), vec![300.0, 400.0]).unwrap()];
        let n = global_norm(&g);
        assert_eq!(n, 500.0);
        assert!(clip_global_norm(&mut g, n, 100.0));
        assert!((global_norm(&g) - 100.0).abs() < 1e-9);
        assert!(!clip_global_norm(&mut g, 100.0, 100.0));
    }
}
