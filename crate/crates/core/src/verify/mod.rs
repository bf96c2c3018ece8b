//! Verification suite: independent oracles checked against the fast paths,
//! plus the sampling benchmark.

pub mod bench;
pub mod oracles;
pub mod registry;

pub use bench::{bench_sample, BenchConfig, BenchReport, BenchRow, BENCH_CSV_HEADER};
pub use oracles::{
    autoregressive_order, brute_force_logdet, dense_jacobian, direct_scale_shift,
    log_abs_det_dense, sequential_inversion_oracle, SequentialInverse,
};
pub use registry::{check_case, layer_case, registry, LayerCase, LayerCheck};

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{relative_error, Tape};
use crate::dequant::{to_real, DensityModel};
use crate::error::Result;
use crate::layers::{apply, CouplingMode, FlowLayer, InverseStats};
use crate::mcf::{MaskSpec, MaskedConvFlow, Orientation};
use crate::model::{DequantMode, Model, ModelConfig, MultiScale};
use crate::tensor::{Real, Shape, Tensor};
use crate::train::loss_and_grads;

pub const LOGDET_RTOL: f64 = 1e-5;
pub const GRAD_RTOL: f64 = 1e-5;
pub const SEQUENTIAL_TOL: f64 = 1e-10;

/// `|a - b| / max(|b|, 1)`: relative, with absolute behavior near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: String) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        });
    }

    /// Records `r`, turning an error into a failed check.
    fn record(&mut self, name: &str, r: Result<(bool, String)>) {
        match r {
            Ok((ok, detail)) => self.push(name, ok, detail),
            Err(e) => self.push(name, false, format!("error: {e}")),
        }
    }
}

/// Adds Gaussian noise of scale `std` to every trainable model parameter.
pub fn perturb_model<T: Real>(model: &mut Model<T>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        if p.trainable {
            let noise = Tensor::randn(p.value.shape(), std, &mut rng);
            p.value = p.value.add(&noise).expect("same shape");
        }
    }
}

/// The three layouts whose invertibility is checked on `[2, 8, 8, 3]`.
pub fn invertibility_configs() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig {
        image: (8, 8, 3),
        hidden_channels: 8,
        ..ModelConfig::default()
    };
    vec![
        (
            "original (M=2)",
            ModelConfig {
                multiscale: MultiScale::Original,
                depths: vec![vec![2], vec![2]],
                ..base.clone()
            },
        ),
        ("fine-grained (M=4)", base.clone()),
        (
            "additive coupling",
            ModelConfig {
                coupling: CouplingMode::Additive,
                ..base
            },
        ),
    ]
}

/// `max |decode(encode(x)) - x|` for a randomly perturbed model of `cfg`.
pub fn model_roundtrip<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<T>::build(cfg, &mut rng)?;
    perturb_model(&mut model, 0.05, seed + 1);
    let (h, w, c) = cfg.image;
    let x = Tensor::<T>::randn(Shape::new(2, h, w, c), 1.0, &mut rng);
    let (z, _) = model.encode(&x)?;
    Ok(model.decode(&z)?.max_abs_diff(&x))
}

/// One level, 32 input dims: small enough for a dense Jacobian of the whole
/// map from image to concatenated latents.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        levels: 1,
        depths: vec![vec![1, 1]],
        hidden_channels: 4,
        kernel: (2, 3),
        image: (4, 4, 2),
        ..ModelConfig::default()
    }
}

/// `(analytic, brute-force)` log-determinant of the whole model at one input.
pub fn model_logdet(seed: u64) -> Result<(f64, f64)> {
    let cfg = small_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::build(&cfg, &mut rng)?;
    perturb_model(&mut model, 0.2, seed + 1);
    let (h, w, c) = cfg.image;
    let x = Tensor::randn(Shape::new(1, h, w, c), 1.0, &mut rng);
    let (_, ld) = model.encode(&x)?;
    let brute = brute_force_logdet(
        |t| {
            let (z, _) = model.encode(t)?;
            Ok(z.zs.into_iter().flat_map(|z| z.into_vec()).collect())
        },
        &x,
    )?;
    Ok((ld[0], brute))
}

/// Dense-Jacobian structure of one masked flow on `[1, h, w, 1]`.
#[derive(Clone, Debug)]
pub struct LocalityCheck {
    pub orientation: Orientation,
    /// Non-zero pattern equals the declared receptive field plus the diagonal.
    pub pattern_matches: bool,
    /// No entry above the diagonal under the orientation's order.
    pub triangular: bool,
    /// Largest relative deviation of `J[t, t]` from `s(x_ctx)`.
    pub diagonal_error: f64,
}

pub fn mask_locality(
    orientation: Orientation,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<LocalityCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MaskSpec::with_default_kernel(orientation);
    let mut flow = MaskedConvFlow::<f64>::new("locality", spec, 1, 0)?;
    flow.randomize(0.5, &mut rng);
    let x = Tensor::randn(Shape::new(1, h, w, 1), 1.0, &mut rng);
    let d = h * w;
    let jac = dense_jacobian(
        |t| Ok(apply(&flow, t, None)?.0.into_vec()),
        &x,
        oracles::FD_EPS,
    )?;
    let offsets = spec.offsets()?;
    let order = autoregressive_order(orientation, h, w);
    let mut rank = vec![0; d];
    for (k, &(r, c)) in order.iter().enumerate() {
        rank[r * w + c] = k;
    }
    let mut pattern_matches = true;
    let mut triangular = true;
    let mut diagonal_error: f64 = 0.0;
    for (r, c) in (0..h).flat_map(|r| (0..w).map(move |c| (r, c))) {
        let row = r * w + c;
        for (rr, cc) in (0..h).flat_map(|r| (0..w).map(move |c| (r, c))) {
            let col = rr * w + cc;
            let dy = rr as isize - r as isize;
            let dx = cc as isize - c as isize;
            let declared = row == col || offsets.contains(&(dy, dx));
            let v = jac[row * d + col];
            pattern_matches &= declared == (v != 0.0);
            if v != 0.0 && rank[col] > rank[row] {
                triangular = false;
            }
        }
        let (s, _) = direct_scale_shift(&flow, &x, None, 0, r, c)[0];
        diagonal_error = diagonal_error.max(rel_err(jac[row * d + row], s));
    }
    Ok(LocalityCheck {
        orientation,
        pattern_matches,
        triangular,
        diagonal_error,
    })
}

/// Fast versus sequential inversion of one randomly parameterized flow.
#[derive(Clone, Debug)]
pub struct InversionCheck {
    pub orientation: Orientation,
    pub max_diff: f64,
    pub fast_count: usize,
    pub oracle_count: usize,
    pub expected_fast: usize,
}

pub fn inversion_equivalence(
    orientation: Orientation,
    shape: Shape,
    seed: u64,
) -> Result<InversionCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = MaskedConvFlow::<f64>::new(
        "seq",
        MaskSpec::with_default_kernel(orientation),
        shape.c(),
        0,
    )?;
    flow.randomize(0.1, &mut rng);
    let y = Tensor::randn(shape, 1.0, &mut rng);
    let mut stats = InverseStats::default();
    let fast = flow.inverse_counted(&y, None, &mut stats)?;
    let slow = sequential_inversion_oracle(&flow, &y, None)?;
    Ok(InversionCheck {
        orientation,
        max_diff: fast.max_abs_diff(&slow.x),
        fast_count: stats.conv_applications,
        oracle_count: slow.conv_applications,
        expected_fast: if orientation.is_vertical() {
            shape.h()
        } else {
            shape.w()
        },
    })
}

/// Toy models plus variational dequantizer, each with at most 500
/// parameters. One channel cannot fit masked-convolution units in both the
/// model and the dequantizer under that budget, so the first toy carries
/// them in the model and the second in the dequantizer.
pub fn gradient_toy_configs() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig {
        levels: 1,
        depths: vec![vec![1]],
        hidden_channels: 1,
        kernel: (2, 1),
        units_per_step: 1,
        image: (4, 4, 1),
        n_bits: 3,
        dequant: DequantMode::Variational,
        dequant_units: 0,
        dequant_hidden_channels: 1,
        dequant_context_channels: 1,
        ..ModelConfig::default()
    };
    vec![
        ("model units", base.clone()),
        (
            "dequantizer units",
            ModelConfig {
                units_per_step: 0,
                dequant_units: 1,
                ..base
            },
        ),
    ]
}

#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub params: usize,
    /// Norm-wise relative error over the full gradient vector.
    pub relative_error: f64,
    /// Largest `|analytic - numeric| / max(|numeric|, 1)` over entries.
    pub max_entry_error: f64,
}

/// Compares the taped gradient of the full objective with central
/// differences in every trainable parameter.
pub fn gradient_check(cfg: &ModelConfig, seed: u64) -> Result<GradientCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dm = DensityModel::<f64>::build(cfg, &mut rng)?;
    let (h, w, c) = cfg.image;
    let top = 1u8 << cfg.n_bits;
    let pixels = Tensor::<u8>::from_vec(
        Shape::new(2, h, w, c),
        (0..2 * h * w * c)
            .map(|i| (i as u8 * 5 + 1) % top)
            .collect(),
    )?;
    let x = to_real::<f64>(&pixels, cfg.n_bits)?;
    let noise = dm.draw_noise(2, &mut rng);
    dm.initialize(&x, &noise)?;
    for p in dm.params_mut() {
        if p.trainable {
            let n = Tensor::randn(p.value.shape(), 0.1, &mut rng);
            p.value = p.value.add(&n)?;
        }
    }
    let (_, grads) = loss_and_grads(&dm, &x, &noise)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.to_f64_vec()).collect();

    let objective = |m: &DensityModel<f64>| -> Result<f64> {
        let tape = Tape::new();
        Ok(m.nll_objective(&tape, &x, &noise)?.value().item())
    };
    let eps = oracles::FD_EPS;
    let mut probe = dm.clone();
    let trainable: Vec<usize> = dm
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, _)| i)
        .collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for &pi in &trainable {
        let len = dm.params()[pi].value.len();
        for k in 0..len {
            let orig = probe.params()[pi].value.data()[k];
            probe.params_mut()[pi].value.data_mut()[k] = orig + eps;
            let up = objective(&probe)?;
            probe.params_mut()[pi].value.data_mut()[k] = orig - eps;
            let down = objective(&probe)?;
            probe.params_mut()[pi].value.data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    let max_entry_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max);
    Ok(GradientCheck {
        params: dm.param_count(),
        relative_error: relative_error(&analytic, &numeric),
        max_entry_error,
    })
}

/// Every oracle check. Log-det, locality, sequential and gradient checks
/// always run in `f64`; model round-trips run at precision `T`.
pub fn run_suite<T: Real>(seed: u64) -> SuiteReport {
    let mut report = SuiteReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match registry(&mut rng) {
        Ok(cases) => {
            for case in &cases {
                let name = format!("layer {:?}", case.kind);
                report.record(
                    &name,
                    check_case(case).map(|r| {
                        let ok = r.logdet_error() < LOGDET_RTOL && r.roundtrip < 1e-8;
                        (
                            ok,
                            format!(
                                "{} logdet {:.8} vs dense {:.8} (rel {:.1e}), roundtrip {:.1e}",
                                r.describe,
                                r.analytic,
                                r.brute,
                                r.logdet_error(),
                                r.roundtrip
                            ),
                        )
                    }),
                );
            }
        }
        Err(e) => report.push("layer registry", false, format!("error: {e}")),
    }
    report.record(
        "model logdet",
        model_logdet(seed).map(|(a, b)| {
            (
                rel_err(a, b) < LOGDET_RTOL,
                format!(
                    "analytic {a:.8} vs dense {b:.8} (rel {:.1e})",
                    rel_err(a, b)
                ),
            )
        }),
    );
    let tol = T::ROUNDTRIP_TOL;
    for (name, cfg) in invertibility_configs() {
        report.record(
            &format!("roundtrip {name} ({:?})", T::DTYPE),
            model_roundtrip::<T>(&cfg, seed)
                .map(|e| (e < tol, format!("max error {e:.2e} (tol {tol:.0e})"))),
        );
    }
    for o in Orientation::ALL {
        report.record(
            &format!("mask locality {o}"),
            mask_locality(o, 4, 4, seed).map(|r| {
                (
                    r.pattern_matches && r.triangular && r.diagonal_error < 1e-8,
                    format!(
                        "pattern {}, triangular {}, diagonal error {:.1e}",
                        r.pattern_matches, r.triangular, r.diagonal_error
                    ),
                )
            }),
        );
        report.record(
            &format!("sequential inverse {o}"),
            inversion_equivalence(o, Shape::new(2, 6, 5, 2), seed).map(|r| {
                (
                    r.max_diff < SEQUENTIAL_TOL
                        && r.fast_count == r.expected_fast
                        && r.oracle_count == 30,
                    format!(
                        "max diff {:.1e}, {} slice convs vs {} sequential",
                        r.max_diff, r.fast_count, r.oracle_count
                    ),
                )
            }),
        );
    }
    for (name, cfg) in gradient_toy_configs() {
        report.record(
            &format!("objective gradient ({name})"),
            gradient_check(&cfg, seed).map(|g| {
                (
                    g.params <= 500 && g.relative_error < GRAD_RTOL,
                    format!(
                        "{} params, relative error {:.1e} (max entry {:.1e})",
                        g.params, g.relative_error, g.max_entry_error
                    ),
                )
            }),
        );
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_toys_are_small() {
        for (name, cfg) in gradient_toy_configs() {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let dm = DensityModel::<f64>::build(&cfg, &mut rng).unwrap();
            assert!(dm.param_count() <= 500, "{name}: {}", dm.param_count());
        }
    }

    #[test]
    fn full_suite_passes_in_f64() {
        let r = run_suite::<f64>(0);
        for c in &r.checks {
            eprintln!("{c}");
        }
        assert!(r.all_passed());
    }

    #[test]
    fn small_model_fits_dense_oracle() {
        assert!(small_model_config().dims() <= oracles::MAX_DENSE_DIMS);
    }
}
