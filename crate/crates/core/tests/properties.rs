//! Randomized invariants across modules.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use macow::autodiff::Tape;
use macow::layers::{apply, FlowLayer, InverseStats, Squeeze};
use macow::mcf::{build_mask, MaskSpec, MaskedConvFlow, McfUnit, Orientation};
use macow::model::{parse_depths, ModelConfig};
use macow::tensor::{Shape, Tensor};
use macow::train::LrSchedule;
use macow::verify::sequential_inversion_oracle;

fn orientation() -> impl Strategy<Value = Orientation> {
    prop::sample::select(Orientation::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_flow_inverse_matches_oracle(
        o in orientation(),
        kh in 1usize..4,
        kw in 1usize..4,
        h in 1usize..6,
        w in 1usize..6,
        c in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MaskSpec::new(o, kh, kw).unwrap();
        let mut f = MaskedConvFlow::<f64>::new("p", spec, c, 0).unwrap();
        f.randomize(0.1, &mut rng);
        let x = Tensor::randn(Shape::new(2, h, w, c), 1.0, &mut rng);
        let (y, _) = apply(&f, &x, None).unwrap();
        let mut stats = InverseStats::default();
        let fast = f.inverse_counted(&y, None, &mut stats).unwrap();
        let slow = sequential_inversion_oracle(&f, &y, None).unwrap();
        prop_assert!(fast.max_abs_diff(&x) < 1e-9);
        prop_assert!(fast.max_abs_diff(&slow.x) < 1e-10);
        prop_assert_eq!(stats.conv_applications, if o.is_vertical() { h } else { w });
        prop_assert_eq!(slow.conv_applications, h * w);
    }

    #[test]
    fn mask_never_reads_anchor_and_rotation_flips(o in orientation(), kh in 1usize..6, kw in 1usize..6) {
        let spec = MaskSpec::new(o, kh, kw).unwrap();
        let m = build_mask::<f64>(&spec).unwrap();
        prop_assert_eq!(m.at(0, 0, spec.anchor.0, spec.anchor.1), 0.0);
        let opposite = match o {
            Orientation::Top => Orientation::Bottom,
            Orientation::Bottom => Orientation::Top,
            Orientation::Left => Orientation::Right,
            Orientation::Right => Orientation::Left,
        };
        let mut a = spec.offsets().unwrap();
        let mut b: Vec<(isize, isize)> = MaskSpec::new(opposite, kh, kw)
            .unwrap()
            .offsets()
            .unwrap()
            .into_iter()
            .map(|(dy, dx)| (-dy, -dx))
            .collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn unit_logdet_is_sum_of_members(seed in any::<u64>(), index in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = McfUnit::<f64>::standard("u", index, (2, 3), 2, 0).unwrap();
        u.first.randomize(0.2, &mut rng);
        u.second.randomize(0.2, &mut rng);
        let x = Tensor::randn(Shape::new(2, 3, 4, 2), 1.0, &mut rng);
        let (y, total) = apply(&u, &x, None).unwrap();
        let (h1, l0) = apply(&u.actnorm, &x, None).unwrap();
        let (h2, l1) = apply(&u.first, &h1, None).unwrap();
        let (_, l2) = apply(&u.second, &h2, None).unwrap();
        for b in 0..2 {
            prop_assert!((total[b] - (l0[b] + l1[b] + l2[b])).abs() < 1e-10);
        }
        prop_assert!(u.inverse(&y, None).unwrap().max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn squeeze_roundtrips(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(Shape::new(1, 2 * h, 2 * w, c), 1.0, &mut rng);
        let (y, ld) = apply(&Squeeze, &x, None).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(1, h, w, 4 * c));
        prop_assert_eq!(ld, vec![0.0]);
        prop_assert_eq!(Squeeze.inverse(&y, None).unwrap(), x);
    }

    #[test]
    fn config_text_roundtrips(
        levels in 1usize..4,
        hidden in 1usize..64,
        units in 0usize..4,
        n_bits in 1u32..9,
        additive in any::<bool>(),
    ) {
        let side = 1usize << (levels + 1);
        let mut depths = vec![vec![1, 1]; levels];
        depths[levels - 1] = vec![1];
        let mut text = format!(
            "levels = {levels}\nhidden_channels = {hidden}\nunits_per_step = {units}\nn_bits = {n_bits}\n\
             image = {side}x{side}x1\n"
        );
        let d: Vec<String> = depths.iter().map(|b| format!("[{}]", b.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))).collect();
        text.push_str(&format!("depths = [{}]\n", d.join(",")));
        if additive {
            text.push_str("coupling = additive\n");
        }
        let cfg = ModelConfig::parse(&text).unwrap();
        prop_assert_eq!(&cfg.depths, &depths);
        prop_assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
        prop_assert_eq!(parse_depths(&format!("[{}]", d.join(","))).unwrap(), depths);
    }

    #[test]
    fn schedule_is_bounded_and_peaks_after_warmup(step in 0u64..100_000) {
        let s = LrSchedule::default();
        let lr = s.lr(step);
        prop_assert!((0.0..=s.lr0).contains(&lr));
        if step > s.warmup {
            prop_assert!(lr <= s.lr(s.warmup));
        }
    }

    #[test]
    fn gradient_of_sum_of_squares(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(Shape::new(1, 2, 2, 3), 1.0, &mut rng);
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = v.square().unwrap().sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.wrt(v).unwrap();
        for (a, b) in gx.data().iter().zip(x.data()) {
            prop_assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }
}
