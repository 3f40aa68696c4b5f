//! Property tests for structural invariants that must hold on arbitrary
//! inputs, not just hand-picked examples.

use petforge_core::backbone::BackboneConfig;
use petforge_core::io;
use petforge_core::metrics::{self, DcfParams};
use petforge_core::params::{Binder, LrGroup, ParamRegistry};
use petforge_core::sv;
use petforge_core::train::{LrSpec, Schedule};
use petforge_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn scored_trials() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(any::<bool>(), n - 2),
        )
            .prop_map(|(scores, mut tail)| {
                // guarantee at least one trial of each class
                let mut labels = vec![true, false];
                labels.append(&mut tail);
                (scores, labels)
            })
    })
}

proptest! {
    /// Softmax rows are a probability distribution regardless of input.
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = petforge_core::data::seeded_rng(seed, 50, 0);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mut reg = ParamRegistry::<f64>::new();
        reg.insert("x", Tensor::new(vec![rows, cols], data).unwrap(), false, LrGroup::B).unwrap();
        let mut b = Binder::new(&reg, false);
        let x = b.var("x").unwrap();
        let s = b.tape.softmax(x, 1).unwrap();
        let out = b.tape.value(s);
        for r in 0..rows {
            let sum: f64 = (0..cols).map(|c| out.data()[r * cols + c]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!((0..cols).all(|c| out.data()[r * cols + c] > 0.0));
        }
    }

    /// EER and minDCF depend only on the score ordering: any strictly
    /// increasing transform leaves them unchanged.
    #[test]
    fn metrics_invariant_under_monotone_transforms(
        (scores, labels) in scored_trials(),
        a in 0.1f64..4.0,
        b in -2.0f64..2.0,
    ) {
        let transformed: Vec<f64> = scores.iter().map(|s| a * s + b + s.powi(3) * 0.01).collect();
        let p = DcfParams::default();
        let eer1 = metrics::compute_eer(&scores, &labels).unwrap();
        let eer2 = metrics::compute_eer(&transformed, &labels).unwrap();
        prop_assert!((eer1 - eer2).abs() < 1e-9, "{eer1} vs {eer2}");
        let dcf1 = metrics::compute_min_dcf(&scores, &labels, &p).unwrap();
        let dcf2 = metrics::compute_min_dcf(&transformed, &labels, &p).unwrap();
        prop_assert!((dcf1 - dcf2).abs() < 1e-12, "{dcf1} vs {dcf2}");
    }

    /// EER and minDCF are always valid rates.
    #[test]
    fn metrics_are_bounded((scores, labels) in scored_trials()) {
        let eer = metrics::compute_eer(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&eer));
        let dcf = metrics::compute_min_dcf(&scores, &labels, &DcfParams::default()).unwrap();
        prop_assert!(dcf >= 0.0);
    }

    /// Statistics pooling is invariant to frame order.
    #[test]
    fn stats_pool_is_permutation_invariant(
        frames in 2usize..8,
        dim in 1usize..5,
        seed in any::<u64>(),
        rot in 1usize..7,
    ) {
        let mut rng = petforge_core::data::seeded_rng(seed, 51, 0);
        let data: Vec<f64> = (0..frames * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut rows: Vec<Vec<f64>> = data.chunks(dim).map(|c| c.to_vec()).collect();
        let pool = |rows: &[Vec<f64>]| -> Vec<f64> {
            let reg = ParamRegistry::<f64>::new();
            let mut b = Binder::new(&reg, false);
            let x = b.tape.constant(
                Tensor::new(vec![rows.len(), dim], rows.concat()).unwrap(),
            );
            let p = sv::stats_pool(&mut b, x).unwrap();
            b.tape.value(p).data().to_vec()
        };
        let before = pool(&rows);
        rows.rotate_left(rot % frames);
        rows.swap(0, frames - 1);
        let after = pool(&rows);
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    /// The learning rate never exceeds the peak, and after warmup never
    /// drops below the floor (the warmup ramp starts near zero by design).
    #[test]
    fn schedule_stays_within_bounds(
        total in 2u64..400,
        frac in 0.01f64..0.9,
        peak in 1e-6f64..1.0,
        floor_ratio in 0.0f64..1.0,
    ) {
        let spec = LrSpec { peak, floor: peak * floor_ratio };
        let warmup = (1 + ((total - 1) as f64 * frac) as u64).min(total - 1);
        let sched = Schedule::new(warmup, total).unwrap();
        for step in 0..total {
            let lr = sched.rate(spec, step);
            prop_assert!(lr > 0.0 || spec.floor == 0.0, "step {step}: lr {lr}");
            prop_assert!(lr <= spec.peak * (1.0 + 1e-12), "step {step}: {lr} > {}", spec.peak);
            if step >= warmup {
                prop_assert!(lr >= spec.floor, "step {step}: {lr} < {}", spec.floor);
            }
        }
    }

    /// Weights containers round-trip arbitrary tensors bit-exactly.
    #[test]
    fn weights_container_roundtrip(
        tensors in prop::collection::vec(
            (
                "[a-z][a-z0-9_.]{0,20}",
                prop::collection::vec(1usize..5, 1..3),
                any::<u64>(),
            ),
            1..6,
        ),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.petw");
        let mut named: Vec<(String, Tensor<f64>)> = Vec::new();
        for (i, (name, shape, seed)) in tensors.into_iter().enumerate() {
            let mut rng = petforge_core::data::seeded_rng(seed, 52, i as u64);
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1e3..1e3)).collect();
            // names must be unique within one container
            named.push((format!("{name}{i}"), Tensor::new(shape, data).unwrap()));
        }
        let refs: Vec<(&str, &Tensor<f64>)> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        io::save_tensors(&path, &refs).unwrap();
        let back = io::load_tensors::<f64>(&path).unwrap();
        prop_assert_eq!(named.len(), back.len());
        for ((n1, t1), (n2, t2)) in named.iter().zip(&back) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            prop_assert_eq!(t1.to_le_bytes(), t2.to_le_bytes());
        }
    }

    /// The convolutional frame count never decreases when the input grows.
    #[test]
    fn conv_out_len_is_monotone(extra in 0usize..2000) {
        let cfg = BackboneConfig::desk();
        let base = cfg.min_input_len();
        let shorter = cfg.conv_out_len(base + extra).unwrap();
        let longer = cfg.conv_out_len(base + extra + 1).unwrap();
        prop_assert!(longer >= shorter);
        prop_assert!(longer >= 1);
    }
}
