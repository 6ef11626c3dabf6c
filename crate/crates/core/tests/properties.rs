//! Property tests over the module invariants.

use genreg::codec;
use genreg::data::{split, synth_longtail, SynthParams};
use genreg::tape::Tape;
use genreg::tensor::Tensor;
use genreg::training::{huber, sampling_rate, DecayStrategy, ScheduleConfig};
use genreg::vocab::build_manual;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    // Softmax rows are probability vectors, even for extreme inputs.
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-500.0f64..500.0, 6..24)) {
        let cols = 3;
        let rows = values.len() / cols;
        let t = Tensor::from_vec(rows, cols, values[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let s = tape.softmax(v);
        let out = tape.value(s);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
        }
    }

    // Greedy encodings are non-increasing in decoded value, respect the
    // length cap, and contain only value tokens.
    #[test]
    fn encode_invariants(
        mut raw_values in prop::collection::vec(0.01f64..200.0, 1..10),
        y in 0.0f64..500.0,
        t_max in 1usize..16,
    ) {
        raw_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        raw_values.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        let vocab = build_manual(&raw_values).unwrap();
        let seq = codec::encode(y, &vocab, t_max).unwrap();
        prop_assert!(seq.len() <= t_max);
        prop_assert!(codec::is_non_increasing(&seq.ids, &vocab).unwrap());
        prop_assert!(seq.ids.iter().all(|id| vocab.is_value_id(*id)));
        // Decoded sum plus residual reconstructs the target.
        let back = codec::decode(&seq.ids, &vocab).unwrap();
        prop_assert!((back + seq.encoding_error - y).abs() < 1e-6 * y.max(1.0));
    }

    // decode ignores ordering exactly.
    #[test]
    fn decode_is_order_insensitive(perm_seed in 0u64..1000) {
        let vocab = build_manual(&[30.0, 10.0, 5.0, 1.0, 0.5, 0.1]).unwrap();
        let seq = codec::encode(46.6, &vocab, 32).unwrap();
        let forward = codec::decode(&seq.ids, &vocab).unwrap();
        let mut rng = genreg::rng::Rng::new(perm_seed);
        let mut ids = seq.ids.clone();
        rng.shuffle(&mut ids);
        let shuffled = codec::decode(&ids, &vocab).unwrap();
        prop_assert_eq!(forward.to_bits(), shuffled.to_bits());
    }

    // Every schedule stays inside [0, 1] for any iteration.
    #[test]
    fn sampling_rate_is_clamped(
        strategy_pick in 0usize..4,
        p0 in 0.0f64..2.0,
        omega in 0.1f64..500.0,
        slope in 0.0f64..1.0,
        rate in 0.0f64..1.0,
        fixed in -0.5f64..1.5,
        tau in 0u64..100_000,
    ) {
        let strategy = [
            DecayStrategy::Sigmoid,
            DecayStrategy::Linear,
            DecayStrategy::Exponential,
            DecayStrategy::Fixed,
        ][strategy_pick];
        let cfg = ScheduleConfig {
            strategy,
            p0,
            omega,
            linear_slope: slope,
            exp_rate: rate,
            fixed_value: fixed,
        };
        let p = sampling_rate(&cfg, tau);
        prop_assert!((0.0..=1.0).contains(&p), "p = {p}");
    }

    // Huber is continuous at the quadratic/linear boundary and
    // nonnegative everywhere.
    #[test]
    fn huber_continuity(delta in 0.01f64..10.0, y in -50.0f64..50.0) {
        let at = |d: f64| huber(y, y + d, delta);
        prop_assert!((at(delta - 1e-9) - at(delta + 1e-9)).abs() < 1e-6);
        prop_assert!((at(-delta) - at(delta)).abs() < 1e-12, "huber must be symmetric");
        for d in [-2.0 * delta, -delta / 2.0, 0.0, delta / 2.0, 2.0 * delta] {
            prop_assert!(at(d) >= 0.0);
        }
    }

    // Splits are disjoint, exhaustive, and seed-stable.
    #[test]
    fn split_partitions(n in 2usize..200, ratio in 0.05f64..0.95, seed in 0u64..100) {
        let ds = synth_longtail(n, 2, seed, SynthParams::default()).unwrap();
        let (a, b) = split(&ds, ratio, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert!(a.len() >= 1 && b.len() >= 1);
        let mut joined: Vec<(Vec<u64>, u64)> = a
            .features
            .iter()
            .zip(&a.targets)
            .chain(b.features.iter().zip(&b.targets))
            .map(|(x, y)| (x.iter().map(|v| v.to_bits()).collect(), y.to_bits()))
            .collect();
        let mut orig: Vec<(Vec<u64>, u64)> = ds
            .features
            .iter()
            .zip(&ds.targets)
            .map(|(x, y)| (x.iter().map(|v| v.to_bits()).collect(), y.to_bits()))
            .collect();
        joined.sort();
        orig.sort();
        prop_assert_eq!(joined, orig);
    }
}
