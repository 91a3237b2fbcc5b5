mod common;

use common::*;
use csfl_core::data::{parse_idx, partition_iid, partition_noniid, synth_blobs, to_idx, Dataset};
use csfl_core::delay::{phase0_delay, phase1_delay, phase2_delay, phase3_delay, round_delay};
use csfl_core::engine::Matrix;
use csfl_core::overhead::{overhead_csfl, overhead_locsplitfed, overhead_splitfed};
use csfl_core::planner::{plan, split_count};
use csfl_core::{LayerProfile, ModelProfile, OverheadMode, SplitConfig};
use proptest::prelude::*;

fn profile_strategy(min: usize, max: usize) -> impl Strategy<Value = ModelProfile> {
    prop::collection::vec((0u64..1_000_000, 0u32..1_000_000, 0u64..1_000_000), min..=max).prop_map(|ls| {
        ModelProfile::new(
            ls.into_iter()
                .map(|(a, f, s)| LayerProfile::new(a, f as f64).with_activation_bits(s))
                .collect(),
        )
        .unwrap()
    })
}

fn split_strategy(layers: usize) -> impl Strategy<Value = SplitConfig> {
    (1..layers - 1)
        .prop_flat_map(move |h| (Just(h), h + 1..layers))
        .prop_map(move |(h, v)| SplitConfig::new(h, v, layers).unwrap())
}

fn profile_and_split() -> impl Strategy<Value = (ModelProfile, SplitConfig)> {
    profile_strategy(3, 10).prop_flat_map(|p| {
        let n = p.len();
        (Just(p), split_strategy(n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segments_partition_the_model((p, s) in profile_and_split()) {
        let v_max = p.len();
        let parts = p.segment_flops(1, s.h()).unwrap()
            + p.segment_flops(s.h() + 1, s.v()).unwrap()
            + p.segment_flops(s.v() + 1, v_max).unwrap();
        prop_assert_eq!(parts, p.segment_flops(1, v_max).unwrap());
        let bits = p.segment_bits(1, s.h()).unwrap()
            + p.segment_bits(s.h() + 1, s.v()).unwrap()
            + p.segment_bits(s.v() + 1, v_max).unwrap();
        prop_assert_eq!(bits, p.segment_bits(1, v_max).unwrap());
    }

    #[test]
    fn invalid_splits_are_rejected(h in 0usize..12, v in 0usize..12, layers in 3usize..12) {
        let ok = h >= 1 && h < v && v < layers;
        prop_assert_eq!(SplitConfig::new(h, v, layers).is_ok(), ok);
    }

    #[test]
    fn delay_matches_the_array_oracle(seed in any::<u64>(), n in 2usize..8, layers in 3usize..9) {
        let mut rng = rng(seed);
        let k = 1 + (seed as usize % n);
        let raw = RawFleet::random(&mut rng, n, k);
        let fleet = raw.to_fleet();
        let p = random_profile(&mut rng, layers);
        for h in 1..layers - 1 {
            for v in h + 1..layers {
                let s = SplitConfig::new(h, v, layers).unwrap();
                let got = [
                    phase0_delay(&p, &fleet, s).unwrap(),
                    phase1_delay(&p, &fleet, s).unwrap(),
                    phase2_delay(&p, &fleet, s).unwrap(),
                    phase3_delay(&p, &fleet, s).unwrap(),
                ];
                let want = oracle_phases(&p, &raw, h, v);
                for (g, w) in got.iter().zip(&want) {
                    prop_assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{:?} vs {:?}", got, want);
                }
            }
        }
    }

    #[test]
    fn delay_is_monotone(seed in any::<u64>(), which in 0usize..8, factor in 1.0f64..4.0) {
        let mut rng = rng(seed);
        let raw = RawFleet::random(&mut rng, 5, 2);
        let p = random_profile(&mut rng, 6);
        let s = SplitConfig::new(2, 4, 6).unwrap();
        let base = round_delay(&p, &raw.to_fleet(), s, 2, 3).unwrap().d_round;

        // faster hardware or links never slow a round down
        let mut faster = raw.clone();
        let i = seed as usize % 5;
        match which {
            0 => faster.speed[i] *= factor,
            1 => faster.server_speed *= factor,
            2 => faster.down[i] *= factor,
            3 => faster.up[i] *= factor,
            4 => faster.to_agg[i] *= factor,
            5 => faster.from_agg[i] *= factor,
            _ => faster.speed.iter_mut().for_each(|x| *x *= factor),
        }
        let d = round_delay(&p, &faster.to_fleet(), s, 2, 3).unwrap().d_round;
        prop_assert!(d <= base * (1.0 + 1e-12));

        // heavier layers never speed it up
        let mut layers = p.layers().to_vec();
        let j = seed as usize % layers.len();
        match which % 3 {
            0 => layers[j].weight_bits = (layers[j].weight_bits as f64 * factor) as u64,
            1 => layers[j].flops *= factor,
            _ => layers[j].activation_bits = (layers[j].activation_bits as f64 * factor) as u64,
        }
        let heavier = ModelProfile::new(layers).unwrap();
        let fleet = raw.to_fleet();
        prop_assert!(round_delay(&heavier, &fleet, s, 2, 3).unwrap().d_round >= base * (1.0 - 1e-12));
        prop_assert!(round_delay(&p, &fleet, s, 3, 3).unwrap().d_round >= base);
        prop_assert!(round_delay(&p, &fleet, s, 2, 4).unwrap().d_round >= base);
    }

    #[test]
    fn delay_scales_inversely_with_speed(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut rng = rng(seed);
        let raw = RawFleet::random(&mut rng, 6, 2);
        let fleet = raw.to_fleet();
        let p = random_profile(&mut rng, 5);
        let s = SplitConfig::new(1, 3, 5).unwrap();
        let a = round_delay(&p, &fleet, s, 2, 2).unwrap();
        let b = round_delay(&p, &fleet.scaled(c), s, 2, 2).unwrap();
        for (x, y) in [(a.d0, b.d0), (a.d1, b.d1), (a.d2, b.d2), (a.d3, b.d3)] {
            prop_assert!((x / c - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
        prop_assert_eq!(a, round_delay(&p, &fleet, s, 2, 2).unwrap());
    }

    #[test]
    fn overhead_is_linear_in_clients_and_batches((p, s) in profile_and_split(), n in 1usize..50, b in 1usize..40, m in 2usize..5) {
        let verb = OverheadMode::VERBATIM;
        let n2 = 2 * n;
        let one = overhead_csfl(&p, n2, b, s, 0.5, verb).unwrap();
        let more = overhead_csfl(&p, m * n2, b, s, 0.5, verb).unwrap();
        prop_assert_eq!(more.bits_per_round, m as f64 * one.bits_per_round);
        let sfl = overhead_splitfed(&p, n, b, s.v(), verb).unwrap();
        prop_assert_eq!(overhead_splitfed(&p, m * n, b, s.v(), verb).unwrap().bits_per_round, m as f64 * sfl.bits_per_round);
        let sfl_b = overhead_splitfed(&p, n, m * b, s.v(), verb).unwrap();
        prop_assert_eq!(sfl_b.activations_bits, m as f64 * sfl.activations_bits);
        prop_assert_eq!(sfl_b.model_exchange_bits, sfl.model_exchange_bits);
        let loc = overhead_locsplitfed(&p, n, b, s.v(), verb).unwrap();
        prop_assert!(loc.bits_per_round <= sfl.bits_per_round);
        prop_assert_eq!(
            loc.bits_per_round == sfl.bits_per_round,
            p.activation_bits(s.v()).unwrap() * b as u64 == 0
        );
    }

    #[test]
    fn planner_invariants(seed in any::<u64>(), layers in 3usize..10, min_h in 1usize..3) {
        prop_assume!(min_h <= layers - 2);
        let mut rng = rng(seed);
        let raw = RawFleet::random(&mut rng, 4, 2);
        let fleet = raw.to_fleet();
        let p = random_profile(&mut rng, layers);
        let r = plan(&p, &fleet, 2, 3, min_h).unwrap();
        prop_assert_eq!(r.candidates.len(), split_count(layers, min_h));
        prop_assert_eq!(r.evaluations, r.candidates.len());
        prop_assert_eq!(round_delay(&p, &fleet, r.best, 2, 3).unwrap(), r.best_delay);
        prop_assert!(r.candidates.iter().all(|c| r.best_delay.d_round <= c.delay.d_round));
        let mut pairs: Vec<_> = r.candidates.iter().map(|c| c.split).collect();
        pairs.sort();
        pairs.dedup();
        prop_assert_eq!(pairs.len(), r.candidates.len());
    }

    #[test]
    fn partitions_are_partitions(seed in any::<u64>(), n in 1usize..20, spc in 1usize..4) {
        let d = synth_blobs(4, 3, 30, 0.2, seed).unwrap();
        for shards in [partition_iid(&d, n, seed).unwrap(), partition_noniid(&d, n, spc, seed).unwrap()] {
            let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(&all, &d.train);
            prop_assert_eq!(shards.len(), n);
        }
        let iid = partition_iid(&d, n, seed).unwrap();
        let (lo, hi) = iid.iter().fold((usize::MAX, 0), |(lo, hi), s| (lo.min(s.len()), hi.max(s.len())));
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(iid, partition_iid(&d, n, seed).unwrap());
    }

    #[test]
    fn idx_round_trip(bytes in prop::collection::vec(any::<u8>(), 1..64), labels in prop::collection::vec(0usize..10, 1..8)) {
        let rows = labels.len();
        let cols = bytes.len();
        let data: Vec<f64> = (0..rows * cols).map(|i| bytes[i % cols] as f64 / 255.0).collect();
        let d = Dataset {
            inputs: Matrix::from_vec(rows, cols, data).unwrap(),
            num_classes: 10,
            train: (0..rows).collect(),
            test: vec![],
            labels,
        };
        let (img, lbl) = to_idx(&d).unwrap();
        let back = parse_idx(&img, &lbl).unwrap();
        prop_assert_eq!(back.inputs.as_slice(), d.inputs.as_slice());
        prop_assert_eq!(back.labels, d.labels);
    }
}
