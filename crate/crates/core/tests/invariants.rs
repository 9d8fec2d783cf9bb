use asc_core::channel::{transmit, CsiVector};
use asc_core::entropy_model::{allocate_bandwidth, RateAllocation};
use asc_core::jscc_codec::power_normalize_vec;
use asc_core::metrics::{bd_psnr, bd_rate, cbr, CbrPolicy};
use asc_core::model_delta_codec::{
    decode_stream, encode_stream, ideal_bits, quantize, DeltaQuantConfig, QuantizedDelta,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const V: [usize; 4] = [2, 4, 8, 16];

fn sparse_indices() -> impl Strategy<Value = Vec<i32>> {
    prop::collection::vec(prop_oneof![8 => Just(0i32), 1 => -20i32..=20], 1..400)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_stream_round_trips(indices in sparse_indices()) {
        let cfg = DeltaQuantConfig::default();
        let qd = QuantizedDelta { indices, layout: Vec::new() };
        let bytes = encode_stream(&qd, &cfg).unwrap();
        let back = decode_stream(&bytes, qd.len(), &cfg).unwrap();
        prop_assert_eq!(back.indices, qd.indices);
    }

    #[test]
    fn delta_stream_stays_near_ideal_length(indices in sparse_indices()) {
        let cfg = DeltaQuantConfig::default();
        let qd = QuantizedDelta { indices, layout: Vec::new() };
        let bits = (encode_stream(&qd, &cfg).unwrap().len() * 8) as f64;
        let ideal = ideal_bits(&qd, &cfg);
        prop_assert!(bits >= ideal);
        prop_assert!(bits <= ideal + 128.0 + 64.0 + 1e-3 * qd.len() as f64, "{bits} vs {ideal}");
    }

    #[test]
    fn dequantized_deltas_requantize_to_themselves(xs in prop::collection::vec(-1.0f64..1.0, 1..200)) {
        let cfg = DeltaQuantConfig::default();
        let q = quantize(&xs, &cfg);
        prop_assert_eq!(quantize(&q.values(&cfg), &cfg), q);
    }

    #[test]
    fn normalized_symbols_have_unit_power(s in prop::collection::vec(-10.0f64..10.0, 1..300)) {
        prop_assume!(s.iter().any(|v| v.abs() > 1e-6));
        let out = power_normalize_vec(&s).unwrap();
        let p = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
        prop_assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn clean_unit_gain_link_is_identity(s in prop::collection::vec(-5.0f64..5.0, 1..300), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = transmit(&s, &CsiVector::ones(s.len()), 0.0, &mut rng).unwrap();
        prop_assert_eq!(out, s);
    }

    #[test]
    fn spans_tile_the_symbol_budget(rates in prop::collection::vec(0.0f64..200.0, 1..64), eta in 0.05f64..1.0) {
        let a = allocate_bandwidth(&rates, eta, &V).unwrap();
        let spans = a.spans();
        prop_assert_eq!(spans.len(), rates.len());
        let mut end = 0;
        for (sp, k) in spans.iter().zip(&a.k_bar) {
            prop_assert_eq!(sp.start, end);
            prop_assert_eq!(sp.len(), *k);
            end = sp.end;
        }
        prop_assert_eq!(end, a.total_symbols);
    }

    #[test]
    fn bandwidth_ratio_counts_symbols_and_side_info(
        k_bar in prop::collection::vec(prop::sample::select(V.to_vec()), 1..64),
        model_bits in 0.0f64..1e5,
        served in 1usize..40,
    ) {
        let m = 12288;
        let a = RateAllocation::from_k_bar(k_bar.clone(), 2);
        let (r, mr) = cbr(&a, CbrPolicy::default(), model_bits, m, served).unwrap();
        let expect = (k_bar.iter().sum::<usize>() as f64 + (2.0 * k_bar.len() as f64 / 2.0).ceil()) / m as f64;
        prop_assert!((r - expect).abs() < 1e-15);
        prop_assert!((mr - model_bits / 2.0 / m as f64 / served as f64).abs() < 1e-12);
    }

    #[test]
    fn identical_curves_have_no_bd_gap(r0 in 0.005f64..0.05, step in 1.1f64..1.6, p0 in 15.0f64..30.0, dp in 0.3f64..2.0) {
        let curve: Vec<(f64, f64)> = (0..4).map(|i| (r0 * step.powi(i), p0 + dp * i as f64)).collect();
        prop_assert!(bd_rate(&curve, &curve).unwrap().abs() < 1e-9);
        prop_assert!(bd_psnr(&curve, &curve).unwrap().abs() < 1e-9);
    }
}
