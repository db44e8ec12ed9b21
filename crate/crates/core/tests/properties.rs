//! Property tests for invariants that hold over whole input families
//! rather than single examples.

use ecgrecon::autodiff::{Graph, Tensor};
use ecgrecon::ecg::{derive_augmented_leads, EcgRecord, LeadId};
use ecgrecon::masking::{apply_mask, primer_mask, MaskConfig};
use ecgrecon::metrics::{dtw, mae, pcc, rmse, MaeMode};
use ecgrecon::preprocess::{minmax_normalize, NormalizeScope};
use proptest::prelude::*;

fn small_signal(len: usize) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-1.0f32..1.0, len..=len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn einthoven_identity_holds(
        i in small_signal(32),
        ii in small_signal(32),
    ) {
        let [iii, avr, avl, avf] = derive_augmented_leads(&i, &ii).unwrap();
        for k in 0..32 {
            let scale = i[k].abs().max(ii[k].abs()).max(1.0);
            prop_assert!((i[k] + iii[k] - ii[k]).abs() <= 4.0 * f32::EPSILON * scale);
            prop_assert!((avr[k] + (i[k] + ii[k]) / 2.0).abs() <= 4.0 * f32::EPSILON * scale);
            prop_assert!((avl[k] - (i[k] - ii[k] / 2.0)).abs() <= 4.0 * f32::EPSILON * scale);
            prop_assert!((avf[k] - (ii[k] - i[k] / 2.0)).abs() <= 4.0 * f32::EPSILON * scale);
        }
    }

    #[test]
    fn segment_masks_partition_time(k in 1u8..=5, n in 12usize..400) {
        let mask = primer_mask(MaskConfig::Segment(k), n).unwrap();
        let mut coverage = vec![0usize; n];
        for lead in LeadId::ALL {
            for (idx, &keep) in mask.lead_row(lead).iter().enumerate() {
                if keep {
                    coverage[idx] += 1;
                }
            }
        }
        // Exactly one lead group covers each column, and each group keeps
        // one contiguous run.
        let groups = ecgrecon::masking::MaskConfig::group_count(k).unwrap();
        let per_group = 12 / groups;
        prop_assert!(coverage.iter().all(|&c| c == per_group));
        for lead in LeadId::ALL {
            let runs = mask.keep_ranges()[lead.ordinal()].len();
            prop_assert_eq!(runs, 1);
        }
    }

    #[test]
    fn masking_preserves_primers_for_any_seed(seed in any::<u64>(), n in 24usize..200) {
        let samples: Vec<f32> = (0..12 * n).map(|i| ((i as f32) * 0.137).sin()).collect();
        let mut rec = EcgRecord::new("p", 51.2, samples, n).unwrap();
        rec.set_normalized().unwrap();
        let mask = primer_mask(MaskConfig::Random(seed), n).unwrap();
        let masked = apply_mask(&rec, &mask, seed ^ 0xabcd).unwrap();
        for lead in LeadId::ALL {
            for idx in 0..n {
                if mask.keep(lead, idx) {
                    prop_assert_eq!(masked.lead(lead)[idx], rec.lead(lead)[idx]);
                }
            }
        }
        prop_assert!(masked.samples.iter().zip(rec.samples()).all(
            |(&m, &r)| (0.0..=1.0).contains(&m) || m == r
        ));
    }

    #[test]
    fn normalization_maps_extremes_to_unit_range(values in small_signal(48)) {
        let spread = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
            - values.iter().cloned().fold(f32::INFINITY, f32::min);
        prop_assume!(spread > 1e-3);
        let mut samples = vec![0.0f32; 12 * 4];
        samples[..48].copy_from_slice(&values);
        let rec = EcgRecord::new("n", 500.0, samples, 4).unwrap();
        let (out, warnings) = minmax_normalize(&rec, NormalizeScope::PerRecord).unwrap();
        prop_assert!(warnings.is_empty());
        let lo = out.samples().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = out.samples().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!((lo + 1.0).abs() < 1e-5);
        prop_assert!((hi - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rmse_dominates_mean_absolute_error(a in small_signal(40), b in small_signal(40)) {
        prop_assert!(rmse(&a, &b) + 1e-12 >= mae(&a, &b, MaeMode::Mean));
    }

    #[test]
    fn pcc_is_symmetric(a in small_signal(40), b in small_signal(40)) {
        prop_assert!((pcc(&a, &b, 1e-8) - pcc(&b, &a, 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn dtw_matches_brute_force_on_random_floats(
        a in proptest::collection::vec(-2.0f32..2.0, 1..6),
        b in proptest::collection::vec(-2.0f32..2.0, 1..6),
    ) {
        fn brute(a: &[f32], b: &[f32], i: usize, j: usize, acc: f64, best: &mut f64) {
            let cost = acc + (a[i] as f64 - b[j] as f64).abs();
            if cost >= *best {
                return;
            }
            if i == a.len() - 1 && j == b.len() - 1 {
                *best = cost;
                return;
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                brute(a, b, i + 1, j + 1, cost, best);
            }
            if i + 1 < a.len() {
                brute(a, b, i + 1, j, cost, best);
            }
            if j + 1 < b.len() {
                brute(a, b, i, j + 1, cost, best);
            }
        }
        let mut best = f64::INFINITY;
        brute(&a, &b, 0, 0, 0.0, &mut best);
        let got = dtw(&a, &b, false).unwrap();
        prop_assert!((got - best).abs() <= 1e-9 * best.max(1.0));
    }

    /// <conv(x), y> == <x, conv_transpose(y)> with the same weight memory
    /// (layouts [Co,Ci,kh,kw] and [Ci',Co',kh,kw] coincide for the adjoint).
    #[test]
    fn conv2d_and_transpose_are_adjoint(
        seed in any::<u64>(),
        ci in 1usize..3,
        co in 1usize..3,
        h in 4usize..7,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w_len = 10usize; // even width, stride 2, kernel 4, pad 1 divides exactly
        let (kh, kw) = (3usize, 4usize);
        let (stride, pad) = ((1usize, 2usize), (1usize, 1usize));
        let h_out = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let w_out = (w_len + 2 * pad.1 - kw) / stride.1 + 1;

        let rand_vec = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let x = Tensor::new(vec![ci, h, w_len], rand_vec(&mut rng, ci * h * w_len)).unwrap();
        let w_data = rand_vec(&mut rng, co * ci * kh * kw);
        let y = Tensor::new(vec![co, h_out, w_out], rand_vec(&mut rng, co * h_out * w_out)).unwrap();

        let mut g: Graph<f64> = Graph::new();
        let x_id = g.input(x.clone(), false);
        let w_conv = g.input(Tensor::new(vec![co, ci, kh, kw], w_data.clone()).unwrap(), false);
        let conv = g.conv2d(x_id, w_conv, stride, pad).unwrap();
        let lhs: f64 = g
            .value(conv)
            .data
            .iter()
            .zip(&y.data)
            .map(|(a, b)| a * b)
            .sum();

        let y_id = g.input(y, false);
        let w_t = g.input(Tensor::new(vec![co, ci, kh, kw], w_data).unwrap(), false);
        let adj = g.conv_transpose2d(y_id, w_t, stride, pad).unwrap();
        prop_assert_eq!(g.value(adj).shape.clone(), vec![ci, h, w_len]);
        let rhs: f64 = g
            .value(adj)
            .data
            .iter()
            .zip(&x.data)
            .map(|(a, b)| a * b)
            .sum();

        let scale = lhs.abs().max(rhs.abs()).max(1e-9);
        prop_assert!((lhs - rhs).abs() / scale < 1e-5, "lhs {} rhs {}", lhs, rhs);
    }
}
