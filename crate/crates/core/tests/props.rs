//! Property tests over randomized inputs: transform identities, kernel
//! equivalence, mask structure, metric bounds, loss shape, and pipeline
//! invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;

use mmrec_core::data::{kcore_filter, InteractionRecord};
use mmrec_core::eval::{ndcg_at_k, rank_items, recall_at_k};
use mmrec_core::fft;
use mmrec_core::ssd::{build_decay_mask, ssd_quadratic_from_decay, ssd_recurrent, DecayCoeffs};
use mmrec_core::train::fullcorpus_ce_from_scores;
use mmrec_core::{Tape, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// ifft . fft is the identity at every length, not just powers of two.
    #[test]
    fn fft_roundtrip(len in 1usize..=50, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let re: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let im: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = fft::ComplexVec::new(re.clone(), im.clone()).unwrap();
        let back = fft::ifft(&fft::fft(&z));
        for i in 0..len {
            prop_assert!((back.re[i] - re[i]).abs() < 1e-6);
            prop_assert!((back.im[i] - im[i]).abs() < 1e-6);
        }
    }

    /// Energy is preserved up to the 1/L convention.
    #[test]
    fn fft_parseval(len in 1usize..=50, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = fft::fft_real(&x);
        let time: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
        let freq: f64 = z.re.iter().zip(&z.im)
            .map(|(&r, &i)| (r as f64).powi(2) + (i as f64).powi(2))
            .sum::<f64>() / len as f64;
        prop_assert!((time - freq).abs() < 1e-5);
    }

    /// The two SSD forms agree on arbitrary shapes and decay profiles.
    #[test]
    fn ssd_forms_agree(
        l in 1usize..=32,
        d in 1usize..=8,
        n in 1usize..=8,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let c = Tensor::new(&[l, d], (0..l * d).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let b = Tensor::new(&[l, d], (0..l * d).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let x = Tensor::new(&[l, n], (0..l * n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let a = Tensor::vector(&(0..l).map(|_| rng.gen_range(0.05..1.0)).collect::<Vec<f32>>());
        let yq = ssd_quadratic_from_decay(&tape, &c, &b, &a, &x).unwrap();
        let yr = ssd_recurrent(&tape, &c, &b, &a, &x).unwrap();
        prop_assert!(yq.max_abs_diff(&yr) < 1e-5);
    }

    /// Mask columns decay monotonically when every coefficient is below one.
    #[test]
    fn mask_monotone_decay(l in 2usize..=16, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f32> = (0..l).map(|_| rng.gen_range(0.05..0.999)).collect();
        let mask = build_decay_mask(&DecayCoeffs::new(a).unwrap());
        for j in 0..l {
            for i in (j + 1)..l {
                prop_assert!(mask.at(i, j) <= mask.at(i - 1, j) + 1e-7);
            }
        }
    }

    /// Metric bounds and monotonicity in K over random rankings.
    #[test]
    fn metric_bounds(
        num_items in 2usize..60,
        target_pos in 0usize..60,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (1..=num_items).collect();
        let scores: Vec<f32> = (0..num_items).map(|_| rng.gen()).collect();
        let ranked = rank_items(&ids, &scores);
        let target = (target_pos % num_items) + 1;
        let mut prev_recall = 0.0;
        for k in 1..=num_items {
            let r = recall_at_k(&ranked, target, k);
            let n = ndcg_at_k(&ranked, target, k);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((0.0..=1.0).contains(&n));
            prop_assert!(r >= prev_recall, "recall must be non-decreasing in K");
            prop_assert!(n <= r, "a single hit discounts to at most its recall");
            prev_recall = r;
        }
        prop_assert_eq!(recall_at_k(&ranked, target, num_items), 1.0);
    }

    /// Cross-entropy over scores is non-negative and shift-invariant.
    #[test]
    fn loss_nonnegative_and_shift_invariant(
        len in 2usize..40,
        target in 0usize..40,
        shift in -5.0f32..5.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let target = target % len;
        let scores: Vec<f32> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tape = Tape::new();
        let a = fullcorpus_ce_from_scores(&tape, &Tensor::vector(&scores), target, 0.8).unwrap();
        prop_assert!(a.item() >= 0.0);
        let shifted: Vec<f32> = scores.iter().map(|v| v + shift).collect();
        let b = fullcorpus_ce_from_scores(&tape, &Tensor::vector(&shifted), target, 0.8).unwrap();
        prop_assert!((a.item() - b.item()).abs() < 2e-4);
    }

    /// Every user and item surviving the k-core has at least k interactions,
    /// and the filter is a fixpoint.
    #[test]
    fn kcore_invariant(
        k in 1usize..4,
        edges in proptest::collection::vec((0u8..12, 0u8..10, 0u32..1000), 1..80),
    ) {
        let records: Vec<InteractionRecord> = edges
            .iter()
            .map(|(u, i, t)| InteractionRecord {
                user_id: format!("u{u}"),
                item_id: format!("i{i}"),
                timestamp: *t as i64,
            })
            .collect();
        let out = kcore_filter(&records, k);
        let mut users: BTreeMap<&str, usize> = BTreeMap::new();
        let mut items: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &out {
            *users.entry(&r.user_id).or_default() += 1;
            *items.entry(&r.item_id).or_default() += 1;
        }
        prop_assert!(users.values().all(|&c| c >= k));
        prop_assert!(items.values().all(|&c| c >= k));
        prop_assert_eq!(&kcore_filter(&out, k), &out);
    }

    /// Row-wise layer norm standardizes every row before the affine map.
    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..6, cols in 2usize..12, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let x = Tensor::new(
            &[rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        ).unwrap();
        let gamma = Tensor::new(&[cols], vec![1.0; cols]).unwrap();
        let beta = Tensor::zeros(&[cols]);
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for i in 0..rows {
            let row: Vec<f64> = (0..cols).map(|j| y.at2(i, j) as f64).collect();
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-4);
            prop_assert!((var - 1.0).abs() < 1e-2);
        }
    }
}
