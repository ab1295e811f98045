use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqfuse::nn::Tensor;
use seqfuse::preprocess::{SequencePresence, SliceSample};
use seqfuse::seqdrop::{apply_presence, draw_drop_mask, DropPolicy};

const N_SEQ: usize = 4;
const N_SLICES: usize = 3;
const PLANE: usize = 4;

fn presence_strategy() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), N_SEQ).prop_filter("one present", |p| p.iter().any(|&b| b))
}

/// Every sequence carries the same total mass, spread differently.
fn balanced_sample(values: &[f64]) -> SliceSample {
    let per_seq = N_SLICES * PLANE;
    let total: f64 = values.iter().sum();
    let mut data = Vec::with_capacity(N_SEQ * per_seq);
    for s in 0..N_SEQ {
        let mut block: Vec<f64> = (0..per_seq).map(|i| values[(i + s) % per_seq]).collect();
        let sum: f64 = block.iter().sum();
        block.iter_mut().for_each(|v| *v *= total / sum);
        data.extend(block);
    }
    SliceSample {
        stack: Tensor::from_vec(&[N_SEQ * N_SLICES, 2, 2], data),
        target: vec![false; PLANE],
        patient_id: "p".into(),
        z_index: 0,
        presence: SequencePresence::all(N_SEQ),
        n_slices: N_SLICES,
        applied: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn upweighting_preserves_total_mass_of_balanced_sequences(
        values in prop::collection::vec(0.1f64..2.0, N_SLICES * PLANE),
        present in presence_strategy(),
    ) {
        let s = balanced_sample(&values);
        let before: f64 = s.stack.data().iter().sum();
        let out = apply_presence(&s, &SequencePresence::new(present).unwrap()).unwrap();
        let after: f64 = out.stack.data().iter().sum();
        prop_assert!((after - before).abs() <= 1e-9 * before);
    }

    #[test]
    fn applying_the_same_presence_twice_changes_nothing(
        values in prop::collection::vec(-2.0f64..2.0, N_SLICES * PLANE),
        present in presence_strategy(),
    ) {
        let p = SequencePresence::new(present.clone()).unwrap();
        let once = apply_presence(&balanced_sample(&values), &p).unwrap();
        let twice = apply_presence(&once, &p).unwrap();
        prop_assert_eq!(&twice, &once);
        for (s, &keep) in present.iter().enumerate() {
            let block = &once.stack.data()[s * N_SLICES * PLANE..(s + 1) * N_SLICES * PLANE];
            prop_assert!(keep || block.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn drawn_masks_keep_a_sequence(seed in any::<u64>(), p in 0.0f64..0.99, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = DropPolicy::with_p(p);
        for _ in 0..200 {
            let m = draw_drop_mask(&policy, n, &mut rng);
            prop_assert_eq!(m.len(), n);
            prop_assert!(m.n_absent() < n);
            prop_assert_eq!(m.scale(), n as f64 / (n - m.n_absent()) as f64);
        }
    }
}

#[test]
fn a_million_draws_never_drop_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let policy = DropPolicy::with_p(0.25);
    let mut counts = [0usize; 5];
    for _ in 0..1_000_000 {
        let m = draw_drop_mask(&policy, N_SEQ, &mut rng);
        counts[m.n_absent()] += 1;
    }
    assert_eq!(counts[4], 0);
    let p = 0.25f64;
    let binom = |k: i32| [1.0, 4.0, 6.0, 4.0, 1.0][k as usize] * p.powi(k) * (1.0 - p).powi(4 - k);
    let expected = [binom(0) + binom(4), binom(1), binom(2), binom(3), 0.0];
    for k in 0..5 {
        let f = counts[k] as f64 / 1e6;
        assert!((f - expected[k]).abs() < 0.003, "{k} dropped: {f} vs {}", expected[k]);
    }
}
