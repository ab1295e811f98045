use proptest::prelude::*;
use seqfuse::nn::Tensor;
use seqfuse::saliency::SaliencyLedger;

fn names() -> Vec<String> {
    ["CUBE-pre", "BRAVO-post", "CUBE-post", "FLAIR"].map(String::from).to_vec()
}

fn gradients() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2 * 20 * 3 * 3), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rows_partition_the_absolute_gradient_and_accumulate(grads in gradients()) {
        let mut ledger = SaliencyLedger::new(names(), 5);
        for (i, g) in grads.iter().enumerate() {
            ledger.accumulate(i as u64, &Tensor::from_vec(&[2, 20, 3, 3], g.clone())).unwrap();
        }
        let mut prev: Option<seqfuse::saliency::SaliencyRow> = None;
        for (row, g) in ledger.rows().iter().zip(&grads) {
            let total: f64 = g.iter().map(|v| v.abs()).sum();
            let seq: f64 = row.by_sequence.iter().sum();
            let off: f64 = row.by_offset.iter().sum();
            prop_assert!((seq - total).abs() <= 1e-10 * total);
            prop_assert!((off - total).abs() <= 1e-10 * total);
            if let Some(p) = &prev {
                for k in 0..4 {
                    prop_assert_eq!(row.cumulative_sequence[k], p.cumulative_sequence[k] + row.by_sequence[k]);
                    prop_assert!(row.cumulative_sequence[k] >= p.cumulative_sequence[k]);
                }
                for k in 0..5 {
                    prop_assert_eq!(row.cumulative_offset[k], p.cumulative_offset[k] + row.by_offset[k]);
                    prop_assert!(row.cumulative_offset[k] >= p.cumulative_offset[k]);
                }
            }
            prev = Some(row.clone());
        }
    }
}
