mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use seqfuse::grid::{Grid3, Mask3};
use seqfuse::phantom::{generate_phantom, StudyVolume};
use seqfuse::preprocess::{build_sampler, equalize_slice, preprocess_volume, stack_2p5d};

fn slice_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..12, 2usize..12).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(-5.0f64..5.0, h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn equalization_ignores_monotone_rescaling(
        (h, w, slice) in slice_strategy(),
        ty in 1usize..4,
        tx in 1usize..4,
        a in 0.1f64..10.0,
        b in -3.0f64..3.0,
    ) {
        let base = equalize_slice(&slice, h, w, [ty, tx], None);
        let affine: Vec<f64> = slice.iter().map(|v| a * v + b).collect();
        let cubic: Vec<f64> = slice.iter().map(|v| v * v * v + v).collect();
        let exp: Vec<f64> = slice.iter().map(|v| v.exp()).collect();
        for other in [affine, cubic, exp] {
            prop_assert_eq!(&equalize_slice(&other, h, w, [ty, tx], None), &base);
        }
        prop_assert!(base.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn stack_centre_channels_reproduce_the_slices(seed in 0u64..1000, z in 0usize..8, k in 0usize..3) {
        let n_slices = 2 * k + 1;
        let raw = generate_phantom(&common::tiny_spec(seed), "p").unwrap();
        let vol = preprocess_volume(&raw, &common::tiny_preprocess()).unwrap();
        let canon = common::canon();
        let s = stack_2p5d(&vol, z, n_slices, &canon).unwrap();
        prop_assert_eq!(s.stack.shape()[0], canon.len() * n_slices);
        for (i, name) in canon.iter().enumerate() {
            let want: Vec<f64> = vol.sequences[name].slice(z).iter().map(|&v| v as f64).collect();
            prop_assert_eq!(s.channel(i, k), &want[..]);
        }
    }

    #[test]
    fn sampler_probabilities_are_positive_and_sum_to_one(seed in 0u64..1000, factor in 1.0f64..20.0) {
        let vols = common::volumes(&common::tiny_spec(seed), "s", 3);
        let s = build_sampler(&vols, factor, seed).unwrap();
        let p = s.probabilities();
        prop_assert!(p.iter().all(|&v| v > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn striped_volume(depth: usize, lesion_slices: usize) -> StudyVolume {
    let shape = [depth, 2, 2];
    let mut mask = Mask3::empty(shape);
    for z in 0..lesion_slices {
        mask.set(z, 0, 0, true);
    }
    let mut sequences = BTreeMap::new();
    sequences.insert("FLAIR".to_string(), Grid3::zeros(shape));
    StudyVolume {
        patient_id: "striped".into(),
        sequences,
        spacing_mm: [1.0; 3],
        gt_mask: Some(mask),
        gt_lesion_count: 1,
    }
}

#[test]
fn oversampled_lesion_slices_are_drawn_at_the_closed_form_rate() {
    let vol = striped_volume(100, 10);
    let sampler = build_sampler(std::slice::from_ref(&vol), 10.0, 3).unwrap();
    let draws = 1_000_000;
    let hits = sampler.take(draws).filter(|&(_, z)| z < 10).count();
    let rate = hits as f64 / draws as f64;
    let expected = 100.0 / 190.0;
    assert!((rate - expected).abs() <= 0.01 * expected, "{rate} vs {expected}");
}
