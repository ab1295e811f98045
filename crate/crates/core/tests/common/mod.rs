#![allow(dead_code)]

pub mod oracle;

use seqfuse::fusenet::{BackboneSpec, FusionConfig, FusionModel};
use seqfuse::phantom::{canonical_sequences, generate_phantom, PhantomSpec, StudyVolume};
use seqfuse::preprocess::{preprocess_volume, PreprocessConfig};

pub fn tiny_spec(seed: u64) -> PhantomSpec {
    let mut spec = PhantomSpec {
        grid_shape: [8, 16, 16],
        n_lesions_range: [1, 2],
        lesion_radius_range_mm: [1.5, 2.5],
        seed,
        ..PhantomSpec::default()
    };
    spec.background_texture.smoothness = 3.0;
    spec
}

pub fn tiny_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        tiles: [2, 2],
        clip_limit: None,
        resize: [16, 16],
        n_slices: 3,
    }
}

pub fn tiny_backbone() -> BackboneSpec {
    BackboneSpec {
        base_channels: 4,
        n_stages: 2,
        dilation_rates: vec![1, 2],
        split_stage: 1,
    }
}

pub fn volumes(spec: &PhantomSpec, prefix: &str, n: usize) -> Vec<StudyVolume> {
    let pp = tiny_preprocess();
    (0..n)
        .map(|i| {
            let raw = generate_phantom(spec, &format!("{prefix}{i:02}")).unwrap();
            preprocess_volume(&raw, &pp).unwrap()
        })
        .collect()
}

pub fn volumes_raw(spec: &PhantomSpec, prefix: &str, n: usize) -> Vec<StudyVolume> {
    (0..n)
        .map(|i| generate_phantom(spec, &format!("{prefix}{i:02}")).unwrap())
        .collect()
}

pub fn tiny_input_model(seed: u64) -> FusionModel {
    let c = FusionConfig::input(tiny_backbone(), 4, tiny_preprocess().n_slices);
    FusionModel::build(c, seed).unwrap()
}

pub fn canon() -> Vec<String> {
    canonical_sequences()
}
