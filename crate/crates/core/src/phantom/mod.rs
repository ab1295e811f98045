//! Synthetic multi-sequence phantoms and the on-disk dataset format.
//!
//! A phantom is a set of co-registered volumes sharing one lesion layout.
//! The three T1-like sequences share a smoothed background field and differ
//! only inside lesion cores; FLAIR has its own background and shows an
//! edema-like halo around each lesion while the core itself is invisible.

mod generate;
mod io;
pub mod nifti;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid3, Mask3, Shape3, Spacing3};

pub use generate::generate_phantom;
pub use io::{read_dataset, read_vol, write_dataset, write_vol, Manifest, PatientEntry};

/// Canonical sequence order used for channel stacking and presence vectors.
pub const CANONICAL_SEQUENCES: [&str; 4] = ["CUBE-pre", "BRAVO-post", "CUBE-post", "FLAIR"];

pub fn canonical_sequences() -> Vec<String> {
    CANONICAL_SEQUENCES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("could not place lesion {lesion} of {requested} after {attempts} attempts; grid is too crowded")]
    Capacity {
        lesion: usize,
        requested: usize,
        attempts: usize,
    },
    #[error("refusing to write into non-empty directory {0} without overwrite")]
    RootNotEmpty(String),
    #[error("duplicate patient id {0}")]
    DuplicatePatient(String),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("sequence filter selects no usable sequence")]
    EmptyFilter,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl PhantomError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Intensity behaviour of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceProfile {
    pub name: String,
    /// Offset added inside lesion cores.
    pub lesion_contrast: f64,
    /// Offset added in the dilated shell around each core.
    pub halo_contrast: f64,
    /// Documents whether the sequence is meant to carry the annotated signal.
    pub correlates_with_gt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundTexture {
    /// Gaussian sigma, in voxels, of the smoothed background field.
    pub smoothness: f64,
    /// Half-width of the uniform per-sequence noise.
    pub noise_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid_shape: Shape3,
    pub spacing_mm: Spacing3,
    /// Inclusive range of lesion counts.
    pub n_lesions_range: [usize; 2],
    /// Inclusive range of lesion radii in millimetres.
    pub lesion_radius_range_mm: [f64; 2],
    pub sequence_profiles: Vec<SequenceProfile>,
    pub background_texture: BackgroundTexture,
    pub seed: u64,
}

/// Profiles for the four canonical sequences.
pub fn canonical_profiles() -> Vec<SequenceProfile> {
    vec![
        SequenceProfile {
            name: "CUBE-pre".into(),
            lesion_contrast: 0.0,
            halo_contrast: 0.0,
            correlates_with_gt: false,
        },
        SequenceProfile {
            name: "BRAVO-post".into(),
            lesion_contrast: 1.6,
            halo_contrast: 0.0,
            correlates_with_gt: true,
        },
        SequenceProfile {
            name: "CUBE-post".into(),
            lesion_contrast: 1.0,
            halo_contrast: 0.0,
            correlates_with_gt: true,
        },
        SequenceProfile {
            name: "FLAIR".into(),
            lesion_contrast: 0.0,
            halo_contrast: 0.4,
            correlates_with_gt: false,
        },
    ]
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid_shape: [24, 64, 64],
            spacing_mm: [1.0, 1.0, 1.0],
            n_lesions_range: [1, 4],
            lesion_radius_range_mm: [2.0, 4.0],
            sequence_profiles: canonical_profiles(),
            background_texture: BackgroundTexture {
                smoothness: 2.0,
                noise_amplitude: 0.2,
            },
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.grid_shape.iter().any(|&n| n < 8) {
            return bad(format!("grid_shape {:?} has a component below 8", self.grid_shape));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return bad(format!("spacing_mm {:?} must be positive", self.spacing_mm));
        }
        let [lo, hi] = self.n_lesions_range;
        if lo > hi {
            return bad(format!("n_lesions_range [{lo}, {hi}] is empty"));
        }
        let [rlo, rhi] = self.lesion_radius_range_mm;
        if !(rlo <= rhi) || !rlo.is_finite() || !rhi.is_finite() {
            return bad(format!("lesion_radius_range_mm [{rlo}, {rhi}] is empty"));
        }
        let max_spacing = self.spacing_mm.iter().cloned().fold(0.0, f64::max);
        if hi > 0 && rlo < max_spacing {
            return bad(format!(
                "minimum lesion radius {rlo} mm is below one voxel ({max_spacing} mm)"
            ));
        }
        if self.sequence_profiles.is_empty() {
            return bad("sequence_profiles is empty".into());
        }
        let mut names = std::collections::HashSet::new();
        for p in &self.sequence_profiles {
            if !names.insert(p.name.as_str()) {
                return bad(format!("duplicate sequence profile {}", p.name));
            }
            if !p.lesion_contrast.is_finite() || !p.halo_contrast.is_finite() {
                return bad(format!("non-finite contrast in profile {}", p.name));
            }
        }
        let t = &self.background_texture;
        if !(t.smoothness >= 0.0) || !(t.noise_amplitude >= 0.0) {
            return bad("background texture parameters must be non-negative".into());
        }
        Ok(())
    }
}

/// One patient's co-registered volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyVolume {
    pub patient_id: String,
    /// Present sequences only; an absent sequence has no entry.
    pub sequences: BTreeMap<String, Grid3>,
    pub spacing_mm: Spacing3,
    pub gt_mask: Option<Mask3>,
    pub gt_lesion_count: usize,
}

impl StudyVolume {
    pub fn shape(&self) -> Option<Shape3> {
        self.sequences
            .values()
            .next()
            .map(Grid3::shape)
            .or_else(|| self.gt_mask.as_ref().map(Mask3::shape))
    }

    pub fn depth(&self) -> usize {
        self.shape().map(|s| s[0]).unwrap_or(0)
    }

    /// Presence flags ordered by `canonical`.
    pub fn presence(&self, canonical: &[String]) -> Vec<bool> {
        canonical
            .iter()
            .map(|n| self.sequences.contains_key(n))
            .collect()
    }
}
