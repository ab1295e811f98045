//! Integration-level dropout: whole sequences are removed from a sample and
//! the survivors upweighted so the expected input magnitude is preserved.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{SequencePresence, SliceSample};

#[derive(Debug, Error, PartialEq)]
pub enum DropError {
    #[error("presence has {got} entries but the sample has {expected} sequences")]
    Length { got: usize, expected: usize },
    #[error("no sequence would remain present")]
    AllAbsent,
    #[error("a different presence was already applied to this sample")]
    AlreadyApplied,
    #[error("drop probability {0} outside [0, 1)")]
    Probability(f64),
    #[error("never_all must be true")]
    NeverAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reweight {
    /// Survivors are multiplied by `n_seq / n_present` in training and inference.
    TrainTimeUpweight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropPolicy {
    pub p_drop: f64,
    /// Replace an all-dropped draw with all-present. Must be true.
    pub never_all: bool,
    pub reweight: Reweight,
}

impl Default for DropPolicy {
    fn default() -> Self {
        Self {
            p_drop: 0.25,
            never_all: true,
            reweight: Reweight::TrainTimeUpweight,
        }
    }
}

impl DropPolicy {
    pub fn with_p(p_drop: f64) -> Self {
        Self {
            p_drop,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DropError> {
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(DropError::Probability(self.p_drop));
        }
        if !self.never_all {
            return Err(DropError::NeverAll);
        }
        Ok(())
    }
}

/// Drops each sequence independently with probability `p_drop`. A draw that
/// drops everything becomes all-present.
pub fn draw_drop_mask<R: Rng + ?Sized>(policy: &DropPolicy, n_seq: usize, rng: &mut R) -> SequencePresence {
    let present: Vec<bool> = (0..n_seq).map(|_| rng.gen::<f64>() >= policy.p_drop).collect();
    SequencePresence::new(present).unwrap_or_else(|_| SequencePresence::all(n_seq))
}

/// Zeroes absent sequences and multiplies the rest by `n_seq / n_present`.
/// Sequences already missing from the sample stay absent and count towards
/// the scale. Re-applying a presence that removes nothing further returns the
/// sample unchanged.
pub fn apply_presence(sample: &SliceSample, presence: &SequencePresence) -> Result<SliceSample, DropError> {
    let n_seq = sample.n_seq();
    if presence.len() != n_seq {
        return Err(DropError::Length {
            got: presence.len(),
            expected: n_seq,
        });
    }
    if let Some(prev) = &sample.applied {
        let narrows = prev
            .present()
            .iter()
            .zip(presence.present())
            .any(|(&a, &b)| a && !b);
        return if !narrows {
            Ok(sample.clone())
        } else {
            Err(DropError::AlreadyApplied)
        };
    }
    let effective: Vec<bool> = sample
        .presence
        .present()
        .iter()
        .zip(presence.present())
        .map(|(&a, &b)| a && b)
        .collect();
    let effective = SequencePresence::new(effective).map_err(|_| DropError::AllAbsent)?;
    let factors = effective.channel_factors(sample.n_slices);
    let mut out = sample.clone();
    let plane = out.stack.len() / factors.len();
    for (c, chunk) in out.stack.data_mut().chunks_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= factors[c]);
    }
    out.presence = effective.clone();
    out.applied = Some(effective);
    Ok(out)
}

/// Presence for inference when only `available` sequences were acquired.
pub fn presence_for_inference(
    available: &BTreeSet<String>,
    canonical: &[String],
) -> Result<SequencePresence, DropError> {
    let present = canonical.iter().map(|c| available.contains(c)).collect();
    SequencePresence::new(present).map_err(|_| DropError::AllAbsent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> SliceSample {
        let data: Vec<f64> = (0..4 * 3 * 4).map(|i| i as f64 + 1.0).collect();
        SliceSample {
            stack: Tensor::from_vec(&[12, 2, 2], data),
            target: vec![false; 4],
            patient_id: "p".into(),
            z_index: 0,
            presence: SequencePresence::all(4),
            n_slices: 3,
            applied: None,
        }
    }

    #[test]
    fn zero_probability_never_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = DropPolicy::with_p(0.0);
        for _ in 0..1000 {
            let p = draw_drop_mask(&policy, 4, &mut rng);
            assert_eq!(p, SequencePresence::all(4));
        }
    }

    #[test]
    fn applying_one_absent_scales_by_four_thirds() {
        let s = sample();
        let p = SequencePresence::new(vec![true, false, true, true]).unwrap();
        let out = apply_presence(&s, &p).unwrap();
        for (c, (a, b)) in out.stack.data().chunks(4).zip(s.stack.data().chunks(4)).enumerate() {
            let f = if c / 3 == 1 { 0.0 } else { 4.0 / 3.0 };
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, y * f);
            }
        }
        assert_eq!(apply_presence(&out, &p).unwrap(), out);
        let other = SequencePresence::new(vec![false, true, true, true]).unwrap();
        assert_eq!(apply_presence(&out, &other), Err(DropError::AlreadyApplied));
    }

    #[test]
    fn presence_length_must_match() {
        let p = SequencePresence::all(3);
        assert!(matches!(apply_presence(&sample(), &p), Err(DropError::Length { .. })));
    }

    #[test]
    fn inference_presence() {
        let canonical = crate::phantom::canonical_sequences();
        let avail: BTreeSet<String> = ["BRAVO-post", "CUBE-post", "FLAIR"].iter().map(|s| s.to_string()).collect();
        let p = presence_for_inference(&avail, &canonical).unwrap();
        assert_eq!(p.present(), &[false, true, true, true]);
        assert!((p.scale() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(presence_for_inference(&BTreeSet::new(), &canonical), Err(DropError::AllAbsent));
    }
}
