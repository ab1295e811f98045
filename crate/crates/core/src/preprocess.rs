//! Per-slice preprocessing, 2.5D sample construction and lesion-aware
//! slice sampling.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid3, Mask3};
use crate::nn::{bilinear_taps, Tensor};
use crate::phantom::StudyVolume;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("volume {0} has none of the requested sequences")]
    NoSequences(String),
    #[error("presence vector must mark at least one sequence present")]
    AllAbsent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Equalisation tile grid (rows, columns).
    pub tiles: [usize; 2],
    /// Histogram clip limit as a multiple of the mean bin count; `None` disables clipping.
    #[serde(default)]
    pub clip_limit: Option<f64>,
    /// Working in-plane resolution (H, W).
    pub resize: [usize; 2],
    /// Adjacent slices per sequence; odd.
    pub n_slices: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            tiles: [8, 8],
            clip_limit: None,
            resize: [64, 64],
            n_slices: 5,
        }
    }
}

/// Which sequences of a sample are present, plus the upweighting factor
/// `n_seq / n_present` applied to surviving channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePresence {
    present: Vec<bool>,
    scale: f64,
}

impl SequencePresence {
    pub fn new(present: Vec<bool>) -> Result<Self, PreprocessError> {
        let k = present.iter().filter(|&&p| p).count();
        if k == 0 {
            return Err(PreprocessError::AllAbsent);
        }
        Ok(Self {
            scale: present.len() as f64 / k as f64,
            present,
        })
    }

    pub fn all(n_seq: usize) -> Self {
        Self {
            present: vec![true; n_seq],
            scale: 1.0,
        }
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn n_absent(&self) -> usize {
        self.present.iter().filter(|&&p| !p).count()
    }

    /// Per-channel multipliers for a stack with `n_slices` channels per sequence:
    /// 0 for absent sequences, `scale` otherwise.
    pub fn channel_factors(&self, n_slices: usize) -> Vec<f64> {
        self.present
            .iter()
            .flat_map(|&p| std::iter::repeat(if p { self.scale } else { 0.0 }).take(n_slices))
            .collect()
    }
}

/// A 2.5D training or inference sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    /// (n_seq·n_slices, H, W), sequence-major then slice offset.
    pub stack: Tensor,
    /// Ground truth of the centre slice, row-major (H, W).
    pub target: Vec<bool>,
    pub patient_id: String,
    pub z_index: usize,
    pub presence: SequencePresence,
    pub n_slices: usize,
    /// Presence already folded into `stack` by dropout or censoring.
    pub applied: Option<SequencePresence>,
}

impl SliceSample {
    pub fn n_seq(&self) -> usize {
        self.presence.len()
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.stack.shape()[1], self.stack.shape()[2])
    }

    pub fn target_f64(&self) -> Vec<f64> {
        self.target.iter().map(|&b| b as u8 as f64).collect()
    }

    /// Channel `(seq, offset)` as a row-major slice.
    pub fn channel(&self, seq: usize, offset: usize) -> &[f64] {
        let (h, w) = self.hw();
        let c = seq * self.n_slices + offset;
        &self.stack.data()[c * h * w..(c + 1) * h * w]
    }
}

/// Tile-wise rank equalisation with bilinear blending of neighbouring tile
/// maps. Output lies in [0, 1]; a tile of constant values maps to 0.
pub fn equalize_slice(
    slice: &[f64],
    h: usize,
    w: usize,
    tiles: [usize; 2],
    clip_limit: Option<f64>,
) -> Vec<f64> {
    assert_eq!(slice.len(), h * w);
    let ty = tiles[0].clamp(1, h);
    let tx = tiles[1].clamp(1, w);
    let bounds = |n: usize, t: usize| -> Vec<(usize, usize)> {
        (0..t).map(|i| (i * n / t, (i + 1) * n / t)).collect()
    };
    let rows = bounds(h, ty);
    let cols = bounds(w, tx);
    let maps: Vec<TileMap> = rows
        .iter()
        .flat_map(|&(y0, y1)| {
            cols.iter().map(move |&(x0, x1)| {
                let mut vals = Vec::with_capacity((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    vals.extend_from_slice(&slice[y * w + x0..y * w + x1]);
                }
                TileMap::new(vals, clip_limit)
            })
        })
        .collect();
    let centers = |b: &[(usize, usize)]| -> Vec<f64> {
        b.iter().map(|&(s, e)| (s + e - 1) as f64 / 2.0).collect()
    };
    let cy = centers(&rows);
    let cx = centers(&cols);
    let locate = |c: &[f64], p: f64| -> (usize, usize, f64) {
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        let last = c.len() - 1;
        if p >= c[last] {
            return (last, last, 0.0);
        }
        let i = c.iter().rposition(|&v| v <= p).expect("p above first centre");
        (i, i + 1, (p - c[i]) / (c[i + 1] - c[i]))
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (i0, i1, fy) = locate(&cy, y as f64);
        for x in 0..w {
            let (j0, j1, fx) = locate(&cx, x as f64);
            let v = slice[y * w + x];
            let m = |i: usize, j: usize| maps[i * tx + j].map(v);
            let top = m(i0, j0) * (1.0 - fx) + m(i0, j1) * fx;
            let bot = m(i1, j0) * (1.0 - fx) + m(i1, j1) * fx;
            out[y * w + x] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
        }
    }
    out
}

enum TileMap {
    Constant,
    /// Empirical CDF over sorted values: fraction of the tile `<= v`.
    Rank(Vec<f64>),
    /// Clipped histogram CDF over `[lo, hi]`.
    Clipped { lo: f64, hi: f64, cdf: Vec<f64> },
}

const CLIP_BINS: usize = 256;

impl TileMap {
    fn new(mut vals: Vec<f64>, clip_limit: Option<f64>) -> Self {
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite slice values"));
        let (lo, hi) = (vals[0], vals[vals.len() - 1]);
        if lo == hi {
            return TileMap::Constant;
        }
        let Some(limit) = clip_limit else {
            return TileMap::Rank(vals);
        };
        let mut hist = vec![0.0; CLIP_BINS];
        for &v in &vals {
            hist[Self::bin(lo, hi, v)] += 1.0;
        }
        let cap = (limit * vals.len() as f64 / CLIP_BINS as f64).max(1.0);
        let excess: f64 = hist.iter().map(|&c| (c - cap).max(0.0)).sum();
        let share = excess / CLIP_BINS as f64;
        let mut acc = 0.0;
        let cdf = hist
            .iter()
            .map(|&c| {
                acc += c.min(cap) + share;
                acc / vals.len() as f64
            })
            .collect();
        TileMap::Clipped { lo, hi, cdf }
    }

    fn bin(lo: f64, hi: f64, v: f64) -> usize {
        (((v - lo) / (hi - lo)) * CLIP_BINS as f64).floor().clamp(0.0, (CLIP_BINS - 1) as f64) as usize
    }

    fn map(&self, v: f64) -> f64 {
        match self {
            TileMap::Constant => 0.0,
            TileMap::Rank(sorted) => sorted.partition_point(|&s| s <= v) as f64 / sorted.len() as f64,
            TileMap::Clipped { lo, hi, cdf } => {
                if v < *lo {
                    0.0
                } else if v >= *hi {
                    1.0
                } else {
                    cdf[Self::bin(*lo, *hi, v)]
                }
            }
        }
    }
}

/// Bilinear resampling with half-pixel centres; identity for equal shapes.
pub fn resize_slice(
    slice: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>, PreprocessError> {
    if out_h == 0 || out_w == 0 {
        return Err(PreprocessError::Argument(format!(
            "target shape ({out_h}, {out_w}) must be positive"
        )));
    }
    if h == 0 || w == 0 || slice.len() != h * w {
        return Err(PreprocessError::Argument(format!(
            "slice of {} values does not match ({h}, {w})",
            slice.len()
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(slice.to_vec());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = slice[y0 * w + x0] * (1.0 - fx) + slice[y0 * w + x1] * fx;
            let bot = slice[y1 * w + x0] * (1.0 - fx) + slice[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    Ok(out)
}

/// Equalises and resizes every slice of every present sequence. The mask is
/// resampled bilinearly and thresholded at 0.5; in-plane spacing follows the
/// resize.
pub fn preprocess_volume(vol: &StudyVolume, cfg: &PreprocessConfig) -> Result<StudyVolume, PreprocessError> {
    let shape = vol
        .shape()
        .ok_or_else(|| PreprocessError::NoSequences(vol.patient_id.clone()))?;
    let [nz, ny, nx] = shape;
    let [oh, ow] = cfg.resize;
    let out_shape = [nz, oh, ow];
    let mut sequences = BTreeMap::new();
    for (name, grid) in &vol.sequences {
        let mut out = Grid3::zeros(out_shape);
        for z in 0..nz {
            let s: Vec<f64> = grid.slice(z).iter().map(|&v| v as f64).collect();
            let eq = equalize_slice(&s, ny, nx, cfg.tiles, cfg.clip_limit);
            let r = resize_slice(&eq, ny, nx, oh, ow)?;
            let n = oh * ow;
            out.data_mut()[z * n..(z + 1) * n]
                .iter_mut()
                .zip(&r)
                .for_each(|(d, v)| *d = *v as f32);
        }
        sequences.insert(name.clone(), out);
    }
    let gt_mask = match &vol.gt_mask {
        None => None,
        Some(m) => {
            let mut out = Mask3::empty(out_shape);
            for z in 0..nz {
                let s: Vec<f64> = m.slice(z).iter().map(|&b| b as u8 as f64).collect();
                let r = resize_slice(&s, ny, nx, oh, ow)?;
                for (i, v) in r.iter().enumerate() {
                    out.data_mut()[z * oh * ow + i] = *v > 0.5;
                }
            }
            Some(out)
        }
    };
    let spacing = [
        vol.spacing_mm[0],
        vol.spacing_mm[1] * ny as f64 / oh as f64,
        vol.spacing_mm[2] * nx as f64 / ow as f64,
    ];
    let gt_lesion_count = gt_mask
        .as_ref()
        .map(|m| crate::detect::components::connected_components(m).len())
        .unwrap_or(0);
    Ok(StudyVolume {
        patient_id: vol.patient_id.clone(),
        sequences,
        spacing_mm: spacing,
        gt_mask,
        gt_lesion_count,
    })
}

/// Slice indices `z-k ..= z+k` clamped to `[0, depth)`.
pub fn clamped_window(z: usize, n_slices: usize, depth: usize) -> Vec<usize> {
    let k = (n_slices / 2) as isize;
    (-k..=k)
        .map(|d| (z as isize + d).clamp(0, depth as isize - 1) as usize)
        .collect()
}

/// Builds the 2.5D stack around slice `z` in `canonical` sequence order.
/// Absent sequences contribute zero channels and are marked absent.
pub fn stack_2p5d(
    vol: &StudyVolume,
    z: usize,
    n_slices: usize,
    canonical: &[String],
) -> Result<SliceSample, PreprocessError> {
    if n_slices == 0 || n_slices % 2 == 0 {
        return Err(PreprocessError::Argument(format!("n_slices {n_slices} must be odd")));
    }
    let [nz, h, w] = vol
        .shape()
        .ok_or_else(|| PreprocessError::NoSequences(vol.patient_id.clone()))?;
    if z >= nz {
        return Err(PreprocessError::Argument(format!("z {z} outside depth {nz}")));
    }
    let window = clamped_window(z, n_slices, nz);
    let n_seq = canonical.len();
    let plane = h * w;
    let mut data = vec![0.0; n_seq * n_slices * plane];
    let mut present = Vec::with_capacity(n_seq);
    for (s, name) in canonical.iter().enumerate() {
        let Some(grid) = vol.sequences.get(name) else {
            present.push(false);
            continue;
        };
        present.push(true);
        for (o, &zz) in window.iter().enumerate() {
            let c = s * n_slices + o;
            data[c * plane..(c + 1) * plane]
                .iter_mut()
                .zip(grid.slice(zz))
                .for_each(|(d, v)| *d = *v as f64);
        }
    }
    let presence = SequencePresence::new(present)
        .map_err(|_| PreprocessError::NoSequences(vol.patient_id.clone()))?;
    let target = match &vol.gt_mask {
        Some(m) => m.slice(z).to_vec(),
        None => vec![false; plane],
    };
    Ok(SliceSample {
        stack: Tensor::from_vec(&[n_seq * n_slices, h, w], data),
        target,
        patient_id: vol.patient_id.clone(),
        z_index: z,
        presence,
        n_slices,
        applied: None,
    })
}

/// Weighted stream over `(volume index, z)` pairs; slices with any
/// ground-truth voxel are drawn `oversample_factor` times as often.
#[derive(Debug, Clone)]
pub struct SliceSampler {
    entries: Vec<(usize, usize)>,
    probabilities: Vec<f64>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

pub fn build_sampler(
    volumes: &[StudyVolume],
    oversample_factor: f64,
    seed: u64,
) -> Result<SliceSampler, PreprocessError> {
    if !(oversample_factor >= 1.0) || !oversample_factor.is_finite() {
        return Err(PreprocessError::Argument(format!(
            "oversample factor {oversample_factor} must be at least 1"
        )));
    }
    let mut entries = Vec::new();
    let mut weights = Vec::new();
    for (v, vol) in volumes.iter().enumerate() {
        for z in 0..vol.depth() {
            let lesion = vol.gt_mask.as_ref().is_some_and(|m| m.slice_any(z));
            entries.push((v, z));
            weights.push(if lesion { oversample_factor } else { 1.0 });
        }
    }
    if entries.is_empty() {
        return Err(PreprocessError::Argument("dataset has no slices".into()));
    }
    let total: f64 = weights.iter().sum();
    let probabilities = weights.iter().map(|w| w / total).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| PreprocessError::Argument(e.to_string()))?;
    Ok(SliceSampler {
        entries,
        probabilities,
        dist,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl SliceSampler {
    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Iterator for SliceSampler {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        Some(self.entries[self.dist.sample(&mut self.rng)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{canonical_sequences, generate_phantom, PhantomSpec};

    #[test]
    fn constant_slice_equalizes_to_zero() {
        let out = equalize_slice(&[3.5; 64], 8, 8, [2, 2], None);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_tile_is_empirical_cdf() {
        let out = equalize_slice(&[0.0, 1.0, 2.0, 3.0], 2, 2, [1, 1], None);
        assert_eq!(out, vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn clipped_equalization_stays_in_range() {
        let s: Vec<f64> = (0..256).map(|i| ((i * 31 % 17) as f64).powi(2)).collect();
        let out = equalize_slice(&s, 16, 16, [4, 4], Some(2.0));
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn resize_identity_and_constant() {
        let s: Vec<f64> = (0..64).map(|i| i as f64).collect();
        assert_eq!(resize_slice(&s, 8, 8, 8, 8).unwrap(), s);
        let c = resize_slice(&[2.5; 16], 4, 4, 9, 13).unwrap();
        assert!(c.iter().all(|&v| (v - 2.5).abs() < 1e-15));
        assert!(resize_slice(&s, 8, 8, 0, 4).is_err());
    }

    #[test]
    fn resize_two_by_two_ramp() {
        // Half-pixel taps for 2 -> 4: source rows 0, 0.25, 0.75, 1 (clamped at the ends).
        let out = resize_slice(&[0.0, 0.0, 1.0, 1.0], 2, 2, 4, 4).unwrap();
        let rows: Vec<f64> = (0..4).map(|y| out[y * 4]).collect();
        assert_eq!(rows, vec![0.0, 0.25, 0.75, 1.0]);
        for y in 0..4 {
            assert!(out[y * 4..y * 4 + 4].iter().all(|&v| v == rows[y]));
        }
    }

    #[test]
    fn clamped_window_at_volume_start() {
        assert_eq!(clamped_window(0, 5, 10), vec![0, 0, 0, 1, 2]);
        assert_eq!(clamped_window(9, 5, 10), vec![7, 8, 9, 9, 9]);
    }

    fn volume() -> StudyVolume {
        let spec = PhantomSpec {
            grid_shape: [8, 16, 16],
            n_lesions_range: [1, 1],
            lesion_radius_range_mm: [1.5, 2.0],
            ..PhantomSpec::default()
        };
        generate_phantom(&spec, "s").unwrap()
    }

    #[test]
    fn stack_has_twenty_channels_and_centre_slices() {
        let v = volume();
        let canonical = canonical_sequences();
        let s = stack_2p5d(&v, 3, 5, &canonical).unwrap();
        assert_eq!(s.stack.shape(), &[20, 16, 16]);
        for (i, name) in canonical.iter().enumerate() {
            let centre: Vec<f64> = v.sequences[name].slice(3).iter().map(|&x| x as f64).collect();
            assert_eq!(s.channel(i, 2), &centre[..]);
        }
        assert!(stack_2p5d(&v, 8, 5, &canonical).is_err());
        assert!(stack_2p5d(&v, 0, 4, &canonical).is_err());
    }

    #[test]
    fn single_slice_single_sequence_is_identity() {
        let mut v = volume();
        v.sequences.retain(|k, _| k == "FLAIR");
        let canonical = vec!["FLAIR".to_string()];
        let s = stack_2p5d(&v, 4, 1, &canonical).unwrap();
        let expect: Vec<f64> = v.sequences["FLAIR"].slice(4).iter().map(|&x| x as f64).collect();
        assert_eq!(s.stack.data(), &expect[..]);
    }

    #[test]
    fn absent_sequence_channels_are_zero() {
        let mut v = volume();
        v.sequences.remove("CUBE-pre");
        let s = stack_2p5d(&v, 2, 5, &canonical_sequences()).unwrap();
        assert_eq!(s.presence.present(), &[false, true, true, true]);
        assert!(s.stack.data()[..5 * 256].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sampler_neutral_factor_is_uniform() {
        let vols = vec![volume(), volume()];
        let s = build_sampler(&vols, 1.0, 0).unwrap();
        let p0 = s.probabilities()[0];
        assert!(s.probabilities().iter().all(|&p| (p - p0).abs() < 1e-15));
        assert!((s.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(build_sampler(&vols, 0.5, 0).is_err());
        assert!(build_sampler(&[], 10.0, 0).is_err());
    }

    #[test]
    fn presence_scale() {
        let p = SequencePresence::new(vec![false, true, true, true]).unwrap();
        assert!((p.scale() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(SequencePresence::new(vec![false; 4]), Err(PreprocessError::AllAbsent));
        assert_eq!(SequencePresence::all(4).scale(), 1.0);
    }
}
