//! Lesion-level detection and segmentation metrics.
//!
//! A probability volume is binarised at a base threshold and every
//! 26-connected component becomes one predicted lesion, scored by the mean
//! probability of its voxels. A prediction is a true positive when its
//! centre of mass lies within a millimetre tolerance of a ground-truth voxel
//! centre; matching is one-to-one, greedy in descending score. Average
//! precision is the area under the all-point interpolated PR curve obtained
//! by sweeping the lesion score.

pub mod components;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Mask3, Shape3, Spacing3};
use components::{components_where, connected_components};

/// Binarisation threshold for predicted lesions.
pub const BASE_THRESHOLD: f64 = 0.1;
/// Centre-of-mass distance tolerance for a true positive.
pub const MATCH_TOLERANCE_MM: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("DICE is undefined for two empty sets")]
    EmptyDice,
    #[error("bootstrap needs at least 2 patients, got {0}")]
    TooFewPatients(usize),
    #[error("bootstrap needs at least one resample")]
    NoResamples,
    #[error("probability volume has {got} voxels, mask {mask:?} needs {expected}")]
    ShapeMismatch {
        got: usize,
        expected: usize,
        mask: Shape3,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionPrediction {
    #[serde(skip)]
    pub voxels: Vec<usize>,
    pub voxel_count: usize,
    pub center_of_mass_mm: [f64; 3],
    pub mean_probability: f64,
    /// Index of the matched ground-truth component.
    pub matched_gt: Option<usize>,
}

impl LesionPrediction {
    pub fn is_tp(&self) -> bool {
        self.matched_gt.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrSummary {
    pub pr_points: Vec<PrPoint>,
    pub map_score: f64,
    /// Recall at the base threshold; absent when there is no ground truth.
    pub max_sensitivity: Option<f64>,
}

/// Extracts predicted lesions: components of voxels with probability strictly
/// above `threshold`.
pub fn extract_lesions(
    prob: &[f64],
    shape: Shape3,
    spacing: Spacing3,
    threshold: f64,
) -> Vec<LesionPrediction> {
    assert_eq!(prob.len(), shape.iter().product::<usize>(), "probability volume length");
    let plane = shape[1] * shape[2];
    components_where(shape, |i| prob[i] > threshold)
        .into_iter()
        .map(|voxels| {
            let mut com = [0.0; 3];
            let mut psum = 0.0;
            for &i in &voxels {
                com[0] += (i / plane) as f64 * spacing[0];
                com[1] += ((i % plane) / shape[2]) as f64 * spacing[1];
                com[2] += (i % shape[2]) as f64 * spacing[2];
                psum += prob[i];
            }
            let n = voxels.len() as f64;
            com.iter_mut().for_each(|c| *c /= n);
            LesionPrediction {
                voxel_count: voxels.len(),
                voxels,
                center_of_mass_mm: com,
                mean_probability: psum / n,
                matched_gt: None,
            }
        })
        .collect()
}

/// Ground-truth lesions of one volume.
#[derive(Debug, Clone)]
pub struct GtLesions {
    pub components: Vec<Vec<usize>>,
    labels: Vec<Option<usize>>,
    shape: Shape3,
}

impl GtLesions {
    pub fn from_mask(mask: &Mask3) -> Self {
        let components = connected_components(mask);
        let mut labels = vec![None; mask.data().len()];
        for (c, comp) in components.iter().enumerate() {
            for &i in comp {
                labels[i] = Some(c);
            }
        }
        Self {
            components,
            labels,
            shape: mask.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Component of the nearest ground-truth voxel within `tol_mm` of `p`.
    /// Ties go to the voxel with the lowest linear index.
    fn nearest_within(&self, p: [f64; 3], spacing: Spacing3, tol_mm: f64) -> Option<usize> {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = ((p[a] - tol_mm) / spacing[a]).floor();
            let h = ((p[a] + tol_mm) / spacing[a]).ceil();
            if h < 0.0 || l > (self.shape[a] - 1) as f64 {
                return None;
            }
            lo[a] = l.max(0.0) as usize;
            hi[a] = (h as usize).min(self.shape[a] - 1);
        }
        let tol2 = tol_mm * tol_mm;
        let mut best: Option<(f64, usize)> = None;
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let i = (z * self.shape[1] + y) * self.shape[2] + x;
                    let Some(c) = self.labels[i] else { continue };
                    let d2 = (z as f64 * spacing[0] - p[0]).powi(2)
                        + (y as f64 * spacing[1] - p[1]).powi(2)
                        + (x as f64 * spacing[2] - p[2]).powi(2);
                    if d2 <= tol2 && best.map_or(true, |(b, _)| d2 < b) {
                        best = Some((d2, c));
                    }
                }
            }
        }
        best.map(|(_, c)| c)
    }
}

/// Indices of `preds` in descending score order; ties keep input order.
fn score_order(preds: &[LesionPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .mean_probability
            .partial_cmp(&preds[a].mean_probability)
            .expect("finite lesion scores")
    });
    order
}

/// Greedy one-to-one matching in descending score. A prediction whose
/// nearest lesion is already claimed is a false positive.
pub fn match_lesions(
    preds: &mut [LesionPrediction],
    gt: &GtLesions,
    spacing: Spacing3,
    tol_mm: f64,
) {
    let mut claimed = vec![false; gt.len()];
    for i in score_order(preds) {
        let p = &mut preds[i];
        p.matched_gt = match gt.nearest_within(p.center_of_mass_mm, spacing, tol_mm) {
            Some(c) if !claimed[c] => {
                claimed[c] = true;
                Some(c)
            }
            _ => None,
        };
    }
}

/// PR sweep over unique lesion scores and all-point interpolated AP.
pub fn pr_and_map(preds: &[LesionPrediction], n_gt: usize) -> PrSummary {
    let order = score_order(preds);
    let mut pr_points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = preds[order[k]].mean_probability;
        while k < order.len() && preds[order[k]].mean_probability == t {
            if preds[order[k]].is_tp() {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 };
        pr_points.push(PrPoint {
            threshold: t,
            recall,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    let map_score = if n_gt == 0 {
        0.0
    } else {
        let mut envelope = vec![0.0; pr_points.len()];
        let mut running = 0.0f64;
        for (e, p) in envelope.iter_mut().zip(&pr_points).rev() {
            running = running.max(p.precision);
            *e = running;
        }
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for (p, e) in pr_points.iter().zip(&envelope) {
            ap += (p.recall - prev_recall) * e;
            prev_recall = p.recall;
        }
        ap
    };
    let max_sensitivity = (n_gt > 0).then(|| tp as f64 / n_gt as f64);
    PrSummary {
        pr_points,
        map_score,
        max_sensitivity,
    }
}

/// 2|A∩B| / (|A|+|B|) over linear voxel indices.
pub fn dice(a: &[usize], b: &[usize]) -> Result<f64, DetectError> {
    if a.is_empty() && b.is_empty() {
        return Err(DetectError::EmptyDice);
    }
    let set: std::collections::HashSet<usize> = a.iter().copied().collect();
    let inter = b.iter().filter(|i| set.contains(i)).count();
    Ok(2.0 * inter as f64 / (a.len() + b.len()) as f64)
}

/// Matched predictions and ground-truth count for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEvaluation {
    pub patient_id: String,
    pub predictions: Vec<LesionPrediction>,
    pub n_gt: usize,
    pub tp_dice: Vec<f64>,
}

/// Runs extraction, matching and DICE for one probability volume.
pub fn evaluate_volume(
    patient_id: &str,
    prob: &[f64],
    gt_mask: &Mask3,
    spacing: Spacing3,
) -> Result<PatientEvaluation, DetectError> {
    let shape = gt_mask.shape();
    if prob.len() != shape.iter().product::<usize>() {
        return Err(DetectError::ShapeMismatch {
            got: prob.len(),
            expected: shape.iter().product(),
            mask: shape,
        });
    }
    let gt = GtLesions::from_mask(gt_mask);
    let mut predictions = extract_lesions(prob, shape, spacing, BASE_THRESHOLD);
    match_lesions(&mut predictions, &gt, spacing, MATCH_TOLERANCE_MM);
    let tp_dice = predictions
        .iter()
        .filter_map(|p| p.matched_gt.map(|c| dice(&p.voxels, &gt.components[c])))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PatientEvaluation {
        patient_id: patient_id.to_string(),
        predictions,
        n_gt: gt.len(),
        tp_dice,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub n_gt: usize,
    pub n_predictions: usize,
    pub map_score: f64,
    pub max_sensitivity: Option<f64>,
    pub mean_tp_dice: Option<f64>,
}

/// Lesions pooled across patients, with per-patient values alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub n_gt: usize,
    pub n_predictions: usize,
    pub n_true_positives: usize,
    pub pr_points: Vec<PrPoint>,
    pub map_score: f64,
    pub max_sensitivity: Option<f64>,
    pub tp_dice: Vec<f64>,
    pub mean_tp_dice: Option<f64>,
    pub per_patient: Vec<PatientSummary>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn pooled(patients: &[&PatientEvaluation]) -> (Vec<LesionPrediction>, usize) {
    let preds = patients
        .iter()
        .flat_map(|p| p.predictions.iter().cloned())
        .collect();
    (preds, patients.iter().map(|p| p.n_gt).sum())
}

pub fn pooled_map(patients: &[&PatientEvaluation]) -> f64 {
    let (preds, n_gt) = pooled(patients);
    pr_and_map(&preds, n_gt).map_score
}

pub fn build_report(patients: &[PatientEvaluation]) -> DetectionReport {
    let refs: Vec<&PatientEvaluation> = patients.iter().collect();
    let (preds, n_gt) = pooled(&refs);
    let summary = pr_and_map(&preds, n_gt);
    let tp_dice: Vec<f64> = patients.iter().flat_map(|p| p.tp_dice.iter().copied()).collect();
    let per_patient = patients
        .iter()
        .map(|p| {
            let s = pr_and_map(&p.predictions, p.n_gt);
            PatientSummary {
                patient_id: p.patient_id.clone(),
                n_gt: p.n_gt,
                n_predictions: p.predictions.len(),
                map_score: s.map_score,
                max_sensitivity: s.max_sensitivity,
                mean_tp_dice: mean(&p.tp_dice),
            }
        })
        .collect();
    DetectionReport {
        n_gt,
        n_predictions: preds.len(),
        n_true_positives: preds.iter().filter(|p| p.is_tp()).count(),
        pr_points: summary.pr_points,
        map_score: summary.map_score,
        max_sensitivity: summary.max_sensitivity,
        mean_tp_dice: mean(&tp_dice),
        tp_dice,
        per_patient,
    }
}

/// Percentile bootstrap (2.5 / 97.5) of the pooled mAP, resampling patients.
pub fn bootstrap_ci(
    patients: &[PatientEvaluation],
    n_resamples: usize,
    seed: u64,
) -> Result<(f64, f64), DetectError> {
    if patients.len() < 2 {
        return Err(DetectError::TooFewPatients(patients.len()));
    }
    if n_resamples == 0 {
        return Err(DetectError::NoResamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = patients.len();
    let mut scores: Vec<f64> = (0..n_resamples)
        .map(|_| {
            let pick: Vec<&PatientEvaluation> =
                (0..n).map(|_| &patients[rng.gen_range(0..n)]).collect();
            pooled_map(&pick)
        })
        .collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("finite mAP"));
    Ok((quantile(&scores, 0.025), quantile(&scores, 0.975)))
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
