//! Brute-force reference for lesion extraction, matching and AP.

#![allow(dead_code)]

use rand::Rng;

pub struct Grid {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub prob: Vec<f64>,
    pub gt: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleLesion {
    pub voxels: Vec<usize>,
    pub com: [f64; 3],
    pub score: f64,
    pub matched: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub lesions: Vec<OracleLesion>,
    pub gt_components: Vec<Vec<usize>>,
    pub map: f64,
    pub sensitivity: Option<f64>,
    pub tp_dice: Vec<f64>,
}

fn coords(shape: [usize; 3], i: usize) -> [usize; 3] {
    [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]]
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Union-find over every voxel pair at Chebyshev distance 1, components
/// sorted by smallest member, members sorted ascending.
pub fn components(shape: [usize; 3], inside: &[bool]) -> Vec<Vec<usize>> {
    let n = inside.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for a in 0..n {
        if !inside[a] {
            continue;
        }
        let ca = coords(shape, a);
        for b in a + 1..n {
            if !inside[b] {
                continue;
            }
            let cb = coords(shape, b);
            if (0..3).all(|k| ca[k].abs_diff(cb[k]) <= 1) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in (0..n).filter(|&i| inside[i]) {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|c| c[0]);
    out
}

fn mm(shape: [usize; 3], spacing: [f64; 3], i: usize) -> [f64; 3] {
    let c = coords(shape, i);
    [c[0] as f64 * spacing[0], c[1] as f64 * spacing[1], c[2] as f64 * spacing[2]]
}

/// Scans every ground-truth voxel; ties go to the lowest index.
fn nearest_gt(g: &Grid, labels: &[Option<usize>], p: [f64; 3], tol: f64) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for i in 0..g.gt.len() {
        if let Some(c) = labels[i] {
            let q = mm(g.shape, g.spacing, i);
            let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
            if d2 <= tol * tol && best.map_or(true, |(b, _)| d2 < b) {
                best = Some((d2, c));
            }
        }
    }
    best.map(|(_, c)| c)
}

fn dice_of(n: usize, a: &[usize], b: &[usize]) -> f64 {
    let mut ma = vec![false; n];
    a.iter().for_each(|&i| ma[i] = true);
    let inter = b.iter().filter(|&&i| ma[i]).count();
    2.0 * inter as f64 / (a.len() + b.len()) as f64
}

/// AP as the sum over recall steps of the best precision at any threshold
/// whose recall is at least that step, thresholds being every distinct score.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let curve: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<&(f64, bool)> = scored.iter().filter(|s| s.0 >= t).collect();
            let tp = kept.iter().filter(|s| s.1).count() as f64;
            (tp / n_gt as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        let best = curve[k..].iter().map(|c| c.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

pub fn evaluate(g: &Grid, threshold: f64, tol: f64) -> OracleResult {
    let n = g.prob.len();
    let above: Vec<bool> = g.prob.iter().map(|&p| p > threshold).collect();
    let gt_components = components(g.shape, &g.gt);
    let mut labels = vec![None; n];
    for (c, comp) in gt_components.iter().enumerate() {
        comp.iter().for_each(|&i| labels[i] = Some(c));
    }
    let mut lesions: Vec<OracleLesion> = components(g.shape, &above)
        .into_iter()
        .map(|voxels| {
            let k = voxels.len() as f64;
            let mut com = [0.0; 3];
            for &i in &voxels {
                let q = mm(g.shape, g.spacing, i);
                (0..3).for_each(|a| com[a] += q[a]);
            }
            com.iter_mut().for_each(|c| *c /= k);
            let score = voxels.iter().map(|&i| g.prob[i]).sum::<f64>() / k;
            OracleLesion { voxels, com, score, matched: None }
        })
        .collect();
    let mut order: Vec<usize> = (0..lesions.len()).collect();
    order.sort_by(|&a, &b| lesions[b].score.partial_cmp(&lesions[a].score).unwrap().then(a.cmp(&b)));
    let mut claimed = vec![false; gt_components.len()];
    for i in order {
        if let Some(c) = nearest_gt(g, &labels, lesions[i].com, tol) {
            if !claimed[c] {
                claimed[c] = true;
                lesions[i].matched = Some(c);
            }
        }
    }
    let scored: Vec<(f64, bool)> = lesions.iter().map(|l| (l.score, l.matched.is_some())).collect();
    let n_gt = gt_components.len();
    let tp = scored.iter().filter(|s| s.1).count();
    let tp_dice = lesions
        .iter()
        .filter_map(|l| l.matched.map(|c| dice_of(n, &l.voxels, &gt_components[c])))
        .collect();
    OracleResult {
        map: average_precision(&scored, n_gt),
        sensitivity: (n_gt > 0).then(|| tp as f64 / n_gt as f64),
        lesions,
        gt_components,
        tp_dice,
    }
}

/// Random grid with dyadic probabilities and spacings, so means and centres
/// of mass are exact and score ties occur.
pub fn random_grid<R: Rng>(rng: &mut R, shape: [usize; 3]) -> Grid {
    let n: usize = shape.iter().product();
    const SPACINGS: [f64; 4] = [0.5, 0.75, 1.0, 1.25];
    let spacing = [0, 1, 2].map(|_| SPACINGS[rng.gen_range(0..SPACINGS.len())]);
    let density = rng.gen_range(0.02..0.3);
    let prob = (0..n)
        .map(|_| {
            if rng.gen_bool(density) {
                rng.gen_range(1..=16) as f64 / 16.0
            } else {
                [0.0, 0.0625, 0.1][rng.gen_range(0..3)]
            }
        })
        .collect();
    let mut gt = vec![false; n];
    for _ in 0..rng.gen_range(0..5) {
        let c = [0, 1, 2].map(|a| rng.gen_range(0..shape[a]) as i64);
        let r = rng.gen_range(0..=1) as i64;
        for i in 0..n {
            let p = coords(shape, i);
            if (0..3).all(|a| (p[a] as i64 - c[a]).abs() <= r) {
                gt[i] = true;
            }
        }
    }
    for v in gt.iter_mut() {
        if rng.gen_bool(0.01) {
            *v = true;
        }
    }
    Grid { shape, spacing, prob, gt }
}

/// Differences between the library pipeline and the oracle on one grid.
pub fn compare(g: &Grid) -> Result<(), String> {
    use seqfuse::detect::{evaluate_volume, pr_and_map, GtLesions, BASE_THRESHOLD, MATCH_TOLERANCE_MM};
    use seqfuse::grid::Mask3;
    let mask = Mask3::from_vec(g.shape, g.gt.clone()).ok_or("mask shape")?;
    let want = evaluate(g, BASE_THRESHOLD, MATCH_TOLERANCE_MM);
    let got = evaluate_volume("grid", &g.prob, &mask, g.spacing).map_err(|e| e.to_string())?;
    let gt_got: Vec<Vec<usize>> = GtLesions::from_mask(&mask)
        .components
        .into_iter()
        .map(|mut c| {
            c.sort_unstable();
            c
        })
        .collect();
    if gt_got != want.gt_components {
        return Err("ground-truth components differ".into());
    }
    if got.n_gt != want.gt_components.len() {
        return Err(format!("n_gt {} vs {}", got.n_gt, want.gt_components.len()));
    }
    if got.predictions.len() != want.lesions.len() {
        return Err(format!("{} lesions vs {}", got.predictions.len(), want.lesions.len()));
    }
    for (k, (p, o)) in got.predictions.iter().zip(&want.lesions).enumerate() {
        let mut v = p.voxels.clone();
        v.sort_unstable();
        if v != o.voxels || p.voxel_count != o.voxels.len() {
            return Err(format!("lesion {k} voxels differ"));
        }
        if p.mean_probability != o.score || p.center_of_mass_mm != o.com {
            return Err(format!("lesion {k} score or centre differs"));
        }
        if p.matched_gt != o.matched {
            return Err(format!("lesion {k} matched {:?} vs {:?}", p.matched_gt, o.matched));
        }
    }
    let s = pr_and_map(&got.predictions, got.n_gt);
    if (s.map_score - want.map).abs() > 1e-12 {
        return Err(format!("mAP {} vs {}", s.map_score, want.map));
    }
    if s.max_sensitivity != want.sensitivity {
        return Err(format!("sensitivity {:?} vs {:?}", s.max_sensitivity, want.sensitivity));
    }
    if got.tp_dice != want.tp_dice {
        return Err(format!("DICE {:?} vs {:?}", got.tp_dice, want.tp_dice));
    }
    Ok(())
}
