//! Experiment commands behind the `seqfuse` binary: dataset generation,
//! grid training, censored evaluation, subset assays, saliency reports and
//! overlay images.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::detect::{bootstrap_ci, build_report, DetectionReport, BASE_THRESHOLD};
use crate::fusenet::{FusionConfig, FusionModel, FusionOp, ModelError};
use crate::phantom::{generate_phantom, read_dataset, write_dataset, PhantomError, StudyVolume};
use crate::preprocess::{preprocess_volume, PreprocessError};
use crate::saliency::{plot_ledger, SaliencyError, SaliencyLedger};
use crate::trainer::{
    censored_presence, check_censor, evaluate_patients, predict_volume, train, validate, TrainConfig,
    TrainError, TrainOutputs,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl ExperimentError {
    /// Process exit status: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.0)
    }
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Self::Config(m),
            TrainError::Model(ModelError::Config(m)) => Self::Config(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => Self::Config(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<PhantomError> for ExperimentError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::InvalidSpec(m) => Self::Config(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<PreprocessError> for ExperimentError {
    fn from(e: PreprocessError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<SaliencyError> for ExperimentError {
    fn from(e: SaliencyError) -> Self {
        Self::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn runtime(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Runtime(msg.into())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serialises");
    text.push('\n');
    write_file(path, text)
}

/// Patient id of member `i` of a split, e.g. `val003`.
pub fn patient_id(split: &str, i: usize) -> String {
    format!("{split}{i:03}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub root: PathBuf,
    pub patients: usize,
    pub lesions: usize,
}

/// Generates the train/val/test phantoms under `dataset_dir/<split>`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<SplitSummary>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (split, n) in cfg.split.named() {
        let vols = (0..n)
            .map(|i| generate_phantom(&cfg.phantom, &patient_id(split, i)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let root = cfg.dataset_dir.join(split);
        if root.exists() {
            std::fs::remove_dir_all(&root).map_err(|e| runtime(format!("{}: {e}", root.display())))?;
        }
        write_dataset(&vols, &root, false)?;
        out.push(SplitSummary {
            split: split.to_string(),
            root,
            patients: n,
            lesions: vols.iter().map(|v| v.gt_lesion_count).sum(),
        });
    }
    Ok(out)
}

/// Reads and preprocesses one split.
pub fn load_split(cfg: &ExperimentConfig, split: &str) -> Result<Vec<StudyVolume>> {
    let root = cfg.dataset_dir.join(split);
    if !root.is_dir() {
        return Err(runtime(format!(
            "dataset split {} does not exist; run `seqfuse generate` first",
            root.display()
        )));
    }
    read_dataset(&root, None)?
        .iter()
        .map(|v| Ok(preprocess_volume(v, &cfg.preprocess)?))
        .collect()
}

/// What a finished run directory records about how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub model: FusionConfig,
    pub training: TrainConfig,
    pub best_score: Option<f64>,
    pub best_iteration: Option<u64>,
    pub iterations: u64,
}

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub label: String,
    pub run_dir: PathBuf,
    /// True when an identical finished run was already on disk.
    pub skipped: bool,
    pub best_score: Option<f64>,
    pub best_iteration: Option<u64>,
}

/// Models trained by `cmd_train`: the configured grid, without the
/// subtraction network when dropout is on.
pub fn planned_models(cfg: &ExperimentConfig) -> Result<Vec<FusionConfig>> {
    Ok(cfg
        .fusion_configs()?
        .into_iter()
        .filter(|m| !(cfg.dropout.enabled && m.fusion_op == FusionOp::SubtractPair))
        .collect())
}

fn train_one(
    cfg: &ExperimentConfig,
    model_cfg: &FusionConfig,
    train_set: &[StudyVolume],
    val_set: &[StudyVolume],
) -> Result<TrainSummary> {
    let dir = cfg.run_dir(model_cfg);
    let tc = cfg.train_config(cfg.dropout.enabled);
    let record_path = dir.join(RUN_FILE);
    if record_path.exists() {
        let text = std::fs::read_to_string(&record_path).map_err(|e| runtime(e.to_string()))?;
        let prev: RunRecord = serde_json::from_str(&text)
            .map_err(|e| runtime(format!("{}: {e}", record_path.display())))?;
        if prev.model != *model_cfg || prev.training != tc {
            return Err(ExperimentError::Config(format!(
                "{} holds a finished run with a different configuration",
                dir.display()
            )));
        }
        return Ok(TrainSummary {
            label: model_cfg.label(),
            run_dir: dir,
            skipped: true,
            best_score: prev.best_score,
            best_iteration: prev.best_iteration,
        });
    }
    let model = FusionModel::build(model_cfg.clone(), cfg.seed)?;
    let outputs = TrainOutputs { dir: dir.clone() };
    let outcome = train(model, train_set, val_set, &cfg.canonical(), &tc, Some(&outputs))?;
    let record = RunRecord {
        model: model_cfg.clone(),
        training: tc,
        best_score: outcome.state.best_score,
        best_iteration: outcome.state.best_iteration,
        iterations: outcome.state.iteration,
    };
    write_json(&record_path, &record)?;
    Ok(TrainSummary {
        label: model_cfg.label(),
        run_dir: dir,
        skipped: false,
        best_score: record.best_score,
        best_iteration: record.best_iteration,
    })
}

/// Trains every planned model, `cfg.workers` at a time. Finished runs with an
/// identical configuration are skipped.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    let models = planned_models(cfg)?;
    let train_set = load_split(cfg, "train")?;
    let val_set = load_split(cfg, "val")?;
    let mut out = Vec::with_capacity(models.len());
    for chunk in models.chunks(cfg.workers) {
        let results: Vec<Result<TrainSummary>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|m| s.spawn(|| train_one(cfg, m, &train_set, &val_set)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(runtime("training worker panicked"))))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Parses `A,B` into a censor set checked against the canonical names.
pub fn parse_censor(text: &str, canonical: &[String]) -> Result<BTreeSet<String>> {
    let set: BTreeSet<String> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if !set.is_empty() {
        check_censor(&set, canonical)?;
    }
    Ok(set)
}

/// Checkpoints to evaluate: the given one, or every finished run's best.
pub fn checkpoints(cfg: &ExperimentConfig, given: Option<&Path>) -> Result<Vec<PathBuf>> {
    if let Some(p) = given {
        if !p.is_file() {
            return Err(runtime(format!("checkpoint {} does not exist", p.display())));
        }
        return Ok(vec![p.to_path_buf()]);
    }
    let found: Vec<PathBuf> = planned_models(cfg)?
        .iter()
        .map(|m| cfg.run_dir(m).join("best.ckpt"))
        .filter(|p| p.is_file())
        .collect();
    if found.is_empty() {
        return Err(runtime(format!(
            "no trained checkpoints under {}; run `seqfuse train` or pass --checkpoint",
            cfg.output_dir.display()
        )));
    }
    Ok(found)
}

fn censor_tag(censor: &BTreeSet<String>) -> String {
    if censor.is_empty() {
        "full".into()
    } else {
        format!("censor-{}", censor.iter().cloned().collect::<Vec<_>>().join("+"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    #[serde(skip)]
    pub checkpoint: PathBuf,
    pub censor: Vec<String>,
    /// 95% patient-bootstrap interval of the pooled mAP.
    pub map_ci: Option<[f64; 2]>,
    pub report: DetectionReport,
    #[serde(skip)]
    pub report_path: PathBuf,
}

/// Evaluates checkpoints on the test split under each censor set and writes
/// one report per pair next to the checkpoint.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    censor: Option<&BTreeSet<String>>,
) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    let canonical = cfg.canonical();
    let sets: Vec<BTreeSet<String>> = match censor {
        Some(c) => {
            if !c.is_empty() {
                check_censor(c, &canonical)?;
            }
            vec![c.clone()]
        }
        None => cfg.evaluation.censor_sets.clone(),
    };
    let ckpts = checkpoints(cfg, checkpoint)?;
    let test = load_split(cfg, "test")?;
    let mut out = Vec::new();
    for path in ckpts {
        let model = FusionModel::load(&path, None)?;
        for c in &sets {
            let evals = evaluate_patients(&model, &test, &canonical, (!c.is_empty()).then_some(c))?;
            let report = build_report(&evals);
            let map_ci = match cfg.evaluation.bootstrap_resamples {
                0 => None,
                n if evals.len() >= 2 => {
                    bootstrap_ci(&evals, n, cfg.seed).ok().map(|(lo, hi)| [lo, hi])
                }
                _ => None,
            };
            let dir = path.parent().unwrap_or(Path::new("."));
            let report_path = dir.join(format!("eval_{}.json", censor_tag(c)));
            let rec = EvalRecord {
                model: model.config().label(),
                checkpoint: path.clone(),
                censor: c.iter().cloned().collect(),
                map_ci,
                report,
                report_path: report_path.clone(),
            };
            write_json(&report_path, &rec)?;
            out.push(rec);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssayRow {
    pub sequences: Vec<String>,
    pub censored: Vec<String>,
    /// Upweighting applied to the surviving channels.
    pub scale: f64,
    pub map_score: f64,
    /// All sequences present, or exactly one withheld.
    pub leave_one_out: bool,
}

/// mAP for every non-empty subset of the sequences, best first.
pub fn cmd_assay(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<AssayRow>> {
    cfg.validate()?;
    let canonical = cfg.canonical();
    let model = FusionModel::load(checkpoint, None)?;
    let test = load_split(cfg, "test")?;
    let rows = subset_assay(&model, &test, &canonical)?;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    write_json(&dir.join("assay.json"), &rows)?;
    let mut csv = String::from("sequences,censored,scale,map,leave_one_out\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sequences.join("+"),
            r.censored.join("+"),
            r.scale,
            r.map_score,
            r.leave_one_out
        ));
    }
    write_file(&dir.join("assay.csv"), csv)?;
    Ok(rows)
}

pub fn subset_assay(model: &FusionModel, volumes: &[StudyVolume], canonical: &[String]) -> Result<Vec<AssayRow>> {
    let n = canonical.len();
    let first = volumes.first().ok_or_else(|| runtime("assay needs at least one volume"))?;
    let mut rows = Vec::with_capacity((1 << n) - 1);
    for mask in (1u32..1 << n).rev() {
        let kept: Vec<String> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| canonical[i].clone()).collect();
        let censored: BTreeSet<String> = canonical.iter().filter(|c| !kept.contains(c)).cloned().collect();
        let c = (!censored.is_empty()).then_some(&censored);
        let scale = censored_presence(first, canonical, c)?.scale();
        let map_score = validate(model, volumes, canonical, c)?;
        rows.push(AssayRow {
            leave_one_out: censored.len() <= 1,
            sequences: kept,
            censored: censored.into_iter().collect(),
            scale,
            map_score,
        });
    }
    rows.sort_by(|a, b| b.map_score.total_cmp(&a.map_score));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencySummary {
    pub run_dir: PathBuf,
    pub iterations_logged: usize,
    pub sequences: Vec<String>,
    pub cumulative_sequence: Vec<f64>,
    pub offsets: Vec<i64>,
    pub cumulative_offset: Vec<f64>,
    pub least_salient_sequence: String,
    pub files: Vec<PathBuf>,
}

/// Plots the saliency ledger of each run and summarises its final totals.
pub fn cmd_saliency_report(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<SaliencySummary>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for ckpt in checkpoints(cfg, checkpoint)? {
        let run_dir = ckpt.parent().unwrap_or(Path::new(".")).to_path_buf();
        let ledger = SaliencyLedger::read_csv(&run_dir.join("saliency.csv"))?;
        let last = ledger.last().ok_or(SaliencyError::Empty)?.clone();
        let files = plot_ledger(&ledger, &run_dir.join("saliency_report"))?;
        let least = last
            .cumulative_sequence
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| ledger.sequence_names()[i].clone())
            .unwrap_or_default();
        let summary = SaliencySummary {
            run_dir: run_dir.clone(),
            iterations_logged: ledger.rows().len(),
            sequences: ledger.sequence_names().to_vec(),
            cumulative_sequence: last.cumulative_sequence,
            offsets: ledger.offsets(),
            cumulative_offset: last.cumulative_offset,
            least_salient_sequence: least,
            files,
        };
        write_json(&run_dir.join("saliency_report").join("summary.json"), &summary)?;
        out.push(summary);
    }
    Ok(out)
}

const GT_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
const PRED_COLOR: Rgb<u8> = Rgb([255, 0, 255]);
const OVERLAP_COLOR: Rgb<u8> = Rgb([255, 255, 255]);
const UPSCALE: usize = 4;

fn upscale(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let (oh, ow) = (h * UPSCALE, w * UPSCALE);
    (0..oh * ow).map(|i| mask[(i / ow / UPSCALE) * w + (i % ow) / UPSCALE]).collect()
}

/// Mask pixels with a 4-neighbour outside the mask or on the image border.
pub fn contour(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            mask[i] && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
        })
        .collect()
}

/// Grey image of `background` with ground-truth contours in green,
/// prediction contours in magenta and coincident contour pixels in white.
pub fn render_overlay(background: &[f64], gt: Option<&[bool]>, pred: &[bool], h: usize, w: usize) -> RgbImage {
    let (lo, hi) = background
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (oh, ow) = (h * UPSCALE, w * UPSCALE);
    let pc = contour(&upscale(pred, h, w), oh, ow);
    let gc = gt.map(|g| contour(&upscale(g, h, w), oh, ow));
    RgbImage::from_fn(ow as u32, oh as u32, |x, y| {
        let i = y as usize * ow + x as usize;
        let g = gc.as_ref().is_some_and(|c| c[i]);
        match (g, pc[i]) {
            (true, true) => OVERLAP_COLOR,
            (true, false) => GT_COLOR,
            (false, true) => PRED_COLOR,
            _ => {
                let src = (y as usize / UPSCALE) * w + x as usize / UPSCALE;
                let v = ((background[src] - lo) / span * 255.0).round() as u8;
                Rgb([v, v, v])
            }
        }
    })
}

/// Writes overlay PNGs for slices `z_range` (default: all) of one test
/// patient (default: the first).
pub fn cmd_visualize(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    patient: Option<&str>,
    z_range: Option<(usize, usize)>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let canonical = cfg.canonical();
    let model = FusionModel::load(checkpoint, None)?;
    let test = load_split(cfg, "test")?;
    let vol = match patient {
        Some(id) => test
            .iter()
            .find(|v| v.patient_id == id)
            .ok_or_else(|| ExperimentError::Config(format!("no test patient {id:?}")))?,
        None => test.first().ok_or_else(|| runtime("test split is empty"))?,
    };
    let [nz, h, w] = vol.shape().ok_or_else(|| runtime("volume has no sequences"))?;
    let (z0, z1) = z_range.unwrap_or((0, nz));
    if z0 >= z1 || z1 > nz {
        return Err(ExperimentError::Config(format!("z range {z0}..{z1} is outside 0..{nz}")));
    }
    let prob = predict_volume(&model, vol, &canonical, None)?;
    let bg_name = ["BRAVO-post"]
        .into_iter()
        .map(String::from)
        .chain(canonical.iter().cloned())
        .find(|n| vol.sequences.contains_key(n))
        .expect("volume has a sequence");
    let bg = &vol.sequences[&bg_name];
    let plane = h * w;
    let mut files = Vec::new();
    for z in z0..z1 {
        let background: Vec<f64> = bg.slice(z).iter().map(|&v| v as f64).collect();
        let pred: Vec<bool> = prob[z * plane..(z + 1) * plane].iter().map(|&p| p >= BASE_THRESHOLD).collect();
        let gt = vol.gt_mask.as_ref().map(|m| m.slice(z));
        let img = render_overlay(&background, gt, &pred, h, w);
        let path = out_dir.join(format!("{}_z{z:03}.png", vol.patient_id));
        std::fs::create_dir_all(out_dir).map_err(|e| runtime(format!("{}: {e}", out_dir.display())))?;
        img.save(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        files.push(path);
    }
    Ok(files)
}
