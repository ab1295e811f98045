//! Training loop with validation-driven checkpoint selection, and
//! full-volume inference for evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{evaluate_volume, pooled_map, DetectError, PatientEvaluation};
use crate::fusenet::{BnMode, FusionModel, FusionOp, IntegrationLevel, ModelError, SharingMode, CE_EPS};
use crate::nn::{Adam, AdamConfig, ParamId, Tape, Tensor};
use crate::phantom::StudyVolume;
use crate::preprocess::{build_sampler, stack_2p5d, PreprocessError, SequencePresence};
use crate::saliency::{SaliencyError, SaliencyLedger};
use crate::seqdrop::{draw_drop_mask, presence_for_inference, DropError, DropPolicy};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss diverged to {loss} at iteration {iteration}")]
    Diverged { iteration: u64, loss: f64 },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("volume {0} has no ground truth")]
    MissingGroundTruth(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Drop(#[from] DropError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validate every this many iterations and at the last one.
    pub val_every: u64,
    /// Sequences withheld from the validation inputs.
    #[serde(default)]
    pub val_censor: Option<BTreeSet<String>>,
    pub seed: u64,
    /// Integration-level dropout; `None` disables it.
    #[serde(default)]
    pub dropout: Option<DropPolicy>,
    pub oversample_factor: f64,
    /// Record saliency every this many iterations; 0 disables it.
    pub saliency_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            val_every: 200,
            val_censor: None,
            seed: 0,
            dropout: None,
            oversample_factor: 10.0,
            saliency_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, canonical: &[String]) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.val_every == 0 {
            return bad("val_every must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if let Some(p) = &self.dropout {
            p.validate()?;
        }
        if let Some(c) = &self.val_censor {
            check_censor(c, canonical)?;
        }
        Ok(())
    }

    /// Iterations in one pass: slices divided by batch size, rounded up.
    pub fn iterations(&self, n_slices_total: usize) -> u64 {
        (self.epochs * n_slices_total.div_ceil(self.batch_size)) as u64
    }
}

/// Rejects censor sets naming unknown sequences or removing every sequence.
pub fn check_censor(censor: &BTreeSet<String>, canonical: &[String]) -> Result<(), TrainError> {
    if let Some(u) = censor.iter().find(|c| !canonical.contains(c)) {
        return Err(TrainError::Config(format!("unknown sequence {u:?} in censor set")));
    }
    if canonical.iter().all(|c| censor.contains(c)) {
        return Err(TrainError::Config("censor set removes every sequence".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub iteration: u64,
    pub score: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Iterations completed.
    pub iteration: u64,
    pub best_score: Option<f64>,
    pub best_iteration: Option<u64>,
    /// Training loss (cross-entropy plus tie penalty) per iteration.
    pub loss_history: Vec<f64>,
    pub val_history: Vec<ValPoint>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub best: FusionModel,
    pub last: FusionModel,
    pub saliency: SaliencyLedger,
}

/// Where [`train`] writes its artefacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn saliency_csv(&self) -> PathBuf {
        self.dir.join("saliency.csv")
    }
    pub fn state(&self) -> PathBuf {
        self.dir.join("train_state.json")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// CSV of `iteration,loss,val_score` with an empty score between validations.
pub fn render_log(state: &TrainState) -> String {
    let mut s = String::from("iteration,loss,val_score\n");
    let mut vals = state.val_history.iter().peekable();
    for (i, loss) in state.loss_history.iter().enumerate() {
        let it = i as u64 + 1;
        let score = match vals.peek() {
            Some(v) if v.iteration == it => vals.next().map(|v| v.score.to_string()).unwrap_or_default(),
            _ => String::new(),
        };
        let _ = writeln!(s, "{it},{loss},{score}");
    }
    s
}

fn add_grads(into: &mut Vec<(ParamId, Tensor)>, extra: Vec<(ParamId, Tensor)>) {
    for (id, g) in extra {
        match into.iter_mut().find(|(p, _)| *p == id) {
            Some((_, t)) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            None => into.push((id, g)),
        }
    }
}

/// Trains `model` on `train_set`, validating on `val_set` and keeping the
/// best-scoring parameters. Deterministic for a fixed config.
pub fn train(
    mut model: FusionModel,
    train_set: &[StudyVolume],
    val_set: &[StudyVolume],
    canonical: &[String],
    cfg: &TrainConfig,
    out: Option<&TrainOutputs>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(canonical)?;
    if val_set.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    if let Some(v) = val_set.iter().find(|v| v.gt_mask.is_none()) {
        return Err(TrainError::MissingGroundTruth(v.patient_id.clone()));
    }
    let mc = model.config().clone();
    if mc.n_seq != canonical.len() {
        return Err(TrainError::Config(format!(
            "model expects {} sequences, {} canonical names given",
            mc.n_seq,
            canonical.len()
        )));
    }
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir).map_err(io_err(&o.dir))?;
    }
    let mut sampler = build_sampler(train_set, cfg.oversample_factor, cfg.seed)?;
    let total = cfg.iterations(sampler.len());
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(1);
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.store(),
    );
    let tied = mc.sharing == Some(SharingMode::L2Tied);
    let prob_loss = mc.integration == IntegrationLevel::End && mc.fusion_op == FusionOp::Mean;
    let mut state = TrainState {
        iteration: 0,
        best_score: None,
        best_iteration: None,
        loss_history: Vec::with_capacity(total as usize),
        val_history: Vec::new(),
    };
    let mut ledger = SaliencyLedger::new(canonical.to_vec(), mc.n_slices);
    let mut best = model.clone();

    for it in 1..=total {
        let mut stacks = Vec::with_capacity(cfg.batch_size);
        let mut factors = Vec::with_capacity(cfg.batch_size * mc.in_channels());
        let mut target = Vec::new();
        for _ in 0..cfg.batch_size {
            let (v, z) = sampler.next().expect("sampler is infinite");
            let s = stack_2p5d(&train_set[v], z, mc.n_slices, canonical)?;
            let presence = match &cfg.dropout {
                Some(p) => {
                    let drawn = draw_drop_mask(p, mc.n_seq, &mut drop_rng);
                    let both: Vec<bool> = drawn
                        .present()
                        .iter()
                        .zip(s.presence.present())
                        .map(|(&a, &b)| a && b)
                        .collect();
                    SequencePresence::new(both).unwrap_or_else(|_| s.presence.clone())
                }
                None => s.presence.clone(),
            };
            factors.extend(presence.channel_factors(mc.n_slices));
            target.extend(s.target_f64());
            let (h, w) = s.hw();
            stacks.push(s.stack.reshape(&[1, mc.in_channels(), h, w]));
        }
        let x = Tensor::stack_batch(&stacks);
        let want_saliency = cfg.saliency_every > 0 && it % cfg.saliency_every == 0;
        let mut tape = Tape::new();
        let f = model.forward_tape(&mut tape, &x, Some(&factors), BnMode::Train, want_saliency)?;
        let loss_var = match (prob_loss, f.logits) {
            (false, Some(l)) => tape.bce_logits(l, &target),
            _ => tape.bce_prob(f.prob, &target, CE_EPS),
        };
        let mut loss = tape.value(loss_var).item();
        let grads = tape.backward(loss_var);
        let mut pg = grads.params().to_vec();
        if tied {
            loss += model.tie_penalty()?;
            add_grads(&mut pg, model.tie_penalty_grad()?);
        }
        if !loss.is_finite() {
            if let Some(o) = out {
                let _ = std::fs::write(o.log(), render_log(&state));
            }
            return Err(TrainError::Diverged { iteration: it, loss });
        }
        if want_saliency {
            let g = f.input_gradient(&tape, &grads).expect("inputs require grad");
            ledger.accumulate(it, &g)?;
        }
        adam.step(model.store_mut(), &pg);
        model.update_running_stats(&f.bn_records);
        state.loss_history.push(loss);
        state.iteration = it;

        if it % cfg.val_every == 0 || it == total {
            let score = validate(&model, val_set, canonical, cfg.val_censor.as_ref())?;
            let improved = state.best_score.map_or(true, |b| score > b);
            if improved {
                state.best_score = Some(score);
                state.best_iteration = Some(it);
                best = model.clone();
                if let Some(o) = out {
                    best.save(&o.best_checkpoint())?;
                }
            }
            state.val_history.push(ValPoint {
                iteration: it,
                score,
                improved,
            });
        }
    }
    if let Some(o) = out {
        std::fs::write(o.log(), render_log(&state)).map_err(io_err(&o.log()))?;
        model.save(&o.last_checkpoint())?;
        if !ledger.is_empty() {
            ledger.write_csv(&o.saliency_csv())?;
        }
        let json = serde_json::to_string_pretty(&state).expect("state serialises");
        std::fs::write(o.state(), json).map_err(io_err(&o.state()))?;
    }
    Ok(TrainOutcome {
        state,
        best,
        last: model,
        saliency: ledger,
    })
}

/// Presence of `vol` after withholding `censor`, with the matching scale.
pub fn censored_presence(
    vol: &StudyVolume,
    canonical: &[String],
    censor: Option<&BTreeSet<String>>,
) -> Result<SequencePresence, TrainError> {
    if let Some(c) = censor {
        check_censor(c, canonical)?;
    }
    let available: BTreeSet<String> = canonical
        .iter()
        .filter(|c| vol.sequences.contains_key(*c) && censor.map_or(true, |s| !s.contains(*c)))
        .cloned()
        .collect();
    Ok(presence_for_inference(&available, canonical)?)
}

/// Slice-by-slice inference stacked into a probability volume (z, y, x).
pub fn predict_volume(
    model: &FusionModel,
    vol: &StudyVolume,
    canonical: &[String],
    censor: Option<&BTreeSet<String>>,
) -> Result<Vec<f64>, TrainError> {
    const CHUNK: usize = 16;
    let k = model.config().n_slices;
    let presence = censored_presence(vol, canonical, censor)?;
    let factors_one = presence.channel_factors(k);
    let scaled = factors_one.iter().any(|&f| f != 1.0);
    let mut out = Vec::new();
    let depth = vol.depth();
    for start in (0..depth).step_by(CHUNK) {
        let end = (start + CHUNK).min(depth);
        let mut stacks = Vec::with_capacity(end - start);
        for z in start..end {
            let s = stack_2p5d(vol, z, k, canonical)?;
            let (h, w) = s.hw();
            stacks.push(s.stack.reshape(&[1, canonical.len() * k, h, w]));
        }
        let x = Tensor::stack_batch(&stacks);
        let factors: Vec<f64> = (0..end - start).flat_map(|_| factors_one.iter().copied()).collect();
        let mut tape = Tape::new();
        let f = model.forward_tape(&mut tape, &x, scaled.then_some(&factors[..]), BnMode::Eval, false)?;
        out.extend_from_slice(tape.value(f.prob).data());
    }
    Ok(out)
}

/// Per-patient detection results for volumes with ground truth.
pub fn evaluate_patients(
    model: &FusionModel,
    volumes: &[StudyVolume],
    canonical: &[String],
    censor: Option<&BTreeSet<String>>,
) -> Result<Vec<PatientEvaluation>, TrainError> {
    volumes
        .iter()
        .map(|v| {
            let gt = v
                .gt_mask
                .as_ref()
                .ok_or_else(|| TrainError::MissingGroundTruth(v.patient_id.clone()))?;
            let prob = predict_volume(model, v, canonical, censor)?;
            Ok(evaluate_volume(&v.patient_id, &prob, gt, v.spacing_mm)?)
        })
        .collect()
}

/// Pooled mAP over `volumes`, optionally with sequences censored.
pub fn validate(
    model: &FusionModel,
    volumes: &[StudyVolume],
    canonical: &[String],
    censor: Option<&BTreeSet<String>>,
) -> Result<f64, TrainError> {
    let evals = evaluate_patients(model, volumes, canonical, censor)?;
    let refs: Vec<&PatientEvaluation> = evals.iter().collect();
    Ok(pooled_map(&refs))
}
