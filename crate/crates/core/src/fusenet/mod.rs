//! Segmentation networks parameterised by integration level, weight sharing
//! and fusion operator.
//!
//! Every network is a strided residual encoder followed by a dilated
//! convolution pyramid head and bilinear upsampling to input resolution.
//! Branch parameters are grouped so that shared branches hold the same
//! [`ParamId`]s and tied branches hold distinct, identically initialised ones.

mod checkpoint;
mod config;
#[cfg(test)]
mod tests;

pub use config::{BackboneSpec, FusionConfig, FusionOp, IntegrationLevel, SharingMode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ConvGeom, ParamId, ParamStore, Tape, Tensor, Var};
use crate::preprocess::SliceSample;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Probability clamp for cross-entropy on probabilities.
pub const CE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ConvBn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    geom: ConvGeom,
    bn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stage {
    down: ConvBn,
    res1: ConvBn,
    res2: ConvBn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Head {
    aspp: Vec<ConvBn>,
    proj: ConvBn,
    cls_w: ParamId,
    cls_b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Branch {
    stages: Vec<Stage>,
    head: Option<Head>,
}

impl Branch {
    fn conv_bns(&self) -> Vec<ConvBn> {
        let mut out: Vec<ConvBn> = self.stages.iter().flat_map(|s| [s.down, s.res1, s.res2]).collect();
        if let Some(h) = &self.head {
            out.extend(h.aspp.iter().copied());
            out.push(h.proj);
        }
        out
    }

    /// Parameter ids in structural order.
    fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self
            .conv_bns()
            .iter()
            .flat_map(|c| [c.w, c.gamma, c.beta])
            .collect();
        if let Some(h) = &self.head {
            out.push(h.cls_w);
            out.push(h.cls_b);
        }
        out
    }

    fn map(&self, p: &mut impl FnMut(ParamId) -> ParamId, bn: &mut impl FnMut(usize) -> usize) -> Branch {
        fn cb(c: &ConvBn, p: &mut impl FnMut(ParamId) -> ParamId, bn: &mut impl FnMut(usize) -> usize) -> ConvBn {
            ConvBn {
                w: p(c.w),
                gamma: p(c.gamma),
                beta: p(c.beta),
                geom: c.geom,
                bn: bn(c.bn),
            }
        }
        let stages = self
            .stages
            .iter()
            .map(|s| Stage {
                down: cb(&s.down, p, bn),
                res1: cb(&s.res1, p, bn),
                res2: cb(&s.res2, p, bn),
            })
            .collect();
        let head = self.head.as_ref().map(|h| Head {
            aspp: h.aspp.iter().map(|c| cb(c, p, bn)).collect(),
            proj: cb(&h.proj, p, bn),
            cls_w: p(h.cls_w),
            cls_b: p(h.cls_b),
        });
        Branch { stages, head }
    }
}

/// Running batch-normalisation statistics of one layer instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch statistics observed during a training forward pass.
#[derive(Debug, Clone)]
pub struct BnRecord {
    slot: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; records them for [`FusionModel::update_running_stats`].
    Train,
    /// Stored running statistics.
    Eval,
}

/// Tape handles produced by [`FusionModel::forward_tape`].
pub struct Forward {
    /// Pre-dropout input leaves: one for input-level, one per sequence otherwise.
    pub inputs: Vec<Var>,
    /// Two-class logits at input resolution, when the output is a single softmax.
    pub logits: Option<Var>,
    /// Foreground probability, (N, 1, H, W).
    pub prob: Var,
    pub branch_features: Vec<Var>,
    pub fused: Option<Var>,
    pub bn_records: Vec<BnRecord>,
}

impl Forward {
    /// Gradient with respect to the full (N, C, H, W) input, reassembled from
    /// the per-sequence leaves. `None` when the inputs did not require grad.
    pub fn input_gradient(&self, tape: &Tape, grads: &crate::nn::Gradients) -> Option<Tensor> {
        let parts: Vec<(&[f64], (usize, usize, usize, usize))> = self
            .inputs
            .iter()
            .map(|&v| grads.of(v).map(|g| (g, tape.value(v).dims4())))
            .collect::<Option<_>>()?;
        let (n, _, h, w) = parts[0].1;
        let c: usize = parts.iter().map(|(_, d)| d.1).sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c * hw);
        for b in 0..n {
            for (g, d) in &parts {
                out.extend_from_slice(&g[b * d.1 * hw..(b + 1) * d.1 * hw]);
            }
        }
        Some(Tensor::from_vec(&[n, c, h, w], out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    config: FusionConfig,
    store: ParamStore,
    bn: Vec<BnStats>,
    branches: Vec<Branch>,
    late: Vec<Stage>,
    head: Option<Head>,
}

struct Builder {
    store: ParamStore,
    bn: Vec<BnStats>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn he(&mut self, shape: &[usize]) -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(&mut self.rng))
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> ConvBn {
        let w = self.he(&[cout, cin, geom.kernel, geom.kernel]);
        let w = self.store.add(format!("{name}.w"), w);
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::filled(&[cout], 1.0));
        let beta = self.store.add(format!("{name}.beta"), Tensor::zeros(&[cout]));
        self.bn.push(BnStats {
            mean: vec![0.0; cout],
            var: vec![1.0; cout],
        });
        ConvBn {
            w,
            gamma,
            beta,
            geom,
            bn: self.bn.len() - 1,
        }
    }

    fn stage(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Stage {
        Stage {
            down: self.conv_bn(&format!("{name}/down"), cin, cout, ConvGeom::new(3, stride, 1, 1)),
            res1: self.conv_bn(&format!("{name}/res1"), cout, cout, ConvGeom::new(3, 1, 1, 1)),
            res2: self.conv_bn(&format!("{name}/res2"), cout, cout, ConvGeom::new(3, 1, 1, 1)),
        }
    }

    fn stages(&mut self, prefix: &str, b: &BackboneSpec, range: std::ops::Range<usize>, mut cin: usize) -> Vec<Stage> {
        range
            .map(|i| {
                let st = self.stage(&format!("{prefix}/stage{i}"), cin, b.width(i), b.stride(i));
                cin = b.width(i);
                st
            })
            .collect()
    }

    fn head(&mut self, prefix: &str, b: &BackboneSpec, cin: usize) -> Head {
        let hw = b.head_width();
        let aspp = b
            .dilation_rates
            .iter()
            .enumerate()
            .map(|(j, &d)| self.conv_bn(&format!("{prefix}/aspp{j}"), cin, hw, ConvGeom::new(3, 1, d, d)))
            .collect::<Vec<_>>();
        let proj = self.conv_bn(&format!("{prefix}/proj"), hw * aspp.len(), hw, ConvGeom::new(1, 1, 0, 1));
        let cls_w = self.he(&[2, hw, 1, 1]);
        let cls_w = self.store.add(format!("{prefix}/cls.w"), cls_w);
        let cls_b = self.store.add(format!("{prefix}/cls.b"), Tensor::zeros(&[2]));
        Head {
            aspp,
            proj,
            cls_w,
            cls_b,
        }
    }

    /// A branch on the same parameters as `template` with its own running statistics.
    fn share_copy(&mut self, template: &Branch) -> Branch {
        let bn = &mut self.bn;
        template.map(&mut |p| p, &mut |s| {
            let stats = bn[s].clone();
            bn.push(stats);
            bn.len() - 1
        })
    }

    fn tie_copy(&mut self, template: &Branch, b: usize) -> Branch {
        let store = &mut self.store;
        let bn = &mut self.bn;
        template.map(
            &mut |p| {
                let name = store.name(p).replacen("branch0/", &format!("branch{b}/"), 1);
                let v = store.get(p).clone();
                store.add(name, v)
            },
            &mut |s| {
                let stats = bn[s].clone();
                bn.push(stats);
                bn.len() - 1
            },
        )
    }
}

impl FusionModel {
    /// Builds a model with deterministic initialisation for `seed`.
    pub fn build(config: FusionConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut bd = Builder {
            store: ParamStore::new(),
            bn: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let bb = config.backbone.clone();
        let n = config.n_seq;
        let mut late = Vec::new();
        let mut head = None;
        let branches = match config.integration {
            IntegrationLevel::Input => {
                let stages = bd.stages("net", &bb, 0..bb.n_stages, config.in_channels());
                head = Some(bd.head("head", &bb, bb.width(bb.n_stages - 1)));
                vec![Branch { stages, head: None }]
            }
            IntegrationLevel::Mid | IntegrationLevel::End => {
                let end = config.integration == IntegrationLevel::End;
                let split = if end { bb.n_stages } else { bb.split_stage };
                let sharing = config.sharing.expect("validated");
                let make = |bd: &mut Builder, prefix: &str| {
                    let stages = bd.stages(prefix, &bb, 0..split, config.n_slices);
                    let head = end.then(|| bd.head(&format!("{prefix}/head"), &bb, bb.width(bb.n_stages - 1)));
                    Branch { stages, head }
                };
                let branches = match sharing {
                    SharingMode::Shared => {
                        let t = make(&mut bd, "shared");
                        let mut v = vec![t.clone()];
                        for _ in 1..n {
                            v.push(bd.share_copy(&t));
                        }
                        if let Some([pre, post]) = config.subtract_pair {
                            // The pair also shares running statistics so both sides are one function.
                            v[post] = v[pre].clone();
                        }
                        v
                    }
                    SharingMode::Independent => (0..n).map(|b| make(&mut bd, &format!("branch{b}"))).collect(),
                    SharingMode::L2Tied => {
                        let t = make(&mut bd, "branch0");
                        let mut v = vec![t.clone()];
                        for b in 1..n {
                            v.push(bd.tie_copy(&t, b));
                        }
                        v
                    }
                };
                if !end {
                    let fused_c = Self::fused_channels(&config);
                    late = bd.stages("late", &bb, split..bb.n_stages, fused_c);
                    let cin = if split == bb.n_stages { fused_c } else { bb.width(bb.n_stages - 1) };
                    head = Some(bd.head("head", &bb, cin));
                }
                branches
            }
        };
        Ok(Self {
            config,
            store: bd.store,
            bn: bd.bn,
            branches,
            late,
            head,
        })
    }

    fn fused_channels(config: &FusionConfig) -> usize {
        let w = config.backbone.width(config.backbone.split_stage - 1);
        match config.fusion_op {
            FusionOp::SubtractPair => w * (config.n_seq - 1),
            _ => w * config.n_seq,
        }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn
    }

    /// Scalars over distinct parameter storage.
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Distinct scalars in the per-sequence branches (the early stages for
    /// mid-level, the whole per-sequence networks for end-level, zero for
    /// input-level).
    pub fn branch_param_count(&self) -> usize {
        if self.config.integration == IntegrationLevel::Input {
            return 0;
        }
        let ids: Vec<ParamId> = self.branches.iter().flat_map(Branch::params).collect();
        self.store.count_of(&ids)
    }

    /// Parameter ids of each branch, aligned by position across branches.
    pub fn branch_groups(&self) -> Vec<Vec<ParamId>> {
        if self.config.integration == IntegrationLevel::Input {
            return Vec::new();
        }
        self.branches.iter().map(Branch::params).collect()
    }

    /// `λ Σᵢ ‖θᵢ − θ̄‖²` over tied branch groups, θ̄ their elementwise mean.
    pub fn tie_penalty(&self) -> Result<f64, ModelError> {
        let groups = self.tied_groups()?;
        let values: Vec<Vec<&[f64]>> = groups
            .iter()
            .map(|g| g.iter().map(|&id| self.store.get(id).data()).collect())
            .collect();
        Ok(tie_penalty_of(&values, self.config.tie_lambda))
    }

    /// Gradient of [`Self::tie_penalty`]: `2λ(θᵢ − θ̄)` for every tied parameter.
    pub fn tie_penalty_grad(&self) -> Result<Vec<(ParamId, Tensor)>, ModelError> {
        let groups = self.tied_groups()?;
        let lam = self.config.tie_lambda;
        let mut out = Vec::new();
        for k in 0..groups[0].len() {
            let vals: Vec<&[f64]> = groups.iter().map(|g| self.store.get(g[k]).data()).collect();
            let mean = elementwise_mean(&vals);
            for g in &groups {
                let t = self.store.get(g[k]);
                let d = t.data().iter().zip(&mean).map(|(a, m)| 2.0 * lam * (a - m)).collect();
                out.push((g[k], Tensor::from_vec(t.shape(), d)));
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn tied_groups(&self) -> Result<Vec<Vec<ParamId>>, ModelError> {
        if self.config.sharing != Some(SharingMode::L2Tied) {
            return Err(ModelError::Usage(format!(
                "tie penalty is defined only for l2_tied models, not {}",
                self.config.label()
            )));
        }
        Ok(self.branch_groups())
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize, usize), ModelError> {
        if x.shape().len() != 4 {
            return Err(ModelError::Shape(format!("expected (N, C, H, W), got {:?}", x.shape())));
        }
        let dims = x.dims4();
        if dims.1 != self.config.in_channels() {
            return Err(ModelError::Shape(format!(
                "model expects {} channels, input has {}",
                self.config.in_channels(),
                dims.1
            )));
        }
        Ok(dims)
    }

    /// Records the full forward computation on `tape`. `factors` (one per
    /// sample and channel) are applied after the input leaves, so input
    /// gradients are taken before dropout.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        factors: Option<&[f64]>,
        mode: BnMode,
        input_grad: bool,
    ) -> Result<Forward, ModelError> {
        let (n, c, h, w) = self.check_input(x)?;
        if let Some(f) = factors {
            if f.len() != n * c {
                return Err(ModelError::Shape(format!("{} channel factors for {} channels", f.len(), n * c)));
            }
        }
        let mut rec = Vec::new();
        let cfg = &self.config;
        if cfg.integration == IntegrationLevel::Input {
            let leaf = tape.input(x.clone(), input_grad);
            let mut v = match factors {
                Some(f) => tape.channel_scale(leaf, f.to_vec()),
                None => leaf,
            };
            v = self.run_stages(tape, v, &self.branches[0].stages, mode, &mut rec);
            let head = self.head.as_ref().expect("input-level head");
            let logits = self.run_head(tape, v, head, (h, w), mode, &mut rec);
            let prob = tape.softmax_fg(logits);
            return Ok(Forward {
                inputs: vec![leaf],
                logits: Some(logits),
                prob,
                branch_features: Vec::new(),
                fused: None,
                bn_records: rec,
            });
        }
        let k = cfg.n_slices;
        let mut inputs = Vec::with_capacity(cfg.n_seq);
        let mut feats = Vec::with_capacity(cfg.n_seq);
        let mut branch_logits = Vec::new();
        for (s, branch) in self.branches.iter().enumerate() {
            let part = channel_block(x, s * k, k);
            let leaf = tape.input(part, input_grad);
            inputs.push(leaf);
            let mut v = match factors {
                Some(f) => {
                    let sub: Vec<f64> = (0..n).flat_map(|b| f[b * c + s * k..b * c + (s + 1) * k].iter().copied()).collect();
                    tape.channel_scale(leaf, sub)
                }
                None => leaf,
            };
            v = self.run_stages(tape, v, &branch.stages, mode, &mut rec);
            feats.push(v);
            if let Some(hd) = &branch.head {
                branch_logits.push(self.run_head(tape, v, hd, (h, w), mode, &mut rec));
            }
        }
        if cfg.integration == IntegrationLevel::End {
            let (logits, prob) = match cfg.fusion_op {
                FusionOp::Sum => {
                    let mut acc = branch_logits[0];
                    for &l in &branch_logits[1..] {
                        acc = tape.add(acc, l);
                    }
                    (Some(acc), tape.softmax_fg(acc))
                }
                _ => {
                    let probs: Vec<Var> = branch_logits.iter().map(|&l| tape.softmax_fg(l)).collect();
                    (None, tape.mean(&probs))
                }
            };
            return Ok(Forward {
                inputs,
                logits,
                prob,
                branch_features: feats,
                fused: None,
                bn_records: rec,
            });
        }
        let fused = match (cfg.fusion_op, cfg.subtract_pair) {
            (FusionOp::SubtractPair, Some([pre, post])) => {
                let d = tape.sub(feats[post], feats[pre]);
                let mut parts = vec![d];
                parts.extend(feats.iter().enumerate().filter(|(i, _)| *i != pre && *i != post).map(|(_, v)| *v));
                if parts.len() == 1 {
                    d
                } else {
                    tape.concat(&parts)
                }
            }
            _ => {
                if feats.len() == 1 {
                    feats[0]
                } else {
                    tape.concat(&feats)
                }
            }
        };
        let v = self.run_stages(tape, fused, &self.late, mode, &mut rec);
        let head = self.head.as_ref().expect("mid-level head");
        let logits = self.run_head(tape, v, head, (h, w), mode, &mut rec);
        let prob = tape.softmax_fg(logits);
        Ok(Forward {
            inputs,
            logits: Some(logits),
            prob,
            branch_features: feats,
            fused: Some(fused),
            bn_records: rec,
        })
    }

    fn conv_bn(&self, tape: &mut Tape, x: Var, cb: &ConvBn, mode: BnMode, rec: &mut Vec<BnRecord>) -> Var {
        let w = tape.param(&self.store, cb.w);
        let y = tape.conv2d(x, w, None, cb.geom);
        let g = tape.param(&self.store, cb.gamma);
        let b = tape.param(&self.store, cb.beta);
        match mode {
            BnMode::Train => {
                let (n, _, hh, ww) = tape.value(y).dims4();
                let (v, mean, var) = tape.batch_norm(y, g, b, None, BN_EPS);
                rec.push(BnRecord {
                    slot: cb.bn,
                    mean,
                    var,
                    count: n * hh * ww,
                });
                v
            }
            BnMode::Eval => {
                let s = &self.bn[cb.bn];
                tape.batch_norm(y, g, b, Some((&s.mean, &s.var)), BN_EPS).0
            }
        }
    }

    fn run_stages(&self, tape: &mut Tape, mut x: Var, stages: &[Stage], mode: BnMode, rec: &mut Vec<BnRecord>) -> Var {
        for st in stages {
            let d = self.conv_bn(tape, x, &st.down, mode, rec);
            let h = tape.relu(d);
            let r = self.conv_bn(tape, h, &st.res1, mode, rec);
            let r = tape.relu(r);
            let r = self.conv_bn(tape, r, &st.res2, mode, rec);
            let s = tape.add(r, h);
            x = tape.relu(s);
        }
        x
    }

    fn run_head(
        &self,
        tape: &mut Tape,
        x: Var,
        head: &Head,
        out_hw: (usize, usize),
        mode: BnMode,
        rec: &mut Vec<BnRecord>,
    ) -> Var {
        let parts: Vec<Var> = head
            .aspp
            .iter()
            .map(|cb| {
                let v = self.conv_bn(tape, x, cb, mode, rec);
                tape.relu(v)
            })
            .collect();
        let cat = if parts.len() == 1 { parts[0] } else { tape.concat(&parts) };
        let p = self.conv_bn(tape, cat, &head.proj, mode, rec);
        let p = tape.relu(p);
        let w = tape.param(&self.store, head.cls_w);
        let b = tape.param(&self.store, head.cls_b);
        let l = tape.conv2d(p, w, Some(b), ConvGeom::new(1, 1, 0, 1));
        tape.upsample(l, out_hw.0, out_hw.1)
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics with momentum [`BN_MOMENTUM`].
    pub fn update_running_stats(&mut self, records: &[BnRecord]) {
        for r in records {
            let s = &mut self.bn[r.slot];
            let unbias = if r.count > 1 { r.count as f64 / (r.count - 1) as f64 } else { 1.0 };
            for ch in 0..r.mean.len() {
                s.mean[ch] = (1.0 - BN_MOMENTUM) * s.mean[ch] + BN_MOMENTUM * r.mean[ch];
                s.var[ch] = (1.0 - BN_MOMENTUM) * s.var[ch] + BN_MOMENTUM * r.var[ch] * unbias;
            }
        }
    }

    /// Foreground probabilities (N, 1, H, W) with running statistics.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, x, None, BnMode::Eval, false)?;
        Ok(tape.value(f.prob).clone())
    }

    /// Foreground probability map (H·W, row-major) of one sample.
    pub fn forward(&self, sample: &SliceSample) -> Result<Vec<f64>, ModelError> {
        let (h, w) = sample.hw();
        let x = sample.stack.clone().reshape(&[1, sample.stack.shape()[0], h, w]);
        Ok(self.predict(&x)?.into_vec())
    }

    /// Per-branch features in evaluation mode; empty for input-level.
    pub fn branch_features(&self, x: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, x, None, BnMode::Eval, false)?;
        Ok(f.branch_features.iter().map(|v| tape.value(*v).clone()).collect())
    }

    /// The fused feature map of a mid-level model.
    pub fn fused_features(&self, x: &Tensor) -> Result<Option<Tensor>, ModelError> {
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, x, None, BnMode::Eval, false)?;
        Ok(f.fused.map(|v| tape.value(v).clone()))
    }

    /// Pixel-averaged cross-entropy of `prediction` against the sample
    /// target, plus the tie penalty for l2_tied models.
    pub fn loss(&self, sample: &SliceSample, prediction: &[f64]) -> Result<f64, ModelError> {
        let ce = cross_entropy(prediction, &sample.target)?;
        if self.config.sharing == Some(SharingMode::L2Tied) {
            Ok(ce + self.tie_penalty()?)
        } else {
            Ok(ce)
        }
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[CE_EPS, 1 − CE_EPS]`.
pub fn cross_entropy(prob: &[f64], target: &[bool]) -> Result<f64, ModelError> {
    if prob.len() != target.len() || prob.is_empty() {
        return Err(ModelError::Shape(format!(
            "prediction has {} pixels, target {}",
            prob.len(),
            target.len()
        )));
    }
    let s: f64 = prob
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let q = p.clamp(CE_EPS, 1.0 - CE_EPS);
            if y {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum();
    Ok(s / prob.len() as f64)
}

/// `λ Σᵢ ‖θᵢ − θ̄‖²` where `groups[i][k]` is tensor `k` of branch `i`.
pub fn tie_penalty_of(groups: &[Vec<&[f64]>], lambda: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..groups.first().map_or(0, Vec::len) {
        let vals: Vec<&[f64]> = groups.iter().map(|g| g[k]).collect();
        let mean = elementwise_mean(&vals);
        for v in &vals {
            total += v.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>();
        }
    }
    lambda * total
}

fn elementwise_mean(vals: &[&[f64]]) -> Vec<f64> {
    let mut mean = vec![0.0; vals[0].len()];
    for v in vals {
        mean.iter_mut().zip(v.iter()).for_each(|(m, x)| *m += x);
    }
    let k = vals.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    mean
}

/// Channels `[start, start + len)` of an NCHW tensor.
pub fn channel_block(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
    }
    Tensor::from_vec(&[n, len, h, w], out)
}
