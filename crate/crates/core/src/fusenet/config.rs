use serde::{Deserialize, Serialize};

use super::ModelError;

/// Depth at which per-sequence processing merges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationLevel {
    /// Sequences concatenated as input channels of one network.
    Input,
    /// Per-sequence early stages, fused before the late stages and head.
    Mid,
    /// Per-sequence full networks whose outputs are combined.
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    Independent,
    Shared,
    #[serde(rename = "l2_tied")]
    L2Tied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOp {
    /// Channel concatenation of branch features.
    Concat,
    /// `post − pre` features for the designated pair, concatenated with the rest.
    SubtractPair,
    /// Mean of per-branch foreground probabilities.
    Mean,
    /// Sum of per-branch logits followed by one softmax.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub base_channels: usize,
    pub n_stages: usize,
    pub dilation_rates: Vec<usize>,
    /// Number of stages run per branch in mid-level fusion.
    pub split_stage: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            base_channels: 16,
            n_stages: 4,
            dilation_rates: vec![1, 2, 3],
            split_stage: 4,
        }
    }
}

impl BackboneSpec {
    /// Output width of stage `i`.
    pub fn width(&self, i: usize) -> usize {
        self.base_channels << i.min(2)
    }

    /// Stride of the first convolution in stage `i`.
    pub fn stride(&self, i: usize) -> usize {
        if i < 2 {
            2
        } else {
            1
        }
    }

    /// Width of the ASPP branches and the projection.
    pub fn head_width(&self) -> usize {
        self.width(self.n_stages - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub integration: IntegrationLevel,
    /// Unset for input-level integration.
    #[serde(default)]
    pub sharing: Option<SharingMode>,
    pub fusion_op: FusionOp,
    #[serde(default = "default_tie_lambda")]
    pub tie_lambda: f64,
    #[serde(default)]
    pub backbone: BackboneSpec,
    pub n_seq: usize,
    pub n_slices: usize,
    /// `(pre, post)` sequence indices for [`FusionOp::SubtractPair`].
    #[serde(default)]
    pub subtract_pair: Option<[usize; 2]>,
}

fn default_tie_lambda() -> f64 {
    1e-3
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::input(BackboneSpec::default(), 4, 5)
    }
}

fn invalid(msg: impl Into<String>) -> Result<(), ModelError> {
    Err(ModelError::Config(msg.into()))
}

impl FusionConfig {
    pub fn input(backbone: BackboneSpec, n_seq: usize, n_slices: usize) -> Self {
        Self {
            integration: IntegrationLevel::Input,
            sharing: None,
            fusion_op: FusionOp::Concat,
            tie_lambda: default_tie_lambda(),
            backbone,
            n_seq,
            n_slices,
            subtract_pair: None,
        }
    }

    pub fn mid(sharing: SharingMode, backbone: BackboneSpec, n_seq: usize, n_slices: usize) -> Self {
        Self {
            integration: IntegrationLevel::Mid,
            sharing: Some(sharing),
            ..Self::input(backbone, n_seq, n_slices)
        }
    }

    pub fn end(sharing: SharingMode, backbone: BackboneSpec, n_seq: usize, n_slices: usize) -> Self {
        Self {
            integration: IntegrationLevel::End,
            sharing: Some(sharing),
            fusion_op: FusionOp::Mean,
            ..Self::input(backbone, n_seq, n_slices)
        }
    }

    /// Mid-level shared network that subtracts the `pre` branch from the `post` branch.
    pub fn subtraction(pre: usize, post: usize, backbone: BackboneSpec, n_seq: usize, n_slices: usize) -> Self {
        Self {
            fusion_op: FusionOp::SubtractPair,
            subtract_pair: Some([pre, post]),
            ..Self::mid(SharingMode::Shared, backbone, n_seq, n_slices)
        }
    }

    pub fn in_channels(&self) -> usize {
        self.n_seq * self.n_slices
    }

    /// Short identifier such as `mid-shared` or `input`.
    pub fn label(&self) -> String {
        let level = match self.integration {
            IntegrationLevel::Input => "input",
            IntegrationLevel::Mid => "mid",
            IntegrationLevel::End => "end",
        };
        let mut s = level.to_string();
        if let Some(m) = self.sharing {
            s.push('-');
            s.push_str(match m {
                SharingMode::Independent => "independent",
                SharingMode::Shared => "shared",
                SharingMode::L2Tied => "l2_tied",
            });
        }
        match self.fusion_op {
            FusionOp::SubtractPair => s.push_str("-subtract"),
            FusionOp::Sum => s.push_str("-sum"),
            _ => {}
        }
        s
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let b = &self.backbone;
        if self.n_seq == 0 {
            return invalid("n_seq must be at least 1");
        }
        if self.n_slices == 0 || self.n_slices % 2 == 0 {
            return invalid(format!("n_slices {} must be odd", self.n_slices));
        }
        if b.base_channels == 0 || b.n_stages == 0 {
            return invalid("backbone needs at least one stage and one base channel");
        }
        if b.dilation_rates.is_empty() || b.dilation_rates.contains(&0) {
            return invalid("dilation_rates must be non-empty and positive");
        }
        if !(self.tie_lambda >= 0.0 && self.tie_lambda.is_finite()) {
            return invalid(format!("tie_lambda {} must be finite and non-negative", self.tie_lambda));
        }
        if self.fusion_op == FusionOp::SubtractPair {
            if self.integration != IntegrationLevel::Mid || self.sharing != Some(SharingMode::Shared) {
                return invalid("subtract_pair requires mid-level integration with shared weights");
            }
            match self.subtract_pair {
                Some([pre, post]) if pre != post && pre < self.n_seq && post < self.n_seq => {}
                _ => return invalid("subtract_pair needs one (pre, post) pair of distinct sequence indices"),
            }
        } else if self.subtract_pair.is_some() {
            return invalid("a subtraction pair is only meaningful with fusion_op subtract_pair");
        }
        match self.integration {
            IntegrationLevel::Input => {
                if self.sharing.is_some() {
                    return invalid("input-level integration has no branches; sharing must be unset");
                }
                if self.fusion_op != FusionOp::Concat {
                    return invalid("input-level integration concatenates channels; fusion_op must be concat");
                }
            }
            IntegrationLevel::Mid => {
                if self.sharing.is_none() {
                    return invalid("mid-level integration needs a sharing mode");
                }
                if !matches!(self.fusion_op, FusionOp::Concat | FusionOp::SubtractPair) {
                    return invalid("mid-level fusion_op must be concat or subtract_pair");
                }
                if b.split_stage == 0 || b.split_stage > b.n_stages {
                    return invalid(format!(
                        "split_stage {} must lie in 1..={}",
                        b.split_stage, b.n_stages
                    ));
                }
            }
            IntegrationLevel::End => {
                if self.sharing.is_none() {
                    return invalid("end-level integration needs a sharing mode");
                }
                if !matches!(self.fusion_op, FusionOp::Mean | FusionOp::Sum) {
                    return invalid("end-level fusion_op must be mean (or sum)");
                }
            }
        }
        Ok(())
    }

    /// Every valid integration/sharing combination plus the subtraction
    /// network: eight configurations.
    pub fn experiment_grid(backbone: &BackboneSpec, n_seq: usize, n_slices: usize, pair: [usize; 2]) -> Vec<Self> {
        let mut grid = vec![Self::input(backbone.clone(), n_seq, n_slices)];
        for level in [IntegrationLevel::Mid, IntegrationLevel::End] {
            for sharing in [SharingMode::Independent, SharingMode::Shared, SharingMode::L2Tied] {
                grid.push(match level {
                    IntegrationLevel::Mid => Self::mid(sharing, backbone.clone(), n_seq, n_slices),
                    _ => Self::end(sharing, backbone.clone(), n_seq, n_slices),
                });
            }
        }
        grid.push(Self::subtraction(pair[0], pair[1], backbone.clone(), n_seq, n_slices));
        grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_valid_and_has_eight_entries() {
        let grid = FusionConfig::experiment_grid(&BackboneSpec::default(), 4, 5, [0, 2]);
        assert_eq!(grid.len(), 8);
        for c in &grid {
            c.validate().unwrap();
        }
        let labels: std::collections::BTreeSet<String> = grid.iter().map(FusionConfig::label).collect();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn invalid_combinations_are_named() {
        let b = BackboneSpec::default();
        let mut c = FusionConfig::input(b.clone(), 4, 5);
        c.sharing = Some(SharingMode::Shared);
        assert!(matches!(c.validate(), Err(ModelError::Config(m)) if m.contains("sharing")));

        let mut c = FusionConfig::subtraction(0, 2, b.clone(), 4, 5);
        c.sharing = Some(SharingMode::Independent);
        assert!(matches!(c.validate(), Err(ModelError::Config(m)) if m.contains("shared")));

        let mut c = FusionConfig::end(SharingMode::Shared, b.clone(), 4, 5);
        c.fusion_op = FusionOp::Concat;
        assert!(c.validate().is_err());

        let mut c = FusionConfig::mid(SharingMode::Shared, b, 4, 5);
        c.backbone.split_stage = 5;
        assert!(c.validate().is_err());
        c.backbone.split_stage = 2;
        c.n_slices = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn serde_names() {
        let c = FusionConfig::mid(SharingMode::L2Tied, BackboneSpec::default(), 4, 5);
        let j = serde_json::to_string(&c).unwrap();
        assert!(j.contains("\"l2_tied\"") && j.contains("\"mid\""));
        let back: FusionConfig = serde_json::from_str(&j).unwrap();
        assert_eq!(back, c);
    }
}
