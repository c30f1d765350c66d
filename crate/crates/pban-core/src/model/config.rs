//! Architecture hyperparameters and their consistency rules.

use serde::{Deserialize, Serialize};

use crate::error::{PbanError, Result};

/// Who supplies the attention Key (and, for `KvHomology`, the Value) of each
/// branch. `Bidirectional` swaps Keys between branches while Query and Value
/// stay home; the one-way modes route a single branch's Key to both sides;
/// `SelfAttention` keeps everything home; `KvHomology` swaps Key and Value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Bidirectional,
    HrToSr,
    SrToHr,
    #[serde(rename = "self")]
    SelfAttention,
    KvHomology,
}

/// Full-reference (two branches, reference plus distorted) or no-reference
/// (single branch) network layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    Fr,
    Nr,
}

/// Every knob the architecture exposes. A JSON config file may set any
/// subset of fields; the rest keep these defaults. `validate` must pass
/// before the config is used to build or run a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PBANConfig {
    /// Feature channels C throughout the trunk; multiple of 16.
    pub channels: usize,
    /// Number of stacked attention blocks per branch.
    pub blocks: usize,
    /// Deformable kernel edge per channel group; length = gmdc_groups.
    pub gmdc_kernels: Vec<usize>,
    /// Channel groups inside the multi-kernel deformable unit.
    pub gmdc_groups: usize,
    /// Kernel edge of the conv that predicts offsets and modulation.
    pub offset_predictor_kernel: usize,
    /// Sub-pixel branch upscale factor S.
    pub subec_upscale: usize,
    /// Groups of the sub-channel branch's expanding 1x1 conv.
    pub subec_groups: usize,
    /// Head pooling target (height, width).
    pub pool_out: (usize, usize),
    /// Per-branch head widths: [flatten, hidden, branch feature].
    pub head_dims: Vec<usize>,
    /// Fusion widths: [concat input, hidden, 1].
    pub fusion_dims: Vec<usize>,
    /// Dropout probability in the per-branch head.
    pub dropout_p: f64,
    pub attention_mode: AttentionMode,
    pub variant: Variant,
}

impl Default for PBANConfig {
    fn default() -> Self {
        PBANConfig {
            channels: 64,
            blocks: 4,
            gmdc_kernels: vec![3, 7],
            gmdc_groups: 2,
            offset_predictor_kernel: 3,
            subec_upscale: 2,
            subec_groups: 2,
            pool_out: (4, 4),
            head_dims: vec![1024, 512, 256],
            fusion_dims: vec![512, 64, 1],
            dropout_p: 0.5,
            attention_mode: AttentionMode::Bidirectional,
            variant: Variant::Fr,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(PbanError::Parameter(msg()))
    }
}

impl PBANConfig {
    /// Small configuration for gradient checks and overfit tests: C=16 and a
    /// single block, head widths scaled down accordingly, dropout disabled so
    /// training is a deterministic function of the seed.
    pub fn micro() -> Self {
        PBANConfig {
            channels: 16,
            blocks: 1,
            head_dims: vec![256, 64, 32],
            fusion_dims: vec![64, 16, 1],
            dropout_p: 0.0,
            ..PBANConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        check(c > 0 && c % 16 == 0, || {
            format!("channels must be a positive multiple of 16, got {c}")
        })?;
        check(self.blocks >= 1, || "blocks must be at least 1".into())?;
        check(!self.gmdc_kernels.is_empty(), || {
            "gmdc_kernels must not be empty".into()
        })?;
        check(self.gmdc_groups == self.gmdc_kernels.len(), || {
            format!(
                "gmdc_groups ({}) must equal the number of gmdc_kernels ({})",
                self.gmdc_groups,
                self.gmdc_kernels.len()
            )
        })?;
        check(c % self.gmdc_groups == 0, || {
            format!("gmdc_groups ({}) must divide channels ({c})", self.gmdc_groups)
        })?;
        for &k in &self.gmdc_kernels {
            check(k % 2 == 1, || format!("gmdc kernel edges must be odd, got {k}"))?;
        }
        check(self.offset_predictor_kernel % 2 == 1, || {
            format!(
                "offset_predictor_kernel must be odd, got {}",
                self.offset_predictor_kernel
            )
        })?;
        let s = self.subec_upscale;
        check(s >= 1 && s * s <= c, || {
            format!("subec_upscale^2 ({}) must not exceed channels ({c})", s * s)
        })?;
        check(c % 2 == 0, || "channels must be even for the sub-pixel branch".into())?;
        check(self.subec_groups >= 1 && c % self.subec_groups == 0, || {
            format!("subec_groups ({}) must divide channels ({c})", self.subec_groups)
        })?;
        check(self.pool_out.0 >= 1 && self.pool_out.1 >= 1, || {
            "pool_out extents must be at least 1".into()
        })?;
        check(self.head_dims.len() == 3, || {
            format!("head_dims must have 3 entries, got {}", self.head_dims.len())
        })?;
        let flatten = c * self.pool_out.0 * self.pool_out.1;
        check(self.head_dims[0] == flatten, || {
            format!(
                "head_dims[0] ({}) must equal channels*pool area ({flatten})",
                self.head_dims[0]
            )
        })?;
        check(self.head_dims[1] >= 1 && self.head_dims[2] >= 1, || {
            "head widths must be positive".into()
        })?;
        check(self.fusion_dims.len() == 3, || {
            format!("fusion_dims must have 3 entries, got {}", self.fusion_dims.len())
        })?;
        let fusion_in = match self.variant {
            Variant::Fr => 2 * self.head_dims[2],
            Variant::Nr => self.head_dims[2],
        };
        check(self.fusion_dims[0] == fusion_in, || {
            format!(
                "fusion_dims[0] ({}) must equal the concatenated branch width ({fusion_in})",
                self.fusion_dims[0]
            )
        })?;
        check(self.fusion_dims[1] >= 1, || "fusion hidden width must be positive".into())?;
        check(self.fusion_dims[2] == 1, || {
            format!("fusion_dims[2] must be 1, got {}", self.fusion_dims[2])
        })?;
        check((0.0..1.0).contains(&self.dropout_p), || {
            format!("dropout_p must lie in [0,1), got {}", self.dropout_p)
        })?;
        if self.variant == Variant::Nr {
            check(self.attention_mode == AttentionMode::SelfAttention, || {
                "the single-branch variant requires attention_mode \"self\"".into()
            })?;
        }
        Ok(())
    }

    /// Channels per deformable-unit group.
    pub fn gmdc_group_width(&self) -> usize {
        self.channels / self.gmdc_groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_micro_validate() {
        PBANConfig::default().validate().unwrap();
        PBANConfig::micro().validate().unwrap();
    }

    #[test]
    fn partial_json_overrides_keep_defaults() {
        let cfg: PBANConfig = serde_json::from_str(r#"{"channels": 32, "head_dims": [512, 128, 64], "fusion_dims": [128, 32, 1]}"#).unwrap();
        assert_eq!(cfg.channels, 32);
        assert_eq!(cfg.blocks, 4);
        assert_eq!(cfg.gmdc_kernels, vec![3, 7]);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<PBANConfig>(r#"{"chanels": 32}"#);
        assert!(err.is_err());
    }

    #[test]
    fn attention_mode_names_round_trip() {
        for (mode, name) in [
            (AttentionMode::Bidirectional, "\"bidirectional\""),
            (AttentionMode::HrToSr, "\"hr_to_sr\""),
            (AttentionMode::SrToHr, "\"sr_to_hr\""),
            (AttentionMode::SelfAttention, "\"self\""),
            (AttentionMode::KvHomology, "\"kv_homology\""),
        ] {
            assert_eq!(serde_json::to_string(&mode).unwrap(), name);
            assert_eq!(serde_json::from_str::<AttentionMode>(name).unwrap(), mode);
        }
    }

    #[test]
    fn validation_catches_inconsistent_widths() {
        let mut cfg = PBANConfig::default();
        cfg.head_dims = vec![512, 512, 256];
        assert!(cfg.validate().is_err());

        let mut cfg = PBANConfig::default();
        cfg.gmdc_kernels = vec![3, 5, 7];
        assert!(cfg.validate().is_err(), "group count no longer matches");

        let mut cfg = PBANConfig::default();
        cfg.channels = 60;
        assert!(cfg.validate().is_err(), "not a multiple of 16");

        let mut cfg = PBANConfig::default();
        cfg.variant = Variant::Nr;
        assert!(cfg.validate().is_err(), "NR requires self attention and narrow fusion");
        cfg.attention_mode = AttentionMode::SelfAttention;
        cfg.fusion_dims = vec![256, 64, 1];
        cfg.validate().unwrap();
    }
}
