//! Whole-run configuration: one TOML file whose sections mirror the
//! pipeline stages. Unknown keys are rejected so typos fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AugmentPolicy, SyntheticConfig};
use crate::encoder::EncoderConfig;
use crate::fusion::{FinetuneConfig, FusionConfig};
use crate::pretrain::PretrainConfig;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<TensorError> for ConfigError {
    fn from(e: TensorError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

/// Evaluation knobs: candidate thresholds, NMS overlap, tIoU grid, KNN K.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Per-frame probability thresholds used to propose candidate segments.
    pub segment_thresholds: Vec<f64>,
    /// tIoU above which a lower-scored same-class candidate is suppressed.
    pub nms_iou: f64,
    /// tIoU thresholds the mAP report averages over.
    pub tiou_thresholds: Vec<f64>,
    /// Neighbors for the frozen-feature KNN probe.
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            segment_thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            nms_iou: 0.4,
            tiou_thresholds: crate::eval::DEFAULT_TIOU_THRESHOLDS.to_vec(),
            knn_k: 9,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.segment_thresholds.is_empty()
            || self.segment_thresholds.iter().any(|t| !(0.0 < *t && *t < 1.0))
        {
            return Err(ConfigError::Invalid(
                "segment_thresholds must be non-empty and lie in (0, 1)".into(),
            ));
        }
        if !(0.0 < self.nms_iou && self.nms_iou < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "nms_iou must lie in (0, 1), got {}",
                self.nms_iou
            )));
        }
        if self.tiou_thresholds.is_empty()
            || self.tiou_thresholds.iter().any(|t| !(0.0 < *t && *t <= 1.0))
        {
            return Err(ConfigError::Invalid(
                "tiou_thresholds must be non-empty and lie in (0, 1]".into(),
            ));
        }
        if self.knn_k == 0 {
            return Err(ConfigError::Invalid("knn_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Top-level run description. Every field has a desk-scale default, so an
/// empty TOML document is a valid configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; all stage-specific streams derive from it.
    pub seed: u64,
    /// Output directory for reports, curves, and checkpoints.
    pub out_dir: std::path::PathBuf,
    pub data: SyntheticConfig,
    pub augment: AugmentPolicy,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub fusion: FusionConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: std::path::PathBuf::from("out"),
            data: SyntheticConfig::default(),
            augment: AugmentPolicy::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            fusion: FusionConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.fusion.validate()?;
        self.eval.validate()?;
        if self.data.num_sequences == 0 || self.data.t == 0 || self.data.num_classes == 0 {
            return Err(ConfigError::Invalid(
                "data needs num_sequences, t, and num_classes >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FinetuneMode;

    #[test]
    fn empty_document_is_the_default_config() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn roundtrip_preserves_every_field() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.data.num_classes = 3;
        cfg.pretrain.lambda = 0.5;
        cfg.fusion.plain_u = true;
        cfg.finetune.mode = FinetuneMode::Full;
        cfg.eval.knn_k = 3;
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_document_overrides_only_named_keys() {
        let cfg = RunConfig::from_toml_str(
            "seed = 3\n[pretrain]\nlambda = 0.0\n[finetune]\nmode = \"full\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.pretrain.lambda, 0.0);
        assert_eq!(cfg.finetune.mode, FinetuneMode::Full);
        assert_eq!(cfg.encoder, RunConfig::default().encoder);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("sede = 3\n").is_err());
        assert!(RunConfig::from_toml_str("[pretrain]\ntua = 0.1\n").is_err());
    }

    #[test]
    fn invalid_sections_fail_validation() {
        assert!(RunConfig::from_toml_str("[pretrain]\ntau = 0.0\n").is_err());
        assert!(RunConfig::from_toml_str("[eval]\nnms_iou = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("[eval]\nknn_k = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[data]\nnum_sequences = 0\n").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let cfg = RunConfig::default();
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }
}
