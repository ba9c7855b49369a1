//! Run configuration file.
//!
//! A TOML document. Every key is optional; omitted keys take the defaults
//! shown below.
//!
//! ```toml
//! seed = 0                     # split and grid-search seed
//! test_fraction = 0.1          # held-out share for eval/ablations
//! valid_fraction = 0.1         # validation share for grid search
//! topk = 10                    # decoded-tier top-k
//! text_norm = "all-text"       # or "exclude-self"
//! propagation_threshold = 0.5  # S_align cut for confounder propagation
//! scene_threshold = 0.6        # scene-prior similarity cut
//!
//! [train]
//! kind = "gb"                  # lr | gb | mlp
//! lr_iterations = 2000
//! lr_l2 = 1.0
//! gb_estimators = 200
//! gb_max_depth = 10
//! gb_learning_rate = 0.1
//! mlp_hidden = 128
//! mlp_lr = 0.01
//! mlp_epochs = 2000
//! mlp_optimizer = "sgd"        # or "adam"
//! seed = 0
//! threshold = 0.5
//!
//! [synth]
//! n_samples = 1000
//! hallucination_rate = 0.3
//! num_layers = 8
//! # ... see SynthConfig
//! real_profile = { unique = { mean = -1.0, std = 0.8 }, entropy = { mean = -0.5, std = 0.8 }, attention = { mean = 0.5, std = 0.5 } }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{SynthConfig, PROPAGATION_THRESHOLD, SCENE_PRIOR_THRESHOLD};
use crate::detectors::TrainConfig;
use crate::features::{FeatureOptions, TextNorm};
use crate::trace::DEFAULT_TOPK;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub test_fraction: f64,
    pub valid_fraction: f64,
    pub topk: usize,
    pub text_norm: TextNorm,
    pub propagation_threshold: f64,
    pub scene_threshold: f64,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            test_fraction: 0.1,
            valid_fraction: 0.1,
            topk: DEFAULT_TOPK,
            text_norm: TextNorm::AllText,
            propagation_threshold: PROPAGATION_THRESHOLD,
            scene_threshold: SCENE_PRIOR_THRESHOLD,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn feature_options(&self) -> FeatureOptions {
        FeatureOptions {
            text_norm: self.text_norm,
        }
    }

    /// Range checks on the top-level keys and the training section; the
    /// synthetic section is checked when it is used.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{name} = {v} must lie in (0,1)")))
            }
        };
        open_unit("test_fraction", self.test_fraction)?;
        open_unit("valid_fraction", self.valid_fraction)?;
        if self.topk == 0 {
            return Err(ConfigError::Invalid("topk must be positive".into()));
        }
        for (name, v) in [
            ("propagation_threshold", self.propagation_threshold),
            ("scene_threshold", self.scene_threshold),
        ] {
            if !v.is_finite() {
                return Err(ConfigError::Invalid(format!("{name} must be finite")));
            }
        }
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Canonical TOML form, used to echo the effective settings.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_owned()))?;
    config.validate()?;
    Ok(config)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{DetectorKind, MlpOptimizer};

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let c = parse_config(
            "seed = 7\ntext_norm = \"exclude-self\"\n[train]\nkind = \"mlp\"\nmlp_optimizer = \"adam\"\n[synth]\nn_samples = 50\nreal_profile = { unique = { mean = 1.0, std = 0.0 }, entropy = { mean = 0.0, std = 1.0 }, attention = { mean = 0.0, std = 1.0 } }\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.text_norm, TextNorm::ExcludeSelf);
        assert_eq!(c.train.kind, DetectorKind::Mlp);
        assert_eq!(c.train.mlp_optimizer, MlpOptimizer::Adam);
        assert_eq!(c.train.gb_estimators, 200);
        assert_eq!(c.synth.n_samples, 50);
        assert_eq!(c.synth.real_profile.unique.mean, 1.0);
    }

    #[test]
    fn rejects_unknown_and_out_of_range() {
        assert!(matches!(parse_config("sed = 1"), Err(ConfigError::Parse(_))));
        assert!(matches!(parse_config("[train]\nkind = \"svm\""), Err(ConfigError::Parse(_))));
        assert!(matches!(parse_config("test_fraction = 1.5"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse_config("[train]\ngb_estimators = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse_config("seed = -1"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = RunConfig::default();
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
    }
}
