use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concepts::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::DEFAULT_K;

use super::folds::DEFAULT_FOLDS;
use super::pipeline::CvOptions;
use super::stratify::DEFAULT_MIN_GROUP;
use super::synth::SynthConfig;

/// The TOML run configuration. Every section and key is optional.
///
/// ```toml
/// seed = 0
/// folds = 5
/// knn_k = 8
///
/// [model]
/// hidden_dim = 128
///
/// [train]
/// steps = 20
/// base_lr = 3e-4
///
/// [cv]
/// lambda_grid = [0.01, 0.1, 1.0, 10.0, 100.0]
/// selection_rule = "one_std_error"
///
/// [synth]
/// n_patients = 400
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub folds: usize,
    pub stratify_folds: bool,
    pub knn_k: usize,
    pub min_group: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cv: CvSection,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub lambda_grid: Vec<f64>,
    pub selection_rule: crate::survival::SelectionRule,
    pub inner_folds: usize,
    pub grid_points: usize,
}

impl Default for CvSection {
    fn default() -> Self {
        let o = CvOptions::default();
        Self {
            lambda_grid: o.lambda_grid,
            selection_rule: o.selection_rule,
            inner_folds: o.inner_folds,
            grid_points: o.grid_points,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            folds: DEFAULT_FOLDS,
            stratify_folds: false,
            knn_k: DEFAULT_K,
            min_group: DEFAULT_MIN_GROUP,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            cv: CvSection::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidInput(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.knn_k == 0 {
            return Err(Error::InvalidInput("knn_k must be positive".into()));
        }
        if self.cv.lambda_grid.is_empty() || self.cv.lambda_grid.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidInput("lambda_grid must be non-empty and non-negative".into()));
        }
        if self.cv.inner_folds < 2 || self.cv.grid_points < 2 {
            return Err(Error::InvalidInput("inner_folds and grid_points must be at least 2".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn cv_options(&self) -> CvOptions {
        CvOptions {
            model: self.model.clone(),
            train: self.train.clone(),
            lambda_grid: self.cv.lambda_grid.clone(),
            selection_rule: self.cv.selection_rule,
            inner_folds: self.cv.inner_folds,
            grid_points: self.cv.grid_points,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = PipelineConfig::from_toml_str(
            "seed = 3\n[model]\nhidden_dim = 16\n[train]\nsteps = 5\n[cv]\nlambda_grid = [1.0]\nselection_rule = \"max_mean\"\n[synth]\nn_patients = 50\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.hidden_dim, 16);
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.synth.n_patients, 50);
        assert_eq!(cfg.cv_options().lambda_grid, vec![1.0]);
    }

    #[test]
    fn unknown_key_and_bad_values_rejected() {
        assert!(PipelineConfig::from_toml_str("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml_str("folds = 1").is_err());
        assert!(PipelineConfig::from_toml_str("[cv]\nlambda_grid = []").is_err());
    }
}
