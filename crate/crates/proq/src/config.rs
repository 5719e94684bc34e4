//! Flat `key=value` pipeline configuration with section prefixes.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors so typos do not silently fall back to defaults.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use proq_core::model::ModelConfig;
use proq_core::outcome::{ASSESSMENT_GRID, FOLLOWUP_GRID};
use proq_core::synth::SynthConfig;
use proq_core::training::TrainConfig;
use proq_core::{CohortConfig, TaskSpec};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("{key}: invalid value {value:?}")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

/// Model hyperparameters that do not depend on the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub tie_mlm_weights: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::desk_scale(1);
        ModelSettings {
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_model: d.d_model,
            d_ff: d.d_ff,
            max_len: d.max_len,
            dropout_p: d.dropout_p,
            tie_mlm_weights: d.tie_mlm_weights,
        }
    }
}

impl ModelSettings {
    pub fn for_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size,
            dropout_p: self.dropout_p,
            tie_mlm_weights: self.tie_mlm_weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub work_dir: PathBuf,
    pub seed: u64,
    /// Upper bound on birth years during ingest.
    pub current_year: i32,
    pub cohort: CohortConfig,
    pub followups: Vec<u32>,
    pub assessments: Vec<u32>,
    pub synth: SynthConfig,
    pub model: ModelSettings,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

/// Learning rate of the desk-scale presets. At width 32 the library default
/// of 1e-4 barely moves the MLM loss in two epochs.
pub const DESK_LR: f64 = 1e-3;

impl Default for PipelineConfig {
    fn default() -> Self {
        let seed = 42;
        let mut pretrain = TrainConfig { epochs: 2, seed, ..TrainConfig::default() };
        pretrain.adam.lr = DESK_LR;
        let finetune = TrainConfig { epochs: 5, patience: Some(3), ..pretrain.clone() };
        PipelineConfig {
            data_dir: PathBuf::from("data"),
            work_dir: PathBuf::from("work"),
            seed,
            current_year: 2026,
            cohort: CohortConfig::default(),
            followups: FOLLOWUP_GRID.to_vec(),
            assessments: ASSESSMENT_GRID.to_vec(),
            synth: SynthConfig { seed, ..SynthConfig::default() },
            model: ModelSettings::default(),
            pretrain,
            finetune,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value { key: key.to_string(), value: value.to_string() })
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    value.split([',', '|']).map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError> {
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl PipelineConfig {
    /// Applies one key. The seed propagates to every seeded component.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.set_seed(parse(key, v)?),
            "data_dir" => self.data_dir = PathBuf::from(v),
            "work_dir" => self.work_dir = PathBuf::from(v),
            "current_year" => self.current_year = parse(key, v)?,

            "cohort.ckd_concept_ids" => self.cohort.ckd_concept_ids = parse_list(key, v)?.into_iter().collect::<BTreeSet<_>>(),
            "cohort.egfr_concept_id" => self.cohort.egfr_concept_id = parse(key, v)?,
            "cohort.uacr_concept_id" => self.cohort.uacr_concept_id = parse(key, v)?,
            "cohort.egfr_stage3a_threshold" => self.cohort.egfr_stage3a_threshold = parse(key, v)?,
            "cohort.egfr_stage5_threshold" => self.cohort.egfr_stage5_threshold = parse(key, v)?,
            "cohort.uacr_threshold" => self.cohort.uacr_threshold = parse(key, v)?,
            "cohort.persistence_days" => self.cohort.persistence_days = parse(key, v)?,

            "grid.followup" => self.followups = parse_list(key, v)?,
            "grid.assessment" => self.assessments = parse_list(key, v)?,

            "synth.n_patients" => self.synth.n_patients = parse(key, v)?,
            "synth.progressor_fraction" => self.synth.progressor_fraction = parse(key, v)?,
            "synth.visits_per_year" => self.synth.visits_per_year = parse(key, v)?,
            "synth.egfr_start_min" => self.synth.egfr_start_range.0 = parse(key, v)?,
            "synth.egfr_start_max" => self.synth.egfr_start_range.1 = parse(key, v)?,
            "synth.progressor_slope_min" => self.synth.progressor_slope_range.0 = parse(key, v)?,
            "synth.progressor_slope_max" => self.synth.progressor_slope_range.1 = parse(key, v)?,
            "synth.stable_slope_min" => self.synth.stable_slope_range.0 = parse(key, v)?,
            "synth.stable_slope_max" => self.synth.stable_slope_range.1 = parse(key, v)?,
            "synth.noise_sd" => self.synth.noise_sd = parse(key, v)?,
            "synth.n_background_concepts" => self.synth.n_background_concepts = parse(key, v)?,

            "model.n_layers" => self.model.n_layers = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.max_len" => self.model.max_len = parse(key, v)?,
            "model.dropout" => self.model.dropout_p = parse(key, v)?,
            "model.tie_mlm_weights" => self.model.tie_mlm_weights = parse(key, v)?,

            "split.train" => self.set_both(|c| &mut c.split.train, parse(key, v)?),
            "split.val" => self.set_both(|c| &mut c.split.val, parse(key, v)?),
            "split.test" => self.set_both(|c| &mut c.split.test, parse(key, v)?),

            _ => {
                let Some((section, field)) = key.split_once('.') else { return Ok(false) };
                let target = match section {
                    "pretrain" => &mut self.pretrain,
                    "finetune" => &mut self.finetune,
                    _ => return Ok(false),
                };
                match field {
                    "epochs" => target.epochs = parse(key, v)?,
                    "lr" => target.adam.lr = parse(key, v)?,
                    "beta1" => target.adam.beta1 = parse(key, v)?,
                    "beta2" => target.adam.beta2 = parse(key, v)?,
                    "eps" => target.adam.eps = parse(key, v)?,
                    "batch_size" => target.batch_size = parse(key, v)?,
                    "patience" => target.patience = parse_optional(key, v)?,
                    "mask_prob" => target.masking.mask_prob = parse(key, v)?,
                    "freeze_encoder" => target.freeze_encoder = parse(key, v)?,
                    _ => return Ok(false),
                }
            }
        }
        Ok(true)
    }

    fn set_both(&mut self, field: impl Fn(&mut TrainConfig) -> &mut f64, value: f64) {
        *field(&mut self.pretrain) = value;
        *field(&mut self.finetune) = value;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = key.trim();
            if !self.set(key, value)? {
                return Err(ConfigError::UnknownKey { line: i + 1, key: key.to_string() });
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Vec<TaskSpec>, ConfigError> {
        let grid = TaskSpec::grid(&self.followups, &self.assessments)
            .map_err(|_| ConfigError::Invalid("grid periods must be positive".into()))?;
        if grid.is_empty() {
            return Err(ConfigError::Invalid("grid is empty".into()));
        }
        Ok(grid)
    }

    pub fn widest_assessment(&self) -> u32 {
        self.assessments.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.grid()?;
        self.cohort.validate().map_err(|e| invalid(&e))?;
        self.synth.validate().map_err(|e| invalid(&e))?;
        self.pretrain.validate().map_err(|e| invalid(&e))?;
        self.finetune.validate().map_err(|e| invalid(&e))?;
        self.model.for_vocab(proq_core::sequencer::N_SPECIAL as usize + 1).validate().map_err(|e| invalid(&e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_seed_propagation() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("# comment\nseed=7\ncohort.persistence_days = 60\npretrain.lr=0.01\ngrid.followup=180,365\n").unwrap();
        assert_eq!((cfg.synth.seed, cfg.pretrain.seed, cfg.finetune.seed), (7, 7, 7));
        assert_eq!(cfg.cohort.persistence_days, 60);
        assert_eq!(cfg.pretrain.adam.lr, 0.01);
        assert_eq!(cfg.followups, vec![180, 365]);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(cfg.apply_text("cohort.persistance_days=3"), Err(ConfigError::UnknownKey { line: 1, key: "cohort.persistance_days".into() }));
        assert!(matches!(cfg.apply_text("seed=x"), Err(ConfigError::Value { .. })));
        assert_eq!(cfg.apply_text("seed"), Err(ConfigError::Syntax { line: 1 }));
    }
}
