//! Flat TOML run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use consformer::attention::ScaleMode;
use consformer::model::{ModelConfig, OcrMerge, Pooling};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::synth::{AnswerScheme, SynthConfig};

/// Which score matrices the constituent layer uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    AOnly,
    COnly,
    #[default]
    Both,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::AOnly, Arm::COnly, Arm::Both];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Arm::AOnly => (true, false),
            Arm::COnly => (false, true),
            Arm::Both => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::AOnly => "a_only",
            Arm::COnly => "c_only",
            Arm::Both => "both",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::AOnly => "A only",
            Arm::COnly => "C only",
            Arm::Both => "A ⊙ C",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub arm: Arm,
    /// Seeds for `ablate`; empty means just `seed`.
    pub ablation_seeds: Vec<u64>,

    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_syllables: usize,
    pub n_fillers: usize,
    pub inventory_size: usize,
    pub word_length_probs: [f64; 3],
    pub words_per_line: [usize; 2],
    pub lines: [usize; 2],
    pub objects: [usize; 2],
    pub d_fr: usize,
    pub rho: f64,
    pub n_styles: usize,
    pub mirrored_words: bool,
    pub answer_scheme: AnswerScheme,
    /// Pre-generated splits; all three or none.
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,

    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub scale_mode: ScaleMode,
    pub ocr_merge: OcrMerge,
    pub pooling: Pooling,
    pub normalize_token_term: bool,

    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let m = ModelConfig::default();
        Self {
            seed: 0,
            arm: Arm::Both,
            ablation_seeds: Vec::new(),
            n_train: 5000,
            n_val: 500,
            n_test: 1000,
            n_syllables: s.n_syllables,
            n_fillers: s.n_fillers,
            inventory_size: s.inventory_size,
            word_length_probs: s.word_length_probs,
            words_per_line: s.words_per_line,
            lines: s.lines,
            objects: s.objects,
            d_fr: s.d_fr,
            rho: s.rho,
            n_styles: s.n_styles,
            mirrored_words: s.mirrored_words,
            answer_scheme: s.answer_scheme,
            train_data: None,
            val_data: None,
            test_data: None,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            ffn_mult: m.ffn_mult,
            dropout: m.dropout,
            scale_mode: m.scale_mode,
            ocr_merge: m.ocr_merge,
            pooling: m.pooling,
            normalize_token_term: m.normalize_token_term,
            lr: 3e-3,
            batch_size: 32,
            max_epochs: 40,
            patience: 5,
            lambda: 0.5,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
            .map_err(|e| HarnessError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.model().validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(HarnessError::Invalid("n_train and n_test must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Invalid("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lambda >= 0.0) {
            return Err(HarnessError::Invalid("lr must be > 0 and lambda >= 0".into()));
        }
        let given = [&self.train_data, &self.val_data, &self.test_data]
            .iter()
            .filter(|p| p.is_some())
            .count();
        if given != 0 && given != 3 {
            return Err(HarnessError::Invalid(
                "train_data, val_data and test_data go together".into(),
            ));
        }
        Ok(())
    }

    /// Generator settings; `n_examples` covers all three splits.
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_examples: self.n_train + self.n_val + self.n_test,
            first_index: 0,
            n_syllables: self.n_syllables,
            n_fillers: self.n_fillers,
            inventory_size: self.inventory_size,
            word_length_probs: self.word_length_probs,
            words_per_line: self.words_per_line,
            lines: self.lines,
            objects: self.objects,
            d_fr: self.d_fr,
            rho: self.rho,
            n_styles: self.n_styles,
            mirrored_words: self.mirrored_words,
            answer_scheme: self.answer_scheme,
            seed: self.seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        let (use_a, use_c) = self.arm.flags();
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_fr: self.d_fr,
            vocab_size: self.n_fillers + self.n_syllables,
            n_answers: self.inventory_size,
            dropout: self.dropout,
            use_a,
            use_c,
            scale_mode: self.scale_mode,
            ocr_merge: self.ocr_merge,
            pooling: self.pooling,
            normalize_token_term: self.normalize_token_term,
            use_object_labels: false,
            ffn_mult: self.ffn_mult,
            ln_eps: 1e-6,
            seed: self.seed,
        }
    }

    pub fn with_arm(&self, arm: Arm) -> Self {
        Self {
            arm,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of a model configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("model config serialises");
    Sha256::digest(json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            ablation_seeds: vec![1, 2],
            arm: Arm::COnly,
            ..Default::default()
        };
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("seed = 1\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::from_toml("seed = \"one\"\n").is_err());
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\narm = \"a_only\"\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model().use_c, false);
        assert_eq!(cfg.n_train, RunConfig::default().n_train);
    }

    #[test]
    fn hash_tracks_model_settings() {
        let a = RunConfig::default().model();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.d_model = 16;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn data_paths_go_together() {
        let cfg = RunConfig {
            train_data: Some("x".into()),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
