//! Experiment configuration: one TOML file holding every knob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sheaf_core::discovery::DiscoveryConfig;
use sheaf_core::model::{hex16, Activation};
use sheaf_core::tasks::{generate_agreement, generate_ioi, IoiVariant, TaskDataset, TaskKind};
use sheaf_core::theory::{Readout, ENUMERATION_LIMIT};
use sheaf_core::{ModelConfig, TrainConfig};

use crate::error::LabError;

/// Overrides `output_dir` for every command.
pub const OUTPUT_ROOT_ENV: &str = "SHEAF_LAB_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_examples: usize,
    pub seed: u64,
    /// IOI template family; ignored for agreement.
    pub variant: IoiVariant,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { kind: TaskKind::Ioi, n_examples: 2000, seed: 0, variant: IoiVariant::Mixed }
    }
}

impl TaskSpec {
    pub fn generate(&self) -> Result<TaskDataset, LabError> {
        Ok(match self.kind {
            TaskKind::Ioi => generate_ioi(self.n_examples, self.seed, self.variant)?,
            TaskKind::Agreement => generate_agreement(self.n_examples, self.seed)?,
        })
    }
}

/// Architecture; vocabulary size and context length come from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub activation: Activation,
    /// Weight-init seed.
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 2, d_model: 32, d_head: 16, d_mlp: 128, activation: Activation::Relu, seed: 2 }
    }
}

impl ModelSpec {
    pub fn model_config(&self, dataset: &TaskDataset) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_head: self.d_head,
            d_mlp: self.d_mlp,
            vocab_size: dataset.vocab_size(),
            max_seq_len: dataset.max_len(),
            seed: self.seed,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    #[serde(flatten)]
    pub optimizer: TrainConfig,
    /// Eval accuracy below this fails `train`.
    pub accuracy_floor: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { optimizer: TrainConfig::default(), accuracy_floor: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Accuracy a core subset must reach.
    pub core_threshold: f64,
    /// Largest subset size the core search will try.
    pub core_max_size: usize,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self { core_threshold: 0.85, core_max_size: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureSource {
    /// Gate-gradient signatures of the trained checkpoint.
    Model,
    /// Uniform random signatures.
    Random,
    /// Every edge carries the same signature.
    Identical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySpec {
    pub source: SignatureSource,
    /// Edge count for synthetic signatures.
    pub n_edges: usize,
    /// Signature dimension for synthetic signatures.
    pub dim: usize,
    /// Coordinate bound for random signatures.
    pub bound: f64,
    /// Prompts used for model signatures and the residual check.
    pub sample_size: usize,
    pub readout: Readout,
    pub subset_size: usize,
    pub delta: f64,
    pub tau: f64,
    pub budget: u64,
    pub margin_trials: usize,
    pub residual_subsets: usize,
}

impl Default for TheorySpec {
    fn default() -> Self {
        Self {
            source: SignatureSource::Random,
            n_edges: 14,
            dim: 2,
            bound: 1.0,
            sample_size: 4,
            readout: Readout::AnswerLogits,
            subset_size: 4,
            delta: 0.3,
            tau: 0.2,
            budget: ENUMERATION_LIMIT as u64,
            margin_trials: 10_000,
            residual_subsets: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds run-level randomness: discovery run seeds, theory trials.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub discovery: DiscoveryConfig,
    pub analysis: AnalysisSpec,
    pub theory: TheorySpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            task: TaskSpec::default(),
            model: ModelSpec::default(),
            train: TrainSpec::default(),
            discovery: DiscoveryConfig::default(),
            analysis: AnalysisSpec::default(),
            theory: TheorySpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Io(format!("reading config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| LabError::Contract(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of every setting that affects results. The output location is
    /// left out so identical experiments in different directories agree.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex16(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// `output_dir`, unless the environment overrides the root.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: ExperimentConfig = toml::from_str("seed = 4\n[discovery]\nsteps = 10\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.discovery.steps, 10);
        assert_eq!(c.model, ModelSpec::default());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[model]\nlayers = 3\n").is_err());
    }
}
