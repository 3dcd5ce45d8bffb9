use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterTrainParams;
use crate::embeddings::EmbeddingParams;
use crate::error::{Error, Result};
use crate::hinting::Mode;
use crate::synth::{DatasetParams, TextPool};
use crate::vlm::FixtureParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceParams {
    /// Number of detected classes appended as hints.
    pub k: usize,
    /// Arm reported as the headline result.
    pub mode: Mode,
    /// Hint counts evaluated by the ablation sweep.
    pub sweep_k: Vec<usize>,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self {
            k: 3,
            mode: Mode::Full,
            sweep_k: (1..=9).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeParams {
    /// Scenes written by the probe report; empty selects the first test
    /// scene of every rare class and of class 0.
    pub scenes: Vec<String>,
}

/// Everything a run depends on. A run is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Text pool file; `None` uses the bundled pool.
    pub text_pool: Option<PathBuf>,
    pub dataset: DatasetParams,
    pub fixture: FixtureParams,
    pub embeddings: EmbeddingParams,
    pub adapter: AdapterTrainParams,
    pub inference: InferenceParams,
    pub probe: ProbeParams,
    /// Abort when the fixture or prototype gate fails. Smoke configs too
    /// small to pass the gates turn this off.
    pub enforce_gates: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            text_pool: None,
            dataset: DatasetParams::default(),
            fixture: FixtureParams::default(),
            embeddings: EmbeddingParams::default(),
            adapter: AdapterTrainParams::default(),
            inference: InferenceParams::default(),
            probe: ProbeParams::default(),
            enforce_gates: true,
        }
    }
}

impl ExperimentConfig {
    /// Full geometry: 1024-wide model and 8 adapter heads trained
    /// on every scene at lr 1e-4. Far too slow for a desk run.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.fixture.dim = 1024;
        c.fixture.heads = 8;
        c.fixture.ff_dim = 4096;
        c.adapter.heads = 8;
        c.adapter.lr = 1e-4;
        c.adapter.max_per_class = None;
        c
    }

    /// A few-second configuration for smoke tests. It does not pass the
    /// gates, so they are not enforced.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.dataset.num_classes = 4;
        c.dataset.rare_classes = 1;
        c.dataset.common_count = 12;
        c.dataset.rare_count = 3;
        c.dataset.test_per_class = 3;
        c.dataset.text_budget = 16;
        c.fixture.layers = 2;
        c.fixture.heads = 2;
        c.fixture.dim = 16;
        c.fixture.ff_dim = 32;
        c.fixture.context = 64;
        c.fixture.epochs = 1;
        c.fixture.unfamiliar_examples = 8;
        c.fixture.word_examples = 8;
        c.embeddings.align_epochs = 1;
        c.embeddings.joint_epochs = 2;
        c.adapter.heads = 2;
        c.adapter.epochs = 1;
        c.adapter.max_per_class = Some(2);
        c.inference.sweep_k = vec![1, 2, 4];
        c.enforce_gates = false;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.fixture.validate()?;
        self.embeddings.validate()?;
        self.adapter.validate()?;
        if self.fixture.heads == 0 || self.fixture.dim % self.fixture.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide model dim {}",
                self.fixture.heads, self.fixture.dim
            )));
        }
        if self.adapter.heads == 0 || self.fixture.dim % self.adapter.heads != 0 {
            return Err(Error::Config(format!(
                "{} adapter heads do not divide model dim {}",
                self.adapter.heads, self.fixture.dim
            )));
        }
        if self.inference.k == 0 || self.inference.sweep_k.iter().any(|&k| k == 0) {
            return Err(Error::Config("hint counts must be at least 1".into()));
        }
        if self.inference.sweep_k.is_empty() {
            return Err(Error::Config("the sweep needs at least one k".into()));
        }
        Ok(())
    }

    pub fn text_pool(&self) -> Result<TextPool> {
        match &self.text_pool {
            Some(path) => TextPool::load(path),
            None => Ok(TextPool::for_classes(self.dataset.num_classes)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn documented_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.inference.k, 3);
        assert_eq!(c.embeddings.kappa, 0.95);
        assert_eq!(c.embeddings.lr, 1e-4);
        assert_eq!(c.embeddings.weight_decay, 0.01);
        assert_eq!(c.embeddings.align_epochs + c.embeddings.joint_epochs, 20);
        assert_eq!(c.adapter.epochs, 10);
        assert_eq!(c.adapter.batch_size, 1);
        assert_eq!(
            (c.fixture.layers, c.fixture.heads, c.fixture.dim),
            (4, 4, 64)
        );
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = ExperimentConfig::from_json(r#"{"seeed": 1}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentConfig::from_json(r#"{"adapter": {"lr": 1e-4, "momentum": 0.9}}"#)
            .unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"inference": {"k": 0}}"#,
            r#"{"adapter": {"heads": 3}}"#,
            r#"{"inference": {"sweep_k": []}}"#,
            r#"{"inference": {"mode": "everything"}}"#,
        ] {
            assert!(
                matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn presets_validate() {
        ExperimentConfig::full_scale().validate().unwrap();
        ExperimentConfig::smoke().validate().unwrap();
        assert_eq!(ExperimentConfig::full_scale().fixture.dim, 1024);
    }
}
