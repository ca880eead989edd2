//! Experiment configuration files.
//!
//! JSON, every field optional with the defaults below, unknown keys rejected.
//! The accompanying schema lives in `schema/experiment.schema.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::BenchmarkSpec;
use crate::trainer::{Method, MethodConfig, TrainPlan};
use crate::{Error, Result};

pub const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    pub plan: TrainPlan,
    pub methods: Vec<MethodConfig>,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkSpec::default(),
            plan: TrainPlan::default(),
            methods: vec![MethodConfig::new(Method::Pathweave), MethodConfig::new(Method::ContinualFt)],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.plan.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("methods must list at least one method".into()));
        }
        for m in &self.methods {
            m.validate()?;
        }
        let b = &self.plan.backbone;
        if b.d_enc != self.benchmark.d_enc || b.n_classes != self.benchmark.n_classes {
            return Err(Error::Config(format!(
                "backbone d_enc/n_classes ({}, {}) must match benchmark ({}, {})",
                b.d_enc, b.n_classes, self.benchmark.d_enc, self.benchmark.n_classes
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding; ignores `output_dir`.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
