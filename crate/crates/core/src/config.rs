//! Experiment configuration: a versioned JSON schema covering dataset
//! generation, anchor specs, training budgets, selection parameters, and
//! seeds. Parsing reports field-level paths on schema violations.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::StageSpec;
use crate::error::{Error, Result};
use crate::selection::Method;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        per_class: usize,
        input_dim: usize,
        spread: f64,
    },
    Spirals {
        classes: usize,
        per_class: usize,
        noise: f64,
    },
    Idx {
        images: String,
        labels: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub spec: DatasetSpec,
    /// train/val/test fractions; must sum to 1.
    pub fractions: (f64, f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub id: String,
    pub stages: Vec<StageSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub anchor_epochs: usize,
    pub anchor_lr: f64,
    pub anchor_batch: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub stitch_epochs: usize,
    pub stitch_lr: f64,
    pub stitch_batch: usize,
    /// Validation samples used for stitch-layer least-squares init.
    pub init_samples: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            anchor_epochs: 50,
            anchor_lr: 0.05,
            anchor_batch: 64,
            probe_epochs: 30,
            probe_lr: 0.1,
            probe_batch: 64,
            stitch_epochs: 20,
            stitch_lr: 0.05,
            stitch_batch: 64,
            init_samples: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub method: Method,
    pub tau: f64,
    #[serde(default = "default_true")]
    pub relative_tau: bool,
    /// None: one bucket per target block.
    #[serde(default)]
    pub num_buckets: Option<usize>,
    /// None: match the selected set size of the klas plan when available.
    #[serde(default)]
    pub minkl_k: Option<usize>,
    #[serde(default = "default_cascade_thresholds")]
    pub cascade_thresholds: Vec<f64>,
    #[serde(default = "default_ablate_taus")]
    pub ablate_taus: Vec<f64>,
    #[serde(default = "default_ablate_buckets")]
    pub ablate_buckets: Vec<usize>,
}

fn default_true() -> bool {
    true
}

fn default_cascade_thresholds() -> Vec<f64> {
    vec![0.6, 0.7, 0.8, 0.9, 0.95]
}

fn default_ablate_taus() -> Vec<f64> {
    vec![0.01, 0.05, 0.10]
}

fn default_ablate_buckets() -> Vec<usize> {
    vec![4, 8, 16]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: DatasetConfig,
    pub anchors: Vec<AnchorConfig>,
    pub training: TrainingConfig,
    pub selection: SelectionConfig,
    pub seeds: Vec<u64>,
    pub out_dir: String,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<ExperimentConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("field '{}': {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {}, expected {CONFIG_SCHEMA_VERSION}",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.selection.tau) {
            return Err(Error::Config(format!(
                "selection.tau {} must lie in [0, 1]",
                self.selection.tau
            )));
        }
        if let Some(nb) = self.selection.num_buckets {
            if nb == 0 {
                return Err(Error::Config("selection.num_buckets must be >= 1".into()));
            }
        }
        if self.anchors.len() < 2 {
            return Err(Error::Config("need at least 2 anchors".into()));
        }
        let mut ids: Vec<&str> = self.anchors.iter().map(|a| a.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.anchors.len() {
            return Err(Error::Config("anchor ids must be unique".into()));
        }
        let (a, b, c) = self.dataset.fractions;
        if (a + b + c - 1.0).abs() > 1e-9 || a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(Error::Config(
                "dataset.fractions must be positive and sum to 1".into(),
            ));
        }
        if self
            .selection
            .cascade_thresholds
            .iter()
            .any(|t| *t <= 0.0 || *t > 1.0)
        {
            return Err(Error::Config(
                "selection.cascade_thresholds must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (parsed and re-serialized) config.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }

    /// Short run identifier derived from the digest.
    pub fn run_id(&self) -> String {
        self.digest()[..12].to_string()
    }

    /// The default desk-scale experiment: 8-class blobs in 16 dimensions,
    /// a width-16/depth-4 source and width-64/depth-8 target, five seeds.
    pub fn default_study() -> ExperimentConfig {
        ExperimentConfig {
            version: CONFIG_SCHEMA_VERSION,
            dataset: DatasetConfig {
                spec: DatasetSpec::Blobs {
                    classes: 8,
                    per_class: 250,
                    input_dim: 16,
                    spread: 1.5,
                },
                fractions: (0.75, 0.125, 0.125),
            },
            anchors: vec![
                AnchorConfig {
                    id: "ti".into(),
                    stages: vec![StageSpec {
                        hidden_dim: 16,
                        num_blocks: 4,
                    }],
                },
                AnchorConfig {
                    id: "b".into(),
                    stages: vec![StageSpec {
                        hidden_dim: 64,
                        num_blocks: 8,
                    }],
                },
            ],
            training: TrainingConfig::default(),
            selection: SelectionConfig {
                method: Method::Klas,
                tau: 0.05,
                relative_tau: true,
                num_buckets: None,
                minkl_k: None,
                cascade_thresholds: default_cascade_thresholds(),
                ablate_taus: default_ablate_taus(),
                ablate_buckets: default_ablate_buckets(),
            },
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: "runs".into(),
        }
    }
}
