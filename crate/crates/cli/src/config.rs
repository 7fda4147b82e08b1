//! The run configuration file: a versioned TOML document with one section
//! per stage. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lamina::diagfind::{DiagFindConfig, DiscoveryParams, RegionSource, VerdictRule};
use lamina::optim::TrainConfig;
use lamina::phantom::PhantomParams;
use lamina::saliency::DEFAULT_HIGHLIGHT_THRESHOLD;
use lamina::NetworkConfig;

use crate::exit::Failure;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// One model per seed for `train`; the first seed draws the dataset for
    /// `generate`.
    pub seeds: Vec<u64>,
    pub run_dir: Option<PathBuf>,
    /// Worker threads for evaluation and saliency. Results do not depend on it.
    pub threads: usize,
    /// Forces a single thread.
    pub deterministic: bool,
    pub inputs: Inputs,
    pub dataset: DatasetSection,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub saliency: SaliencySection,
    pub diagfind: DiagFindSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let base = DiagFindConfig::default();
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seeds: vec![0],
            run_dir: None,
            threads: 1,
            deterministic: false,
            inputs: Inputs::default(),
            dataset: DatasetSection::default(),
            network: base.network,
            train: base.train,
            eval: EvalSection::default(),
            saliency: SaliencySection::default(),
            diagfind: DiagFindSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub manifest: Option<PathBuf>,
    /// Cropped evaluation set for `diagfind`.
    pub eval_manifest: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub box_file: Option<PathBuf>,
    /// Precomputed scores for `eval`, as `scan_id,label,score[,split]` CSV.
    pub scores: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub patients: usize,
    /// Train, validation and test fractions, assigned by patient.
    pub split: [f64; 3],
    pub phantom: PhantomParams,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { patients: 40, split: [0.6, 0.2, 0.2], phantom: PhantomParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
    /// Zero every voxel outside each record's crop box before scoring.
    pub cropped: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { batch_size: 8, cropped: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencySection {
    /// Network default when unset.
    pub layer: Option<String>,
    pub threshold: f64,
    /// Slicing axis of the exported images (0 depth, 1 height, 2 width).
    pub axis: usize,
    /// Slice indices; the middle slice when empty.
    pub slices: Vec<usize>,
    /// Scan ids; every test-split scan (or every scan) when empty.
    pub scans: Vec<String>,
}

impl Default for SaliencySection {
    fn default() -> Self {
        SaliencySection { layer: None, threshold: DEFAULT_HIGHLIGHT_THRESHOLD, axis: 0, slices: Vec::new(), scans: Vec::new() }
    }
}

/// Pipeline settings beyond the shared network and training sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagFindSection {
    pub retrain: TrainConfig,
    pub region: RegionSource,
    pub discovery: DiscoveryParams,
    pub verdict: VerdictRule,
}

impl Default for DiagFindSection {
    fn default() -> Self {
        let base = DiagFindConfig::default();
        DiagFindSection { retrain: base.retrain, region: base.region, discovery: base.discovery, verdict: base.verdict }
    }
}

impl RunConfig {
    /// Parse a config file. The file must state its schema version.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, Failure> {
        let raw: toml::Table =
            toml::from_str(text).map_err(|e| Failure::config(format!("{}: {e}", origin.display())))?;
        match raw.get("schema_version") {
            None => {
                return Err(Failure::config(format!(
                    "{}: missing schema_version (this build reads version {SCHEMA_VERSION})",
                    origin.display()
                )))
            }
            Some(toml::Value::Integer(v)) if *v == SCHEMA_VERSION as i64 => {}
            Some(v) => {
                return Err(Failure::config(format!(
                    "{}: schema_version {v} is not supported (this build reads version {SCHEMA_VERSION})",
                    origin.display()
                )))
            }
        }
        toml::from_str(text).map_err(|e| Failure::config(format!("{}: {e}", origin.display())))
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string_pretty(self).map_err(|e| Failure::config(format!("cannot serialize configuration: {e}")))
    }

    pub fn diagfind_config(&self) -> DiagFindConfig {
        DiagFindConfig {
            network: self.network.clone(),
            train: TrainConfig { seed: self.seeds[0], ..self.train.clone() },
            retrain: TrainConfig { seed: self.seeds[0], ..self.diagfind.retrain.clone() },
            region: self.diagfind.region.clone(),
            discovery: self.diagfind.discovery.clone(),
            verdict: self.diagfind.verdict.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |msg: String| Err(Failure::config(msg));
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.dataset.patients == 0 {
            return bad("dataset.patients must be at least 1".into());
        }
        if self.eval.batch_size == 0 {
            return bad("eval.batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.saliency.threshold) {
            return bad(format!("saliency.threshold {} is outside [0, 1]", self.saliency.threshold));
        }
        if self.saliency.axis > 2 {
            return bad(format!("saliency.axis {} must be 0, 1 or 2", self.saliency.axis));
        }
        self.network.validate().map_err(|e| Failure::config(format!("network: {e}")))?;
        self.train.validate().map_err(|e| Failure::config(format!("train: {e}")))?;
        self.diagfind.retrain.validate().map_err(|e| Failure::config(format!("diagfind.retrain: {e}")))?;
        Ok(())
    }

    /// Threads actually used.
    pub fn worker_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads
        }
    }
}
