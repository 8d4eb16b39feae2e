use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ClearImageMode, SplitCounts};
use crate::dissect::DissectConfig;
use crate::error::{CfdError, Result};
use crate::evidence::{EvidenceSource, OcclusionConfig, OcclusionFill};
use crate::masks::ThresholdPolicy;
use crate::model::ArchitectureDescriptor;
use crate::strategies::{Strategy, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Manifest path when `kind = "manifest"`.
    pub manifest: Option<PathBuf>,
    /// Per-class image counts for synthetic data.
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub side: usize,
    pub clear_image_mode: ClearImageMode,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let c = SplitCounts::default();
        Self {
            kind: DatasetKind::Synthetic,
            manifest: None,
            train: c.train,
            val: c.val,
            test: c.test,
            side: 64,
            clear_image_mode: ClearImageMode::Auto,
        }
    }
}

impl DatasetSpec {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub base: Vec<String>,
    pub increments: Vec<String>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        let names: Vec<String> = crate::data::SHAPES.iter().map(|s| s.to_string()).collect();
        Self {
            base: names[..8].to_vec(),
            increments: names[8..].to_vec(),
        }
    }
}

impl TaskSpec {
    pub fn universe(&self) -> Vec<String> {
        self.base.iter().chain(&self.increments).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    #[default]
    Toy,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub preset: ModelPreset,
    pub block_channels: Option<Vec<usize>>,
    pub embed_size: Option<usize>,
    pub hidden_size: Option<usize>,
}

impl ModelSpec {
    /// Descriptor at input side `side`; vocabulary and class sizes are
    /// placeholders filled in when the model is built.
    pub fn descriptor(&self, side: usize) -> ArchitectureDescriptor {
        let mut d = match self.preset {
            ModelPreset::Toy => ArchitectureDescriptor::toy(1, 4),
            ModelPreset::Desk => ArchitectureDescriptor::desk_default(1, 4),
        };
        d.input_size = side;
        if let Some(c) = &self.block_channels {
            d.block_channels = c.clone();
        }
        if let Some(e) = self.embed_size {
            d.embed_size = e;
        }
        if let Some(h) = self.hidden_size {
            d.hidden_size = h;
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceKind {
    #[default]
    Activations,
    Occlusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DissectSpec {
    pub threshold_q: f64,
    pub evidence: EvidenceKind,
    pub window: usize,
    pub stride: usize,
    pub fill: OcclusionFill,
    /// Old-class validation images per class in the dissection sample set.
    pub samples_per_class: usize,
}

impl Default for DissectSpec {
    fn default() -> Self {
        let o = OcclusionConfig::default();
        Self {
            threshold_q: 0.2,
            evidence: EvidenceKind::Activations,
            window: o.window,
            stride: o.stride,
            fill: o.fill,
            samples_per_class: 2,
        }
    }
}

impl DissectSpec {
    pub fn config(&self) -> DissectConfig {
        let source = match self.evidence {
            EvidenceKind::Activations => EvidenceSource::Activations,
            EvidenceKind::Occlusion => EvidenceSource::Occlusion(OcclusionConfig {
                window: self.window,
                stride: self.stride,
                fill: self.fill,
            }),
        };
        DissectConfig {
            policy: ThresholdPolicy::PositiveQuantile(self.threshold_q),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub strategies: Vec<Strategy>,
    /// Run strategies concurrently.
    pub parallel: bool,
    pub dataset: DatasetSpec,
    pub tasks: TaskSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub dissect: DissectSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            strategies: vec![Strategy::FineTune, Strategy::Critical(None)],
            parallel: false,
            dataset: DatasetSpec::default(),
            tasks: TaskSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            dissect: DissectSpec::default(),
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `key` (dotted for sections, `-` and `_` interchangeable) in `table`.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let key = key.trim_start_matches("--").replace('-', "_");
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for s in sections {
        let next = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| CfdError::InvalidConfig(format!("{s} is not a section")))?;
    }
    let mut v = override_value(raw);
    // list-valued keys accept comma-separated words
    if matches!(*last, "strategies" | "base" | "increments") {
        if let toml::Value::String(s) = &v {
            v = toml::Value::Array(s.split(',').map(|w| toml::Value::String(w.trim().to_string())).collect());
        }
    }
    cur.insert(last.to_string(), v);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CfdError::InvalidConfig(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CfdError::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file, applies overrides and validates.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CfdError::io(path, e))?;
        let cfg = Self::from_toml(&text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CfdError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CfdError::InvalidConfig(m));
        self.train.validate()?;
        self.model.descriptor(self.dataset.side).validate()?;
        if self.strategies.is_empty() {
            return bad("no strategies".into());
        }
        if self.tasks.base.is_empty() {
            return bad("base task has no classes".into());
        }
        if self.dissect.samples_per_class == 0 {
            return bad("dissect.samples_per_class must be positive".into());
        }
        let dcfg = self.dissect.config();
        dcfg.policy.validate()?;
        if let EvidenceSource::Occlusion(o) = dcfg.source {
            o.validate(self.dataset.side)?;
        }
        match self.dataset.kind {
            DatasetKind::Manifest => match &self.dataset.manifest {
                Some(p) if p.exists() => {}
                Some(p) => return bad(format!("manifest {} does not exist", p.display())),
                None => return bad("dataset.kind = manifest needs dataset.manifest".into()),
            },
            DatasetKind::Synthetic => {
                if let Some(c) = self.tasks.universe().iter().find(|c| !crate::data::SHAPES.contains(&c.as_str())) {
                    return Err(CfdError::UnknownShape(c.clone()));
                }
                if self.dataset.train == 0 || self.dataset.val == 0 || self.dataset.test == 0 {
                    return bad("synthetic split counts must be positive".into());
                }
            }
        }
        Ok(())
    }
}
