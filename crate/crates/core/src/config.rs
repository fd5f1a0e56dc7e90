//! Run configuration: one JSON document with a section per stage.
//!
//! Unknown keys are rejected everywhere, and every section is validated
//! before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticRecipe;
use crate::error::{Error, Result};
use crate::eval::{AblationPlan, AblationVariant, EvalConfig};
use crate::grid::{ChannelLayout, GridSpec};
use crate::net::NetConfig;
use crate::objectives::LossConfig;
use crate::train::{Stage, TrainConfig};

/// Synthetic series definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_lat: usize,
    pub n_lon: usize,
    pub depth_levels: Vec<f64>,
    #[serde(default = "default_variables")]
    pub variables: Vec<String>,
    #[serde(default = "default_true")]
    pub has_ssh: bool,
    /// Number of six-hourly states to generate.
    pub n_steps: usize,
    pub recipe: SyntheticRecipe,
}

fn default_variables() -> Vec<String> {
    ["T", "S", "U", "V"].iter().map(|s| s.to_string()).collect()
}

fn default_true() -> bool {
    true
}

impl DataSection {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::uniform(self.n_lat, self.n_lon, self.depth_levels.clone()).map_err(as_config)
    }

    pub fn layout(&self) -> Result<ChannelLayout> {
        ChannelLayout::from_names(self.variables.clone(), self.depth_levels.len(), self.has_ssh).map_err(as_config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Rollout length for `predict` and `evaluate`.
    pub steps: usize,
    /// Spacing between evaluated initializations in the test split.
    pub init_stride: usize,
    pub report: EvalConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            steps: 40,
            init_stride: 4,
            report: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub variants: Vec<AblationVariant>,
    /// Number of seeds, counted up from the pretrain seed.
    pub seeds: usize,
    /// Also run the fine-tuning stage for every variant.
    pub finetune: bool,
    /// Scored leads.
    pub leads: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            variants: AblationVariant::ALL.to_vec(),
            seeds: 5,
            finetune: false,
            leads: vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every artifact the run writes.
    pub output_dir: PathBuf,
    pub data: DataSection,
    #[serde(default = "NetConfig::toy")]
    pub net: NetConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default = "TrainConfig::finetune_default")]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    }
}

impl RunConfig {
    /// Parses and validates; schema problems surface as config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.data.grid()?;
        let layout = self.data.layout()?;
        if self.data.n_steps < 6 {
            return Err(Error::Config(format!("data.n_steps {} < 6", self.data.n_steps)));
        }
        self.data.recipe.validate(&layout)?;
        self.net.validate(grid.n_lat(), grid.n_lon()).map_err(as_config)?;
        self.loss.validate()?;
        if self.pretrain.stage != Stage::Pretrain {
            return Err(Error::Config("pretrain.stage must be \"pretrain\"".into()));
        }
        if self.finetune.stage != Stage::Finetune {
            return Err(Error::Config("finetune.stage must be \"finetune\"".into()));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        for cfg in [&self.pretrain, &self.finetune] {
            if cfg.top_k == 0 || cfg.top_k > self.net.n_inputs {
                return Err(Error::Config(format!("top_k {} outside 1..={}", cfg.top_k, self.net.n_inputs)));
            }
        }
        if self.eval.steps == 0 || self.eval.init_stride == 0 {
            return Err(Error::Config("eval.steps and eval.init_stride must be positive".into()));
        }
        if !(self.eval.report.obs_noise >= 0.0) {
            return Err(Error::Config("eval.report.obs_noise must be nonnegative".into()));
        }
        if self.ablation.variants.is_empty() || self.ablation.seeds == 0 {
            return Err(Error::Config("ablation needs at least one variant and one seed".into()));
        }
        if self.ablation.leads.contains(&0) || self.eval.report.leads.contains(&0) {
            return Err(Error::Config("leads start at 1".into()));
        }
        Ok(())
    }

    /// Ablation plan over `variants` and `seeds` consecutive seeds.
    pub fn ablation_plan(&self, variants: &[AblationVariant], seeds: usize) -> AblationPlan {
        let base = self.pretrain.seed;
        AblationPlan {
            variants: variants.to_vec(),
            seeds: (0..seeds as u64).map(|s| base + s).collect(),
            net: self.net.clone(),
            loss: self.loss.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.ablation.finetune.then(|| self.finetune.clone()),
            eval: EvalConfig {
                leads: self.ablation.leads.clone(),
                map_leads: Vec::new(),
                n_buoys: 0,
                ..self.eval.report.clone()
            },
            init_stride: self.eval.init_stride,
        }
    }

    /// A small configuration on the 16 x 32 grid that runs end to end in
    /// minutes.
    pub fn toy(output_dir: PathBuf) -> Self {
        Self {
            output_dir,
            data: DataSection {
                n_lat: 16,
                n_lon: 32,
                depth_levels: vec![0.0, 50.0],
                variables: default_variables(),
                has_ssh: true,
                n_steps: 400,
                recipe: SyntheticRecipe::routing_default(0),
            },
            net: NetConfig::toy(),
            loss: LossConfig::default(),
            pretrain: TrainConfig {
                iterations: 200,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                iterations: 20,
                ..TrainConfig::finetune_default()
            },
            eval: EvalSection {
                steps: 8,
                init_stride: 8,
                report: EvalConfig::default(),
            },
            ablation: AblationSection {
                seeds: 1,
                ..AblationSection::default()
            },
        }
    }
}
