//! Experiment configuration files.
//!
//! ```json
//! {"schema_version": 1,
//!  "data": {"kind": "world",
//!           "schema": {"n_attributes": 3, "values_per_attribute": [4, 4, 4], "d": 16, "noise_sigma": 0.1},
//!           "layout": {"n_groups": 8, "grid_side": 2, "objects_per_image": 8, "subject_weight": [0.5, 2.0]},
//!           "pairs_per_group": 200, "eval_pairs_per_group": 100, "distractors": 10, "seed": null},
//!  "trainer": {"variant": "msrl", "iterations": 3000, "seed": 1},
//!  "output_dir": null}
//! ```
//!
//! `data` may instead be `{"kind": "dataset", "train": "train.json", "eval": "eval.json",
//! "distractors": 10}`; relative paths resolve against the config file's
//! directory and a missing `eval` evaluates on the training pairs. A world
//! without a `seed` is drawn from the trainer seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::GroupCatalog;
use crate::error::{MsrlError, Result};
use crate::io::dataset::load_dataset;
use crate::metrics::{EvalSet, DEFAULT_DISTRACTORS};
use crate::rng::{stream_rng, Stream};
use crate::trainer::TrainerConfig;
use crate::world::{AttributeSchema, SyntheticCatalog, World, WorldLayout};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

fn default_distractors() -> usize {
    DEFAULT_DISTRACTORS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub schema: AttributeSchema,
    pub layout: WorldLayout,
    pub pairs_per_group: usize,
    pub eval_pairs_per_group: usize,
    #[serde(default = "default_distractors")]
    pub distractors: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl WorldSpec {
    /// Configuration used throughout the desk-scale experiments.
    pub fn desk() -> Self {
        WorldSpec {
            schema: AttributeSchema { n_attributes: 3, values_per_attribute: vec![4, 4, 4], d: 16, noise_sigma: 0.1 },
            layout: WorldLayout { subject_weight: [0.5, 2.0], ..WorldLayout::default() },
            pairs_per_group: 200,
            eval_pairs_per_group: 100,
            distractors: DEFAULT_DISTRACTORS,
            seed: None,
        }
    }
}

/// A sampled world: training pairs, evaluation pairs and the codebook.
#[derive(Debug, Clone)]
pub struct WorldData {
    pub world: World,
    pub train: SyntheticCatalog,
    pub eval: SyntheticCatalog,
}

/// Draws codebook, training and evaluation pairs from their own streams.
pub fn sample_world(spec: &WorldSpec, seed: u64) -> Result<WorldData> {
    let world = World::new(spec.schema.clone(), spec.layout.clone(), &mut stream_rng(seed, Stream::Codebook))?;
    let train = world.sample(spec.pairs_per_group, &mut stream_rng(seed, Stream::TrainEntities))?;
    let eval = world.sample(spec.eval_pairs_per_group, &mut stream_rng(seed, Stream::EvalEntities))?;
    Ok(WorldData { world, train, eval })
}

/// Candidate lists drawn from the evaluation stream of `seed`.
pub fn build_eval_set(catalog: GroupCatalog, distractors: usize, seed: u64) -> Result<EvalSet> {
    EvalSet::build(catalog, distractors, &mut stream_rng(seed, Stream::EvalCandidates))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    World(WorldSpec),
    Dataset {
        train: PathBuf,
        #[serde(default)]
        eval: Option<PathBuf>,
        #[serde(default = "default_distractors")]
        distractors: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataSpec,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(data: DataSpec, trainer: TrainerConfig) -> Self {
        ExperimentConfig { schema_version: CONFIG_SCHEMA_VERSION, data, trainer, output_dir: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(MsrlError::Version {
                found: self.schema_version.to_string(),
                expected: CONFIG_SCHEMA_VERSION.to_string(),
            });
        }
        if let DataSpec::World(w) = &self.data {
            w.schema.validate()?;
            w.layout.validate()?;
        }
        self.trainer.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Seed of the synthetic world, if any.
    pub fn world_seed(&self) -> Option<u64> {
        match &self.data {
            DataSpec::World(w) => Some(w.seed.unwrap_or(self.trainer.seed)),
            DataSpec::Dataset { .. } => None,
        }
    }

    /// Training catalog and evaluation set. `base` resolves relative paths.
    pub fn materialize(&self, base: &Path) -> Result<(GroupCatalog, EvalSet)> {
        match &self.data {
            DataSpec::World(spec) => {
                let data = sample_world(spec, spec.seed.unwrap_or(self.trainer.seed))?;
                let eval = build_eval_set(data.eval.catalog, spec.distractors, self.trainer.seed)?;
                Ok((data.train.catalog, eval))
            }
            DataSpec::Dataset { train, eval, distractors } => {
                let train = load_dataset(&base.join(train))?;
                let eval_catalog = match eval {
                    Some(path) => load_dataset(&base.join(path))?,
                    None => train.clone(),
                };
                if eval_catalog.dims() != train.dims() || eval_catalog.n_groups() != train.n_groups() {
                    return Err(MsrlError::validation("evaluation dataset does not match the training dataset"));
                }
                let eval = build_eval_set(eval_catalog, *distractors, self.trainer.seed)?;
                Ok((train, eval))
            }
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if path.as_os_str().is_empty() {
        return Err(MsrlError::validation("empty config path"));
    }
    ExperimentConfig::from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_world_config_parses() {
        let text = r#"{"schema_version": 1,
            "data": {"kind": "world",
                     "schema": {"n_attributes": 3, "values_per_attribute": [4, 4, 4], "d": 16, "noise_sigma": 0.1},
                     "layout": {"n_groups": 8, "grid_side": 2, "objects_per_image": 8, "subject_weight": [0.5, 2.0]},
                     "pairs_per_group": 200, "eval_pairs_per_group": 100},
            "trainer": {"variant": "msrl-wg", "seed": 4}}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.data, DataSpec::World(WorldSpec::desk()));
        assert_eq!(cfg.world_seed(), Some(4));
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_enums_rejected() {
        let base = ExperimentConfig::new(DataSpec::World(WorldSpec::desk()), TrainerConfig::default()).to_json().unwrap();
        let extra = base.replacen("\"trainer\": {", "\"trainer\": {\"bogus\": 1,", 1);
        assert!(matches!(ExperimentConfig::from_json(&extra), Err(MsrlError::Json(_))));
        let variant = base.replacen("\"msrl\"", "\"msrl-xx\"", 1);
        assert!(ExperimentConfig::from_json(&variant).is_err());
        let version = base.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        assert!(matches!(ExperimentConfig::from_json(&version), Err(MsrlError::Version { .. })));
        let data = base.replacen("\"pairs_per_group\"", "\"pairs\"", 1);
        assert!(ExperimentConfig::from_json(&data).is_err());
    }
}
