//! Run configuration: one JSON file that resolves to a concept bank, a
//! synthetic world, a model shape, and a training plan.
//!
//! Every field has a desk-scale default, so an empty object `{}` is a
//! valid config. Unknown keys are rejected. The configuration hash covers
//! the resolved settings with the seed cleared; artifacts key on the
//! (hash, seed) pair, which lets one dataset serve runs that differ only
//! in training seed.

use crate::concept_bank::{
    self, build_association_matrix, fixtures, load_matrix, load_vocabulary, to_canonical_json,
    AssociationMatrix, BodyPart, ConceptVocabulary, RecordsFile,
};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::logic::LogicConfig;
use crate::synthetic::{default_part_map, planted_bank, WorldConfig};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Where the vocabulary and association matrix come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum BankSource {
    /// Synthetic vocabulary with planted action signatures, drawn from the
    /// run seed.
    Planted { actions: usize, concepts: usize },
    /// Bundled vocabulary (`ntu74` or `desk67`); the matrix is built from
    /// an annotation records file, the bundled demo records when no path
    /// is given.
    Fixture {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        records: Option<PathBuf>,
    },
    /// Explicit artifact files, as written by `bank build`.
    Files { vocabulary: PathBuf, matrix: PathBuf },
}

impl Default for BankSource {
    fn default() -> Self {
        BankSource::Planted { actions: 10, concepts: 20 }
    }
}

/// World geometry and sampling noise. The bank is configured separately;
/// `part_map` falls back to a contiguous six-way split over the joints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSettings {
    pub frames: usize,
    pub joints: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub flip_prob: f64,
    pub text_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part_map: Option<Vec<BodyPart>>,
}

impl Default for WorldSettings {
    fn default() -> Self {
        WorldSettings {
            frames: 16,
            joints: 20,
            channels: 32,
            noise_std: 0.1,
            flip_prob: 0.05,
            text_dim: 32,
            part_map: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings { train_samples: 2000, eval_samples: 500 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub bank: BankSource,
    pub world: WorldSettings,
    pub decoder: DecoderConfig,
    pub logic: LogicConfig,
    pub train: TrainConfig,
    /// Shared width of the skeleton and text alignment projections.
    pub proj_dim: usize,
    pub data: DataSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            bank: BankSource::default(),
            world: WorldSettings::default(),
            decoder: DecoderConfig::default(),
            logic: LogicConfig::default(),
            train: TrainConfig::default(),
            proj_dim: 64,
            data: DataSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.logic.validate()?;
        if self.proj_dim == 0 {
            return Err(Error::validation("proj_dim must be positive"));
        }
        if self.data.train_samples == 0 || self.data.eval_samples == 0 {
            return Err(Error::validation("sample counts must be positive"));
        }
        if let Some(map) = &self.world.part_map {
            if map.len() != self.world.joints {
                return Err(Error::validation(format!(
                    "part_map length {} does not match joints {}",
                    map.len(),
                    self.world.joints
                )));
            }
        }
        if self.decoder.dim != self.world.channels {
            return Err(Error::validation(format!(
                "decoder dim {} must match world channels {}",
                self.decoder.dim, self.world.channels
            )));
        }
        Ok(())
    }

    /// Resolves the bank source to a bound vocabulary and matrix.
    pub fn resolve_bank(&self) -> Result<(ConceptVocabulary, AssociationMatrix)> {
        match &self.bank {
            BankSource::Planted { actions, concepts } => {
                planted_bank(*actions, *concepts, self.seed)
            }
            BankSource::Fixture { name, records } => {
                let vocab = fixtures::fixture_vocabulary(name)?;
                let file: RecordsFile = match records {
                    Some(path) => concept_bank::load_records(path)?,
                    None => serde_json::from_str(fixtures::DEMO_RECORDS_JSON)
                        .expect("bundled records parse"),
                };
                let matrix = build_association_matrix(&vocab, &file.actions, &file.records)?;
                Ok((vocab, matrix))
            }
            BankSource::Files { vocabulary, matrix } => {
                let vocab = load_vocabulary(vocabulary)?;
                let m = load_matrix(matrix)?;
                m.bind(&vocab)?;
                Ok((vocab, m))
            }
        }
    }

    /// Assembles and validates the full world configuration.
    pub fn world_config(&self) -> Result<WorldConfig> {
        let (vocabulary, matrix) = self.resolve_bank()?;
        let part_map = match &self.world.part_map {
            Some(map) => map.clone(),
            None => default_part_map(self.world.joints),
        };
        let cfg = WorldConfig {
            frames: self.world.frames,
            joints: self.world.joints,
            channels: self.world.channels,
            noise_std: self.world.noise_std,
            flip_prob: self.world.flip_prob,
            text_dim: self.world.text_dim,
            part_map,
            vocabulary,
            matrix,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        to_canonical_json(self)
    }

    /// Hex digest of the canonical JSON with the seed cleared. Two runs
    /// that differ only in seed share a hash, so a dataset can be checked
    /// against a training run's configuration.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        format!("{:x}", Sha256::digest(c.to_json().as_bytes()))
    }
}
