//! The run configuration document: every module's settings in one JSON object.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::dipw::DipwConfig;
use crate::embedding::SimilarityMap;
use crate::error::{Error, Result};
use crate::sar::SarConfig;
use crate::twb::BlendConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub dimension: usize,
    pub seed: u64,
    pub similarity: SimilarityMap,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dimension: 64,
            seed: 0,
            similarity: SimilarityMap::Affine01,
        }
    }
}

/// Which latent the prompt-weighting frame probe looks at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    #[default]
    First,
    Mean,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestratorConfig {
    pub probe: ProbeSource,
    /// Carry the last combined embedding of segment k into step 1 of k+1.
    pub carry_prev_combined: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dipw: DipwConfig,
    pub blend: BlendConfig,
    pub sar: SarConfig,
    pub backbone: BackboneConfig,
    pub embedding: EmbeddingConfig,
    pub orchestrator: OrchestratorConfig,
}

impl RunConfig {
    /// Parses a config document. Unknown keys and out-of-range values are
    /// reported with their dotted key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dipw.validate()?;
        self.blend.validate()?;
        self.sar.validate()?;
        self.backbone.validate()?;
        if self.embedding.dimension < 2 {
            return Err(Error::config("embedding.dimension", "must be >= 2"));
        }
        if self.dipw.total_steps != self.backbone.steps {
            return Err(Error::config(
                "dipw.total_steps",
                format!(
                    "{} does not match backbone.steps {}",
                    self.dipw.total_steps, self.backbone.steps
                ),
            ));
        }
        Ok(())
    }

    /// Routes the run seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.backbone.seed = seed;
        self.embedding.seed = seed;
        self
    }

    /// Sets the step count of both the weighting schedule and the backbone.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.dipw.total_steps = steps;
        self.backbone.steps = steps;
        if !self.backbone.noise_schedule.is_empty() && self.backbone.noise_schedule.len() != steps {
            self.backbone.noise_schedule.clear();
        }
        self
    }

    /// Copy with defaults made explicit, as echoed into `run.json`.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.backbone = c.backbone.effective();
        c
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization is infallible")
    }
}
