//! Action-similarity modulation of the boundary blend factor:
//! `α' = clamp(α · (1 - S_A), 0, clamp_max)` with `S_A` the cosine between
//! two action embeddings.

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};

/// `S_A` this close to 1 counts as identical actions (α' = 0).
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SarMode {
    /// Scene vs action prompt of the segment being initialized.
    #[default]
    WithinPair,
    /// Previous segment's action prompt vs the current one.
    CrossSegment,
}

impl SarMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SarMode::WithinPair => "within_pair",
            SarMode::CrossSegment => "cross_segment",
        }
    }
}

impl std::str::FromStr for SarMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within_pair" => Ok(SarMode::WithinPair),
            "cross_segment" => Ok(SarMode::CrossSegment),
            other => Err(Error::argument(format!("unknown SAR mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SarConfig {
    pub enabled: bool,
    pub mode: SarMode,
    pub clamp_max: f64,
}

impl Default for SarConfig {
    fn default() -> Self {
        SarConfig {
            enabled: true,
            mode: SarMode::WithinPair,
            clamp_max: 0.5,
        }
    }
}

impl SarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_max > 0.0 && self.clamp_max <= 0.5) {
            return Err(Error::config(
                "sar.clamp_max",
                format!("must be in (0, 0.5], got {}", self.clamp_max),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SarRecord {
    #[serde(rename = "S_A")]
    pub similarity: f64,
    pub alpha_in: f64,
    pub alpha_out: f64,
    pub mode: SarMode,
    /// Prompt identifiers such as `action:2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_compared: Option<(String, String)>,
}

pub fn action_embedding(provider: &dyn EmbeddingProvider, prompt_text: &str) -> Result<EmbeddingVector> {
    provider.embed_text(prompt_text)
}

/// `clamp(alpha · (1 - similarity), 0, clamp_max)`.
pub fn modulated_alpha(alpha: f64, similarity: f64, clamp_max: f64) -> Result<f64> {
    if !(0.0..=0.5).contains(&alpha) {
        return Err(Error::argument(format!("alpha must be in [0, 0.5], got {alpha}")));
    }
    if !(-1.0..=1.0).contains(&similarity) {
        return Err(Error::argument(format!("similarity must be in [-1, 1], got {similarity}")));
    }
    if !(clamp_max > 0.0 && clamp_max <= 0.5) {
        return Err(Error::argument(format!("clamp_max must be in (0, 0.5], got {clamp_max}")));
    }
    if 1.0 - similarity <= IDENTITY_TOLERANCE {
        return Ok(0.0);
    }
    Ok((alpha * (1.0 - similarity)).clamp(0.0, clamp_max))
}

pub fn modulate(
    alpha: f64,
    a_prev: &EmbeddingVector,
    a_curr: &EmbeddingVector,
    cfg: &SarConfig,
) -> Result<SarRecord> {
    let similarity = cosine(a_prev, a_curr)?;
    let alpha_out = modulated_alpha(alpha, similarity, cfg.clamp_max)?;
    Ok(SarRecord {
        similarity,
        alpha_in: alpha,
        alpha_out,
        mode: cfg.mode,
        prompts_compared: None,
    })
}
