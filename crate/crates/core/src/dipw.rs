//! Dynamic per-step weighting of the scene and action prompt embeddings.
//!
//! At denoising step `i` of `S`, each prompt gets a score
//!
//! ```text
//! s = λ1·sim + λ2·prev_sim + λ3·prior
//! ```
//!
//! where `sim` compares the current frame probe with the prompt, `prev_sim`
//! compares the prompt with the previously used combined embedding and
//! `prior` is the narrative schedule `(1 - i/S, i/S)`. A temperature softmax
//! over the two scores yields the mixing weights, and the conditioning
//! embedding is their weighted sum.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, EmbeddingVector, SimilarityMap, ZERO_NORM};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DipwConfig {
    /// When false, every step uses fixed weights (0.5, 0.5).
    pub enabled: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub total_steps: usize,
}

impl Default for DipwConfig {
    fn default() -> Self {
        DipwConfig {
            enabled: true,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 0.5,
            total_steps: 64,
        }
    }
}

impl DipwConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("dipw.lambda1", self.lambda1),
            ("dipw.lambda2", self.lambda2),
            ("dipw.lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 && self.lambda3 == 0.0 {
            return Err(Error::config("dipw.lambda1", "at least one lambda must be > 0"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config("dipw.tau", format!("must be > 0, got {}", self.tau)));
        }
        if self.total_steps == 0 {
            return Err(Error::config("dipw.total_steps", "must be >= 1"));
        }
        Ok(())
    }
}

/// Which prompt carries the larger weight. Ties go to the scene prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dominant {
    Scene,
    Action,
}

impl Dominant {
    pub fn of(alpha_scene: f64, alpha_action: f64) -> Self {
        if alpha_scene >= alpha_action {
            Dominant::Scene
        } else {
            Dominant::Action
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dominant::Scene => "scene",
            Dominant::Action => "action",
        }
    }
}

impl fmt::Display for Dominant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DipwStepRecord {
    pub step: usize,
    pub sim_scene: f64,
    pub sim_action: f64,
    pub prev_sim_scene: f64,
    pub prev_sim_action: f64,
    pub prior_scene: f64,
    pub prior_action: f64,
    pub s_scene: f64,
    pub s_action: f64,
    /// Max-shifted, temperature-scaled scores fed to the softmax.
    pub s_tilde_scene: f64,
    pub s_tilde_action: f64,
    pub alpha_scene: f64,
    pub alpha_action: f64,
    pub dominant: Dominant,
}

/// Per-segment sequence of step records.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSchedule {
    pub segment: usize,
    pub records: Vec<DipwStepRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DipwState {
    pub previous_combined: EmbeddingVector,
}

impl DipwState {
    /// Step-1 state: the normalized midpoint of the two prompt embeddings
    /// (the scene embedding if they cancel).
    pub fn initial(e_scene: &EmbeddingVector, e_action: &EmbeddingVector) -> Result<Self> {
        if e_scene.dim() != e_action.dim() {
            return Err(Error::argument("embedding dimension mismatch"));
        }
        let sum: Vec<f64> = e_scene
            .values()
            .iter()
            .zip(e_action.values())
            .map(|(a, b)| a + b)
            .collect();
        let previous_combined =
            EmbeddingVector::normalized(sum).or_else(|_| Ok::<_, Error>(e_scene.clone()))?;
        Ok(DipwState { previous_combined })
    }
}

/// Narrative priors `(1 - i/S, i/S)` for step `i` in `1..=S`.
pub fn narrative_prior(step: usize, total_steps: usize) -> Result<(f64, f64)> {
    if total_steps == 0 || step == 0 || step > total_steps {
        return Err(Error::argument(format!(
            "step {step} outside 1..={total_steps}"
        )));
    }
    let action = step as f64 / total_steps as f64;
    Ok((1.0 - action, action))
}

pub fn score(sim: f64, prev_sim: f64, prior: f64, cfg: &DipwConfig) -> Result<f64> {
    if !(sim.is_finite() && prev_sim.is_finite() && prior.is_finite()) {
        return Err(Error::argument("score components must be finite"));
    }
    Ok(cfg.lambda1 * sim + cfg.lambda2 * prev_sim + cfg.lambda3 * prior)
}

fn shifted(s_scene: f64, s_action: f64, tau: f64) -> Result<(f64, f64)> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::argument(format!("temperature must be > 0, got {tau}")));
    }
    if !(s_scene.is_finite() && s_action.is_finite()) {
        return Err(Error::argument("scores must be finite"));
    }
    let m = s_scene.max(s_action);
    Ok(((s_scene - m) / tau, (s_action - m) / tau))
}

/// Two-way temperature softmax with max subtraction. Returns
/// `(alpha_scene, alpha_action)`; `alpha_action = 1 - alpha_scene`.
pub fn weights(s_scene: f64, s_action: f64, tau: f64) -> Result<(f64, f64)> {
    let (ts, ta) = shifted(s_scene, s_action, tau)?;
    let (es, ea) = (ts.exp(), ta.exp());
    let alpha_scene = es / (es + ea);
    Ok((alpha_scene, 1.0 - alpha_scene))
}

/// Weighted sum of the two prompt embeddings, renormalized to unit length.
/// If the sum vanishes (antipodal prompts at equal weight) the dominant
/// prompt's embedding is returned.
pub fn combine(
    e_scene: &EmbeddingVector,
    e_action: &EmbeddingVector,
    alpha_scene: f64,
    alpha_action: f64,
) -> Result<(EmbeddingVector, Dominant)> {
    if e_scene.dim() != e_action.dim() {
        return Err(Error::argument(format!(
            "embedding dimension mismatch: {} vs {}",
            e_scene.dim(),
            e_action.dim()
        )));
    }
    if !((alpha_scene + alpha_action - 1.0).abs() <= 1e-9)
        || alpha_scene < 0.0
        || alpha_action < 0.0
    {
        return Err(Error::argument(format!(
            "weights ({alpha_scene}, {alpha_action}) are not a convex pair"
        )));
    }
    let dominant = Dominant::of(alpha_scene, alpha_action);
    let sum: Vec<f64> = e_scene
        .values()
        .iter()
        .zip(e_action.values())
        .map(|(s, a)| alpha_scene * s + alpha_action * a)
        .collect();
    if crate::embedding::l2_norm(&sum) < ZERO_NORM {
        let fallback = match dominant {
            Dominant::Scene => e_scene.clone(),
            Dominant::Action => e_action.clone(),
        };
        return Ok((fallback, dominant));
    }
    Ok((EmbeddingVector::normalized(sum)?, dominant))
}

/// One weighting step. `frame_probe` is the embedding of the current frame.
pub fn dipw_step(
    state: &DipwState,
    frame_probe: &EmbeddingVector,
    e_scene: &EmbeddingVector,
    e_action: &EmbeddingVector,
    step: usize,
    cfg: &DipwConfig,
    map: SimilarityMap,
) -> Result<(DipwStepRecord, EmbeddingVector, DipwState)> {
    step_inner(state, frame_probe, e_scene, e_action, step, cfg, map, None)
}

/// Ablation step: all score components are recorded but the weights are
/// pinned to (0.5, 0.5).
pub fn fixed_step(
    state: &DipwState,
    frame_probe: &EmbeddingVector,
    e_scene: &EmbeddingVector,
    e_action: &EmbeddingVector,
    step: usize,
    cfg: &DipwConfig,
    map: SimilarityMap,
) -> Result<(DipwStepRecord, EmbeddingVector, DipwState)> {
    step_inner(state, frame_probe, e_scene, e_action, step, cfg, map, Some((0.5, 0.5)))
}

#[allow(clippy::too_many_arguments)]
fn step_inner(
    state: &DipwState,
    frame_probe: &EmbeddingVector,
    e_scene: &EmbeddingVector,
    e_action: &EmbeddingVector,
    step: usize,
    cfg: &DipwConfig,
    map: SimilarityMap,
    pinned: Option<(f64, f64)>,
) -> Result<(DipwStepRecord, EmbeddingVector, DipwState)> {
    let (prior_scene, prior_action) = narrative_prior(step, cfg.total_steps)?;
    let sim_scene = map.apply(frame_probe, e_scene)?;
    let sim_action = map.apply(frame_probe, e_action)?;
    let prev_sim_scene = cosine(e_scene, &state.previous_combined)?;
    let prev_sim_action = cosine(e_action, &state.previous_combined)?;
    let s_scene = score(sim_scene, prev_sim_scene, prior_scene, cfg)?;
    let s_action = score(sim_action, prev_sim_action, prior_action, cfg)?;
    let (s_tilde_scene, s_tilde_action) = shifted(s_scene, s_action, cfg.tau)?;
    let (alpha_scene, alpha_action) = match pinned {
        Some(w) => w,
        None => weights(s_scene, s_action, cfg.tau)?,
    };
    let (combined, dominant) = combine(e_scene, e_action, alpha_scene, alpha_action)?;
    let record = DipwStepRecord {
        step,
        sim_scene,
        sim_action,
        prev_sim_scene,
        prev_sim_action,
        prior_scene,
        prior_action,
        s_scene,
        s_action,
        s_tilde_scene,
        s_tilde_action,
        alpha_scene,
        alpha_action,
        dominant,
    };
    let next = DipwState {
        previous_combined: combined.clone(),
    };
    Ok((record, combined, next))
}

pub const WEIGHTS_CSV_HEADER: &str = "segment,step,sim_scene,sim_action,prev_sim_scene,prev_sim_action,prior_scene,prior_action,s_scene,s_action,alpha_scene,alpha_action,dominant";

/// Writes schedules as CSV, one row per step record.
pub fn write_weights_csv<W: Write>(mut out: W, schedules: &[WeightSchedule]) -> std::io::Result<()> {
    writeln!(out, "{WEIGHTS_CSV_HEADER}")?;
    for sched in schedules {
        for r in &sched.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                sched.segment,
                r.step,
                r.sim_scene,
                r.sim_action,
                r.prev_sim_scene,
                r.prev_sim_action,
                r.prior_scene,
                r.prior_action,
                r.s_scene,
                r.s_action,
                r.alpha_scene,
                r.alpha_action,
                r.dominant
            )?;
        }
    }
    Ok(())
}
