//! Story generation: segments are produced one after another, each conditioned
//! step by step on the weighted prompt embedding and initialized from the
//! previous segment through the blended boundary update.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_step_contract, AttentionMask, Backbone, LatentFrame, SegmentLatents, ToyBackbone};
use crate::config::{ProbeSource, RunConfig};
use crate::dipw::{dipw_step, fixed_step, DipwState, Dominant, WeightSchedule};
use crate::embedding::{similarity01, tokens, EmbeddingProvider, EmbeddingVector, MockProvider, ProviderDescriptor};
use crate::error::{Error, Result};
use crate::sar::{modulate, SarMode};
use crate::script::{PromptPair, StoryScript};
use crate::twb::{blended_init, boundary_update, decay_weights, BlendPlan, TwbMode};

/// Final frame/prompt alignment of one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub segment: usize,
    pub scene: f64,
    pub action: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Per boundary k→k+1: `‖first(k+1) - last(k)‖₂ / n`.
    pub boundary_discontinuity: Vec<f64>,
    /// Per segment: mean over adjacent frame pairs of `‖f(j+1) - f(j)‖₂ / n`.
    pub intra_segment_smoothness: Vec<f64>,
    pub alignment_trace: Vec<AlignmentPoint>,
}

impl RunMetrics {
    pub fn mean_boundary_discontinuity(&self) -> Option<f64> {
        mean(&self.boundary_discontinuity)
    }

    pub fn mean_intra_smoothness(&self) -> Option<f64> {
        mean(&self.intra_segment_smoothness)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn normalized_l2(a: &LatentFrame, b: &LatentFrame) -> f64 {
    a.l2_distance(b) / a.len() as f64
}

pub fn compute_metrics(segments: &[SegmentLatents], alignment_trace: Vec<AlignmentPoint>) -> RunMetrics {
    let boundary_discontinuity = segments
        .windows(2)
        .map(|w| normalized_l2(w[0].last(), w[1].first()))
        .collect();
    let intra_segment_smoothness = segments
        .iter()
        .map(|s| {
            if s.frame_count() < 2 {
                0.0
            } else {
                let total: f64 = s.frames.windows(2).map(|w| normalized_l2(&w[0], &w[1])).sum();
                total / (s.frame_count() - 1) as f64
            }
        })
        .collect();
    RunMetrics {
        boundary_discontinuity,
        intra_segment_smoothness,
        alignment_trace,
    }
}

/// What a segment needs from its predecessor.
#[derive(Clone, Copy, Debug)]
pub struct PrevSegment<'a> {
    pub latents: &'a SegmentLatents,
    pub pair: &'a PromptPair,
    pub action_embedding: &'a EmbeddingVector,
}

#[derive(Clone, Debug)]
pub struct SegmentOutput {
    pub latents: SegmentLatents,
    pub schedule: WeightSchedule,
    pub blend_plan: Option<BlendPlan>,
    /// Frame 0 after the boundary update, before any denoising.
    pub initial_first_frame: LatentFrame,
    pub alignment: AlignmentPoint,
    pub final_state: DipwState,
    pub action_embedding: EmbeddingVector,
}

#[derive(Clone, Debug)]
pub struct StoryRun {
    pub script: StoryScript,
    /// Effective configuration (defaults filled in).
    pub config: RunConfig,
    pub provider: ProviderDescriptor,
    pub backbone: String,
    pub segments: Vec<SegmentLatents>,
    pub schedules: Vec<WeightSchedule>,
    pub blend_plans: Vec<BlendPlan>,
    pub metrics: RunMetrics,
}

/// Result of [`Engine::run_story`]: the (possibly partial) run and the
/// failure that stopped it, if any.
#[derive(Debug)]
pub struct StoryOutcome {
    pub run: StoryRun,
    pub failure: Option<Error>,
}

pub struct Engine {
    config: RunConfig,
    provider: Arc<dyn EmbeddingProvider>,
    backbone: Arc<dyn Backbone>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("provider", &self.provider.descriptor().name)
            .field("backbone", &self.backbone.name())
            .finish()
    }
}

impl Engine {
    pub fn new(config: RunConfig, provider: Arc<dyn EmbeddingProvider>, backbone: Arc<dyn Backbone>) -> Result<Self> {
        config.validate()?;
        if backbone.latent_shape() != config.backbone.latent_shape {
            return Err(Error::config(
                "backbone.latent_shape",
                format!(
                    "backbone `{}` reports {:?}",
                    backbone.name(),
                    <[usize; 3]>::from(backbone.latent_shape())
                ),
            ));
        }
        Ok(Engine {
            config,
            provider,
            backbone,
        })
    }

    /// Mock provider plus toy backbone, both seeded from `config`.
    pub fn toy(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let provider = MockProvider::new(config.embedding.dimension, config.embedding.seed)?;
        let backbone = ToyBackbone::new(config.backbone.clone(), config.embedding.dimension)?;
        Engine::new(config, Arc::new(provider), Arc::new(backbone))
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    fn probe(&self, latents: &SegmentLatents) -> Result<EmbeddingVector> {
        match self.config.orchestrator.probe {
            ProbeSource::First => self.backbone.frame_probe(latents.first()),
            ProbeSource::Mean => self.backbone.frame_probe(&latents.mean_frame()),
        }
    }

    /// Initial latents for `pair`, with the boundary update applied to frame 0
    /// when a predecessor exists. Returns the latents, the blend plan and the
    /// inputs needed to re-apply the update.
    pub fn prepare_segment(
        &self,
        pair: &PromptPair,
        e_scene: &EmbeddingVector,
        e_action: &EmbeddingVector,
        prev: Option<PrevSegment<'_>>,
    ) -> Result<(SegmentLatents, Option<Boundary>)> {
        let cfg = &self.config;
        let mut latents = self.backbone.init_noise(cfg.backbone.frames, pair.index);
        let Some(prev) = prev else {
            return Ok((latents, None));
        };
        if prev.latents.shape() != latents.shape() {
            return Err(Error::config(
                "backbone.latent_shape",
                "previous segment's frame shape differs from this segment's",
            ));
        }

        let weights = decay_weights(prev.latents.frame_count(), cfg.blend.decay_base)?;
        let z_tilde = blended_init(prev.latents, &weights)?;

        let sar = if cfg.sar.enabled {
            let (a_prev, a_curr, ids) = match cfg.sar.mode {
                SarMode::WithinPair => (
                    e_scene,
                    e_action,
                    (format!("scene:{}", pair.index), format!("action:{}", pair.index)),
                ),
                SarMode::CrossSegment => (
                    prev.action_embedding,
                    e_action,
                    (format!("action:{}", prev.pair.index), format!("action:{}", pair.index)),
                ),
            };
            let mut rec = modulate(cfg.blend.gamma, a_prev, a_curr, &cfg.sar)?;
            rec.prompts_compared = Some(ids);
            Some(rec)
        } else {
            None
        };

        let (gamma_effective, twb_mode) = if !cfg.blend.enabled {
            (0.0, TwbMode::Off)
        } else {
            let g = sar.as_ref().map_or(cfg.blend.gamma, |r| r.alpha_out);
            let mode = if cfg.blend.reapply_per_step {
                TwbMode::PerStep
            } else {
                TwbMode::Init
            };
            (g, mode)
        };

        if twb_mode != TwbMode::Off {
            latents.frames[0] = boundary_update(latents.first(), prev.latents.last(), &z_tilde, gamma_effective)?;
        }

        let plan = BlendPlan {
            segment: pair.index,
            frame_count: prev.latents.frame_count(),
            decay_base: cfg.blend.decay_base,
            weights_normalized: weights.normalized,
            gamma: cfg.blend.gamma,
            gamma_effective,
            twb_mode,
            sar,
        };
        Ok((
            latents,
            Some(Boundary {
                plan,
                prev_last: prev.latents.last().clone(),
                z_tilde,
            }),
        ))
    }

    /// Generates one segment. `prev` must be present exactly when
    /// `pair.index > 1`; `carried` overrides the step-1 weighting state.
    pub fn generate_segment(
        &self,
        pair: &PromptPair,
        prev: Option<PrevSegment<'_>>,
        carried: Option<&DipwState>,
    ) -> Result<SegmentOutput> {
        if (pair.index > 1) != prev.is_some() {
            return Err(Error::argument(format!(
                "segment {} {} a predecessor",
                pair.index,
                if prev.is_some() { "must not have" } else { "needs" }
            )));
        }
        let cfg = &self.config;
        let e_scene = self.provider.embed_text(&pair.scene)?;
        let e_action = self.provider.embed_text(&pair.action)?;
        let masks = [
            AttentionMask {
                prompt: Dominant::Scene,
                tokens: tokens(&pair.scene).len(),
            },
            AttentionMask {
                prompt: Dominant::Action,
                tokens: tokens(&pair.action).len(),
            },
        ];

        let (mut latents, boundary) = self.prepare_segment(pair, &e_scene, &e_action, prev)?;
        let initial_first_frame = latents.first().clone();
        let reapply = boundary
            .as_ref()
            .filter(|b| b.plan.twb_mode == TwbMode::PerStep);

        let mut state = match carried {
            Some(s) => s.clone(),
            None => DipwState::initial(&e_scene, &e_action)?,
        };
        let step_fn = if cfg.dipw.enabled { dipw_step } else { fixed_step };
        let mut records = Vec::with_capacity(cfg.dipw.total_steps);
        for step in 1..=cfg.dipw.total_steps {
            let probe = self.probe(&latents)?;
            let (record, combined, next) =
                step_fn(&state, &probe, &e_scene, &e_action, step, &cfg.dipw, cfg.embedding.similarity)?;
            let mask = match record.dominant {
                Dominant::Scene => &masks[0],
                Dominant::Action => &masks[1],
            };
            let stepped = self.backbone.denoise_step(&latents, &combined, mask, step)?;
            check_step_contract(&latents, &stepped)?;
            latents = stepped;
            if let Some(b) = reapply {
                latents.frames[0] =
                    boundary_update(latents.first(), &b.prev_last, &b.z_tilde, b.plan.gamma_effective)?;
            }
            records.push(record);
            state = next;
        }

        let last_probe = self.backbone.frame_probe(latents.last())?;
        let alignment = AlignmentPoint {
            segment: pair.index,
            scene: similarity01(&last_probe, &e_scene)?,
            action: similarity01(&last_probe, &e_action)?,
        };
        Ok(SegmentOutput {
            latents,
            schedule: WeightSchedule {
                segment: pair.index,
                records,
            },
            blend_plan: boundary.map(|b| b.plan),
            initial_first_frame,
            alignment,
            final_state: state,
            action_embedding: e_action,
        })
    }

    /// Generates segments in order, stopping at the first failure. The
    /// returned run holds every segment completed before it.
    pub fn run_story(&self, script: &StoryScript) -> StoryOutcome {
        self.run_story_with(script, |_| Ok(()))
    }

    /// Like [`Engine::run_story`], calling `on_segment` after each completed
    /// segment (e.g. to flush it to disk). An error from the callback stops
    /// the run.
    pub fn run_story_with<F>(&self, script: &StoryScript, mut on_segment: F) -> StoryOutcome
    where
        F: FnMut(&SegmentOutput) -> Result<()>,
    {
        let mut segments: Vec<SegmentLatents> = Vec::with_capacity(script.len());
        let mut schedules = Vec::with_capacity(script.len());
        let mut blend_plans = Vec::new();
        let mut alignment = Vec::with_capacity(script.len());
        let mut failure = None;
        let mut prev_action: Option<EmbeddingVector> = None;
        let mut carried: Option<DipwState> = None;

        for pair in &script.pairs {
            let prev = segments.last().map(|latents| PrevSegment {
                latents,
                pair: &script.pairs[pair.index - 2],
                action_embedding: prev_action.as_ref().expect("set with every segment"),
            });
            let carry = if self.config.orchestrator.carry_prev_combined {
                carried.as_ref()
            } else {
                None
            };
            let out = match self
                .generate_segment(pair, prev, carry)
                .and_then(|out| on_segment(&out).map(|_| out))
            {
                Ok(out) => out,
                Err(e) => {
                    log::error!("segment {} failed: {e}", pair.index);
                    failure = Some(Error::Segment {
                        index: pair.index,
                        source: Box::new(e),
                    });
                    break;
                }
            };
            log::info!(
                "segment {} done: alpha_action(final)={:.6}",
                pair.index,
                out.schedule.records.last().map_or(f64::NAN, |r| r.alpha_action)
            );
            segments.push(out.latents);
            schedules.push(out.schedule);
            if let Some(p) = out.blend_plan {
                blend_plans.push(p);
            }
            alignment.push(out.alignment);
            prev_action = Some(out.action_embedding);
            carried = Some(out.final_state);
        }

        let metrics = compute_metrics(&segments, alignment);
        StoryOutcome {
            run: StoryRun {
                script: script.clone(),
                config: self.config.effective(),
                provider: self.provider.descriptor().clone(),
                backbone: self.backbone.name().to_string(),
                segments,
                schedules,
                blend_plans,
                metrics,
            },
            failure,
        }
    }

    pub fn generate_story(&self, script: &StoryScript) -> Result<StoryRun> {
        let outcome = self.run_story(script);
        match outcome.failure {
            Some(e) => Err(e),
            None => Ok(outcome.run),
        }
    }
}

/// Boundary data kept for per-step re-application.
#[derive(Clone, Debug)]
pub struct Boundary {
    pub plan: BlendPlan,
    pub prev_last: LatentFrame,
    pub z_tilde: LatentFrame,
}

/// Runs independent toy-backbone stories in parallel. Output order matches
/// `jobs`.
pub fn generate_stories(jobs: &[(StoryScript, RunConfig)]) -> Vec<Result<StoryRun>> {
    jobs.par_iter()
        .map(|(script, cfg)| Engine::toy(cfg.clone())?.generate_story(script))
        .collect()
}
