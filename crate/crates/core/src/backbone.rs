//! Latent tensors, the denoising-backbone contract and the built-in toy
//! backbone.
//!
//! The toy backbone is a contracting stochastic process: every frame moves a
//! fixed fraction of the way towards `target(E)`, a seeded linear image of the
//! conditioning embedding, and then receives scheduled Gaussian noise. Frames
//! are independent of each other, so any temporal coupling comes from the
//! boundary blending and prompt weighting layered on top.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dipw::Dominant;
use crate::embedding::{EmbeddingVector, ZERO_NORM};
use crate::error::{Error, Result};

/// Guidance scale at which the toy update reaches its full contraction rate.
pub const GUIDANCE_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 3]", from = "[usize; 3]")]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        LatentShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl From<LatentShape> for [usize; 3] {
    fn from(s: LatentShape) -> Self {
        [s.channels, s.height, s.width]
    }
}

impl From<[usize; 3]> for LatentShape {
    fn from([c, h, w]: [usize; 3]) -> Self {
        LatentShape::new(c, h, w)
    }
}

/// One latent frame, row-major `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrame {
    shape: LatentShape,
    values: Vec<f64>,
}

impl LatentFrame {
    pub fn new(shape: LatentShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::argument(format!(
                "frame has {} values, shape {:?} needs {}",
                values.len(),
                <[usize; 3]>::from(shape),
                shape.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("frame has non-finite components"));
        }
        Ok(LatentFrame { shape, values })
    }

    pub fn filled(shape: LatentShape, value: f64) -> Self {
        LatentFrame {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, c: f64) -> LatentFrame {
        LatentFrame {
            shape: self.shape,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn l2_distance(&self, other: &LatentFrame) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentLatents {
    /// 1-based segment ordinal.
    pub segment_index: usize,
    pub frames: Vec<LatentFrame>,
}

impl SegmentLatents {
    pub fn new(segment_index: usize, frames: Vec<LatentFrame>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::argument("segment needs at least one frame"));
        };
        let shape = first.shape();
        if frames.iter().any(|f| f.shape() != shape) {
            return Err(Error::argument("segment frames differ in shape"));
        }
        Ok(SegmentLatents {
            segment_index,
            frames,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn shape(&self) -> LatentShape {
        self.frames[0].shape()
    }

    pub fn first(&self) -> &LatentFrame {
        &self.frames[0]
    }

    pub fn last(&self) -> &LatentFrame {
        self.frames.last().expect("segments are nonempty")
    }

    /// Componentwise mean over all frames.
    pub fn mean_frame(&self) -> LatentFrame {
        let n = self.frames.len() as f64;
        let mut acc = vec![0.0; self.shape().len()];
        for f in &self.frames {
            for (a, v) in acc.iter_mut().zip(f.values()) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
        LatentFrame {
            shape: self.shape(),
            values: acc,
        }
    }

    /// Little-endian f32, frames in order, each frame row-major.
    pub fn to_f32le(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.frames.len() * self.shape().len() * 4);
        for f in &self.frames {
            for v in f.values() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }
}

/// Attention-mask descriptor of a prompt: which prompt and how many tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMask {
    pub prompt: Dominant,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Per-step noise level; empty means the default linear ramp.
    pub noise_schedule: Vec<f64>,
    pub contraction_rate: f64,
    pub seed: u64,
    pub latent_shape: LatentShape,
    pub frames: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            steps: 64,
            guidance_scale: 4.5,
            noise_schedule: Vec::new(),
            contraction_rate: 0.15,
            seed: 0,
            latent_shape: LatentShape::new(4, 8, 8),
            frames: 8,
        }
    }
}

/// Starting noise level of the default schedule.
pub const DEFAULT_SIGMA_MAX: f64 = 0.2;

/// `sigma_i = sigma_max * (S - i + 1) / S` for `i` in `1..=S`.
pub fn default_noise_schedule(steps: usize) -> Vec<f64> {
    (1..=steps)
        .map(|i| DEFAULT_SIGMA_MAX * (steps - i + 1) as f64 / steps as f64)
        .collect()
}

impl BackboneConfig {
    /// Effective guidance gain `min(scale, GUIDANCE_MAX) / GUIDANCE_MAX`.
    pub fn guidance_gain(&self) -> f64 {
        self.guidance_scale.min(GUIDANCE_MAX) / GUIDANCE_MAX
    }

    pub fn schedule(&self) -> Vec<f64> {
        if self.noise_schedule.is_empty() {
            default_noise_schedule(self.steps)
        } else {
            self.noise_schedule.clone()
        }
    }

    /// Fills in the default noise schedule.
    pub fn effective(mut self) -> Self {
        self.noise_schedule = self.schedule();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("backbone.steps", "must be >= 1"));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::config("backbone.guidance_scale", "must be finite and >= 0"));
        }
        if !(self.contraction_rate > 0.0 && self.contraction_rate <= 1.0) {
            return Err(Error::config("backbone.contraction_rate", "must be in (0, 1]"));
        }
        let sched = self.schedule();
        if sched.len() != self.steps {
            return Err(Error::config(
                "backbone.noise_schedule",
                format!("has {} entries, expected {}", sched.len(), self.steps),
            ));
        }
        if sched.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("backbone.noise_schedule", "entries must be finite and >= 0"));
        }
        if sched.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("backbone.noise_schedule", "must be nonincreasing"));
        }
        if self.latent_shape.is_empty() {
            return Err(Error::config("backbone.latent_shape", "dimensions must be >= 1"));
        }
        if self.frames == 0 {
            return Err(Error::config("backbone.frames", "must be >= 1"));
        }
        Ok(())
    }
}

/// The denoiser contract. Implementations must preserve frame shape and
/// frame count across [`Backbone::denoise_step`].
pub trait Backbone: Send + Sync {
    fn name(&self) -> &str;

    fn latent_shape(&self) -> LatentShape;

    /// Seeded starting latents for a segment.
    fn init_noise(&self, frames: usize, segment_index: usize) -> SegmentLatents;

    fn denoise_step(
        &self,
        latents: &SegmentLatents,
        conditioning: &EmbeddingVector,
        mask: &AttentionMask,
        step: usize,
    ) -> Result<SegmentLatents>;

    /// Projects a frame into the text embedding space.
    fn frame_probe(&self, frame: &LatentFrame) -> Result<EmbeddingVector>;
}

/// Checks the shape/count contract between a step's input and output.
pub fn check_step_contract(before: &SegmentLatents, after: &SegmentLatents) -> Result<()> {
    if before.frame_count() != after.frame_count() {
        return Err(Error::Contract(format!(
            "frame count changed from {} to {}",
            before.frame_count(),
            after.frame_count()
        )));
    }
    if after.frames.iter().any(|f| f.shape() != before.shape()) {
        return Err(Error::Contract("frame shape changed".into()));
    }
    Ok(())
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-segment seed: `seed XOR splitmix64(segment_index)`.
pub fn segment_seed(seed: u64, segment_index: usize) -> u64 {
    seed ^ splitmix64(segment_index as u64)
}

const STREAM_INIT: u64 = 0;
const WORLD_SALT: u64 = 0x746f_795f_776f_726c;

/// Standard-normal latents, deterministic per `(seed, segment_index)`.
pub fn init_noise(shape: LatentShape, frames: usize, seed: u64, segment_index: usize) -> SegmentLatents {
    let mut rng = ChaCha8Rng::seed_from_u64(segment_seed(seed, segment_index));
    rng.set_stream(STREAM_INIT);
    let frames = (0..frames.max(1))
        .map(|_| LatentFrame {
            shape,
            values: (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect(),
        })
        .collect();
    SegmentLatents {
        segment_index,
        frames,
    }
}

/// The built-in deterministic backbone.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    config: BackboneConfig,
    schedule: Vec<f64>,
    dim: usize,
    /// `latent_len x dim`, row-major: `target(E) = W · E`.
    target_map: Vec<f64>,
    /// `dim x spatial`, row-major: the transpose of channel-pooled `W`.
    probe_map: Vec<f64>,
}

impl ToyBackbone {
    pub const NAME: &'static str = "toy";

    pub fn new(config: BackboneConfig, embedding_dim: usize) -> Result<Self> {
        config.validate()?;
        if embedding_dim < 2 {
            return Err(Error::argument("embedding dimension must be at least 2"));
        }
        let shape = config.latent_shape;
        let n = shape.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ WORLD_SALT);
        let target_map: Vec<f64> = (0..n * embedding_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();

        // Pool W over channels, then transpose so the probe of target(E) is
        // (QW)^T (QW) E, a positive-definite image of E.
        let spatial = shape.spatial();
        let mut pooled = vec![0.0; spatial * embedding_dim];
        for c in 0..shape.channels {
            for p in 0..spatial {
                let row = c * spatial + p;
                for j in 0..embedding_dim {
                    pooled[p * embedding_dim + j] +=
                        target_map[row * embedding_dim + j] / shape.channels as f64;
                }
            }
        }
        let mut probe_map = vec![0.0; embedding_dim * spatial];
        for p in 0..spatial {
            for j in 0..embedding_dim {
                probe_map[j * spatial + p] = pooled[p * embedding_dim + j];
            }
        }
        Ok(ToyBackbone {
            schedule: config.schedule(),
            config,
            dim: embedding_dim,
            target_map,
            probe_map,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    /// Per-step contraction factor `rate * g_eff`.
    pub fn step_gain(&self) -> f64 {
        self.config.contraction_rate * self.config.guidance_gain()
    }

    pub fn target(&self, e: &EmbeddingVector) -> Result<LatentFrame> {
        if e.dim() != self.dim {
            return Err(Error::argument(format!(
                "conditioning has dimension {}, backbone expects {}",
                e.dim(),
                self.dim
            )));
        }
        let values = self
            .target_map
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(e.values()).map(|(w, x)| w * x).sum())
            .collect();
        Ok(LatentFrame {
            shape: self.config.latent_shape,
            values,
        })
    }

    fn noise_rng(&self, segment_index: usize, frame: usize, step: usize) -> ChaCha8Rng {
        let mut rng =
            ChaCha8Rng::seed_from_u64(segment_seed(self.config.seed, segment_index) ^ splitmix64(!(frame as u64)));
        rng.set_stream(step as u64);
        rng
    }
}

impl Backbone for ToyBackbone {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn latent_shape(&self) -> LatentShape {
        self.config.latent_shape
    }

    fn init_noise(&self, frames: usize, segment_index: usize) -> SegmentLatents {
        init_noise(self.config.latent_shape, frames, self.config.seed, segment_index)
    }

    fn denoise_step(
        &self,
        latents: &SegmentLatents,
        conditioning: &EmbeddingVector,
        _mask: &AttentionMask,
        step: usize,
    ) -> Result<SegmentLatents> {
        if step == 0 || step > self.config.steps {
            return Err(Error::argument(format!(
                "step {step} outside 1..={}",
                self.config.steps
            )));
        }
        if latents.shape() != self.config.latent_shape {
            return Err(Error::argument("latent shape does not match the backbone"));
        }
        let target = self.target(conditioning)?;
        let k = self.step_gain();
        let sigma = self.schedule[step - 1];
        let frames = latents
            .frames
            .iter()
            .enumerate()
            .map(|(fi, f)| {
                let mut rng = self.noise_rng(latents.segment_index, fi, step);
                let values = f
                    .values()
                    .iter()
                    .zip(target.values())
                    .map(|(z, t)| {
                        let xi: f64 = StandardNormal.sample(&mut rng);
                        z + k * (t - z) + sigma * xi
                    })
                    .collect();
                LatentFrame {
                    shape: f.shape(),
                    values,
                }
            })
            .collect();
        Ok(SegmentLatents {
            segment_index: latents.segment_index,
            frames,
        })
    }

    /// `normalize(M · pool(frame))` where `pool` averages over channels. A
    /// frame whose pooled image vanishes probes to `e_1`.
    fn frame_probe(&self, frame: &LatentFrame) -> Result<EmbeddingVector> {
        let shape = self.config.latent_shape;
        if frame.shape() != shape {
            return Err(Error::argument("frame shape does not match the backbone"));
        }
        let spatial = shape.spatial();
        let mut pooled = vec![0.0; spatial];
        for c in 0..shape.channels {
            for (p, acc) in pooled.iter_mut().enumerate() {
                *acc += frame.values()[c * spatial + p] / shape.channels as f64;
            }
        }
        let projected: Vec<f64> = self
            .probe_map
            .chunks_exact(spatial)
            .map(|row| row.iter().zip(&pooled).map(|(m, x)| m * x).sum())
            .collect();
        if crate::embedding::l2_norm(&projected) < ZERO_NORM {
            return Ok(EmbeddingVector::basis(self.dim, 0));
        }
        EmbeddingVector::normalized(projected)
    }
}
