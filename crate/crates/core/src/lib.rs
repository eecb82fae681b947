//! Multi-segment latent story generation.
//!
//! A story is a list of (scene, action) prompt pairs. Each pair becomes one
//! segment of latent frames, denoised under a per-step mix of the two prompt
//! embeddings ([`dipw`]). Consecutive segments are stitched by blending the
//! previous segment into the next one's first frame ([`twb`]), with the blend
//! strength scaled down for similar actions ([`sar`]).

pub mod backbone;
pub mod bridge;
pub mod cli;
pub mod config;
pub mod dipw;
pub mod embedding;
pub mod error;
pub mod orchestrator;
pub mod rundir;
pub mod sar;
pub mod script;
pub mod twb;

pub use backbone::{Backbone, LatentFrame, LatentShape, SegmentLatents, ToyBackbone};
pub use config::RunConfig;
pub use embedding::{EmbeddingProvider, EmbeddingVector, MockProvider};
pub use error::{Error, Result};
pub use orchestrator::{Engine, RunMetrics, StoryRun};
pub use script::{parse_script, PromptPair, StoryScript};
