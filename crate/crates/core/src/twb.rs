//! Time-weighted blending of segment boundaries.
//!
//! The first frame of a new segment is pulled towards the previous segment:
//!
//! ```text
//! z~   = Σ_i w~_i · z_prev,i          w_i = base^(F - i - 1),  w~ = w / Σ w
//! z_0 <- γ·z_prev,last + γ·z~ + (1 - 2γ)·z_0
//! ```

use serde::{Deserialize, Serialize};

use crate::backbone::{LatentFrame, SegmentLatents};
use crate::error::{Error, Result};
use crate::sar::SarRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendConfig {
    /// When false the boundary update is skipped (effective γ = 0).
    pub enabled: bool,
    pub gamma: f64,
    pub decay_base: f64,
    /// Re-apply the boundary update to frame 0 after every denoising step.
    pub reapply_per_step: bool,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            enabled: true,
            gamma: 0.25,
            decay_base: 0.9,
            reapply_per_step: false,
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.gamma) {
            return Err(Error::config("blend.gamma", format!("must be in [0, 0.5], got {}", self.gamma)));
        }
        if !(self.decay_base > 0.0 && self.decay_base < 1.0) {
            return Err(Error::config(
                "blend.decay_base",
                format!("must be in (0, 1), got {}", self.decay_base),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl DecayWeights {
    pub fn frame_count(&self) -> usize {
        self.raw.len()
    }
}

/// Geometric decay weights over `frame_count` frames, newest frame heaviest.
pub fn decay_weights(frame_count: usize, base: f64) -> Result<DecayWeights> {
    if frame_count == 0 {
        return Err(Error::argument("decay weights need at least one frame"));
    }
    if !(base > 0.0 && base < 1.0) {
        return Err(Error::argument(format!("decay base must be in (0, 1), got {base}")));
    }
    let raw: Vec<f64> = (0..frame_count)
        .map(|i| base.powi((frame_count - i - 1) as i32))
        .collect();
    let total: f64 = raw.iter().sum();
    let normalized = raw.iter().map(|w| w / total).collect();
    Ok(DecayWeights { raw, normalized })
}

// Rounding can push a convex combination an ulp outside its inputs' range.
fn clamp_to_hull(v: f64, inputs: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = inputs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    v.clamp(lo, hi)
}

/// Decay-weighted average of the previous segment's frames.
pub fn blended_init(prev: &SegmentLatents, weights: &DecayWeights) -> Result<LatentFrame> {
    if weights.frame_count() != prev.frame_count() {
        return Err(Error::argument(format!(
            "{} weights for {} frames",
            weights.frame_count(),
            prev.frame_count()
        )));
    }
    let shape = prev.shape();
    if prev.frames.iter().any(|f| f.shape() != shape) {
        return Err(Error::argument("previous segment frames differ in shape"));
    }
    let values = (0..shape.len())
        .map(|k| {
            let column = || prev.frames.iter().map(move |f| f.values()[k]);
            let v = column()
                .zip(&weights.normalized)
                .map(|(z, w)| w * z)
                .sum::<f64>();
            clamp_to_hull(v, column())
        })
        .collect();
    LatentFrame::new(shape, values)
}

/// `γ·prev_last + γ·z_tilde + (1 - 2γ)·first`, computed as
/// `first + γ(prev_last - first) + γ(z_tilde - first)` so that γ = 0 returns
/// `first` bit-exactly.
pub fn boundary_update(
    first: &LatentFrame,
    prev_last: &LatentFrame,
    z_tilde: &LatentFrame,
    gamma: f64,
) -> Result<LatentFrame> {
    if !(0.0..=0.5).contains(&gamma) {
        return Err(Error::argument(format!("gamma must be in [0, 0.5], got {gamma}")));
    }
    if first.shape() != prev_last.shape() || first.shape() != z_tilde.shape() {
        return Err(Error::argument("boundary frames differ in shape"));
    }
    let values = first
        .values()
        .iter()
        .zip(prev_last.values())
        .zip(z_tilde.values())
        .map(|((&c, &a), &b)| {
            let v = c + gamma * (a - c) + gamma * (b - c);
            clamp_to_hull(v, [a, b, c].into_iter())
        })
        .collect();
    LatentFrame::new(first.shape(), values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwbMode {
    /// Boundary update applied once before the first denoising step.
    Init,
    /// Boundary update re-applied after every denoising step.
    PerStep,
    /// Blending disabled.
    Off,
}

/// Everything decided at one segment boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendPlan {
    /// Index of the segment whose first frame is updated.
    pub segment: usize,
    /// Frame count of the preceding segment.
    #[serde(rename = "F")]
    pub frame_count: usize,
    pub decay_base: f64,
    pub weights_normalized: Vec<f64>,
    /// Configured γ before modulation.
    pub gamma: f64,
    pub gamma_effective: f64,
    pub twb_mode: TwbMode,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub sar: Option<SarRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::LatentShape;

    const SHAPE: LatentShape = LatentShape::new(2, 2, 2);

    fn frame(v: f64) -> LatentFrame {
        LatentFrame::filled(SHAPE, v)
    }

    #[test]
    fn single_frame_weight() {
        let w = decay_weights(1, 0.9).unwrap();
        assert_eq!(w.normalized, vec![1.0]);
    }

    #[test]
    fn four_frame_weights() {
        let w = decay_weights(4, 0.9).unwrap();
        let raw = [0.729, 0.81, 0.9, 1.0];
        for (a, b) in w.raw.iter().zip(raw) {
            assert!((a - b).abs() < 1e-12);
        }
        // 0.9^k / 3.439
        let expected = [0.211980, 0.235534, 0.261704, 0.290782];
        for (a, b) in w.normalized.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn half_base_weights() {
        let w = decay_weights(3, 0.5).unwrap();
        for (a, b) in w.normalized.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_weight_errors() {
        assert!(decay_weights(0, 0.9).is_err());
        assert!(decay_weights(3, 1.0).is_err());
        assert!(decay_weights(3, 0.0).is_err());
    }

    #[test]
    fn large_frame_count_still_normalizes() {
        let w = decay_weights(10_000, 0.9).unwrap();
        assert!((w.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(*w.normalized.last().unwrap(), w.normalized.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn blended_init_examples() {
        let same = SegmentLatents::new(1, vec![frame(0.7); 5]).unwrap();
        let w = decay_weights(5, 0.9).unwrap();
        assert_eq!(blended_init(&same, &w).unwrap(), frame(0.7));

        let zeros = SegmentLatents::new(1, vec![frame(0.0); 3]).unwrap();
        assert_eq!(blended_init(&zeros, &decay_weights(3, 0.9).unwrap()).unwrap(), frame(0.0));

        let ramp = SegmentLatents::new(1, (0..4).map(|i| frame(i as f64)).collect()).unwrap();
        let z = blended_init(&ramp, &decay_weights(4, 0.9).unwrap()).unwrap();
        // (0·0.729 + 1·0.81 + 2·0.9 + 3·1.0) / 3.439
        let expected: f64 = 5.61 / 3.439;
        assert!((expected - 1.63128).abs() < 1e-5);
        assert!(z.values().iter().all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn blended_init_rejects_mismatch() {
        let seg = SegmentLatents::new(1, vec![frame(1.0); 3]).unwrap();
        assert!(blended_init(&seg, &decay_weights(4, 0.9).unwrap()).is_err());
    }

    #[test]
    fn boundary_update_examples() {
        let first = frame(0.0);
        let last = frame(1.0);
        let tilde = frame(0.5);
        assert_eq!(boundary_update(&first, &last, &tilde, 0.0).unwrap(), first);
        let half = boundary_update(&first, &last, &tilde, 0.5).unwrap();
        assert!(half.values().iter().all(|v| (v - 0.75).abs() < 1e-15));
        let quarter = boundary_update(&first, &last, &tilde, 0.25).unwrap();
        assert!(quarter.values().iter().all(|v| (v - 0.375).abs() < 1e-15));
    }

    #[test]
    fn boundary_update_errors() {
        let f = frame(0.0);
        assert!(boundary_update(&f, &f, &f, 0.51).is_err());
        assert!(boundary_update(&f, &f, &f, -0.1).is_err());
        let other = LatentFrame::filled(LatentShape::new(1, 2, 2), 0.0);
        assert!(boundary_update(&f, &other, &f, 0.2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BlendConfig::default().validate().is_ok());
        let g = BlendConfig {
            gamma: 0.6,
            ..BlendConfig::default()
        };
        assert!(matches!(g.validate(), Err(Error::Config { key, .. }) if key == "blend.gamma"));
        let b = BlendConfig {
            decay_base: 1.0,
            ..BlendConfig::default()
        };
        assert!(b.validate().is_err());
    }
}
