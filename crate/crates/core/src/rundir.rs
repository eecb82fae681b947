//! On-disk run layout:
//!
//! ```text
//! run.json             effective config, seed, script hash, status
//! weights.csv          one row per weighting step
//! blend_plans.json     one object per segment boundary
//! metrics.json         continuity and alignment metrics
//! segment_<k>.f32le    latents, little-endian f32, row-major
//! segment_<k>.json     sidecar {segment, F, shape, seed, dtype}
//! ```
//!
//! Every file is a pure function of the inputs, so two runs with the same
//! script, config and seed produce byte-identical directories.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backbone::{LatentFrame, LatentShape, SegmentLatents};
use crate::dipw::write_weights_csv;
use crate::error::{Error, Result};
use crate::orchestrator::StoryRun;
use crate::script::StoryScript;

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSidecar {
    pub segment: usize,
    #[serde(rename = "F")]
    pub frame_count: usize,
    pub shape: LatentShape,
    pub seed: u64,
    pub dtype: String,
}

/// Hex SHA-256 of the script's canonical JSON.
pub fn script_hash(script: &StoryScript) -> String {
    let digest = Sha256::digest(script.to_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Writes a run directory incrementally: segments as they finish, the
/// aggregate files at the end.
#[derive(Debug)]
pub struct RunDirWriter {
    dir: PathBuf,
}

impl RunDirWriter {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(RunDirWriter { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_segment(&self, latents: &SegmentLatents, seed: u64) -> Result<()> {
        let k = latents.segment_index;
        write_file(&self.dir.join(format!("segment_{k}.f32le")), &latents.to_f32le())?;
        let sidecar = LatentSidecar {
            segment: k,
            frame_count: latents.frame_count(),
            shape: latents.shape(),
            seed,
            dtype: DTYPE_F32LE.into(),
        };
        write_file(&self.dir.join(format!("segment_{k}.json")), &pretty(&sidecar))
    }

    /// Writes `run.json`, `weights.csv`, `blend_plans.json` and
    /// `metrics.json`. `failure` records the failing segment of a partial run.
    pub fn finish(&self, run: &StoryRun, failure: Option<(usize, &Error)>) -> Result<()> {
        let status = match failure {
            None => json!("complete"),
            Some((segment, err)) => json!({ "failed_segment": segment, "error": err.to_string() }),
        };
        let manifest = json!({
            "story_id": run.script.story_id,
            "script_sha256": script_hash(&run.script),
            "seed": run.config.backbone.seed,
            "backbone": run.backbone,
            "provider": run.provider,
            "segments_requested": run.script.len(),
            "segments_completed": run.segments.len(),
            "status": status,
            "config": run.config,
        });
        write_file(&self.dir.join("run.json"), &pretty(&manifest))?;

        let path = self.dir.join("weights.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_weights_csv(BufWriter::new(file), &run.schedules).map_err(|e| Error::io(&path, e))?;

        write_file(&self.dir.join("blend_plans.json"), &pretty(&run.blend_plans))?;
        write_file(&self.dir.join("metrics.json"), &pretty(&run.metrics))
    }
}

/// Writes a complete run in one go.
pub fn write_run_dir(dir: impl Into<PathBuf>, run: &StoryRun) -> Result<RunDirWriter> {
    let writer = RunDirWriter::create(dir)?;
    for seg in &run.segments {
        writer.write_segment(seg, run.config.backbone.seed)?;
    }
    writer.finish(run, None)?;
    Ok(writer)
}

/// Reads `segment_<k>` back (values widened from f32).
pub fn read_segment(dir: impl AsRef<Path>, k: usize) -> Result<(LatentSidecar, SegmentLatents)> {
    let dir = dir.as_ref();
    let side_path = dir.join(format!("segment_{k}.json"));
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: LatentSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: 0,
        message: format!("{}: {e}", side_path.display()),
    })?;
    if sidecar.dtype != DTYPE_F32LE {
        return Err(Error::argument(format!("unsupported dtype `{}`", sidecar.dtype)));
    }
    let data_path = dir.join(format!("segment_{k}.f32le"));
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let n = sidecar.shape.len();
    if bytes.len() != sidecar.frame_count * n * 4 {
        return Err(Error::argument(format!(
            "{} has {} bytes, sidecar implies {}",
            data_path.display(),
            bytes.len(),
            sidecar.frame_count * n * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let frames = values
        .chunks_exact(n)
        .map(|v| LatentFrame::new(sidecar.shape, v.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let latents = SegmentLatents::new(k, frames)?;
    Ok((sidecar, latents))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::orchestrator::Engine;

    #[test]
    fn segment_roundtrip_through_disk() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default().with_steps(4).with_seed(3);
        let script = StoryScript::from_pairs("rt", [("a street", "walking"), ("a bus", "sitting")]);
        let run = Engine::toy(cfg).unwrap().generate_story(&script).unwrap();
        write_run_dir(tmp.path(), &run).unwrap();

        let (side, back) = read_segment(tmp.path(), 2).unwrap();
        assert_eq!(side.segment, 2);
        assert_eq!(side.frame_count, 8);
        assert_eq!(side.seed, 3);
        for (a, b) in back.frames.iter().zip(&run.segments[1].frames) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        for name in ["run.json", "weights.csv", "blend_plans.json", "metrics.json"] {
            assert!(tmp.path().join(name).exists(), "{name}");
        }
    }

    #[test]
    fn sidecar_json_keys() {
        let s = LatentSidecar {
            segment: 1,
            frame_count: 8,
            shape: LatentShape::new(4, 8, 8),
            seed: 42,
            dtype: DTYPE_F32LE.into(),
        };
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(
            v,
            json!({"segment": 1, "F": 8, "shape": [4, 8, 8], "seed": 42, "dtype": "f32le"})
        );
    }

    #[test]
    fn script_hash_is_stable() {
        let s = StoryScript::from_pairs("h", [("a", "b")]);
        assert_eq!(script_hash(&s), script_hash(&s.clone()));
        assert_eq!(script_hash(&s).len(), 64);
    }
}
