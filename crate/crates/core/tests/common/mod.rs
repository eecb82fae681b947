#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use narrablend::backbone::{AttentionMask, Backbone, LatentFrame, SegmentLatents, ToyBackbone};
use narrablend::bridge::{decode_values, encode_values, Dtype};
use narrablend::embedding::{EmbeddingProvider, EmbeddingVector, MockProvider};
use narrablend::{RunConfig, StoryScript};
use serde_json::{json, Value};

pub const NYC_12: &str = include_str!("../../data/nyc_12.json");

pub fn nyc_script(n: usize) -> StoryScript {
    let full = narrablend::parse_script(NYC_12.as_bytes()).unwrap();
    StoryScript::from_pairs(
        full.story_id.clone(),
        full.pairs.iter().take(n).map(|p| (p.scene.clone(), p.action.clone())),
    )
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_narrablend")
}

pub fn narrablend(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("NB_LOG")
        .output()
        .expect("spawn narrablend")
}

pub fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, contents).unwrap();
    p
}

pub fn write_script(dir: &Path, name: &str, script: &StoryScript) -> PathBuf {
    write(dir, name, &script.to_json())
}

/// Config document with `steps` denoising steps and defaults otherwise.
pub fn steps_config(steps: usize) -> String {
    format!(r#"{{"dipw":{{"total_steps":{steps}}},"backbone":{{"steps":{steps}}}}}"#)
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

pub fn read_json(dir: &Path, name: &str) -> Value {
    serde_json::from_slice(&read(dir, name)).unwrap()
}

/// Misbehaviours the mock bridge can be told to exhibit.
#[derive(Clone, Debug, Default)]
pub struct Faults {
    /// Drop the connection instead of answering this many-plus-one-th
    /// `denoise_step`.
    pub die_after_denoise: Option<usize>,
    /// Answer the request with this id using a different id.
    pub wrong_id_at: Option<u64>,
    /// Answer this request id with an error object.
    pub error_at: Option<u64>,
    /// Report this dimension in `hello` instead of the configured one.
    pub hello_dim: Option<usize>,
    /// Ignore an offered `f64le` and stay on `f32le`.
    pub force_f32: bool,
}

/// In-test stand-in for the out-of-process bridge: serves the mock provider
/// and toy backbone built from `config` over newline-delimited JSON.
pub struct MockBridge {
    pub addr: String,
}

pub fn spawn_mock_bridge(config: &RunConfig, faults: Faults) -> MockBridge {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let config = config.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let config = config.clone();
            let faults = faults.clone();
            thread::spawn(move || serve(stream, &config, &faults));
        }
    });
    MockBridge { addr }
}

fn embedding_json(e: &EmbeddingVector) -> Value {
    json!({ "embedding": e.values() })
}

fn serve(stream: TcpStream, config: &RunConfig, faults: &Faults) {
    let provider = MockProvider::new(config.embedding.dimension, config.embedding.seed).unwrap();
    let toy = ToyBackbone::new(config.backbone.clone(), config.embedding.dimension).unwrap();
    let shape = config.backbone.latent_shape;
    let mut dtype = Dtype::F32Le;
    let mut denoise_calls = 0usize;
    let mut writer = stream.try_clone().unwrap();
    let reader = BufReader::new(stream);

    for line in reader.lines() {
        let Ok(line) = line else { return };
        let req: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                let _ = writeln!(writer, "{}", json!({"id": null, "error": {"code": "malformed", "message": e.to_string()}}));
                continue;
            }
        };
        let id = req["id"].as_u64().unwrap();
        let params = &req["params"];
        let method = req["method"].as_str().unwrap_or("");

        let result: Result<Value, String> = if faults.error_at == Some(id) {
            Err("injected failure".into())
        } else {
            match method {
                "hello" => {
                    let offered: Vec<&str> = params["dtypes"]
                        .as_array()
                        .map(|a| a.iter().filter_map(Value::as_str).collect())
                        .unwrap_or_default();
                    if offered.contains(&"f64le") && !faults.force_f32 {
                        dtype = Dtype::F64Le;
                    }
                    Ok(json!({
                        "dim": faults.hello_dim.unwrap_or(config.embedding.dimension),
                        "latent_shape": shape,
                        "deterministic": true,
                        "dtype": dtype.as_str(),
                        "model": "mock-hash",
                    }))
                }
                "embed_text" => provider
                    .embed_text(params["text"].as_str().unwrap_or(""))
                    .map(|e| embedding_json(&e))
                    .map_err(|e| e.to_string()),
                "embed_frame" => {
                    let values = decode_values(params["data"].as_str().unwrap(), dtype).unwrap();
                    let frame = LatentFrame::new(shape, values).unwrap();
                    toy.frame_probe(&frame).map(|e| embedding_json(&e)).map_err(|e| e.to_string())
                }
                "denoise_step" => {
                    if faults.die_after_denoise == Some(denoise_calls) {
                        return;
                    }
                    denoise_calls += 1;
                    let values = decode_values(params["latents"].as_str().unwrap(), dtype).unwrap();
                    let frames = values
                        .chunks_exact(shape.len())
                        .map(|v| LatentFrame::new(shape, v.to_vec()).unwrap())
                        .collect();
                    let latents = SegmentLatents::new(params["segment"].as_u64().unwrap() as usize, frames).unwrap();
                    let cond: Vec<f64> = serde_json::from_value(params["conditioning"].clone()).unwrap();
                    let cond = EmbeddingVector::from_unit(cond).unwrap();
                    let mask: AttentionMask = serde_json::from_value(params["mask"].clone()).unwrap();
                    let step = params["step"].as_u64().unwrap() as usize;
                    toy.denoise_step(&latents, &cond, &mask, step)
                        .map(|out| json!({ "latents": encode_values(out.frames.iter().flat_map(|f| f.values()), dtype) }))
                        .map_err(|e| e.to_string())
                }
                "shutdown" => {
                    let _ = writeln!(writer, "{}", json!({"id": id, "result": {}}));
                    return;
                }
                other => Err(format!("unknown method {other}")),
            }
        };
        let reply_id = if faults.wrong_id_at == Some(id) { id + 7 } else { id };
        let msg = match result {
            Ok(r) => json!({"id": reply_id, "result": r}),
            Err(m) => json!({"id": reply_id, "error": {"code": "failed", "message": m}}),
        };
        if writeln!(writer, "{msg}").is_err() {
            return;
        }
    }
}
