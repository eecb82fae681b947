//! Client for an out-of-process embedding provider and backbone.
//!
//! Messages are newline-delimited JSON objects, one request in flight per
//! connection:
//!
//! ```text
//! -> {"id":1,"method":"hello","params":{"dim":64,"latent_shape":[4,8,8],"dtypes":["f32le","f64le"],"seed":0}}
//! <- {"id":1,"result":{"dim":64,"latent_shape":[4,8,8],"deterministic":true,"dtype":"f32le"}}
//! -> {"id":2,"method":"embed_text","params":{"text":"a corgi"}}
//! <- {"id":2,"result":{"embedding":[0.1, ...]}}
//! -> {"id":3,"method":"embed_frame","params":{"shape":[4,8,8],"dtype":"f32le","data":"<base64>"}}
//! <- {"id":3,"result":{"embedding":[...]}}
//! -> {"id":4,"method":"denoise_step","params":{"segment":1,"step":1,"frames":8,"shape":[4,8,8],
//!        "dtype":"f32le","latents":"<base64>","conditioning":[...],"mask":{"prompt":"scene","tokens":7}}}
//! <- {"id":4,"result":{"latents":"<base64>"}}
//! -> {"id":5,"method":"shutdown","params":{}}
//! <- {"id":5,"result":{}}
//! ```
//!
//! Latent payloads are base64 of little-endian floats, frames in order, each
//! frame row-major. The element type is `f32le` unless the server's `hello`
//! answer selects `f64le` from the offered list. Errors come back as
//! `{"id":n,"error":{"code":"...","message":"..."}}`.
//!
//! Endpoints: `host:port` or `tcp://host:port` for a stream socket, and
//! `stdio:<command line>` to spawn a server and talk over its stdin/stdout.
//! Initial noise is always drawn locally so seeds mean the same thing for
//! every backend.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde_json::{json, Value};

use crate::backbone::{init_noise, AttentionMask, Backbone, LatentFrame, LatentShape, SegmentLatents};
use crate::config::RunConfig;
use crate::embedding::{EmbeddingProvider, EmbeddingVector, ProviderDescriptor};
use crate::error::{Error, Result};
use crate::orchestrator::Engine;

/// Element type of latent payloads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32Le,
    F64Le,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32Le => "f32le",
            Dtype::F64Le => "f64le",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32le" => Some(Dtype::F32Le),
            "f64le" => Some(Dtype::F64Le),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32Le => 4,
            Dtype::F64Le => 8,
        }
    }
}

pub fn encode_values<'a>(values: impl Iterator<Item = &'a f64>, dtype: Dtype) -> String {
    let mut bytes = Vec::new();
    for v in values {
        match dtype {
            Dtype::F32Le => bytes.extend_from_slice(&(*v as f32).to_le_bytes()),
            Dtype::F64Le => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    B64.encode(bytes)
}

pub fn decode_values(payload: &str, dtype: Dtype) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(payload)
        .map_err(|e| Error::Protocol(format!("bad base64 payload: {e}")))?;
    if bytes.len() % dtype.width() != 0 {
        return Err(Error::Protocol(format!(
            "payload of {} bytes is not a whole number of {} values",
            bytes.len(),
            dtype.as_str()
        )));
    }
    Ok(match dtype {
        Dtype::F32Le => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64Le => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Stdio(Vec<String>),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(cmd) = s.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
            if argv.is_empty() {
                return Err(Error::argument("stdio endpoint needs a command"));
            }
            return Ok(Endpoint::Stdio(argv));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        match addr.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
                Ok(Endpoint::Tcp(addr.to_owned()))
            }
            _ => Err(Error::argument(format!(
                "bad bridge endpoint `{s}` (expected host:port, tcp://host:port or stdio:<cmd>)"
            ))),
        }
    }
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    next_id: u64,
    closed: bool,
}

impl Connection {
    fn open(endpoint: &Endpoint) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| Error::Transport(format!("connect {addr}: {e}")))?;
                let _ = stream.set_nodelay(true);
                let read_half = stream
                    .try_clone()
                    .map_err(|e| Error::Transport(format!("socket clone: {e}")))?;
                Ok(Connection {
                    reader: Box::new(BufReader::new(read_half)),
                    writer: Box::new(stream),
                    child: None,
                    next_id: 1,
                    closed: false,
                })
            }
            Endpoint::Stdio(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Transport(format!("spawn `{}`: {e}", argv.join(" "))))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Connection {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Box::new(stdin),
                    child: Some(child),
                    next_id: 1,
                    closed: false,
                })
            }
        }
    }

    fn call(&mut self, method: &str, params: Value) -> Result<Value> {
        if self.closed {
            return Err(Error::Transport("bridge connection is closed".into()));
        }
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&json!({"id": id, "method": method, "params": params}))
            .expect("request serialization");
        line.push('\n');
        log::trace!("bridge -> {}", line.trim_end());
        let sent = self
            .writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush());
        if let Err(e) = sent {
            self.closed = true;
            return Err(Error::Transport(format!("{method}: write failed: {e}")));
        }

        let mut reply = String::new();
        match self.reader.read_line(&mut reply) {
            Ok(0) => {
                self.closed = true;
                return Err(Error::Transport(format!("{method}: bridge closed the connection")));
            }
            Ok(_) => {}
            Err(e) => {
                self.closed = true;
                return Err(Error::Transport(format!("{method}: read failed: {e}")));
            }
        }
        log::trace!("bridge <- {}", reply.trim_end());
        let msg: Value = serde_json::from_str(&reply)
            .map_err(|e| Error::Protocol(format!("{method}: malformed response: {e}")))?;
        let got = msg.get("id").and_then(Value::as_u64);
        if got != Some(id) {
            self.closed = true;
            return Err(Error::Protocol(format!(
                "{method}: response id {} does not match request id {id}",
                msg.get("id").map_or("<missing>".to_string(), Value::to_string)
            )));
        }
        match (msg.get("result"), msg.get("error")) {
            (Some(result), None) => Ok(result.clone()),
            (None, Some(err)) => {
                let code = err.get("code").map_or(String::new(), |c| match c {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                });
                let message = err.get("message").and_then(Value::as_str).unwrap_or("");
                Err(Error::Transport(format!("{method}: bridge error {code}: {message}")))
            }
            _ => Err(Error::Protocol(format!(
                "{method}: response must carry exactly one of `result` and `error`"
            ))),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.call("shutdown", json!({}));
        }
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// What the server agreed to in `hello`.
#[derive(Clone, Debug, PartialEq)]
pub struct Handshake {
    pub dim: usize,
    pub latent_shape: LatentShape,
    pub deterministic: bool,
    pub dtype: Dtype,
    pub model: Option<String>,
}

/// Parameters offered in `hello`.
#[derive(Clone, Debug)]
pub struct HelloRequest {
    pub dim: usize,
    pub latent_shape: LatentShape,
    pub seed: u64,
}

/// A bridge session acting as both embedding provider and backbone.
pub struct BridgeClient {
    conn: Mutex<Connection>,
    handshake: Handshake,
    descriptor: ProviderDescriptor,
    seed: u64,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient")
            .field("handshake", &self.handshake)
            .finish_non_exhaustive()
    }
}

/// Unit-norm tolerance for embeddings received over the wire.
pub const WIRE_NORM_TOLERANCE: f64 = 1e-4;

impl BridgeClient {
    pub const NAME: &'static str = "bridge";

    /// Connects and performs the `hello` handshake. The server must agree to
    /// the requested dimension and latent shape.
    pub fn connect(endpoint: &Endpoint, hello: &HelloRequest) -> Result<Self> {
        let mut conn = Connection::open(endpoint)?;
        let result = conn.call(
            "hello",
            json!({
                "dim": hello.dim,
                "latent_shape": hello.latent_shape,
                "dtypes": [Dtype::F32Le.as_str(), Dtype::F64Le.as_str()],
                "seed": hello.seed,
            }),
        )?;
        let handshake = parse_handshake(&result)?;
        if handshake.dim != hello.dim {
            return Err(Error::Protocol(format!(
                "hello: bridge dimension {} does not match configured {}",
                handshake.dim, hello.dim
            )));
        }
        if handshake.latent_shape != hello.latent_shape {
            return Err(Error::Protocol(format!(
                "hello: bridge latent shape {:?} does not match configured {:?}",
                handshake.latent_shape, hello.latent_shape
            )));
        }
        log::info!(
            "bridge handshake: dim={} dtype={} deterministic={}",
            handshake.dim,
            handshake.dtype.as_str(),
            handshake.deterministic
        );
        let descriptor = ProviderDescriptor {
            name: handshake.model.clone().unwrap_or_else(|| Self::NAME.to_owned()),
            dimension: handshake.dim,
            deterministic: handshake.deterministic,
            seed: handshake.deterministic.then_some(hello.seed),
        };
        Ok(BridgeClient {
            conn: Mutex::new(conn),
            handshake,
            descriptor,
            seed: hello.seed,
        })
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn call(&self, method: &str, params: Value) -> Result<Value> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::Transport("bridge connection poisoned".into()))?;
        conn.call(method, params)
    }

    fn embedding_from(&self, method: &str, result: &Value) -> Result<EmbeddingVector> {
        let values: Vec<f64> = result
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Protocol(format!("{method}: result lacks `embedding` array")))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| Error::Protocol(format!("{method}: non-numeric embedding entry")))
            })
            .collect::<Result<_>>()?;
        if values.len() != self.handshake.dim {
            return Err(Error::Protocol(format!(
                "{method}: embedding has dimension {}, handshake said {}",
                values.len(),
                self.handshake.dim
            )));
        }
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > WIRE_NORM_TOLERANCE {
            return Err(Error::Protocol(format!("{method}: embedding norm {norm} is not 1")));
        }
        // Keep exact unit vectors untouched so results match in-process runs.
        if (norm - 1.0).abs() <= 1e-12 {
            EmbeddingVector::from_unit(values)
        } else {
            EmbeddingVector::normalized(values)
        }
    }

    /// Asks the bridge to evaluate a run directory; the report is returned
    /// as sent.
    pub fn metrics(&self, run_dir: &std::path::Path) -> Result<Value> {
        self.call("metrics", json!({ "run_dir": run_dir }))
    }
}

/// Connects to `endpoint` and builds an engine that uses the bridge as both
/// embedding provider and backbone.
pub fn bridge_engine(config: RunConfig, endpoint: &str) -> Result<Engine> {
    config.validate()?;
    let endpoint = Endpoint::parse(endpoint)?;
    let client = Arc::new(BridgeClient::connect(
        &endpoint,
        &HelloRequest {
            dim: config.embedding.dimension,
            latent_shape: config.backbone.latent_shape,
            seed: config.backbone.seed,
        },
    )?);
    Engine::new(config, client.clone(), client)
}

fn parse_handshake(result: &Value) -> Result<Handshake> {
    let dim = result
        .get("dim")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Protocol("hello: missing `dim`".into()))? as usize;
    let latent_shape: LatentShape = result
        .get("latent_shape")
        .cloned()
        .ok_or_else(|| Error::Protocol("hello: missing `latent_shape`".into()))
        .and_then(|v| {
            serde_json::from_value(v).map_err(|e| Error::Protocol(format!("hello: bad `latent_shape`: {e}")))
        })?;
    let deterministic = result
        .get("deterministic")
        .and_then(Value::as_bool)
        .ok_or_else(|| Error::Protocol("hello: missing `deterministic`".into()))?;
    let dtype = match result.get("dtype") {
        None => Dtype::F32Le,
        Some(v) => v
            .as_str()
            .and_then(Dtype::parse)
            .ok_or_else(|| Error::Protocol(format!("hello: unsupported dtype {v}")))?,
    };
    let model = result.get("model").and_then(Value::as_str).map(str::to_owned);
    Ok(Handshake {
        dim,
        latent_shape,
        deterministic,
        dtype,
        model,
    })
}

impl EmbeddingProvider for BridgeClient {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::argument("cannot embed empty text"));
        }
        let result = self.call("embed_text", json!({ "text": text }))?;
        self.embedding_from("embed_text", &result)
    }
}

impl Backbone for BridgeClient {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn latent_shape(&self) -> LatentShape {
        self.handshake.latent_shape
    }

    fn init_noise(&self, frames: usize, segment_index: usize) -> SegmentLatents {
        init_noise(self.handshake.latent_shape, frames, self.seed, segment_index)
    }

    fn denoise_step(
        &self,
        latents: &SegmentLatents,
        conditioning: &EmbeddingVector,
        mask: &AttentionMask,
        step: usize,
    ) -> Result<SegmentLatents> {
        let dtype = self.handshake.dtype;
        let shape = latents.shape();
        let payload = encode_values(latents.frames.iter().flat_map(|f| f.values()), dtype);
        let result = self.call(
            "denoise_step",
            json!({
                "segment": latents.segment_index,
                "step": step,
                "frames": latents.frame_count(),
                "shape": shape,
                "dtype": dtype.as_str(),
                "latents": payload,
                "conditioning": conditioning.values(),
                "mask": mask,
            }),
        )?;
        let encoded = result
            .get("latents")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Protocol("denoise_step: result lacks `latents`".into()))?;
        let values = decode_values(encoded, dtype)?;
        let expected = latents.frame_count() * shape.len();
        if values.len() != expected {
            return Err(Error::Contract(format!(
                "bridge returned {} latent values, expected {expected}",
                values.len()
            )));
        }
        let frames = values
            .chunks_exact(shape.len())
            .map(|v| LatentFrame::new(shape, v.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        SegmentLatents::new(latents.segment_index, frames)
    }

    fn frame_probe(&self, frame: &LatentFrame) -> Result<EmbeddingVector> {
        let dtype = self.handshake.dtype;
        let result = self.call(
            "embed_frame",
            json!({
                "shape": frame.shape(),
                "dtype": dtype.as_str(),
                "data": encode_values(frame.values().iter(), dtype),
            }),
        )?;
        self.embedding_from("embed_frame", &result)
    }
}
