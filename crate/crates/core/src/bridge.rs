// SPDX-License-Identifier: MIT OR Apache-2.0
//! Client for a remote subject model speaking line-delimited JSON.
//!
//! Each request is one JSON object on one line; the server answers each with
//! one line, in order. Vectors travel as base64 of little-endian `f32`.
//!
//! ```text
//! → {"id":0,"op":"handshake"}
//! ← {"id":0,"ok":true,"meta":{"n_layers":32,"d_model":4096,"tokenizer":"..."}}
//! → {"id":1,"op":"forward","tokens":[...],"captures":[[31,7]],"deltas":[...],"attn_zero":[],"greedy":true}
//! ← {"id":1,"ok":true,"tokens":[...],"decoded_token":20,"decoded_text":"5","captures":[...]}
//! ```
//!
//! Positions refer to the server's tokenization, which it echoes back.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, InterventionPlan, ModelMeta, ResidualWrite, SubjectModel};
use crate::task::Answer;

/// Base64 of little-endian `f32`.
pub fn encode_vector(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_vector(s: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Bridge(format!("bad base64 vector: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Bridge(format!(
            "vector payload of {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// A residual write on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireVector {
    pub layer: usize,
    pub position: usize,
    pub vector: String,
}

impl WireVector {
    fn from_write(w: &ResidualWrite) -> Self {
        WireVector {
            layer: w.layer,
            position: w.position,
            vector: encode_vector(&w.vector),
        }
    }
}

/// Model description from the handshake.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMeta {
    pub n_layers: usize,
    pub d_model: usize,
    pub tokenizer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RequestBody {
    Handshake,
    Forward {
        #[serde(skip_serializing_if = "Option::is_none", default)]
        prompt: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        tokens: Option<Vec<u32>>,
        #[serde(default)]
        captures: Vec<(usize, usize)>,
        #[serde(default)]
        overwrites: Vec<WireVector>,
        #[serde(default)]
        deltas: Vec<WireVector>,
        #[serde(default)]
        attn_zero: Vec<usize>,
        #[serde(default = "yes")]
        greedy: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub body: RequestBody,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(default)]
    pub id: Option<u64>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<WireMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoded_token: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoded_text: Option<String>,
    #[serde(default)]
    pub captures: Vec<WireVector>,
}

/// Where the server lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port`.
    Tcp(String),
    /// Spawn `program args…` and talk over its stdin and stdout.
    Stdio { program: String, args: Vec<String> },
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    /// `tcp://host:port` or `stdio:program arg…`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            return Ok(Endpoint::Tcp(addr.to_owned()));
        }
        if let Some(cmd) = s.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace().map(str::to_owned);
            let program = parts
                .next()
                .ok_or_else(|| Error::Config("empty stdio command".into()))?;
            return Ok(Endpoint::Stdio {
                program,
                args: parts.collect(),
            });
        }
        Err(Error::Config(format!(
            "bridge endpoint {s:?} is neither tcp://host:port nor stdio:command"
        )))
    }
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    next_id: u64,
}

impl Connection {
    fn open(endpoint: &Endpoint) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| Error::Bridge(format!("cannot connect to {addr}: {e}")))?;
                stream.set_nodelay(true)?;
                let reader = BufReader::new(stream.try_clone()?);
                Ok(Connection {
                    reader: Box::new(reader),
                    writer: Box::new(stream),
                    child: None,
                    next_id: 0,
                })
            }
            Endpoint::Stdio { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| Error::Bridge(format!("cannot start {program}: {e}")))?;
                let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
                let stdout: ChildStdout = child.stdout.take().expect("piped stdout");
                Ok(Connection {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Box::new(stdin),
                    child: Some(child),
                    next_id: 0,
                })
            }
        }
    }

    fn call(&mut self, body: RequestBody) -> Result<Response> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&Request { id, body })?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(Error::Bridge("server closed the connection".into()));
        }
        let resp: Response = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::Bridge(format!("malformed response: {e}")))?;
        if let Some(got) = resp.id {
            if got != id {
                return Err(Error::Bridge(format!("response id {got} for request {id}")));
            }
        }
        if !resp.ok {
            return Err(Error::Bridge(
                resp.error
                    .unwrap_or_else(|| "unspecified server error".into()),
            ));
        }
        Ok(resp)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A [`SubjectModel`] backed by a bridge server. Requests are serialized
/// through one connection.
pub struct BridgeClient {
    conn: Mutex<Connection>,
    meta: WireMeta,
}

impl BridgeClient {
    /// Connect and perform the handshake.
    pub fn connect(endpoint: &Endpoint) -> Result<Self> {
        let mut conn = Connection::open(endpoint)?;
        let resp = conn.call(RequestBody::Handshake)?;
        let meta = resp
            .meta
            .ok_or_else(|| Error::Bridge("handshake without model meta".into()))?;
        if meta.n_layers == 0 || meta.d_model == 0 {
            return Err(Error::Bridge(format!(
                "server reports {} layers of width {}",
                meta.n_layers, meta.d_model
            )));
        }
        Ok(BridgeClient {
            conn: Mutex::new(conn),
            meta,
        })
    }

    pub fn tokenizer_id(&self) -> &str {
        &self.meta.tokenizer
    }

    fn call(&self, body: RequestBody) -> Result<Response> {
        self.conn
            .lock()
            .map_err(|_| Error::Bridge("connection poisoned".into()))?
            .call(body)
    }
}

impl SubjectModel for BridgeClient {
    fn meta(&self) -> ModelMeta {
        ModelMeta {
            n_layers: self.meta.n_layers,
            d_model: self.meta.d_model,
            identity: format!("bridge:{}", self.meta.tokenizer),
        }
    }

    /// The server's tokenization, obtained from a plain forward.
    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let resp = self.call(RequestBody::Forward {
            prompt: Some(text.to_owned()),
            tokens: None,
            captures: Vec::new(),
            overwrites: Vec::new(),
            deltas: Vec::new(),
            attn_zero: Vec::new(),
            greedy: true,
        })?;
        resp.tokens
            .ok_or_else(|| Error::Bridge("forward response without tokens".into()))
    }

    fn forward(
        &self,
        tokens: &[u32],
        plan: &InterventionPlan,
        captures: &[(usize, usize)],
    ) -> Result<ForwardTrace> {
        plan.validate(self.meta.n_layers, self.meta.d_model, tokens.len())?;
        if let Some(&(l, p)) = captures
            .iter()
            .find(|&&(l, p)| l >= self.meta.n_layers || p >= tokens.len())
        {
            return Err(Error::OutOfRange(format!("capture ({l}, {p})")));
        }
        let resp = self.call(RequestBody::Forward {
            prompt: None,
            tokens: Some(tokens.to_vec()),
            captures: captures.to_vec(),
            overwrites: plan.overwrites.iter().map(WireVector::from_write).collect(),
            deltas: plan.deltas.iter().map(WireVector::from_write).collect(),
            attn_zero: plan.attn_zero.iter().copied().collect(),
            greedy: true,
        })?;
        let decoded_token = resp
            .decoded_token
            .ok_or_else(|| Error::Bridge("forward response without decoded_token".into()))?;
        let text = resp.decoded_text.unwrap_or_default();
        let mut out = std::collections::BTreeMap::new();
        for c in &resp.captures {
            let v = decode_vector(&c.vector)?;
            if v.len() != self.meta.d_model {
                return Err(Error::Bridge(format!(
                    "capture of length {} for d_model {}",
                    v.len(),
                    self.meta.d_model
                )));
            }
            out.insert((c.layer, c.position), v);
        }
        if let Some(missing) = captures.iter().find(|k| !out.contains_key(k)) {
            return Err(Error::Bridge(format!("server omitted capture {missing:?}")));
        }
        Ok(ForwardTrace {
            captures: out,
            decoded_token,
            answer: Answer::from_text(&text),
            logits_last: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn vectors_survive_the_wire(v in proptest::collection::vec(any::<f32>(), 0..64)) {
            let back = decode_vector(&encode_vector(&v)).unwrap();
            prop_assert_eq!(back.len(), v.len());
            for (a, b) in back.iter().zip(&v) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bad_payloads_are_rejected() {
        assert!(decode_vector("not base64!").is_err());
        assert!(decode_vector(&STANDARD.encode([1u8, 2, 3])).is_err());
    }

    #[test]
    fn request_wire_shape() {
        let r = Request {
            id: 3,
            body: RequestBody::Handshake,
        };
        assert_eq!(
            serde_json::to_value(&r).unwrap(),
            serde_json::json!({"id": 3, "op": "handshake"})
        );
        let f = Request {
            id: 4,
            body: RequestBody::Forward {
                prompt: None,
                tokens: Some(vec![1, 2]),
                captures: vec![(0, 1)],
                overwrites: vec![],
                deltas: vec![],
                attn_zero: vec![2],
                greedy: true,
            },
        };
        let json = serde_json::to_value(&f).unwrap();
        assert_eq!(json["op"], "forward");
        assert_eq!(json["captures"], serde_json::json!([[0, 1]]));
        assert!(json.get("prompt").is_none());
        let back: Request = serde_json::from_value(json).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn endpoints_parse() {
        assert_eq!(
            "tcp://127.0.0.1:9000".parse::<Endpoint>().unwrap(),
            Endpoint::Tcp("127.0.0.1:9000".into())
        );
        assert_eq!(
            "stdio:python -m server".parse::<Endpoint>().unwrap(),
            Endpoint::Stdio {
                program: "python".into(),
                args: vec!["-m".into(), "server".into()]
            }
        );
        assert!("http://x".parse::<Endpoint>().is_err());
    }
}
