//! Out-of-process embedder speaking newline-delimited JSON over TCP or a
//! child process's stdio.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use pollen_core::embed::{l2_normalize, Embedder, Embedding};
use pollen_core::prep::NormalizedCrop;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `tcp://host:port`
    Tcp(String),
    /// `stdio:program arg ...`
    Stdio(Vec<String>),
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(Error::Config("tcp endpoint needs host:port".into()));
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(Error::Config("stdio endpoint needs a command".into()));
            }
            Ok(Endpoint::Stdio(argv))
        } else {
            Err(Error::Config(format!("endpoint {s:?} must start with tcp:// or stdio:")))
        }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    id: u64,
    shape: [usize; 3],
    data: &'a str,
}

#[derive(Deserialize)]
struct Response {
    id: u64,
    embedding: Vec<f64>,
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    next_id: u64,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(c) = &mut self.child {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn spawn_reader<R: Read + Send + 'static>(r: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(r).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

/// One connection, one request in flight at a time.
pub struct ExternalEmbedder {
    dim: usize,
    side: usize,
    timeout: Duration,
    conn: Mutex<Connection>,
}

impl ExternalEmbedder {
    pub fn connect(endpoint: &Endpoint, dim: usize, side: usize, timeout: Duration) -> Result<Self> {
        let transport = |e: std::io::Error| Error::Transport(e.to_string());
        let conn = match endpoint {
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .to_socket_addrs()
                    .map_err(transport)?
                    .next()
                    .ok_or_else(|| Error::Transport(format!("{addr} did not resolve")))?;
                let stream = TcpStream::connect_timeout(&sock, timeout).map_err(transport)?;
                let reader = stream.try_clone().map_err(transport)?;
                Connection { writer: Box::new(stream), lines: spawn_reader(reader), child: None, next_id: 0 }
            }
            Endpoint::Stdio(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(transport)?;
                let stdin = child.stdin.take().expect("piped");
                let stdout = child.stdout.take().expect("piped");
                Connection { writer: Box::new(stdin), lines: spawn_reader(stdout), child: Some(child), next_id: 0 }
            }
        };
        Ok(Self { dim, side, timeout, conn: Mutex::new(conn) })
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Sends one crop and waits for its embedding. Late replies to earlier
    /// (timed-out) requests are skipped.
    pub fn request(&self, crop: &NormalizedCrop) -> Result<Embedding> {
        let mut conn = self.conn.lock().unwrap_or_else(std::sync::PoisonError::into_inner);
        let id = conn.next_id;
        conn.next_id += 1;
        let data = base64::engine::general_purpose::STANDARD.encode(crop.to_le_bytes());
        let s = crop.side();
        let mut line = serde_json::to_string(&Request { id, shape: [3, s, s], data: &data })
            .map_err(|e| Error::Protocol(e.to_string()))?;
        line.push('\n');
        conn.writer
            .write_all(line.as_bytes())
            .and_then(|_| conn.writer.flush())
            .map_err(|e| Error::Transport(e.to_string()))?;
        loop {
            let reply = match conn.lines.recv_timeout(self.timeout) {
                Ok(Ok(l)) => l,
                Ok(Err(e)) => return Err(Error::Transport(e.to_string())),
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Transport("connection closed".into())),
            };
            let resp: Response = serde_json::from_str(&reply).map_err(|e| Error::Protocol(format!("bad response: {e}")))?;
            if resp.id < id {
                continue;
            }
            if resp.id != id {
                return Err(Error::Protocol(format!("response id {} for request {id}", resp.id)));
            }
            if resp.embedding.len() != self.dim {
                return Err(Error::EmbeddingDimension { expected: self.dim, got: resp.embedding.len() });
            }
            if resp.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Protocol("embedding contains non-finite values".into()));
            }
            let unit = l2_normalize(&resp.embedding).map_err(|e| Error::Protocol(e.to_string()))?;
            return Ok(Embedding::from_unit(unit)?);
        }
    }
}

impl Embedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn input_side(&self) -> usize {
        self.side
    }

    fn embed(&self, crop: &NormalizedCrop) -> pollen_core::Result<Embedding> {
        self.request(crop).map_err(|e| pollen_core::Error::Embedder(e.to_string()))
    }
}
