//! Line-delimited JSON inference over stdio or TCP.

use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::{Branch, Model};
use crate::error::{Error, Result};
use crate::schema::Row;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Stdio,
    Tcp(u16),
}

impl std::str::FromStr for Transport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "stdio" {
            return Ok(Transport::Stdio);
        }
        s.strip_prefix("tcp:")
            .and_then(|p| p.parse().ok())
            .map(Transport::Tcp)
            .ok_or_else(|| Error::Usage(format!("transport must be stdio or tcp:PORT, got {s:?}")))
    }
}

#[derive(Debug, Serialize)]
struct Answer<'a> {
    pair_id: &'a str,
    msr: f64,
    micros: u64,
}

#[derive(Debug, Serialize)]
struct Failure<'a> {
    error: &'a str,
    detail: String,
}

/// Counters of one serving session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Served {
    pub answered: usize,
    pub rejected: usize,
}

pub struct Server {
    model: Model,
    branch: Branch,
    ctx_len: usize,
}

impl Server {
    pub fn new(model: Model, branch: Option<Branch>) -> Result<Self> {
        let branch = branch.unwrap_or_else(|| model.default_branch());
        model.check_branch(branch)?;
        let ctx_len = model.config().map(|c| c.ctx_len).expect("checked above");
        Ok(Self {
            model,
            branch,
            ctx_len,
        })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    /// Answers one request line with one response line (without newline).
    pub fn answer(&self, line: &[u8]) -> (String, bool) {
        let fail = |error: &str, detail: String| {
            (serde_json::to_string(&Failure { error, detail }).expect("serializes"), false)
        };
        let text = match std::str::from_utf8(line) {
            Ok(t) => t,
            Err(e) => return fail("parse", format!("invalid UTF-8: {e}")),
        };
        let row: Row = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => return fail("parse", e.to_string()),
        };
        let pair_id = row.pair_id.clone();
        let sample = match row.into_request() {
            Ok(s) => s,
            Err(e) => return fail("invalid", e.to_string()),
        };
        if sample.context.len() != self.ctx_len {
            return fail(
                "invalid",
                format!("expected {} context slots, got {}", self.ctx_len, sample.context.len()),
            );
        }
        let started = Instant::now();
        match self.model.predict(self.branch, std::slice::from_ref(&sample)) {
            Ok(p) => {
                let micros = started.elapsed().as_micros() as u64;
                let answer = Answer {
                    pair_id: &pair_id,
                    msr: p[0],
                    micros,
                };
                (serde_json::to_string(&answer).expect("serializes"), true)
            }
            Err(e) => fail("model", e.to_string()),
        }
    }

    /// Processes requests in arrival order until the reader is exhausted.
    pub fn serve_lines(&self, mut reader: impl BufRead, mut writer: impl Write) -> io::Result<Served> {
        let mut served = Served::default();
        let mut line = Vec::new();
        loop {
            line.clear();
            if reader.read_until(b'\n', &mut line)? == 0 {
                return Ok(served);
            }
            let trimmed = line.trim_ascii();
            if trimmed.is_empty() {
                continue;
            }
            let (reply, ok) = self.answer(trimmed);
            if ok {
                served.answered += 1;
            } else {
                served.rejected += 1;
            }
            writer.write_all(reply.as_bytes())?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
    }

    pub fn run(&self, transport: Transport) -> Result<()> {
        let io_err = |e| Error::Io {
            path: "<transport>".into(),
            source: e,
        };
        match transport {
            Transport::Stdio => {
                let served = self
                    .serve_lines(io::stdin().lock(), io::stdout().lock())
                    .map_err(io_err)?;
                log::info!("served {} requests, rejected {}", served.answered, served.rejected);
            }
            Transport::Tcp(port) => {
                let listener = TcpListener::bind(("127.0.0.1", port)).map_err(io_err)?;
                log::info!("listening on {}", listener.local_addr().map_err(io_err)?);
                for stream in listener.incoming() {
                    let stream = match stream {
                        Ok(s) => s,
                        Err(e) => {
                            log::error!("accept failed: {e}");
                            continue;
                        }
                    };
                    let reader = BufReader::new(stream.try_clone().map_err(io_err)?);
                    match self.serve_lines(reader, stream) {
                        Ok(s) => log::info!("connection closed: {} answered, {} rejected", s.answered, s.rejected),
                        Err(e) => log::warn!("connection dropped: {e}"),
                    }
                }
            }
        }
        Ok(())
    }
}
