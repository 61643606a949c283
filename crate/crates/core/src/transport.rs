//! Message transports for the one-shot round. Every payload crosses the
//! transport as bytes in the real wire formats.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::wire::{Reader, Writer};

pub const ENVELOPE_MAGIC: &[u8; 8] = b"TOFAENV1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Visual,
    Text,
}

impl Pipeline {
    fn dir_name(self) -> &'static str {
        match self {
            Pipeline::Visual => "visual",
            Pipeline::Text => "text",
        }
    }
}

/// Message tallies recorded by a transport.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TransportCounts {
    pub visual_uploads: usize,
    pub text_uploads: usize,
    pub broadcasts: usize,
    pub bytes_up: usize,
    pub bytes_down: usize,
}

pub trait Transport: Send + Sync {
    fn upload(&self, client: u32, pipeline: Pipeline, payload: Vec<u8>) -> Result<()>;
    /// All uploads of a pipeline, ordered by client id.
    fn collect(&self, pipeline: Pipeline) -> Result<Vec<(u32, Vec<u8>)>>;
    fn broadcast(&self, payload: Vec<u8>) -> Result<()>;
    fn receive_broadcast(&self) -> Result<Vec<u8>>;
    fn counts(&self) -> TransportCounts;
}

#[derive(Default)]
struct BusState {
    uploads: BTreeMap<(Pipeline, u32), Vec<u8>>,
    broadcast: Option<Vec<u8>>,
    counts: TransportCounts,
}

fn tally(counts: &mut TransportCounts, pipeline: Pipeline, bytes: usize) {
    match pipeline {
        Pipeline::Visual => counts.visual_uploads += 1,
        Pipeline::Text => counts.text_uploads += 1,
    }
    counts.bytes_up += bytes;
}

/// In-process message bus.
#[derive(Default)]
pub struct InProcessBus {
    state: Mutex<BusState>,
}

impl InProcessBus {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for InProcessBus {
    fn upload(&self, client: u32, pipeline: Pipeline, payload: Vec<u8>) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        tally(&mut st.counts, pipeline, payload.len());
        if st.uploads.insert((pipeline, client), payload).is_some() {
            return Err(Error::Validation(format!(
                "client {client} uploaded twice on the {} pipeline",
                pipeline.dir_name()
            )));
        }
        Ok(())
    }

    fn collect(&self, pipeline: Pipeline) -> Result<Vec<(u32, Vec<u8>)>> {
        let st = self.state.lock().unwrap();
        Ok(st
            .uploads
            .iter()
            .filter(|((p, _), _)| *p == pipeline)
            .map(|((_, c), b)| (*c, b.clone()))
            .collect())
    }

    fn broadcast(&self, payload: Vec<u8>) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        st.counts.broadcasts += 1;
        st.counts.bytes_down += payload.len();
        if st.broadcast.replace(payload).is_some() {
            return Err(Error::Validation("server broadcast twice".into()));
        }
        Ok(())
    }

    fn receive_broadcast(&self) -> Result<Vec<u8>> {
        let st = self.state.lock().unwrap();
        st.broadcast
            .clone()
            .ok_or_else(|| Error::Validation("no broadcast has been sent".into()))
    }

    fn counts(&self) -> TransportCounts {
        self.state.lock().unwrap().counts.clone()
    }
}

/// Directory-backed transport for runs split across processes:
/// `up/<pipeline>/client_<id>.bin` and `down/broadcast.bin`.
pub struct DirTransport {
    root: PathBuf,
    counts: Mutex<TransportCounts>,
}

impl DirTransport {
    pub fn new(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        for sub in ["up/visual", "up/text", "down"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(DirTransport {
            root,
            counts: Mutex::new(TransportCounts::default()),
        })
    }

    fn upload_path(&self, client: u32, pipeline: Pipeline) -> PathBuf {
        self.root
            .join("up")
            .join(pipeline.dir_name())
            .join(format!("client_{client:05}.bin"))
    }
}

impl Transport for DirTransport {
    fn upload(&self, client: u32, pipeline: Pipeline, payload: Vec<u8>) -> Result<()> {
        let path = self.upload_path(client, pipeline);
        if path.exists() {
            return Err(Error::Validation(format!(
                "client {client} uploaded twice on the {} pipeline",
                pipeline.dir_name()
            )));
        }
        tally(&mut self.counts.lock().unwrap(), pipeline, payload.len());
        fs::write(&path, payload).map_err(|e| Error::io(&path, e))
    }

    fn collect(&self, pipeline: Pipeline) -> Result<Vec<(u32, Vec<u8>)>> {
        let dir = self.root.join("up").join(pipeline.dir_name());
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("client_"))
                .and_then(|s| s.parse::<u32>().ok());
            if let Some(id) = id {
                out.push((id, fs::read(&path).map_err(|e| Error::io(&path, e))?));
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn broadcast(&self, payload: Vec<u8>) -> Result<()> {
        let path = self.root.join("down/broadcast.bin");
        if path.exists() {
            return Err(Error::Validation("server broadcast twice".into()));
        }
        {
            let mut c = self.counts.lock().unwrap();
            c.broadcasts += 1;
            c.bytes_down += payload.len();
        }
        fs::write(&path, payload).map_err(|e| Error::io(&path, e))
    }

    fn receive_broadcast(&self) -> Result<Vec<u8>> {
        let path = self.root.join("down/broadcast.bin");
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    fn counts(&self) -> TransportCounts {
        self.counts.lock().unwrap().clone()
    }
}

/// A message made of tagged parts: magic `TOFAENV1`, `u32` part count, then
/// per part a 4-byte tag, `u64` length and the payload.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Envelope {
    parts: Vec<([u8; 4], Vec<u8>)>,
}

impl Envelope {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, tag: &[u8; 4], payload: Vec<u8>) -> Self {
        self.parts.push((*tag, payload));
        self
    }

    pub fn get(&self, tag: &[u8; 4]) -> Option<&[u8]> {
        self.parts.iter().find(|(t, _)| t == tag).map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, tag: &[u8; 4]) -> Result<&[u8]> {
        self.get(tag).ok_or_else(|| {
            Error::Format(format!("envelope lacks part {:?}", String::from_utf8_lossy(tag)))
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(ENVELOPE_MAGIC);
        w.u32(self.parts.len() as u32);
        for (tag, payload) in &self.parts {
            w.bytes(tag);
            w.u64(payload.len() as u64);
            w.bytes(payload);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, ENVELOPE_MAGIC)?;
        let n = r.u32()?;
        let mut parts = Vec::new();
        for _ in 0..n {
            let tag: [u8; 4] = r.bytes(4)?.try_into().unwrap();
            let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("part too large".into()))?;
            parts.push((tag, r.bytes(len)?.to_vec()));
        }
        r.expect_remaining(0)?;
        Ok(Envelope { parts })
    }
}
