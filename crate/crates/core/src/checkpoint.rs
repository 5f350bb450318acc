//! Binary checkpoint container.
//!
//! Layout: the magic `CFCK`, a `u32` format version, a `u64` header length,
//! a JSON header (run config, scaler, epoch, Adam step, RNG state and a
//! tensor directory), then the raw little-endian `f64` data of every
//! directory entry in order. All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Scaler;
use crate::error::{Error, Result};
use crate::experiment::RunConfig;
use crate::model::CoifNetParams;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::AdamState;

const MAGIC: &[u8; 4] = b"CFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    section: Section,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    scaler: Scaler,
    epoch: usize,
    adam_step: u64,
    rng: [u64; 4],
    tensors: Vec<Entry>,
}

/// Everything needed to evaluate or resume a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub scaler: Scaler,
    pub epoch: usize,
    pub params: CoifNetParams,
    pub optimizer: AdamState,
    pub rng: Rng,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Ingest(format!("corrupt checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<&Tensor> = Vec::new();
        let sections = [
            (Section::Param, self.params.iter().collect::<Vec<_>>()),
            (Section::AdamM, self.optimizer.m.iter().collect()),
            (Section::AdamV, self.optimizer.v.iter().collect()),
        ];
        for (section, items) in sections {
            for (name, t) in items {
                tensors.push(Entry {
                    section,
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                });
                blobs.push(t);
            }
        }
        let header = Header {
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            epoch: self.epoch,
            adam_step: self.optimizer.step,
            rng: self.rng.state(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf =
            Vec::with_capacity(16 + json.len() + blobs.iter().map(|t| t.len() * 8).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in blobs {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
        if buf.len() < 16 || &buf[..4] != MAGIC {
            return Err(bad("missing CFCK magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
        let body = &buf[16..];
        if header_len > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
        let mut rest = &body[header_len..];
        let mut maps: [BTreeMap<String, Tensor>; 3] = Default::default();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if rest.len() < n * 8 {
                return Err(bad(format!("truncated data for {}", entry.name)));
            }
            let data = rest[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[n * 8..];
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
            let slot = match entry.section {
                Section::Param => 0,
                Section::AdamM => 1,
                Section::AdamV => 2,
            };
            if maps[slot].insert(entry.name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor {}", entry.name)));
            }
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let [params, m, v] = maps;
        let params = CoifNetParams::from_map(&header.config.model, params)
            .map_err(|e| bad(e.to_string()))?;
        for moments in [&m, &v] {
            let same = moments.len() == params.iter().count()
                && params
                    .iter()
                    .all(|(n, t)| moments.get(n).is_some_and(|x| x.shape() == t.shape()));
            if !same {
                return Err(bad("optimizer moments do not match the parameters"));
            }
        }
        Ok(Checkpoint {
            config: header.config,
            scaler: header.scaler,
            epoch: header.epoch,
            params,
            optimizer: AdamState {
                step: header.adam_step,
                m,
                v,
            },
            rng: Rng::from_state(header.rng),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let buf = std::fs::read(path)
            .map_err(|e| Error::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::decode(&buf)
    }
}
