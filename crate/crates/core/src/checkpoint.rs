//! Checkpoint container: a JSON header (configuration echo, iteration,
//! optimizer metadata, array index) followed by raw little-endian `f64`
//! payloads. Save and load round-trip bit-exactly, optimizer state included.

use crate::adam::Adam;
use crate::corpus::Normalization;
use crate::error::{Error, Result};
use crate::networks::{ModelConfig, ParamEntry, ParamKind, ParamStore};
use crate::training::TrainConfig;
use ndarray::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DAKMCKP1";

#[derive(Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub normalization: Normalization,
    pub iteration: u64,
    pub params: ParamStore,
    pub adam_gen: Adam,
    pub adam_disc: Adam,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamGenM,
    AdamGenV,
    AdamDiscM,
    AdamDiscV,
}

#[derive(Serialize, Deserialize)]
struct ArrayDesc {
    name: String,
    group: Group,
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<ParamKind>,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    normalization: Normalization,
    iteration: u64,
    adam_gen: AdamMeta,
    adam_disc: AdamMeta,
    arrays: Vec<ArrayDesc>,
}

fn adam_meta(a: &Adam) -> AdamMeta {
    AdamMeta {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        step: a.step,
    }
}

fn adam_from(meta: &AdamMeta) -> Adam {
    Adam {
        lr: meta.lr,
        beta1: meta.beta1,
        beta2: meta.beta2,
        eps: meta.eps,
        step: meta.step,
        m: BTreeMap::new(),
        v: BTreeMap::new(),
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: &str, group: Group, kind: Option<ParamKind>, value: &ArrayD<f64>| {
            arrays.push(ArrayDesc {
                name: name.to_string(),
                group,
                kind,
                shape: value.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend(value.as_standard_layout().iter());
        };
        for (name, entry) in self.params.iter() {
            push(name, Group::Param, Some(entry.kind), &entry.value);
        }
        for (name, v) in &self.adam_gen.m {
            push(name, Group::AdamGenM, None, v);
        }
        for (name, v) in &self.adam_gen.v {
            push(name, Group::AdamGenV, None, v);
        }
        for (name, v) in &self.adam_disc.m {
            push(name, Group::AdamDiscM, None, v);
        }
        for (name, v) in &self.adam_disc.v {
            push(name, Group::AdamDiscV, None, v);
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            normalization: self.normalization.clone(),
            iteration: self.iteration,
            adam_gen: adam_meta(&self.adam_gen),
            adam_disc: adam_meta(&self.adam_disc),
            arrays,
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| Error::Metadata(e.to_string()))?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for v in payload {
            file.write_all(&v.to_le_bytes())?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return Err(Error::CorruptCheckpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let payload = &bytes[16 + hlen..];
        if payload.len() % 8 != 0 {
            return Err(Error::CorruptCheckpoint("payload not f64-aligned".into()));
        }
        let words: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut params = ParamStore::new();
        let mut adam_gen = adam_from(&header.adam_gen);
        let mut adam_disc = adam_from(&header.adam_disc);
        for desc in &header.arrays {
            let len: usize = desc.shape.iter().product();
            if desc.offset + len > words.len() {
                return Err(Error::CorruptCheckpoint(format!(
                    "array {} overruns the payload",
                    desc.name
                )));
            }
            let value = ArrayD::from_shape_vec(
                IxDyn(&desc.shape),
                words[desc.offset..desc.offset + len].to_vec(),
            )
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
            match desc.group {
                Group::Param => {
                    let kind = desc.kind.ok_or_else(|| {
                        Error::CorruptCheckpoint(format!("parameter {} lacks a kind", desc.name))
                    })?;
                    params.insert(desc.name.clone(), ParamEntry { value, kind });
                }
                Group::AdamGenM => {
                    adam_gen.m.insert(desc.name.clone(), value);
                }
                Group::AdamGenV => {
                    adam_gen.v.insert(desc.name.clone(), value);
                }
                Group::AdamDiscM => {
                    adam_disc.m.insert(desc.name.clone(), value);
                }
                Group::AdamDiscV => {
                    adam_disc.v.insert(desc.name.clone(), value);
                }
            }
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            normalization: header.normalization,
            iteration: header.iteration,
            params,
            adam_gen,
            adam_disc,
        })
    }
}
