//! Checkpoint files.
//!
//! ```text
//! "TDET1"                       5 bytes
//! header length                 u32 LE
//! header                        JSON {kind, config, frozen}
//! tensor count                  u32 LE
//! tensors                       u32 rank, u32 dims, f64 payload (all LE)
//! ```
//!
//! Tensor order: every backbone layer (kernel, bias); then per scale, for a
//! temporal model the twelve ConvLSTM tensors (gates i, f, o, g; each input
//! kernel, hidden kernel, bias) followed by head kernel and head bias, for a
//! base model only head kernel and head bias.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BaseParams, ConvLayer, DetectorConfig, Head, ModelParams, TemporalScale};
use crate::convlstm::ConvLstmWeights;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const MAGIC: &[u8; 5] = b"TDET1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Base,
    Temporal,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    config: DetectorConfig,
    frozen: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Base(BaseParams),
    Temporal(ModelParams),
}

impl Checkpoint {
    pub fn kind(&self) -> Kind {
        match self {
            Checkpoint::Base(_) => Kind::Base,
            Checkpoint::Temporal(_) => Kind::Temporal,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let (config, backbone) = match ckpt {
        Checkpoint::Base(b) => (&b.config, &b.backbone),
        Checkpoint::Temporal(m) => (&m.config, &m.backbone),
    };
    let header = Header {
        kind: ckpt.kind(),
        config: config.clone(),
        frozen: backbone.iter().map(|l| l.frozen).collect(),
    };
    let json = serde_json::to_vec(&header)?;

    let mut tensors: Vec<&Tensor> = backbone.iter().flat_map(|l| [&l.kernel, &l.bias]).collect();
    match ckpt {
        Checkpoint::Base(b) => {
            for h in &b.heads {
                tensors.extend([&h.kernel, &h.bias]);
            }
        }
        Checkpoint::Temporal(m) => {
            for s in &m.scales {
                tensors.extend(s.convlstm.tensors());
                tensors.extend([&s.head.kernel, &s.head.bias]);
            }
        }
    }

    let io = |e: std::io::Error| bad(e.to_string());
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for t in tensors {
        write_tensor(w, t).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let io = |e: std::io::Error| bad(e.to_string());
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json)?;
    header.config.validate()?;
    if header.frozen.len() != header.config.layers.len() {
        return Err(bad("frozen flags do not match layer count"));
    }

    r.read_exact(&mut len).map_err(io)?;
    let count = u32::from_le_bytes(len) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(r).map_err(io)?);
    }
    let per_scale = match header.kind {
        Kind::Base => 2,
        Kind::Temporal => 14,
    };
    let expected = 2 * header.config.layers.len() + per_scale * header.config.scales.len();
    if count != expected {
        return Err(bad(format!("expected {expected} tensors, found {count}")));
    }

    let mut it = tensors.into_iter();
    let backbone = header
        .frozen
        .iter()
        .map(|&frozen| ConvLayer {
            kernel: it.next().unwrap(),
            bias: it.next().unwrap(),
            frozen,
        })
        .collect();
    let n_scales = header.config.scales.len();
    let ckpt = match header.kind {
        Kind::Base => {
            let heads = (0..n_scales)
                .map(|_| Head {
                    kernel: it.next().unwrap(),
                    bias: it.next().unwrap(),
                })
                .collect();
            let b = BaseParams {
                config: header.config,
                backbone,
                heads,
            };
            b.validate()?;
            Checkpoint::Base(b)
        }
        Kind::Temporal => {
            let mut scales = Vec::with_capacity(n_scales);
            for _ in 0..n_scales {
                let lstm: Vec<Tensor> = it.by_ref().take(12).collect();
                scales.push(TemporalScale {
                    convlstm: ConvLstmWeights::from_tensors(lstm)?,
                    head: Head {
                        kernel: it.next().unwrap(),
                        bias: it.next().unwrap(),
                    },
                });
            }
            let m = ModelParams {
                config: header.config,
                backbone,
                scales,
            };
            m.validate()?;
            Checkpoint::Temporal(m)
        }
    };
    Ok(ckpt)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, ckpt)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}
