//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `MVOCCKP1`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then raw little-endian `f64` parameter blocks. The
//! header lists every block's name, byte offset (from the start of the block
//! section) and byte length.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Layer, LayerSpec, Network, NnetError, Tensor};

const MAGIC: &[u8; 8] = b"MVOCCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    body: Value,
    blocks: Vec<BlockInfo>,
}

/// Decoded checkpoint: typed body plus named blocks in file order.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub body: Value,
    pub blocks: Vec<(String, Vec<f64>)>,
}

pub fn encode(kind: &str, body: Value, blocks: &[(String, &[f64])]) -> Result<Vec<u8>, NnetError> {
    let mut infos = Vec::with_capacity(blocks.len());
    let mut offset = 0u64;
    for (name, data) in blocks {
        let length = (data.len() * 8) as u64;
        infos.push(BlockInfo {
            name: name.clone(),
            offset,
            length,
        });
        offset += length;
    }
    let header = serde_json::to_vec(&Header {
        kind: kind.to_string(),
        body,
        blocks: infos,
    })
    .map_err(|e| NnetError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, data) in blocks {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container, NnetError> {
    let bad = |m: &str| NnetError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| NnetError::Checkpoint(e.to_string()))?;
    let data = &bytes[data_start..];
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for b in &header.blocks {
        let (start, len) = (b.offset as usize, b.length as usize);
        if len % 8 != 0 || start.checked_add(len).is_none_or(|e| e > data.len()) {
            return Err(bad(&format!("block {} lies outside the file", b.name)));
        }
        let values = data[start..start + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.push((b.name.clone(), values));
    }
    Ok(Container {
        kind: header.kind,
        body: header.body,
        blocks,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkBody {
    layers: Vec<LayerSpec>,
    seed: u64,
    metadata: Value,
}

/// Parameter blocks of a network, named `"{prefix}layer{i}.{weight|bias}"`.
pub fn network_blocks<'a>(net: &'a Network, prefix: &str) -> Vec<(String, &'a [f64])> {
    let mut out = Vec::new();
    for (i, l) in net.layers().iter().enumerate() {
        for (j, p) in l.params.iter().enumerate() {
            let name = if j == 0 { "weight" } else { "bias" };
            out.push((format!("{prefix}layer{i}.{name}"), p.data()));
        }
    }
    out
}

/// Rebuilds a network from specs, consuming blocks in order.
pub fn network_from_blocks(
    specs: &[LayerSpec],
    seed: u64,
    blocks: &mut impl Iterator<Item = (String, Vec<f64>)>,
) -> Result<Network, NnetError> {
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut params = Vec::new();
        for shape in spec.param_shapes() {
            let (name, data) = blocks
                .next()
                .ok_or_else(|| NnetError::Checkpoint("missing parameter block".into()))?;
            params.push(
                Tensor::new(shape, data)
                    .map_err(|e| NnetError::Checkpoint(format!("block {name}: {e}")))?,
            );
        }
        layers.push(Layer {
            spec: *spec,
            params,
        });
    }
    Network::from_layers(layers, seed)
}

impl Network {
    pub fn to_checkpoint_bytes(&self, metadata: Value) -> Result<Vec<u8>, NnetError> {
        let body = serde_json::to_value(NetworkBody {
            layers: self.specs(),
            seed: self.seed(),
            metadata,
        })
        .map_err(|e| NnetError::Checkpoint(e.to_string()))?;
        encode("network", body, &network_blocks(self, ""))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Network, Value), NnetError> {
        let c = decode(bytes)?;
        if c.kind != "network" {
            return Err(NnetError::Checkpoint(format!(
                "expected a network checkpoint, found {}",
                c.kind
            )));
        }
        let body: NetworkBody =
            serde_json::from_value(c.body).map_err(|e| NnetError::Checkpoint(e.to_string()))?;
        let mut blocks = c.blocks.into_iter();
        let net = network_from_blocks(&body.layers, body.seed, &mut blocks)?;
        Ok((net, body.metadata))
    }

    pub fn save(&self, path: &Path, metadata: Value) -> crate::Result<()> {
        write_file(path, &self.to_checkpoint_bytes(metadata)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<(Network, Value)> {
        Ok(Self::from_checkpoint_bytes(&fs::read(path)?)?)
    }
}
