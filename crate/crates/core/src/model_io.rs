//! Binary model files.
//!
//! Layout: `b"DPRM"`, `u32` format version, `u64` header length, a JSON
//! header with the architecture and provenance, then every parameter as
//! little-endian `f64` in [`Network::parameters`] order. All integers are
//! little-endian. A round trip is bit-exact.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerSpec, Network};

pub const MODEL_MAGIC: &[u8; 4] = b"DPRM";
pub const MODEL_VERSION: u32 = 1;
/// Upper bound on the JSON header, to reject garbage lengths early.
const MAX_HEADER: u64 = 16 << 20;

/// Where a model came from. Every field is optional so hand-built models
/// can be saved too.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Free-form description of the training schedule, usually JSON.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    parameter_shapes: Vec<Vec<usize>>,
    #[serde(default)]
    provenance: Provenance,
}

pub fn encode_model(net: &Network, provenance: &Provenance) -> Result<Vec<u8>> {
    let header = Header {
        input_shape: net.input_shape().to_vec(),
        layers: net.specs(),
        parameter_shapes: net.parameters().iter().map(|p| p.shape().to_vec()).collect(),
        provenance: provenance.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("model header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * net.parameter_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in net.parameters() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<(Network, Provenance)> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model format version {version}")));
    }
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b8, "header length")?;
    let hlen = u64::from_le_bytes(b8);
    if hlen > MAX_HEADER || hlen as usize > r.len() {
        return Err(Error::Format(format!("model header length {hlen} is out of range")));
    }
    let (json, rest) = r.split_at(hlen as usize);
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Format(format!("model header: {e}")))?;
    let mut net = Network::from_specs(&header.input_shape, &header.layers)?;
    let expected: Vec<Vec<usize>> = net.parameters().iter().map(|p| p.shape().to_vec()).collect();
    if expected != header.parameter_shapes {
        return Err(Error::Format(
            "parameter shapes in header do not match the architecture".into(),
        ));
    }
    let total = net.parameter_count();
    if rest.len() != 8 * total {
        return Err(Error::Format(format!(
            "expected {} parameter bytes, found {}",
            8 * total,
            rest.len()
        )));
    }
    let mut words = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for p in net.parameters_mut() {
        for (dst, src) in p.data_mut().iter_mut().zip(&mut words) {
            *dst = src;
        }
    }
    Ok((net, header.provenance))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated model file while reading {what}")))
}

pub fn save_model(path: &Path, net: &Network, provenance: &Provenance) -> Result<()> {
    let bytes = encode_model(net, provenance)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(Network, Provenance)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
