//! Portable binary checkpoints for dense networks.
//!
//! Layout (all integers and floats little-endian):
//!
//! | field            | type                                   |
//! |------------------|----------------------------------------|
//! | magic            | `b"IVDL"`                              |
//! | version          | `u16` (currently 1)                    |
//! | precision        | `u8`: 0 = f32, 1 = f64                 |
//! | dim count        | `u32`                                  |
//! | dims             | `u32` x count: input, hidden.., output |
//! | hidden act. id   | `u8`: 0 = relu, 1 = tanh               |
//! | output act. flag | `u8`: 0 = affine, 1 = hidden act.      |
//! | layers           | per layer: weights (row-major, out x in) then bias |

use std::fs;
use std::path::Path;

use super::{Activation, Mlp, MlpSpec, NnError};

pub const MAGIC: &[u8; 4] = b"IVDL";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn id(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }
}

pub fn encode(net: &Mlp, precision: Precision) -> Vec<u8> {
    let spec = net.spec();
    let dims = spec.dims();
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + 8 * net.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(precision.id());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    out.push(spec.hidden_activation.id());
    out.push(u8::from(net.activates_output()));
    for &p in net.params() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(p as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&p.to_le_bytes()),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(NnError::Malformed(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, NnError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, NnError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Mlp, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(NnError::Malformed("bad magic bytes".into()));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(NnError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let precision = match r.u8("precision")? {
        0 => Precision::F32,
        1 => Precision::F64,
        other => return Err(NnError::Malformed(format!("unknown precision flag {other}"))),
    };
    let count = r.u32("dim count")? as usize;
    if !(2..=64).contains(&count) {
        return Err(NnError::Malformed(format!("implausible layer count {count}")));
    }
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        dims.push(r.u32("dims")? as usize);
    }
    let act_id = r.u8("activation")?;
    let activation =
        Activation::from_id(act_id).ok_or_else(|| NnError::Malformed(format!("unknown activation id {act_id}")))?;
    let activate_output = match r.u8("output activation")? {
        0 => false,
        1 => true,
        other => return Err(NnError::Malformed(format!("unknown output activation flag {other}"))),
    };
    let spec = MlpSpec {
        input_dim: dims[0],
        hidden: dims[1..count - 1].to_vec(),
        output_dim: dims[count - 1],
        hidden_activation: activation,
    };
    spec.validate().map_err(|e| NnError::Malformed(e.to_string()))?;
    let n: usize = spec.layer_shapes().iter().map(|&(i, o)| i * o + o).sum();
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let body = r.take(n * width, "parameters")?;
    if r.pos != bytes.len() {
        return Err(NnError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params: Vec<f64> = match precision {
        Precision::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Precision::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    if params.iter().any(|p| !p.is_finite()) {
        return Err(NnError::Malformed("non-finite parameter".into()));
    }
    let net = Mlp::from_params(spec, params)?;
    Ok(if activate_output { net.with_output_activation() } else { net })
}

pub fn save_checkpoint(net: &Mlp, path: impl AsRef<Path>, precision: Precision) -> Result<(), NnError> {
    fs::write(path, encode(net, precision))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Mlp, NnError> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless it has exactly the given shape.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &MlpSpec) -> Result<Mlp, NnError> {
    let net = load_checkpoint(path)?;
    if net.spec() != expected {
        return Err(NnError::ShapeMismatch {
            expected: expected.dims(),
            found: net.spec().dims(),
        });
    }
    Ok(net)
}
