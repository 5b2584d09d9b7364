//! Binary named-tensor containers.
//!
//! ```text
//! magic[4] | u32 version | u32 header_len | header (canonical JSON)
//! | u32 tensor_count | per tensor:
//!   u16 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 rank
//!   | u32 dims[rank] | f32 payload (little-endian)
//! ```
//!
//! Checkpoints use magic `DN3D`; 2D interchange weights use `DNWX`.
//! All integers are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ClipSpec;
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::model::{Model, ModelConfig};
use crate::optim::{EarlyStop, Sgd, SgdConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DN3D";
pub const INTERCHANGE_MAGIC: [u8; 4] = *b"DNWX";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MAX_RANK: usize = 5;

/// Optimizer velocities are stored next to the weights under this prefix.
pub const VELOCITY_PREFIX: &str = "velocity/";

pub type NamedTensors = Vec<(String, Tensor)>;

fn canonical_json<S: Serialize>(value: &S) -> Result<String> {
    // Round-tripping through `Value` sorts object keys.
    let v = serde_json::to_value(value).map_err(|e| Error::Malformed(format!("header: {e}")))?;
    serde_json::to_string(&v).map_err(|e| Error::Malformed(format!("header: {e}")))
}

pub fn encode_container(magic: [u8; 4], header: &str, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let payload: usize = tensors.iter().map(|(n, t)| 8 + n.len() + 4 * (t.rank() + t.len())).sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(header.len()).map_err(|_| Error::Malformed("header too long".into()))?.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Malformed(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a container. `check_dims` sees each tensor's name and declared
/// dims before its payload is read.
pub fn decode_container(
    bytes: &[u8],
    magic: [u8; 4],
    mut check_dims: impl FnMut(&str, &[usize]) -> Result<()>,
) -> Result<(String, NamedTensors)> {
    let mut r = Reader { bytes, pos: 0 };
    let found: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic {
            found,
            expected: magic,
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(header_len, "header")?)
        .map_err(|_| Error::Malformed("header is not UTF-8".into()))?
        .to_string();
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Malformed(format!("tensor #{i} name is not UTF-8")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Malformed(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Malformed(format!("tensor `{name}` has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        check_dims(&name, &dims)?;
        if dims.contains(&0) {
            return Err(Error::Malformed(format!("tensor `{name}` has a zero dim {dims:?}")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Truncated(format!("tensor `{name}` dims {dims:?} exceed the file")))?;
        let raw = r.take(n, &format!("payload of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((header, tensors))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Everything besides tensors needed to resume or audit a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
    pub best_val_loss: Option<f64>,
    pub best_val_accuracy: Option<f64>,
    pub early_stop: Option<EarlyStop>,
    pub sgd: Option<SgdConfig>,
    /// Preprocessing the weights were trained with.
    pub clip: Option<ClipSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Parameters and buffers, in model visiting order.
    pub tensors: NamedTensors,
    /// Optimizer velocities keyed by parameter name (without prefix).
    pub velocities: NamedTensors,
}

impl Checkpoint {
    pub fn capture(model: &Model, sgd: Option<&Sgd>, mut header: CheckpointHeader) -> Self {
        header.model = model.config().clone();
        if let Some(s) = sgd {
            header.step = s.step;
            header.sgd = Some(s.config);
        }
        Self {
            header,
            tensors: model.named_tensors(),
            velocities: sgd
                .map(|s| s.velocities().iter().map(|(k, v)| (k.clone(), v.clone())).collect())
                .unwrap_or_default(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = canonical_json(&self.header)?;
        let mut all = self.tensors.clone();
        all.extend(
            self.velocities
                .iter()
                .map(|(n, t)| (format!("{VELOCITY_PREFIX}{n}"), t.clone())),
        );
        encode_container(CHECKPOINT_MAGIC, &header, &all)
    }

    /// Parses and validates a checkpoint: every tensor must exist in the
    /// model rebuilt from the embedded config with the same shape, and every
    /// model tensor must be present.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        // Peek the header first so tensor dims can be checked as they stream.
        let found: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if found != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                found,
                expected: CHECKPOINT_MAGIC,
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = r.u32("header length")? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::Malformed(format!("header: {e}")))?;
        header.model.validate()?;
        let expected: HashMap<String, (Vec<usize>, bool)> = shapes_for(&header.model)?
            .into_iter()
            .map(|(n, d, t)| (n, (d, t)))
            .collect();

        let (_, all) = decode_container(bytes, CHECKPOINT_MAGIC, |name, dims| {
            let (key, velocity) = match name.strip_prefix(VELOCITY_PREFIX) {
                Some(k) => (k, true),
                None => (name, false),
            };
            match expected.get(key) {
                None => Err(Error::Malformed(format!("unexpected tensor `{name}`"))),
                Some((_, false)) if velocity => {
                    Err(Error::Malformed(format!("velocity for non-trainable `{key}`")))
                }
                Some((want, _)) if want.as_slice() != dims => Err(Error::TensorShapeMismatch {
                    name: name.to_string(),
                    found: dims.to_vec(),
                    expected: want.clone(),
                }),
                Some(_) => Ok(()),
            }
        })?;
        let mut tensors = Vec::new();
        let mut velocities = Vec::new();
        for (name, t) in all {
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(k) => velocities.push((k.to_string(), t)),
                None => tensors.push((name, t)),
            }
        }
        if let Some(missing) = expected.keys().find(|k| !tensors.iter().any(|(n, _)| n == *k)) {
            return Err(Error::Malformed(format!("missing tensor `{missing}`")));
        }
        Ok(Self {
            header,
            tensors,
            velocities,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Rebuilds the network described by the header with the stored weights.
    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::build(&self.header.model, self.header.seed)?;
        model.load_named(&self.tensors)?;
        Ok(model)
    }

    /// Restores velocities and the step counter into `sgd`.
    pub fn restore_optimizer(&self, sgd: &mut Sgd) {
        sgd.step = self.header.step;
        for (n, v) in &self.velocities {
            sgd.set_velocity(n.clone(), v.clone());
        }
    }
}

/// Expected tensor names and shapes for `config`, without initializing
/// weights twice for the caller.
fn shapes_for(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>, bool)>> {
    let model = Model::<f32>::build(config, 0)?;
    let mut out = Vec::new();
    model.visit_ref("", &mut |n, t, trainable| out.push((n.to_string(), t.dims().to_vec(), trainable)));
    Ok(out)
}

pub fn save_interchange(path: &Path, header: &serde_json::Value, tensors: &[(String, Tensor)]) -> Result<()> {
    write_file(path, &encode_container(INTERCHANGE_MAGIC, &canonical_json(header)?, tensors)?)
}

/// Loads 2D interchange weights. The header is returned as parsed JSON
/// and tensor shapes are checked later, by inflation.
pub fn load_interchange(path: &Path) -> Result<(serde_json::Value, NamedTensors)> {
    let bytes = read_file(path)?;
    let (header, tensors) = decode_container(&bytes, INTERCHANGE_MAGIC, |_, _| Ok(()))?;
    let header = if header.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_str(&header).map_err(|e| Error::Malformed(format!("header: {e}")))?
    };
    Ok((header, tensors))
}
