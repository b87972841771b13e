use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::model::param_shapes;
use super::tensor::{DType, ParameterSet, Scalar, Tensor};
use super::ModelConfig;
use crate::error::{AmtError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AMTF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where a set of weights came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: u64,
    pub seed: u64,
    /// Free-form label, e.g. the dataset the weights were trained on.
    pub source_tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub meta: TrainingMeta,
    pub params: ParameterSet<T>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| AmtError::Argument(format!("{what} {v} does not fit the checkpoint format")))
}

/// Serializes a checkpoint. All integers and values are little-endian.
pub fn save_checkpoint<T: Scalar, W: Write>(checkpoint: &Checkpoint<T>, mut sink: W) -> Result<()> {
    let c = &checkpoint.config;
    if c.dtype != T::DTYPE {
        return Err(AmtError::Argument(format!(
            "config declares {:?} but parameters are {:?}",
            c.dtype,
            T::DTYPE
        )));
    }
    let mut out = Vec::with_capacity(64 + checkpoint.params.scalar_count() * T::DTYPE.size());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    for (name, v) in [
        ("input_bins", c.input_bins),
        ("unet_levels", c.unet_levels),
        ("base_channels", c.base_channels),
        ("kernel_size", c.kernel_size),
        ("rnn_hidden", c.rnn_hidden),
        ("output_pitches", c.output_pitches),
    ] {
        put_u32(&mut out, to_u32(v, name)?);
    }
    out.push(c.dtype.tag());
    put_u64(&mut out, checkpoint.meta.epoch);
    put_u64(&mut out, checkpoint.meta.seed);
    put_u32(&mut out, to_u32(checkpoint.meta.source_tag.len(), "tag length")?);
    out.extend_from_slice(checkpoint.meta.source_tag.as_bytes());
    put_u32(&mut out, to_u32(checkpoint.params.len(), "tensor count")?);
    for (name, tensor) in checkpoint.params.iter() {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        put_u32(&mut out, to_u32(tensor.dims().len(), "rank")?);
        for &d in tensor.dims() {
            put_u64(&mut out, d as u64);
        }
        for &v in tensor.values() {
            v.write_le(&mut out);
        }
    }
    sink.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(AmtError::Format(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| AmtError::Format(format!("{what} is not valid UTF-8")))
    }
}

fn read_header(bytes: &[u8]) -> Result<(Cursor<'_>, ModelConfig)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(AmtError::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(AmtError::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut fields = [0usize; 6];
    for f in fields.iter_mut() {
        *f = cur.u32("model config")? as usize;
    }
    let tag = cur.u8("dtype")?;
    let dtype = DType::from_tag(tag).ok_or_else(|| AmtError::Format(format!("unknown dtype tag {tag}")))?;
    let config = ModelConfig {
        input_bins: fields[0],
        unet_levels: fields[1],
        base_channels: fields[2],
        kernel_size: fields[3],
        rnn_hidden: fields[4],
        output_pitches: fields[5],
        dtype,
    };
    config
        .validate()
        .map_err(|e| AmtError::Validation(format!("checkpoint config is invalid: {e}")))?;
    Ok((cur, config))
}

/// Reads just enough of a checkpoint to report its model config and dtype.
pub fn peek_checkpoint_dtype(bytes: &[u8]) -> Result<(ModelConfig, DType)> {
    let (_, config) = read_header(bytes)?;
    Ok((config, config.dtype))
}

/// Parses a checkpoint whose values are stored as `T`.
///
/// Fails with a validation error if the tensors do not match the shapes the
/// stored config implies.
pub fn load_checkpoint<T: Scalar, R: Read>(mut source: R) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let (mut cur, config) = read_header(&bytes)?;
    if config.dtype != T::DTYPE {
        return Err(AmtError::Validation(format!(
            "checkpoint stores {:?} values, {:?} requested",
            config.dtype,
            T::DTYPE
        )));
    }
    let epoch = cur.u64("epoch")?;
    let seed = cur.u64("seed")?;
    let tag_len = cur.u32("tag length")? as usize;
    let source_tag = cur.string(tag_len, "source tag")?;
    let count = cur.u32("tensor count")? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = cur.u32("tensor name length")? as usize;
        let name = cur.string(name_len, "tensor name")?;
        let tag = cur.u8("tensor dtype")?;
        if tag != T::DTYPE.tag() {
            return Err(AmtError::Format(format!("tensor {name} has dtype tag {tag}")));
        }
        let rank = cur.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(AmtError::Format(format!("tensor {name} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut n: u64 = 1;
        for _ in 0..rank {
            let d = cur.u64("tensor dims")?;
            n = n
                .checked_mul(d)
                .ok_or_else(|| AmtError::Format(format!("tensor {name} is too large")))?;
            dims.push(d as usize);
        }
        let size = T::DTYPE.size();
        let raw_len = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(size))
            .ok_or_else(|| AmtError::Format(format!("tensor {name} is too large")))?;
        let raw = cur.take(raw_len, &format!("values of {name}"))?;
        let values = raw.chunks_exact(size).map(T::read_le).collect();
        params
            .insert(name, Tensor::new(dims, values)?)
            .map_err(|e| AmtError::Format(e.to_string()))?;
    }
    if cur.pos != bytes.len() {
        return Err(AmtError::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - cur.pos
        )));
    }
    let problems = params.shape_mismatches(&param_shapes(&config));
    if !problems.is_empty() {
        return Err(AmtError::Validation(format!(
            "checkpoint tensors do not match its config: {}",
            problems.join("; ")
        )));
    }
    Ok(Checkpoint {
        config,
        meta: TrainingMeta {
            epoch,
            seed,
            source_tag,
        },
        params,
    })
}
