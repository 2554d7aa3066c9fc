//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "IRUN"  u32 version = 1
//! u32 field count, then per field: u16 name length, name, i64 value
//! u32 tensor count, then per tensor: u16 name length, name, u8 ndim,
//!     u32 dims[ndim], f32 payload
//! [optional training section]
//!     "OPTM" u64 step, u64 adam t, u32 tensor count, tensor records
//!     named "m/<param>" and "v/<param>"
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Parameter tensors are named `<layer>.weight` and `<layer>.bias`.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use super::{ModelConfig, ParamStore, STAGES};
use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"IRUN";
pub const VERSION: u32 = 1;
const TRAINING_TAG: &[u8; 4] = b"OPTM";

/// Adam moments and step counter, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: ParamStore<T>,
    pub second_moment: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            first_moment: ParamStore::zeros_like(config),
            second_moment: ParamStore::zeros_like(config),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState<T> {
    pub step: u64,
    pub adam: AdamState<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub training: Option<TrainingState<T>>,
}

fn config_fields(c: &ModelConfig) -> Vec<(&'static str, i64)> {
    let w = c.stage_widths;
    vec![
        ("input_channels", c.input_channels as i64),
        ("base_width", c.base_width as i64),
        ("stage_width_0", w[0] as i64),
        ("stage_width_1", w[1] as i64),
        ("stage_width_2", w[2] as i64),
        ("stage_width_3", w[3] as i64),
        ("kernel", c.kernel as i64),
        ("dilation_rate", c.dilation_rate as i64),
        ("sigma_min", i64::from(c.sigma_range.0)),
        ("sigma_max", i64::from(c.sigma_range.1)),
    ]
}

fn config_from_fields(fields: &IndexMap<String, i64>) -> Result<ModelConfig> {
    let expected = config_fields(&ModelConfig::default());
    for k in fields.keys() {
        if !expected.iter().any(|(n, _)| n == k) {
            return Err(Error::Checkpoint(format!("unknown config field '{k}'")));
        }
    }
    let get = |name: &str| -> Result<i64> {
        fields
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing config field '{name}'")))
    };
    let size = |name: &str| -> Result<usize> {
        usize::try_from(get(name)?)
            .map_err(|_| Error::Checkpoint(format!("config field '{name}' is negative")))
    };
    let sigma = |name: &str| -> Result<u32> {
        u32::try_from(get(name)?)
            .map_err(|_| Error::Checkpoint(format!("config field '{name}' out of range")))
    };
    let mut stage_widths = [0; STAGES];
    for (i, w) in stage_widths.iter_mut().enumerate() {
        *w = size(&format!("stage_width_{i}"))?;
    }
    let config = ModelConfig {
        input_channels: size("input_channels")?,
        base_width: size("base_width")?,
        stage_widths,
        kernel: size("kernel")?,
        dilation_rate: size("dilation_rate")?,
        sigma_range: (sigma("sigma_min")?, sigma("sigma_max")?),
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    Ok(config)
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn name(&mut self, s: &str) {
        let len = u16::try_from(s.len()).expect("name shorter than 64 KiB");
        self.buf.extend_from_slice(&len.to_le_bytes());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.name(name);
        self.buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }

    fn store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for p in store.iter() {
            self.tensor(&format!("{prefix}{}.weight", p.name), &p.weight);
            self.tensor(&format!("{prefix}{}.bias", p.name), &p.bias);
        }
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let fields = config_fields(&ckpt.config);
    w.u32(fields.len() as u32);
    for (name, value) in fields {
        w.name(name);
        w.buf.extend_from_slice(&value.to_le_bytes());
    }
    w.u32((2 * ckpt.params.len()) as u32);
    w.store("", &ckpt.params);
    if let Some(state) = &ckpt.training {
        w.buf.extend_from_slice(TRAINING_TAG);
        w.buf.extend_from_slice(&state.step.to_le_bytes());
        w.buf.extend_from_slice(&state.adam.t.to_le_bytes());
        let n = state.adam.first_moment.len() + state.adam.second_moment.len();
        w.u32((2 * n) as u32);
        w.store("m/", &state.adam.first_moment);
        w.store("v/", &state.adam.second_moment);
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16("name length")? as usize;
        let bytes = self.take(len, "name")?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.name()?;
        let ndim = self.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' too large")))?,
            "payload",
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        Ok((name, t))
    }

    fn tensors<T: Scalar>(&mut self) -> Result<IndexMap<String, Tensor<T>>> {
        let count = self.u32("tensor count")?;
        let mut out = IndexMap::new();
        for _ in 0..count {
            let (name, t) = self.tensor()?;
            if out.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
            }
        }
        Ok(out)
    }
}

fn assemble<T: Scalar>(
    config: &ModelConfig,
    prefix: &str,
    tensors: &mut IndexMap<String, Tensor<T>>,
) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for (name, spec) in config.layer_specs() {
        let mut fetch = |suffix: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let key = format!("{prefix}{name}.{suffix}");
            let t = tensors
                .shift_remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{key}'")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{key}' has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let weight = fetch("weight", &spec.weight_shape())?;
        let bias = fetch("bias", &[spec.out_channels])?;
        store.insert(LayerParams {
            name: name.clone(),
            weight,
            bias,
        });
    }
    Ok(store)
}

/// Parses and validates checkpoint bytes.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 12 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an IRUN checkpoint".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::Checkpoint("CRC mismatch: file is corrupt or truncated".into()));
    }
    let field_count = r.u32("field count")?;
    let mut fields = IndexMap::new();
    for _ in 0..field_count {
        let name = r.name()?;
        let value = r.u64("field value")? as i64;
        fields.insert(name, value);
    }
    let config = config_from_fields(&fields)?;

    let mut tensors = r.tensors::<T>()?;
    let params = assemble(&config, "", &mut tensors)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor '{extra}'")));
    }

    let training = if r.pos < body.len() {
        if r.take(4, "section tag")? != TRAINING_TAG {
            return Err(Error::Checkpoint("unknown trailing section".into()));
        }
        let step = r.u64("step")?;
        let t = r.u64("adam t")?;
        let mut tensors = r.tensors::<T>()?;
        let first_moment = assemble(&config, "m/", &mut tensors)?;
        let second_moment = assemble(&config, "v/", &mut tensors)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor '{extra}'")));
        }
        Some(TrainingState {
            step,
            adam: AdamState {
                first_moment,
                second_moment,
                t,
            },
        })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last section".into()));
    }
    Ok(Checkpoint {
        config,
        params,
        training,
    })
}

/// Writes through a temporary file and renames, so an existing checkpoint
/// at `path` is never left half-written.
pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ckpt);
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
