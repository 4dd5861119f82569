//! Binary checkpoint format.
//!
//! ```text
//! "CTHD"                      magic
//! u32 LE                      format version
//! u32 LE + bytes              UTF-8 JSON header
//! repeated until EOF:
//!   u32 LE + bytes            parameter name
//!   u32 LE rank, u32 LE dims  shape
//!   f32 LE × product(dims)    values
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::ArchConfig;
use super::{Model, ModelKind};
use crate::autodiff::{ParamStore, Tensor};
use crate::cohort::NormalizationStats;
use crate::diffusion::{DiffusionConfig, PairingPolicy};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CTHD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer_steps: usize,
    pub n_pairs: usize,
    pub pairing: PairingPolicy,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model_kind: ModelKind,
    pub arch: ArchConfig,
    pub normalization: NormalizationStats,
    pub sigma_data: f64,
    pub diffusion: DiffusionConfig,
    pub training: TrainingMeta,
    pub seed: u64,
}

impl CheckpointHeader {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.normalization.validate()?;
        self.diffusion.validate()?;
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::invalid("sigma_data", "must be finite and > 0"));
        }
        let want_in = match self.model_kind {
            ModelKind::Diffusion => 8,
            ModelKind::UnetAttn | ModelKind::UnetPlain => 7,
        };
        let want_attn = self.model_kind != ModelKind::UnetPlain;
        let want_emb = self.model_kind == ModelKind::Diffusion;
        if self.arch.in_channels != want_in || self.arch.attention != want_attn || (self.arch.emb_dim > 0) != want_emb {
            return Err(Error::Checkpoint(format!(
                "architecture does not match model kind {}",
                self.model_kind.as_str()
            )));
        }
        Ok(())
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + 4 * model.params.count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&model.header)?;
    put_u32(&mut buf, header.len())?;
    buf.extend_from_slice(&header);
    for (name, t) in model.params.iter() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = r.u32("header length")?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)?;
    let mut params = ParamStore::new();
    while r.pos < bytes.len() {
        let nlen = r.u32("parameter name length")?;
        let name = std::str::from_utf8(r.take(nlen, "parameter name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("shape")).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(4 * len, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    let model = Model { header, params };
    model.validate()?;
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
