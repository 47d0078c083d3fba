//! Binary checkpoints: a magic string followed by named little-endian `f64` tensors.
//!
//! Layout: `GSDCKPT1`, a `u32` record count, then per record a `u32` name length, the
//! UTF-8 name, a `u32` rank, `rank` `u32` dimensions and the row-major payload. The
//! encoder configuration travels as the `__config__` record; an optional evaluation
//! basis travels as `gsd.basis`, `gsd.anchor` and `gsd.requested_k`.

use std::path::Path;

use crate::basis::SemanticBasis;
use crate::encoder::{EncoderConfig, EncoderModel, EncoderParams};
use crate::error::{GsdError, Result};
use crate::linalg::DenseMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GSDCKPT1";
const CONFIG_RECORD: &str = "__config__";

/// A model plus, optionally, the basis to use for frozen-basis evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub basis: Option<SemanticBasis>,
}

struct Record {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| GsdError::Validation(format!("{v} does not fit a 32-bit field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len())?;
    for &d in dims {
        put_u32(out, d)?;
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn config_payload(c: &EncoderConfig) -> Vec<f64> {
    vec![
        c.image_size as f64,
        c.patch_size as f64,
        c.dim as f64,
        c.heads as f64,
        c.depth as f64,
        c.mlp_ratio,
    ]
}

impl Checkpoint {
    pub fn new(model: EncoderModel, basis: Option<SemanticBasis>) -> Self {
        Self { model, basis }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.model.params.named();
        let extra = if self.basis.is_some() { 3 } else { 0 };
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, 1 + named.len() + extra)?;
        put_record(&mut out, CONFIG_RECORD, &[6], &config_payload(&self.model.config))?;
        for (name, t) in &named {
            put_record(&mut out, name, &[t.rows(), t.cols()], t.data())?;
        }
        if let Some(b) = &self.basis {
            put_record(&mut out, "gsd.basis", &[b.u().rows(), b.u().cols()], b.u().data())?;
            put_record(&mut out, "gsd.anchor", &[b.dim()], b.anchor())?;
            put_record(&mut out, "gsd.requested_k", &[], &[b.requested_k() as f64])?;
        }
        Ok(out)
    }

    /// Parses a checkpoint; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: String| GsdError::format(origin, m);
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).map_err(&bad)? != CHECKPOINT_MAGIC {
            return Err(bad("bad checkpoint magic".into()));
        }
        let count = cur.u32().map_err(&bad)?;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = cur.u32().map_err(&bad)?;
            let name = std::str::from_utf8(cur.take(len).map_err(&bad)?)
                .map_err(|_| bad("record name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32().map_err(&bad)?;
            let dims = (0..rank).map(|_| cur.u32()).collect::<std::result::Result<Vec<_>, _>>().map_err(&bad)?;
            let n: usize = dims.iter().product();
            let raw = cur.take(n.checked_mul(8).ok_or_else(|| bad("record too large".into()))?).map_err(&bad)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.push(Record { name, dims, data });
        }
        if cur.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }

        let mut it = records.into_iter().peekable();
        let cfg_rec = it.next().filter(|r| r.name == CONFIG_RECORD && r.data.len() == 6);
        let c = cfg_rec.ok_or_else(|| bad(format!("first record must be {CONFIG_RECORD}")))?.data;
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(bad(format!("invalid config entry {v}")))
            }
        };
        let config = EncoderConfig {
            image_size: as_count(c[0])?,
            patch_size: as_count(c[1])?,
            dim: as_count(c[2])?,
            heads: as_count(c[3])?,
            depth: as_count(c[4])?,
            mlp_ratio: c[5],
        };
        config.validate()?;

        let mut params = EncoderParams::zeros(&config);
        let expected: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in expected.iter().zip(params.tensors_mut()) {
            let r = it.next().ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if &r.name != name {
                return Err(bad(format!("expected tensor {name}, found {}", r.name)));
            }
            if r.dims != [slot.rows(), slot.cols()] {
                return Err(bad(format!("tensor {name} has dims {:?}, expected {:?}", r.dims, slot.shape())));
            }
            *slot = DenseMatrix::new(slot.rows(), slot.cols(), r.data)?;
        }

        let basis = match it.next() {
            None => None,
            Some(u) if u.name == "gsd.basis" && u.dims.len() == 2 => {
                let anchor = it.next().filter(|r| r.name == "gsd.anchor");
                let anchor = anchor.ok_or_else(|| bad("gsd.basis without gsd.anchor".into()))?;
                let k = it.next().filter(|r| r.name == "gsd.requested_k" && r.data.len() == 1);
                let k = k.ok_or_else(|| bad("gsd.basis without gsd.requested_k".into()))?;
                let u = DenseMatrix::new(u.dims[0], u.dims[1], u.data)?;
                Some(SemanticBasis::from_parts(u, anchor.data, as_count(k.data[0])?)?)
            }
            Some(r) => return Err(bad(format!("unexpected record {}", r.name))),
        };
        if let Some(r) = it.next() {
            return Err(bad(format!("unexpected record {}", r.name)));
        }
        let model = EncoderModel { config, params };
        Ok(Self { model, basis })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| GsdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GsdError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}
