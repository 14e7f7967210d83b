//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MSTRCKPT"  u32 version
//! u32 header_len, header JSON { "config": ModelConfig, "meta": {..} }
//! u32 entry_count, then per entry:
//!     u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f64 values[prod(dims)]
//! u8 has_mask, and when 1:
//!     f64 ratio, u32 layer_count, then per layer:
//!         u32 name_len, name, f64 threshold, u64 numel, u64 kept, packed bits
//! ```
//!
//! Mask bits are packed 8 per byte, bit `i` at position `i % 8` of byte `i / 8`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{pack_bits, unpack_bits, LayerMask, MaskPlan};
use crate::model::{ModelConfig, ParamEntry, ParameterView};

const MAGIC: &[u8; 8] = b"MSTRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterView,
    pub mask: Option<MaskPlan>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParameterView) -> Self {
        Self { config, params, mask: None, meta: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header { config: self.config, meta: self.meta.clone() })
            .expect("header serializes");
        put_u32(&mut out, header.len());
        out.extend_from_slice(&header);

        put_u32(&mut out, self.params.len());
        for e in self.params.entries() {
            put_str(&mut out, &e.name);
            put_u32(&mut out, e.shape.len());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        match &self.mask {
            None => out.push(0),
            Some(plan) => {
                out.push(1);
                out.extend_from_slice(&plan.ratio.to_le_bytes());
                put_u32(&mut out, plan.layers.len());
                for l in &plan.layers {
                    put_str(&mut out, &l.name);
                    out.extend_from_slice(&l.threshold.to_le_bytes());
                    out.extend_from_slice(&(l.mask.len() as u64).to_le_bytes());
                    out.extend_from_slice(&(l.kept_count as u64).to_le_bytes());
                    out.extend_from_slice(&pack_bits(&l.mask));
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(Error::format(origin, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::format(origin, format!("header: {e}")))?;

        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let values = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.push(ParamEntry { name, shape, values });
        }
        let params = ParameterView::new(entries)?;

        let mask = match r.take(1)?[0] {
            0 => None,
            1 => {
                let ratio = r.f64()?;
                let n = r.u32()? as usize;
                let mut layers = Vec::with_capacity(n);
                for _ in 0..n {
                    let name = r.string()?;
                    let threshold = r.f64()?;
                    let numel = r.u64()? as usize;
                    let kept_count = r.u64()? as usize;
                    let mask = unpack_bits(r.take(numel.div_ceil(8))?, numel);
                    layers.push(LayerMask { name, threshold, mask, kept_count });
                }
                Some(MaskPlan { ratio, layers })
            }
            other => return Err(Error::format(origin, format!("bad mask flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes"));
        }
        Ok(Self { config: header.config, params, mask, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.origin, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.origin, "name is not UTF-8"))
    }
}
