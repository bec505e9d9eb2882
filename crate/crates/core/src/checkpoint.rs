//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MSMV1"
//! u32 config_len, config text (key=value, UTF-8)
//! u32 array_count
//! per array: u32 name_len, name, u8 frozen, u32 ndim, u64 dims[ndim], f64 data[prod(dims)]
//! ```
//!
//! Array names are prefixed `seg.`, `crop.`, `head.` or `buffers.` (batch-norm
//! running statistics). The same file doubles as a weight-import format:
//! [`load_weights`] copies every matching array into an existing model.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 5] = b"MSMV1";

const PREFIXES: [&str; 4] = ["seg.", "crop.", "head.", "buffers."];

fn stores(model: &Model) -> [&ParamStore; 4] {
    [&model.seg.params, &model.crop.params, &model.head.params, &model.head.buffers]
}

fn stores_mut(model: &mut Model) -> [&mut ParamStore; 4] {
    [
        &mut model.seg.params,
        &mut model.crop.params,
        &mut model.head.params,
        &mut model.head.buffers,
    ]
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::MalformedCheckpoint(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(model: &Model, config: &RunConfig) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    let text = config.serialize();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    let count: usize = stores(model).iter().map(|s| s.len()).sum();
    put_u32(&mut out, count)?;
    for (prefix, store) in PREFIXES.iter().zip(stores(model)) {
        for p in store.iter() {
            let name = format!("{prefix}{}", p.name);
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(p.frozen as u8);
            put_u32(&mut out, p.shape.len())?;
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedCheckpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// A decoded array: (prefixed name, frozen, shape, data).
pub type RawArray = (String, bool, Vec<usize>, Vec<f64>);

pub fn decode_arrays(buf: &[u8]) -> Result<(String, Vec<RawArray>)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let n = c.u32()?;
    let text = String::from_utf8(c.take(n)?.to_vec())
        .map_err(|_| Error::MalformedCheckpoint("config is not UTF-8".into()))?;
    let count = c.u32()?;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.u32()?;
        let name = String::from_utf8(c.take(n)?.to_vec())
            .map_err(|_| Error::MalformedCheckpoint("name is not UTF-8".into()))?;
        let frozen = match c.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::MalformedCheckpoint(format!("{name}: frozen flag {b}"))),
        };
        let ndim = c.u32()?;
        let shape: Vec<usize> = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::MalformedCheckpoint(format!("{name}: shape overflow")))?;
        let bytes = c.take(len.checked_mul(8).ok_or_else(|| Error::MalformedCheckpoint("size overflow".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        arrays.push((name, frozen, shape, data));
    }
    if c.pos != buf.len() {
        return Err(Error::MalformedCheckpoint("trailing bytes".into()));
    }
    Ok((text, arrays))
}

fn locate<'m>(model: &'m mut Model, name: &str) -> Option<(&'m mut ParamStore, String)> {
    let idx = PREFIXES.iter().position(|p| name.starts_with(p))?;
    let rest = name[PREFIXES[idx].len()..].to_string();
    let store = stores_mut(model).into_iter().nth(idx)?;
    Some((store, rest))
}

/// Rebuilds the model described by the stored configuration and fills every array.
pub fn decode(buf: &[u8]) -> Result<(RunConfig, Model)> {
    let (text, arrays) = decode_arrays(buf)?;
    let config = RunConfig::parse(&text).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    let mut model = Model::new(config.backbone.clone(), config.fusion.clone(), 0)?;
    let expected: usize = stores(&model).iter().map(|s| s.len()).sum();
    if arrays.len() != expected {
        return Err(Error::MalformedCheckpoint(format!(
            "{} arrays, model has {expected}",
            arrays.len()
        )));
    }
    for (name, frozen, shape, data) in arrays {
        let (store, rest) = locate(&mut model, &name)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("unexpected array {name}")))?;
        let p = store
            .get_mut(&rest)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("unexpected array {name}")))?;
        if p.shape != shape {
            return Err(Error::MalformedCheckpoint(format!(
                "{name}: shape {shape:?}, model expects {:?}",
                p.shape
            )));
        }
        p.data = data;
        p.frozen = frozen;
    }
    Ok((config, model))
}

pub fn save(path: &Path, model: &Model, config: &RunConfig) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(model, config)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, Model)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

/// Copies arrays with matching names and shapes from a checkpoint file into
/// `model`, keeping the model's freezing. Returns the number of arrays copied.
pub fn load_weights(path: &Path, model: &mut Model) -> Result<usize> {
    let (_, arrays) = decode_arrays(&std::fs::read(path)?)?;
    let mut copied = 0;
    for (name, _, shape, data) in arrays {
        let Some((store, rest)) = locate(model, &name) else { continue };
        if let Some(p) = store.get_mut(&rest) {
            if p.shape != shape {
                return Err(Error::ShapeMismatch(format!("{name}: {shape:?} vs {:?}", p.shape)));
            }
            p.data = data;
            copied += 1;
        }
    }
    Ok(copied)
}
