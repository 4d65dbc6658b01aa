//! `ASFH` parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ASFH" | version u16 | C u32 | C' u32 | K u32 | A u32 | n u32
//! | dropout_rate f64 | flags u8 (bit 0 correlation, bit 1 activity-specific)
//! | tensor count u32 | header checksum u32 (FNV-1a of every preceding byte)
//! | per tensor: name length u16 | name (UTF-8) | rank u8 | dims u64 × rank | f32 × count
//! ```

use std::path::Path;

use super::{HeadConfig, HeadParams};
use crate::codec::{fnv1a, read_dims, Reader};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASFH";
const VERSION: u16 = 1;

pub fn encode_checkpoint(params: &HeadParams<f32>) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [cfg.channels, cfg.feature_channels, cfg.observations, cfg.activities, cfg.groups] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout_rate.to_le_bytes());
    out.push(u8::from(cfg.correlation) | (u8::from(cfg.activity_specific) << 1));
    let named = params.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    let digest = fnv1a(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<HeadParams<f32>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected ASFH"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let cfg_at = r.offset();
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32("config")? as usize;
    }
    let dropout_rate = r.f64("dropout rate")?;
    let flags_at = r.offset();
    let flags = r.u8("flags")?;
    if flags & !0b11 != 0 {
        return Err(Error::format(flags_at, format!("unknown flag bits {flags:#04x}")));
    }
    let config = HeadConfig {
        channels: dims[0],
        feature_channels: dims[1],
        observations: dims[2],
        activities: dims[3],
        groups: dims[4],
        dropout_rate,
        correlation: flags & 1 != 0,
        activity_specific: flags & 2 != 0,
    };
    config
        .validate()
        .map_err(|e| Error::format(cfg_at, format!("invalid config: {e}")))?;

    let expected = 3 * config.observations + 3 + if config.correlation { 4 } else { 0 };
    let count_at = r.offset();
    let count = r.u32("tensor count")? as usize;
    if count != expected {
        return Err(Error::format(
            count_at,
            format!("expected {expected} tensors, header says {count}"),
        ));
    }
    let header_end = r.offset() as usize;
    let digest = r.u32("header checksum")?;
    if digest != fnv1a(&bytes[..header_end]) {
        return Err(Error::format(header_end as u64, "header checksum mismatch"));
    }
    let layout = HeadParams::<f32>::layout(&config);
    let mut named = Vec::with_capacity(count);
    for (want, _, shape) in &layout {
        let at = r.offset();
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at, "name is not UTF-8"))?;
        if name != want {
            return Err(Error::format(at, format!("expected tensor {want}, found {name}")));
        }
        let rank_at = r.offset();
        let rank = r.u8("rank")? as usize;
        let (dims, elems) = read_dims(&mut r, rank)?;
        if &dims != shape {
            return Err(Error::format(
                rank_at,
                format!("tensor {name} has shape {dims:?}, expected {shape:?}"),
            ));
        }
        let payload = r.take(elems.saturating_mul(4), "tensor payload")?;
        let data = payload.chunks_exact(4).map(f32::read_le).collect();
        named.push((name.to_string(), Tensor::new(dims, data)?));
    }
    r.finish()?;
    HeadParams::from_named(&config, named)
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &HeadParams<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<HeadParams<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}
