//! Middlebury `.flo` optical flow files.
//!
//! Layout: the magic float 202021.25 (bytes `PIEH`), width and height as
//! little-endian `i32`, then `u, v` pairs as little-endian `f32` in raster
//! order. Components above 1e9 in magnitude mark unknown flow.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use lamoco_core::FlowField;

pub const MAGIC: &[u8; 4] = b"PIEH";
pub const UNKNOWN: f32 = 1e10;
const UNKNOWN_THRESH: f32 = 1e9;

pub fn encode(flow: &FlowField) -> Vec<u8> {
    let (h, w) = flow.dims();
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for k in 0..h * w {
        let (u, v) = if flow.valid[k] { (flow.u[k] as f32, flow.v[k] as f32) } else { (UNKNOWN, UNKNOWN) };
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<FlowField> {
    ensure!(bytes.len() >= 12, "truncated .flo header ({} bytes)", bytes.len());
    if &bytes[..4] != MAGIC {
        bail!("bad .flo magic {:?}", &bytes[..4]);
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into()?);
    let h = i32::from_le_bytes(bytes[8..12].try_into()?);
    ensure!(w > 0 && h > 0 && w < 100_000 && h < 100_000, "implausible .flo size {w}x{h}");
    let (w, h) = (w as usize, h as usize);
    let need = 12 + 8 * w * h;
    ensure!(bytes.len() == need, ".flo payload is {} bytes, expected {need}", bytes.len());
    let mut flow = FlowField::zeros(h, w);
    for k in 0..w * h {
        let o = 12 + 8 * k;
        let u = f32::from_le_bytes(bytes[o..o + 4].try_into()?);
        let v = f32::from_le_bytes(bytes[o + 4..o + 8].try_into()?);
        let known = u.is_finite() && v.is_finite() && u.abs() <= UNKNOWN_THRESH && v.abs() <= UNKNOWN_THRESH;
        flow.valid[k] = known;
        if known {
            flow.u[k] = f64::from(u);
            flow.v[k] = f64::from(v);
        }
    }
    Ok(flow)
}

pub fn read(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).with_context(|| format!("reading flow file {}", path.display()))?;
    decode(&bytes).with_context(|| format!("parsing flow file {}", path.display()))
}

pub fn write(path: &Path, flow: &FlowField) -> Result<()> {
    fs::write(path, encode(flow)).with_context(|| format!("writing flow file {}", path.display()))
}
