//! Middlebury `.flo` flow file format.
//!
//! Layout (all little-endian): a 32-bit float magic `202021.25`, `i32`
//! width, `i32` height, then `height * width` interleaved `(u, v)` pairs of
//! 32-bit floats, row-major.

use super::flow::FlowField;
use super::mask::Mask;
use crate::error::{FloweError, Result};

/// Magic number of the format, stored as the first 4 bytes.
pub const FLO_MAGIC: f32 = 202021.25;

fn f32_at(bytes: &[u8], offset: usize) -> Result<f32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(FloweError::FloFormat {
            offset,
            what: format!("need 4 bytes, file ends at {}", bytes.len()),
        });
    }
    Ok(f32::from_le_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn i32_at(bytes: &[u8], offset: usize) -> Result<i32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(FloweError::FloFormat {
            offset,
            what: format!("need 4 bytes, file ends at {}", bytes.len()),
        });
    }
    Ok(i32::from_le_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse a `.flo` payload. The validity plane is all-true: external flow
/// files carry no validity information.
pub fn flo_read(bytes: &[u8]) -> Result<FlowField> {
    let magic = f32_at(bytes, 0)?;
    if magic.to_bits() != FLO_MAGIC.to_bits() {
        return Err(FloweError::FloFormat {
            offset: 0,
            what: format!("bad magic {magic} (want {FLO_MAGIC})"),
        });
    }
    let w = i32_at(bytes, 4)?;
    let h = i32_at(bytes, 8)?;
    if w <= 0 || h <= 0 {
        return Err(FloweError::FloFormat {
            offset: 4,
            what: format!("non-positive dimensions {w}x{h}"),
        });
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + 8 * w * h;
    if bytes.len() < need {
        return Err(FloweError::FloFormat {
            offset: bytes.len(),
            what: format!("payload for {w}x{h} needs {need} bytes, got {}", bytes.len()),
        });
    }
    let mut u = vec![0.0f64; w * h];
    let mut v = vec![0.0f64; w * h];
    for i in 0..w * h {
        let off = 12 + 8 * i;
        let uu = f32_at(bytes, off)?;
        let vv = f32_at(bytes, off + 4)?;
        if !uu.is_finite() || !vv.is_finite() {
            return Err(FloweError::FloFormat {
                offset: off,
                what: "non-finite flow value".into(),
            });
        }
        u[i] = uu as f64;
        v[i] = vv as f64;
    }
    FlowField::from_uv(h, w, u, v)?.with_valid(Mask::filled(h, w, true))
}

/// Serialize a flow field. Components are narrowed to `f32`; fields whose
/// values came from [`flo_read`] (or were produced at `f32` granularity)
/// round-trip bit-exactly. Validity is not stored.
pub fn flo_write(flow: &FlowField) -> Vec<u8> {
    let (h, w) = flow.dims();
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..w * h {
        out.extend_from_slice(&(flow.u_plane()[i] as f32).to_le_bytes());
        out.extend_from_slice(&(flow.v_plane()[i] as f32).to_le_bytes());
    }
    out
}
