//! Flat binary container for displacement fields.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "SOMAFLD\0"
//! 8       4     format version, u32 LE (= 1)
//! 12      4     dtype code, u32 LE (1 = f32, 2 = f64)
//! 16      4     level (downsampling factor), u32 LE
//! 20      4     batch N, u32 LE
//! 24      4     height H, u32 LE
//! 28      4     width W, u32 LE
//! 32      ...   N*2*H*W little-endian values, layout (N, 2, H, W), channel 0 = x
//! ```

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::{DisplacementField, Level};
use crate::error::{Result, SomaError};

pub const FIELD_MAGIC: &[u8; 8] = b"SOMAFLD\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

pub fn write_field(path: impl AsRef<Path>, field: &DisplacementField) -> Result<()> {
    let path = path.as_ref();
    let (n, h, w) = field.dims();
    let (code, payload) = match field.dtype() {
        DType::F64 => (
            2u32,
            field
                .tensor()
                .flatten_all()?
                .to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect::<Vec<u8>>(),
        ),
        _ => (
            1u32,
            field
                .tensor()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect::<Vec<u8>>(),
        ),
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + payload.len());
    buf.extend_from_slice(FIELD_MAGIC);
    for v in [VERSION, code, field.level().factor() as u32, n as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&payload);
    fs::write(path, buf).map_err(|e| SomaError::io(path, e))
}

pub fn read_field(path: impl AsRef<Path>, device: &Device) -> Result<DisplacementField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SomaError::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != FIELD_MAGIC {
        return Err(SomaError::load(path, "not a displacement-field file"));
    }
    let word = |i: usize| {
        let o = 8 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    if word(0) != VERSION as usize {
        return Err(SomaError::load(path, format!("unsupported version {}", word(0))));
    }
    let level = Level::from_factor(word(2)).map_err(|e| SomaError::load(path, e))?;
    let (n, h, w) = (word(3), word(4), word(5));
    let count = n * 2 * h * w;
    let body = &bytes[HEADER_LEN..];
    let tensor = match word(1) {
        1 if body.len() == count * 4 => {
            let v: Vec<f32> = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, (n, 2, h, w), device)?
        }
        2 if body.len() == count * 8 => {
            let v: Vec<f64> = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, (n, 2, h, w), device)?
        }
        1 | 2 => return Err(SomaError::load(path, "truncated payload")),
        other => return Err(SomaError::load(path, format!("unknown dtype code {other}"))),
    };
    DisplacementField::new(tensor, level)
}
