//! Element types the engine runs on.
//!
//! Gradient-equality suites run in f64; training defaults to f32. Everything
//! generic over [`Scalar`] works identically for both.

use std::fmt;

use crate::error::{Error, Result};

/// Element dtype tag, used by reporting and the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Tag byte written into checkpoints.
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "float32",
            Dtype::F64 => "float64",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Floating-point element type with the conversions and serialization the
/// engine needs.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Copy
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: Dtype;

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_usize(x: usize) -> Self {
        Self::of_f64(x as f64)
    }

    /// Append the little-endian bytes of `vals` to `out`.
    fn write_le(vals: &[Self], out: &mut Vec<u8>);

    /// Decode `count` elements from little-endian `bytes`.
    fn read_le(bytes: &[u8], count: usize) -> Result<Vec<Self>>;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn of_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(vals: &[Self], out: &mut Vec<u8>) {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8], count: usize) -> Result<Vec<Self>> {
        if bytes.len() < count * 4 {
            return Err(Error::Checkpoint("truncated f32 array".into()));
        }
        Ok(bytes[..count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn of_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(vals: &[Self], out: &mut Vec<u8>) {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8], count: usize) -> Result<Vec<Self>> {
        if bytes.len() < count * 8 {
            return Err(Error::Checkpoint("truncated f64 array".into()));
        }
        Ok(bytes[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}
