//! Floating-point abstraction so every numeric path can be instantiated at
//! 32-bit or 64-bit precision.
//!
//! Training defaults to `f32`; gradient verification and the geometry of
//! transforms always run in `f64`. The trait deliberately stays tiny: the
//! heavy lifting comes from `num_traits::Float`, plus explicit `f64`
//! round-trips and little-endian byte (de)serialization for checkpoints.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element type of [`crate::tensor::Tensor`]: `f32` or `f64`.
pub trait Scalar:
    Float + Sum + Send + Sync + Debug + Display + Default + serde::Serialize + 'static
{
    /// 32 or 64; recorded in checkpoints and config echoes.
    const PRECISION_BITS: u8;
    /// Size of one element in serialized form.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode one value from the start of `bytes` (must hold `BYTES` bytes).
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION_BITS: u8 = 32;
    const BYTES: usize = 4;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const PRECISION_BITS: u8 = 64;
    const BYTES: usize = 8;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}
