//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic bytes "FLWE"
//!        4   u32 format version (currently 1)
//!        8   u8  scalar precision in bits (32 or 64)
//!        9   32-byte architecture hash (see `Arch::hash`)
//!        41  u64 training step
//!        49  u8  flags: bit 0 = target params present,
//!                       bit 1 = optimizer velocity present
//!        50  online parameter tensors
//!            then target tensors (if flagged), then velocity tensors
//! ```
//!
//! Each tensor is a u32 element count followed by that many little-endian
//! scalars; shapes are not stored because the architecture (verified via its
//! hash) determines them. Loading verifies magic, version, precision, and
//! architecture hash with distinct errors, and reports the byte offset where
//! a truncated file ends.

use crate::error::{FloweError, Result};
use crate::network::{Arch, ConvLayerSpec, Layer, ModelParams, TargetParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FLWE";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_TARGET: u8 = 1;
const FLAG_VELOCITY: u8 = 2;

/// Everything stored in a checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub online: ModelParams<S>,
    pub target: Option<TargetParams<S>>,
    /// Optimizer velocity, one tensor per online parameter in canonical
    /// order.
    pub velocity: Option<Vec<Tensor<S>>>,
    pub step: u64,
}

fn write_tensor<S: Scalar>(out: &mut Vec<u8>, t: &Tensor<S>) {
    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serialize a model (plus optional target and optimizer state) to bytes.
pub fn save_checkpoint<S: Scalar>(
    online: &ModelParams<S>,
    target: Option<&TargetParams<S>>,
    velocity: Option<&[Tensor<S>]>,
    step: u64,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(S::PRECISION_BITS);
    out.extend_from_slice(&online.arch.hash());
    out.extend_from_slice(&step.to_le_bytes());
    let mut flags = 0u8;
    if target.is_some() {
        flags |= FLAG_TARGET;
    }
    if velocity.is_some() {
        flags |= FLAG_VELOCITY;
    }
    out.push(flags);
    for t in online.param_tensors() {
        write_tensor(&mut out, t);
    }
    if let Some(tp) = target {
        for t in tp.param_tensors() {
            write_tensor(&mut out, t);
        }
    }
    if let Some(vel) = velocity {
        for t in vel {
            write_tensor(&mut out, t);
        }
    }
    out
}

/// Cursor over the checkpoint byte stream that reports truncation offsets.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FloweError::CheckpointTruncated { offset: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn tensor<S: Scalar>(&mut self, shape: &[usize], what: &str) -> Result<Tensor<S>> {
        let n = self.u32()? as usize;
        let want: usize = shape.iter().product();
        if n != want {
            return Err(FloweError::CheckpointFormat {
                what: format!("{what}: stored {n} elements, architecture wants {want}"),
            });
        }
        let raw = self.take(n * S::BYTES)?;
        let data: Vec<S> = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
        Tensor::from_vec(shape, data).map_err(|_| FloweError::CheckpointFormat {
            what: format!("{what}: non-finite values in stored tensor"),
        })
    }
}

fn read_layers<S: Scalar>(
    r: &mut Reader<'_>,
    specs: &[ConvLayerSpec],
    section: &str,
) -> Result<Vec<Layer<S>>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, &spec)| {
            let w = r.tensor(&spec.weight_shape(), &format!("{section}.{i}.weight"))?;
            let b = r.tensor(&[spec.out_ch], &format!("{section}.{i}.bias"))?;
            Ok(Layer { spec, w, b })
        })
        .collect()
}

/// Deserialize a checkpoint, verifying it against the expected architecture.
pub fn load_checkpoint<S: Scalar>(bytes: &[u8], arch: &Arch) -> Result<Checkpoint<S>> {
    arch.validate()?;
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(FloweError::CheckpointBadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FloweError::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let precision = r.u8()?;
    if precision != S::PRECISION_BITS {
        return Err(FloweError::CheckpointPrecision {
            found: precision,
            expected: S::PRECISION_BITS,
        });
    }
    let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    if hash != arch.hash() {
        return Err(FloweError::CheckpointArchHash);
    }
    let step = r.u64()?;
    let flags = r.u8()?;
    if flags & !(FLAG_TARGET | FLAG_VELOCITY) != 0 {
        return Err(FloweError::CheckpointFormat { what: format!("unknown flags {flags:#04x}") });
    }

    let online = ModelParams {
        arch: arch.clone(),
        encoder: read_layers(&mut r, &arch.encoder, "encoder")?,
        projector: read_layers(&mut r, &arch.projector, "projector")?,
        predictor: read_layers(&mut r, &arch.predictor, "predictor")?,
    };
    let target = if flags & FLAG_TARGET != 0 {
        Some(TargetParams {
            arch: arch.clone(),
            encoder: read_layers(&mut r, &arch.encoder, "target.encoder")?,
            projector: read_layers(&mut r, &arch.projector, "target.projector")?,
        })
    } else {
        None
    };
    let velocity = if flags & FLAG_VELOCITY != 0 {
        let shapes: Vec<Vec<usize>> =
            online.param_tensors().iter().map(|t| t.shape().to_vec()).collect();
        let mut vel = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            vel.push(r.tensor(shape, &format!("velocity.{i}"))?);
        }
        Some(vel)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(FloweError::CheckpointFormat {
            what: format!("{} trailing bytes after payload", bytes.len() - r.pos),
        });
    }
    Ok(Checkpoint { online, target, velocity, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, Activation};
    use crate::rngstream::{derive_rng, STREAM_MODEL_INIT};

    fn tiny_arch() -> Arch {
        use Activation::{None as Lin, Relu};
        Arch {
            encoder: vec![
                ConvLayerSpec::k3(3, 2, 2, 1, Relu),
                ConvLayerSpec::k3(2, 2, 2, 1, Relu),
                ConvLayerSpec::k3(2, 3, 2, 1, Lin),
            ],
            projector: vec![ConvLayerSpec::k1(3, 3, Relu), ConvLayerSpec::k1(3, 2, Lin)],
            predictor: vec![ConvLayerSpec::k1(2, 2, Relu), ConvLayerSpec::k1(2, 2, Lin)],
            standardize_features: false,
        }
    }

    fn model() -> ModelParams<f32> {
        init_params(&tiny_arch(), &mut derive_rng(1, &[STREAM_MODEL_INIT])).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let online = model();
        let target = TargetParams::from_online(&online);
        let vel: Vec<Tensor<f32>> =
            online.param_tensors().iter().map(|t| Tensor::filled(&t.shape().to_vec(), 0.25)).collect();
        let bytes = save_checkpoint(&online, Some(&target), Some(&vel), 1234);
        let ck = load_checkpoint::<f32>(&bytes, &tiny_arch()).unwrap();
        assert_eq!(ck.step, 1234);
        assert_eq!(ck.online, online);
        assert!(ck.target.is_some());
        let bytes2 = save_checkpoint(
            &ck.online,
            ck.target.as_ref(),
            ck.velocity.as_deref(),
            ck.step,
        );
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn minimal_checkpoint_without_target_or_velocity() {
        let online = model();
        let bytes = save_checkpoint(&online, None, None, 7);
        let ck = load_checkpoint::<f32>(&bytes, &tiny_arch()).unwrap();
        assert_eq!(ck.step, 7);
        assert!(ck.target.is_none());
        assert!(ck.velocity.is_none());
    }

    #[test]
    fn bad_magic_is_distinct_error() {
        let mut bytes = save_checkpoint(&model(), None, None, 0);
        bytes[0] = b'X';
        assert!(matches!(
            load_checkpoint::<f32>(&bytes, &tiny_arch()).unwrap_err(),
            FloweError::CheckpointBadMagic
        ));
    }

    #[test]
    fn wrong_version_is_distinct_error() {
        let mut bytes = save_checkpoint(&model(), None, None, 0);
        bytes[4] = 9;
        assert!(matches!(
            load_checkpoint::<f32>(&bytes, &tiny_arch()).unwrap_err(),
            FloweError::CheckpointVersion { found: 9, expected: 1 }
        ));
    }

    #[test]
    fn wrong_precision_is_distinct_error() {
        let bytes = save_checkpoint(&model(), None, None, 0);
        assert!(matches!(
            load_checkpoint::<f64>(&bytes, &tiny_arch()).unwrap_err(),
            FloweError::CheckpointPrecision { found: 32, expected: 64 }
        ));
    }

    #[test]
    fn wrong_arch_hash_is_distinct_error() {
        let bytes = save_checkpoint(&model(), None, None, 0);
        let mut other = tiny_arch();
        other.predictor[0].activation = Activation::None;
        assert!(matches!(
            load_checkpoint::<f32>(&bytes, &other).unwrap_err(),
            FloweError::CheckpointArchHash
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = save_checkpoint(&model(), None, None, 0);
        let cut = bytes.len() - 5;
        let err = load_checkpoint::<f32>(&bytes[..cut], &tiny_arch()).unwrap_err();
        match err {
            FloweError::CheckpointTruncated { offset } => assert_eq!(offset, cut),
            other => panic!("expected truncation, got {other:?}"),
        }
        // Truncation inside the header is also reported.
        let err = load_checkpoint::<f32>(&bytes[..20], &tiny_arch()).unwrap_err();
        assert!(matches!(err, FloweError::CheckpointTruncated { offset: 20 }));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = save_checkpoint(&model(), None, None, 0);
        bytes.push(0);
        assert!(matches!(
            load_checkpoint::<f32>(&bytes, &tiny_arch()).unwrap_err(),
            FloweError::CheckpointFormat { .. }
        ));
    }

    #[test]
    fn corrupt_payload_nonfinite_rejected() {
        let online = model();
        let bytes = save_checkpoint(&online, None, None, 0);
        // Overwrite the first weight scalar with a NaN bit pattern.
        // Header is 50 bytes, then u32 count, then payload.
        let mut bad = bytes.clone();
        bad[54..58].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            load_checkpoint::<f32>(&bad, &tiny_arch()).unwrap_err(),
            FloweError::CheckpointFormat { .. }
        ));
    }
}
