//! Dense self-supervised representation learning from video, built around a
//! flow-equivariance objective: features of frame 1 are predicted from
//! features of frame 2 after warping along the optical flow connecting the
//! two frames, so the learned representation transforms with image motion
//! instead of being invariant to it.
//!
//! Everything runs on CPU with hand-written kernels and reverse-mode
//! gradients, bit-for-bit reproducible for a fixed seed, thread count aside.
//!
//! Module map:
//! - [`tensor`] / [`scalar`]: small dense arrays (rank 1-4) over `f32`/`f64`
//! - [`geometry`]: affine maps, flow fields, bilinear sampling and warping,
//!   transform composition, `.flo` file I/O
//! - [`augment`]: paired-view augmentation (affine crop + photometric)
//! - [`network`]: fully-convolutional encoder/projector/predictor with
//!   manual backward passes, checkpointing, and a finite-difference checker
//! - [`trainer`]: the masked equivariance objective, EMA target network,
//!   optimizers, schedules, and the training loop
//! - [`synthvid`]: synthetic moving-shape video with exact ground-truth flow,
//!   occlusion, and segmentation labels
//! - [`readout`]: frozen-encoder linear segmentation probe and mIoU
//! - [`imageio`]: PNG/PPM helpers shared by the dataset writer and CLI

pub mod augment;
pub mod checks;
pub mod error;
pub mod geometry;
pub mod imageio;
pub mod network;
pub mod readout;
pub mod rngstream;
pub mod scalar;
pub mod synthvid;
pub mod tensor;
pub mod trainer;

pub use error::{FloweError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
