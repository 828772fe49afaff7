//! Dense correspondence geometry.
//!
//! Coordinate convention used everywhere in this crate: `x` grows rightward,
//! `y` grows downward, and pixel centers sit at integer coordinates, so an
//! `H x W` image covers `[0, W-1] x [0, H-1]`. Affine maps and flow fields
//! are expressed in this frame.
//!
//! Out-of-bounds policy: sampling outside an image yields zeros plus an
//! explicit `false` mask bit. Nothing is ever clamped to the border —
//! clamping would fabricate correspondences that do not exist.
//!
//! All types here are immutable after construction and all functions are
//! pure, so values can be shared freely across threads.

mod affine;
mod flo;
mod flow;
mod mask;
mod sampling;

pub use affine::AffineMap;
pub use flo::{flo_read, flo_write};
pub use flow::{compose_transform, fb_consistency, DenseCorrespondence, FlowField};
pub use mask::Mask;
pub use sampling::{
    bilinear_sample, channel_normalize, channel_normalize_backward, channel_normalize_with_norms,
    upsample_bilinear, upsample_bilinear_adjoint, warp_features, NORMALIZE_EPS,
};

/// Default forward-backward consistency slope (relative term).
pub const FB_ALPHA: f64 = 0.01;
/// Default forward-backward consistency intercept, in squared pixels.
pub const FB_BETA: f64 = 0.5;
