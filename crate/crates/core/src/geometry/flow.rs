//! Flow fields, dense correspondences, and their composition with affine
//! view transforms.

use super::affine::AffineMap;
use super::mask::Mask;
use crate::error::{FloweError, Result};

/// Dense optical flow on an `H x W` pixel grid: displacement `(u, v)` in
/// pixels from this frame to another, plus a validity plane.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    valid: Mask,
}

impl FlowField {
    /// Zero flow, fully valid.
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
            valid: Mask::filled(height, width, true),
        }
    }

    /// Build from displacement planes; all pixels valid.
    pub fn from_uv(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(FloweError::dim(
                "flow::from_uv",
                format!(
                    "{height}x{width} needs {} values per plane, got u={} v={}",
                    height * width,
                    u.len(),
                    v.len()
                ),
            ));
        }
        if let Some(pos) = u
            .iter()
            .chain(v.iter())
            .position(|x| !x.is_finite())
        {
            return Err(FloweError::Data(format!(
                "non-finite flow value at flat index {pos}"
            )));
        }
        Ok(FlowField {
            height,
            width,
            u,
            v,
            valid: Mask::filled(height, width, true),
        })
    }

    /// Replace the validity plane.
    pub fn with_valid(mut self, valid: Mask) -> Result<Self> {
        if valid.dims() != (self.height, self.width) {
            return Err(FloweError::dim(
                "flow::with_valid",
                format!("{:?} vs {:?}", valid.dims(), (self.height, self.width)),
            ));
        }
        self.valid = valid;
        Ok(self)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn valid(&self) -> &Mask {
        &self.valid
    }

    #[inline(always)]
    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn set(&mut self, y: usize, x: usize, u: f64, v: f64) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }

    pub fn u_plane(&self) -> &[f64] {
        &self.u
    }

    pub fn v_plane(&self) -> &[f64] {
        &self.v
    }

    /// Bilinear flow lookup at a continuous point.
    ///
    /// Returns `None` outside `[0, W-1] x [0, H-1]` or when any of the four
    /// stencil neighbors is invalid — a conservative rule: interpolating
    /// across an invalid pixel would blend a displacement that means nothing.
    pub fn sample(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (w, h) = (self.width, self.height);
        if !(x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        if !(self.valid.get(y0, x0)
            && self.valid.get(y0, x1)
            && self.valid.get(y1, x0)
            && self.valid.get(y1, x1))
        {
            return None;
        }
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w01 = fx * (1.0 - fy);
        let w10 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let i00 = y0 * w + x0;
        let i01 = y0 * w + x1;
        let i10 = y1 * w + x0;
        let i11 = y1 * w + x1;
        Some((
            w00 * self.u[i00] + w01 * self.u[i01] + w10 * self.u[i10] + w11 * self.u[i11],
            w00 * self.v[i00] + w01 * self.v[i01] + w10 * self.v[i10] + w11 * self.v[i11],
        ))
    }
}

/// Dense pixel correspondence: for each pixel of the first view's grid, the
/// target coordinate in the second view's frame, plus validity.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCorrespondence {
    height: usize,
    width: usize,
    tx: Vec<f64>,
    ty: Vec<f64>,
    valid: Mask,
}

impl DenseCorrespondence {
    /// Identity correspondence on an `H x W` grid, fully valid.
    pub fn identity(height: usize, width: usize) -> Self {
        let mut tx = vec![0.0; height * width];
        let mut ty = vec![0.0; height * width];
        for y in 0..height {
            for x in 0..width {
                tx[y * width + x] = x as f64;
                ty[y * width + x] = y as f64;
            }
        }
        DenseCorrespondence {
            height,
            width,
            tx,
            ty,
            valid: Mask::filled(height, width, true),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn valid(&self) -> &Mask {
        &self.valid
    }

    /// Target coordinate for pixel `(y, x)`; meaningful only where valid.
    #[inline(always)]
    pub fn target(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.tx[i], self.ty[i])
    }

    /// Build directly from target-coordinate planes and a validity mask.
    pub fn from_parts(
        height: usize,
        width: usize,
        tx: Vec<f64>,
        ty: Vec<f64>,
        valid: Mask,
    ) -> Result<Self> {
        if tx.len() != height * width || ty.len() != height * width || valid.dims() != (height, width)
        {
            return Err(FloweError::dim(
                "correspondence::from_parts",
                format!("inconsistent plane sizes for {height}x{width}"),
            ));
        }
        Ok(DenseCorrespondence {
            height,
            width,
            tx,
            ty,
            valid,
        })
    }
}

/// Compose view transforms with scene flow into a dense correspondence from
/// the first view's pixels to coordinates in the second view.
///
/// `a1` maps raw frame-1 coordinates into view 1; `a2` maps raw frame-2
/// coordinates into view 2; `flow` lives on the raw frame-1 grid. For each
/// pixel `x` of the `out_h x out_w` view-1 grid:
///
/// ```text
/// y = a1^-1(x)          // back to raw frame 1
/// d = flow sampled at y // advance to raw frame 2
/// t(x) = a2(y + d)      // into view 2
/// ```
///
/// The pixel is valid only if `y` lands inside the flow grid with all four
/// bilinear neighbors valid and `t(x)` lies inside the view-2 bounds.
pub fn compose_transform(
    a1: &AffineMap,
    flow: &FlowField,
    a2: &AffineMap,
    out_h: usize,
    out_w: usize,
) -> Result<DenseCorrespondence> {
    if out_h == 0 || out_w == 0 {
        return Err(FloweError::dim(
            "compose_transform",
            format!("output grid {out_h}x{out_w} must be non-empty"),
        ));
    }
    let a1_inv = a1.invert();
    let mut tx = vec![0.0; out_h * out_w];
    let mut ty = vec![0.0; out_h * out_w];
    let mut valid = Mask::filled(out_h, out_w, false);
    let x_hi = (out_w - 1) as f64;
    let y_hi = (out_h - 1) as f64;
    for py in 0..out_h {
        for px in 0..out_w {
            let (rx, ry) = a1_inv.apply(px as f64, py as f64);
            let Some((du, dv)) = flow.sample(rx, ry) else {
                continue;
            };
            let (ox, oy) = a2.apply(rx + du, ry + dv);
            if ox >= 0.0 && ox <= x_hi && oy >= 0.0 && oy <= y_hi {
                let i = py * out_w + px;
                tx[i] = ox;
                ty[i] = oy;
                valid.set(py, px, true);
            }
        }
    }
    DenseCorrespondence::from_parts(out_h, out_w, tx, ty, valid)
}

/// Forward-backward flow consistency check.
///
/// A pixel `x` passes iff its forward flow is valid, `x + f(x)` stays in
/// bounds with the backward flow valid there, and
/// `|f(x) + b(x + f(x))|^2 <= alpha * (|f(x)|^2 + |b|^2) + beta`.
pub fn fb_consistency(
    fwd: &FlowField,
    bwd: &FlowField,
    alpha: f64,
    beta: f64,
) -> Result<Mask> {
    if fwd.dims() != bwd.dims() {
        return Err(FloweError::dim(
            "fb_consistency",
            format!("{:?} vs {:?}", fwd.dims(), bwd.dims()),
        ));
    }
    let (h, w) = fwd.dims();
    let mut out = Mask::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            if !fwd.valid().get(y, x) {
                continue;
            }
            let (fu, fv) = fwd.get(y, x);
            let Some((bu, bv)) = bwd.sample(x as f64 + fu, y as f64 + fv) else {
                continue;
            };
            let err = (fu + bu).powi(2) + (fv + bv).powi(2);
            let bound = alpha * (fu * fu + fv * fv + bu * bu + bv * bv) + beta;
            out.set(y, x, err <= bound);
        }
    }
    Ok(out)
}
