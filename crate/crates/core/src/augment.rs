//! Paired-view augmentation: random affine crops plus photometric
//! distortion, and the dense correspondence that connects the two views.
//!
//! The affine here maps *raw frame coordinates into view coordinates*, so a
//! view pixel `x` shows the raw content at `A^-1(x)`. Augmentation order is
//! fixed: affine resampling first, then color jitter, then blur — the
//! photometric steps never move pixels, so the geometric correspondence
//! stays exact.
//!
//! Determinism: every random decision comes from the caller-supplied seed
//! through a fixed draw order (`A1`, `A2`, photometrics for view 1, then for
//! view 2). The correspondence therefore depends only on the affine draws
//! and the flow, never on photometric ones.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FloweError, Result};
use crate::geometry::{compose_transform, AffineMap, DenseCorrespondence, FlowField};
use crate::rngstream::{derive_rng, STREAM_AUGMENT};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Augmentation parameters for both views.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Uniform scale factor range (applied to both axes).
    pub scale_range: (f64, f64),
    /// Rotation range in degrees.
    pub rotation_range_deg: (f64, f64),
    /// Output view size `(H, W)`.
    pub crop_size: (usize, usize),
    /// Jitter strengths: brightness, contrast, saturation, hue.
    pub color_strength: [f64; 4],
    /// Probability of applying the color jitter at all.
    pub color_prob: f64,
    /// Probability of collapsing to grayscale after jitter.
    pub grayscale_prob: f64,
    /// Blur sigma range in pixels.
    pub blur_sigma_range: (f64, f64),
    /// Probability of blurring a view (drawn per view).
    pub blur_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_range: (0.5, 2.0),
            rotation_range_deg: (-30.0, 30.0),
            crop_size: (32, 64),
            color_strength: [0.8, 0.8, 0.8, 0.2],
            color_prob: 0.8,
            grayscale_prob: 0.2,
            blur_sigma_range: (0.1, 2.0),
            blur_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (slo, shi) = self.scale_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(FloweError::Config(format!(
                "scale_range must satisfy 0 < lo <= hi, got ({slo}, {shi})"
            )));
        }
        let (rlo, rhi) = self.rotation_range_deg;
        if !(rlo <= rhi && rlo.is_finite() && rhi.is_finite()) {
            return Err(FloweError::Config(format!(
                "rotation_range_deg must satisfy lo <= hi, got ({rlo}, {rhi})"
            )));
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(FloweError::Config(format!(
                "crop_size must be positive, got {:?}",
                self.crop_size
            )));
        }
        for (name, p) in [
            ("color_prob", self.color_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FloweError::Config(format!(
                    "{name} must lie in [0,1], got {p}"
                )));
            }
        }
        if self.color_strength.iter().any(|&s| !(0.0..=10.0).contains(&s)) {
            return Err(FloweError::Config(format!(
                "color_strength values must lie in [0,10], got {:?}",
                self.color_strength
            )));
        }
        if self.color_strength[3] > 0.5 {
            return Err(FloweError::Config(format!(
                "hue strength must not exceed 0.5 (half the hue circle), got {}",
                self.color_strength[3]
            )));
        }
        let (blo, bhi) = self.blur_sigma_range;
        if !(blo > 0.0 && blo <= bhi && bhi.is_finite()) {
            return Err(FloweError::Config(format!(
                "blur_sigma_range must satisfy 0 < lo <= hi, got ({blo}, {bhi})"
            )));
        }
        Ok(())
    }
}

/// Two augmented views of consecutive frames, with everything needed to
/// reconstruct their geometric relation.
#[derive(Debug, Clone)]
pub struct ViewPair<S> {
    pub v1: Tensor<S>,
    pub v2: Tensor<S>,
    pub a1: AffineMap,
    pub a2: AffineMap,
    pub source_flow: FlowField,
    pub rng_seed: u64,
}

/// Uniform draw that tolerates a degenerate (point) range.
fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Sample a view affine: `A = translate(crop offset) ∘ rotate(θ) ∘ scale(s)`.
///
/// The translation is drawn uniformly over offsets that keep the whole
/// `out_shape` window inside the bounding box of the scaled/rotated input,
/// so a view never extends past the content's bounding region (rotated
/// corners may still sample out of the actual image; those pixels zero-fill
/// and are excluded later through correspondence validity).
pub fn sample_affine(
    rng: &mut ChaCha8Rng,
    cfg: &AugmentConfig,
    in_shape: (usize, usize),
    out_shape: (usize, usize),
) -> Result<AffineMap> {
    cfg.validate()?;
    let s = uniform_in(rng, cfg.scale_range.0, cfg.scale_range.1);
    let theta = uniform_in(
        rng,
        cfg.rotation_range_deg.0,
        cfg.rotation_range_deg.1,
    );
    let linear = AffineMap::rotation_deg(theta).compose(&AffineMap::scale(s, s)?)?;

    // Bounding box of the transformed input corners.
    let (h, w) = in_shape;
    let corners = [
        (0.0, 0.0),
        ((w - 1) as f64, 0.0),
        (0.0, (h - 1) as f64),
        ((w - 1) as f64, (h - 1) as f64),
    ];
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for (cx, cy) in corners {
        let (px, py) = linear.apply(cx, cy);
        xmin = xmin.min(px);
        xmax = xmax.max(px);
        ymin = ymin.min(py);
        ymax = ymax.max(py);
    }

    // The window [0, Wc-1] x [0, Hc-1] must fit into [xmin+tx, xmax+tx] x
    // [ymin+ty, ymax+ty]: tx ∈ [(Wc-1) - xmax, -xmin], same for y.
    let (oh, ow) = out_shape;
    let tx_lo = (ow - 1) as f64 - xmax;
    let tx_hi = -xmin;
    let ty_lo = (oh - 1) as f64 - ymax;
    let ty_hi = -ymin;
    if tx_lo > tx_hi || ty_lo > ty_hi {
        return Err(FloweError::Config(format!(
            "crop {ow}x{oh} does not fit inside the transformed {w}x{h} input \
             (scale {s:.3}, rotation {theta:.1} deg)"
        )));
    }
    let tx = uniform_in(rng, tx_lo, tx_hi);
    let ty = uniform_in(rng, ty_lo, ty_hi);

    let lm = linear.coefficients();
    AffineMap::new([lm[0], lm[1], tx, lm[3], lm[4], ty])
}

/// Resample an image under a view affine: `out(x) = img(A^-1(x))`, zero
/// outside the source bounds.
pub fn apply_affine_image<S: Scalar>(
    img: &Tensor<S>,
    a: &AffineMap,
    out_shape: (usize, usize),
) -> Result<Tensor<S>> {
    let (c, h, w) = img.dims3()?;
    let inv = a.invert();
    let (oh, ow) = out_shape;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let data = img.data();
    let hw = h * w;
    for oy in 0..oh {
        for ox in 0..ow {
            let (sx, sy) = inv.apply(ox as f64, oy as f64);
            if !(sx >= 0.0 && sx <= (w - 1) as f64 && sy >= 0.0 && sy <= (h - 1) as f64) {
                continue;
            }
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            for ci in 0..c {
                let pl = &data[ci * hw..(ci + 1) * hw];
                let v = w00 * pl[y0 * w + x0].as_f64()
                    + w01 * pl[y0 * w + x1].as_f64()
                    + w10 * pl[y1 * w + x0].as_f64()
                    + w11 * pl[y1 * w + x1].as_f64();
                out.set3(ci, oy, ox, S::from_f64(v));
            }
        }
    }
    Ok(out)
}

/// ITU-R 601 luma.
#[inline]
fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn adjust_brightness<S: Scalar>(img: &mut Tensor<S>, factor: f64) {
    for v in img.data_mut() {
        *v = S::from_f64((v.as_f64() * factor).clamp(0.0, 1.0));
    }
}

/// Blend toward the image's mean luma.
fn adjust_contrast<S: Scalar>(img: &mut Tensor<S>, factor: f64) {
    let (_, h, w) = img.dims3().expect("color ops run on rank-3 images");
    let n = (h * w) as f64;
    let mut mean = 0.0;
    for i in 0..h * w {
        mean += luma(
            img.data()[i].as_f64(),
            img.data()[h * w + i].as_f64(),
            img.data()[2 * h * w + i].as_f64(),
        );
    }
    mean /= n;
    for v in img.data_mut() {
        *v = S::from_f64((mean + (v.as_f64() - mean) * factor).clamp(0.0, 1.0));
    }
}

/// Blend toward the per-pixel luma.
fn adjust_saturation<S: Scalar>(img: &mut Tensor<S>, factor: f64) {
    let (_, h, w) = img.dims3().expect("color ops run on rank-3 images");
    let hw = h * w;
    for i in 0..hw {
        let r = img.data()[i].as_f64();
        let g = img.data()[hw + i].as_f64();
        let b = img.data()[2 * hw + i].as_f64();
        let l = luma(r, g, b);
        img.data_mut()[i] = S::from_f64((l + (r - l) * factor).clamp(0.0, 1.0));
        img.data_mut()[hw + i] = S::from_f64((l + (g - l) * factor).clamp(0.0, 1.0));
        img.data_mut()[2 * hw + i] = S::from_f64((l + (b - l) * factor).clamp(0.0, 1.0));
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Rotate hue by `shift` (fraction of the full circle).
fn adjust_hue<S: Scalar>(img: &mut Tensor<S>, shift: f64) {
    let (_, h, w) = img.dims3().expect("color ops run on rank-3 images");
    let hw = h * w;
    for i in 0..hw {
        let r = img.data()[i].as_f64();
        let g = img.data()[hw + i].as_f64();
        let b = img.data()[2 * hw + i].as_f64();
        let (hh, ss, vv) = rgb_to_hsv(r, g, b);
        let (nr, ng, nb) = hsv_to_rgb(hh + shift, ss, vv);
        img.data_mut()[i] = S::from_f64(nr.clamp(0.0, 1.0));
        img.data_mut()[hw + i] = S::from_f64(ng.clamp(0.0, 1.0));
        img.data_mut()[2 * hw + i] = S::from_f64(nb.clamp(0.0, 1.0));
    }
}

fn to_grayscale<S: Scalar>(img: &mut Tensor<S>) {
    let (_, h, w) = img.dims3().expect("color ops run on rank-3 images");
    let hw = h * w;
    for i in 0..hw {
        let l = luma(
            img.data()[i].as_f64(),
            img.data()[hw + i].as_f64(),
            img.data()[2 * hw + i].as_f64(),
        );
        let lv = S::from_f64(l.clamp(0.0, 1.0));
        img.data_mut()[i] = lv;
        img.data_mut()[hw + i] = lv;
        img.data_mut()[2 * hw + i] = lv;
    }
}

/// Photometric distortion: with probability `color_prob`, apply brightness /
/// contrast / saturation / hue jitter in a random order with the configured
/// strengths; then with probability `grayscale_prob` collapse to luma.
/// Geometry is untouched; output stays in `[0, 1]`.
pub fn color_distort<S: Scalar>(
    img: &Tensor<S>,
    rng: &mut ChaCha8Rng,
    cfg: &AugmentConfig,
) -> Tensor<S> {
    let mut out = img.clone();
    let apply_jitter = cfg.color_prob > 0.0 && rng.random_range(0.0..1.0) < cfg.color_prob;
    if apply_jitter {
        let [bs, cs, ss, hs] = cfg.color_strength;
        let b = uniform_in(rng, (1.0 - bs).max(0.0), 1.0 + bs);
        let c = uniform_in(rng, (1.0 - cs).max(0.0), 1.0 + cs);
        let s = uniform_in(rng, (1.0 - ss).max(0.0), 1.0 + ss);
        let hshift = uniform_in(rng, -hs, hs);
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(rng);
        for op in order {
            match op {
                0 => adjust_brightness(&mut out, b),
                1 => adjust_contrast(&mut out, c),
                2 => adjust_saturation(&mut out, s),
                _ => adjust_hue(&mut out, hshift),
            }
        }
    }
    if cfg.grayscale_prob > 0.0 && rng.random_range(0.0..1.0) < cfg.grayscale_prob {
        to_grayscale(&mut out);
    }
    out
}

/// Reflect an out-of-range index into `[0, n)` (symmetric padding, edge
/// pixel included), valid for arbitrary overhang.
#[inline]
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable Gaussian blur with kernel radius `ceil(3 sigma)` and
/// reflected-edge padding. Mass-preserving on constants.
pub fn gaussian_blur<S: Scalar>(img: &Tensor<S>, sigma: f64) -> Result<Tensor<S>> {
    if !(sigma > 0.0) {
        return Err(FloweError::Config(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let (c, h, w) = img.dims3()?;
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps = Vec::with_capacity(2 * radius as usize + 1);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for k in -radius..=radius {
        taps.push((-(k * k) as f64 * inv2s2).exp());
    }
    let norm: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= norm;
    }

    let mut mid = vec![0.0f64; c * h * w];
    // Horizontal pass.
    for ci in 0..c {
        let src = img.plane(ci);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let dst = &mut mid[ci * h * w + y * w..ci * h * w + (y + 1) * w];
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for (ti, k) in (-radius..=radius).enumerate() {
                    acc += taps[ti] * row[reflect(x + k, w as i64)].as_f64();
                }
                dst[x as usize] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let src = &mid[ci * h * w..(ci + 1) * h * w];
        let dst = out.plane_mut(ci);
        for y in 0..h as i64 {
            for x in 0..w {
                let mut acc = 0.0;
                for (ti, k) in (-radius..=radius).enumerate() {
                    acc += taps[ti] * src[reflect(y + k, h as i64) * w + x];
                }
                dst[y as usize * w + x] = S::from_f64(acc);
            }
        }
    }
    Ok(out)
}

/// How view affines are chosen in [`make_view_pair_with`].
#[derive(Debug, Clone, Copy)]
pub enum AffineMode {
    /// Draw both affines from the config ranges.
    Sampled,
    /// Use identity affines (views are the top-left `crop_size` window);
    /// photometric draws still happen. Used by the no-affine ablation.
    Identity,
}

/// Build an augmented view pair plus the dense correspondence relating them.
///
/// Draw order is fixed: `A1`, `A2`, photometrics for view 1, photometrics
/// for view 2. The correspondence is `compose_transform(A1, flow, A2)` and
/// therefore depends only on the geometry draws.
pub fn make_view_pair_with<S: Scalar>(
    i1: &Tensor<S>,
    i2: &Tensor<S>,
    flow: &FlowField,
    seed: u64,
    cfg: &AugmentConfig,
    mode: AffineMode,
) -> Result<(ViewPair<S>, DenseCorrespondence)> {
    cfg.validate()?;
    let d1 = i1.dims3()?;
    let d2 = i2.dims3()?;
    if d1 != d2 || d1.0 != 3 {
        return Err(FloweError::dim(
            "make_view_pair",
            format!("frames must share shape 3xHxW, got {d1:?} and {d2:?}"),
        ));
    }
    if flow.dims() != (d1.1, d1.2) {
        return Err(FloweError::dim(
            "make_view_pair",
            format!("flow {:?} vs frames {:?}", flow.dims(), (d1.1, d1.2)),
        ));
    }
    let mut rng = derive_rng(seed, &[STREAM_AUGMENT]);
    let in_shape = (d1.1, d1.2);
    let (a1, a2) = match mode {
        AffineMode::Sampled => (
            sample_affine(&mut rng, cfg, in_shape, cfg.crop_size)?,
            sample_affine(&mut rng, cfg, in_shape, cfg.crop_size)?,
        ),
        AffineMode::Identity => (AffineMap::identity(), AffineMap::identity()),
    };
    let mut v1 = apply_affine_image(i1, &a1, cfg.crop_size)?;
    let mut v2 = apply_affine_image(i2, &a2, cfg.crop_size)?;
    for v in [&mut v1, &mut v2] {
        *v = color_distort(v, &mut rng, cfg);
        if cfg.blur_prob > 0.0 && rng.random_range(0.0..1.0) < cfg.blur_prob {
            let sigma = uniform_in(&mut rng, cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
            *v = gaussian_blur(v, sigma)?;
        }
    }
    let t = compose_transform(&a1, flow, &a2, cfg.crop_size.0, cfg.crop_size.1)?;
    Ok((
        ViewPair {
            v1,
            v2,
            a1,
            a2,
            source_flow: flow.clone(),
            rng_seed: seed,
        },
        t,
    ))
}

/// [`make_view_pair_with`] in its default (sampled-affine) mode.
pub fn make_view_pair<S: Scalar>(
    i1: &Tensor<S>,
    i2: &Tensor<S>,
    flow: &FlowField,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(ViewPair<S>, DenseCorrespondence)> {
    make_view_pair_with(i1, i2, flow, seed, cfg, AffineMode::Sampled)
}
