//! Bilinear sampling, backward warping, align-corners upsampling with its
//! adjoint, and per-pixel channel normalization.

use super::flow::DenseCorrespondence;
use super::mask::Mask;
use crate::error::{FloweError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Norm floor used when unit-normalizing channel vectors.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Four-tap bilinear stencil for a continuous point, or `None` out of
/// bounds. Indices are pre-clamped so a weight-zero tap never reads past the
/// last row/column.
#[inline]
fn stencil(x: f64, y: f64, w: usize, h: usize) -> Option<([usize; 4], [f64; 4])> {
    if !(x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Some((
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    ))
}

/// Bilinear interpolation of a `C x H x W` map at a continuous point.
///
/// Returns one value per channel and an in-bounds flag; out of
/// `[0, W-1] x [0, H-1]` the values are zeros and the flag is false.
pub fn bilinear_sample<S: Scalar>(map: &Tensor<S>, x: f64, y: f64) -> Result<(Vec<S>, bool)> {
    let (c, h, w) = map.dims3()?;
    let mut out = vec![S::zero(); c];
    let ok = bilinear_sample_into(map, c, h, w, x, y, &mut out);
    Ok((out, ok))
}

/// Core sampling kernel; `out` must have length `c`.
#[inline]
fn bilinear_sample_into<S: Scalar>(
    map: &Tensor<S>,
    c: usize,
    h: usize,
    w: usize,
    x: f64,
    y: f64,
    out: &mut [S],
) -> bool {
    debug_assert_eq!(out.len(), c);
    let Some((idx, wt)) = stencil(x, y, w, h) else {
        out.fill(S::zero());
        return false;
    };
    let data = map.data();
    let hw = h * w;
    for (ci, o) in out.iter_mut().enumerate() {
        let pl = &data[ci * hw..(ci + 1) * hw];
        let acc = wt[0] * pl[idx[0]].as_f64()
            + wt[1] * pl[idx[1]].as_f64()
            + wt[2] * pl[idx[2]].as_f64()
            + wt[3] * pl[idx[3]].as_f64();
        *o = S::from_f64(acc);
    }
    true
}

/// Backward-warp a feature map through a dense correspondence.
///
/// `out(x) = bilinear_sample(features, t(x))` wherever `t.valid(x)` holds and
/// the sample stays inside `features`; elsewhere zero with a false mask bit.
/// The output lives on the correspondence's (first-view) grid.
pub fn warp_features<S: Scalar>(
    features: &Tensor<S>,
    t: &DenseCorrespondence,
) -> Result<(Tensor<S>, Mask)> {
    let (c, fh, fw) = features.dims3()?;
    let (oh, ow) = t.dims();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut mask = Mask::filled(oh, ow, false);
    let mut px_vals = vec![S::zero(); c];
    for y in 0..oh {
        for x in 0..ow {
            if !t.valid().get(y, x) {
                continue;
            }
            let (sx, sy) = t.target(y, x);
            if bilinear_sample_into(features, c, fh, fw, sx, sy, &mut px_vals) {
                for (ci, &v) in px_vals.iter().enumerate() {
                    out.set3(ci, y, x, v);
                }
                mask.set(y, x, true);
            }
        }
    }
    Ok((out, mask))
}

/// Precomputed 1D align-corners interpolation table.
fn axis_table(n_in: usize, n_out: usize) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut lo = Vec::with_capacity(n_out);
    let mut hi = Vec::with_capacity(n_out);
    let mut frac = Vec::with_capacity(n_out);
    let scale = if n_out > 1 {
        (n_in - 1) as f64 / (n_out - 1) as f64
    } else {
        0.0
    };
    for i in 0..n_out {
        let src = i as f64 * scale;
        let s0 = src.floor() as usize;
        let s1 = (s0 + 1).min(n_in - 1);
        lo.push(s0);
        hi.push(s1);
        frac.push(src - s0 as f64);
    }
    (lo, hi, frac)
}

/// Align-corners bilinear upsampling of a `C x h x w` map to `C x H x W`.
///
/// Output corner pixel centers coincide with input corner pixel centers,
/// which makes the operator exact on constants and, for integer upscale
/// factors, on fields linear in (x, y).
pub fn upsample_bilinear<S: Scalar>(f: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (c, h, w) = f.dims3()?;
    if out_h < h || out_w < w || out_h == 0 || out_w == 0 {
        return Err(FloweError::dim(
            "upsample_bilinear",
            format!("cannot resize {h}x{w} to {out_h}x{out_w}: output must be at least as large"),
        ));
    }
    let (y0s, y1s, fys) = axis_table(h, out_h);
    let (x0s, x1s, fxs) = axis_table(w, out_w);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ci in 0..c {
        let src = f.plane(ci);
        let dst = out.plane_mut(ci);
        for oy in 0..out_h {
            let (y0, y1, fy) = (y0s[oy], y1s[oy], fys[oy]);
            let row0 = &src[y0 * w..y0 * w + w];
            let row1 = &src[y1 * w..y1 * w + w];
            let drow = &mut dst[oy * out_w..oy * out_w + out_w];
            for ox in 0..out_w {
                let (x0, x1, fx) = (x0s[ox], x1s[ox], fxs[ox]);
                let top = (1.0 - fx) * row0[x0].as_f64() + fx * row0[x1].as_f64();
                let bot = (1.0 - fx) * row1[x0].as_f64() + fx * row1[x1].as_f64();
                drow[ox] = S::from_f64((1.0 - fy) * top + fy * bot);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_bilinear`]: scatters an upstream gradient on the
/// `C x H x W` output grid back onto the `C x h x w` input grid, satisfying
/// `<upsample(a), b> = <a, adjoint(b)>` exactly (up to rounding).
pub fn upsample_bilinear_adjoint<S: Scalar>(
    grad_out: &Tensor<S>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<S>> {
    let (c, out_h, out_w) = grad_out.dims3()?;
    if out_h < in_h || out_w < in_w || in_h == 0 || in_w == 0 {
        return Err(FloweError::dim(
            "upsample_bilinear_adjoint",
            format!("adjoint of {in_h}x{in_w} -> {out_h}x{out_w} upsampling needs output at least as large"),
        ));
    }
    let (y0s, y1s, fys) = axis_table(in_h, out_h);
    let (x0s, x1s, fxs) = axis_table(in_w, out_w);
    // Accumulate in f64: scatter sums many small contributions and the
    // result feeds gradient checks.
    let mut acc = vec![0.0f64; c * in_h * in_w];
    for ci in 0..c {
        let g = grad_out.plane(ci);
        let dst = &mut acc[ci * in_h * in_w..(ci + 1) * in_h * in_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (y0s[oy], y1s[oy], fys[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (x0s[ox], x1s[ox], fxs[ox]);
                let gv = g[oy * out_w + ox].as_f64();
                dst[y0 * in_w + x0] += (1.0 - fx) * (1.0 - fy) * gv;
                dst[y0 * in_w + x1] += fx * (1.0 - fy) * gv;
                dst[y1 * in_w + x0] += (1.0 - fx) * fy * gv;
                dst[y1 * in_w + x1] += fx * fy * gv;
            }
        }
    }
    Tensor::from_vec(
        &[c, in_h, in_w],
        acc.into_iter().map(S::from_f64).collect(),
    )
}

/// Divide each pixel's channel vector by `max(norm, eps)`.
pub fn channel_normalize<S: Scalar>(f: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    Ok(channel_normalize_with_norms(f, eps)?.0)
}

/// As [`channel_normalize`], also returning the per-pixel divisor
/// `max(norm, eps)` needed by the backward pass.
pub fn channel_normalize_with_norms<S: Scalar>(
    f: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, Vec<f64>)> {
    if eps <= 0.0 {
        return Err(FloweError::Config(format!(
            "channel_normalize eps must be positive, got {eps}"
        )));
    }
    let (c, h, w) = f.dims3()?;
    let hw = h * w;
    let data = f.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut divisors = vec![0.0f64; hw];
    for (i, div) in divisors.iter_mut().enumerate() {
        let mut sq = 0.0f64;
        for ci in 0..c {
            let v = data[ci * hw + i].as_f64();
            sq += v * v;
        }
        let n = sq.sqrt().max(eps);
        *div = n;
        let inv = 1.0 / n;
        for ci in 0..c {
            let v = data[ci * hw + i].as_f64();
            out.data_mut()[ci * hw + i] = S::from_f64(v * inv);
        }
    }
    Ok((out, divisors))
}

/// Backward pass of [`channel_normalize`].
///
/// With `y = x / n` and `n = max(|x|, eps)`: where the norm cleared the
/// floor, `dx = (g - y * <y, g>) / n`; where it was clamped, the map is the
/// constant scale `1/eps`, so `dx = g / eps`.
pub fn channel_normalize_backward<S: Scalar>(
    normalized: &Tensor<S>,
    divisors: &[f64],
    grad: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let (c, h, w) = normalized.dims3()?;
    let hw = h * w;
    if grad.shape() != normalized.shape() {
        return Err(FloweError::dim(
            "channel_normalize_backward",
            format!("grad shape {:?} vs value shape {:?}", grad.shape(), normalized.shape()),
        ));
    }
    if divisors.len() != hw {
        return Err(FloweError::dim(
            "channel_normalize_backward",
            format!("{} divisors for {hw} pixels", divisors.len()),
        ));
    }
    let y = normalized.data();
    let g = grad.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    for i in 0..hw {
        let n = divisors[i];
        let inv = 1.0 / n;
        if n > eps {
            let mut dot = 0.0f64;
            for ci in 0..c {
                dot += y[ci * hw + i].as_f64() * g[ci * hw + i].as_f64();
            }
            for ci in 0..c {
                let gi = g[ci * hw + i].as_f64();
                let yi = y[ci * hw + i].as_f64();
                out.data_mut()[ci * hw + i] = S::from_f64((gi - yi * dot) * inv);
            }
        } else {
            // Clamped pixel (norm <= eps): y = x / eps exactly.
            for ci in 0..c {
                out.data_mut()[ci * hw + i] = S::from_f64(g[ci * hw + i].as_f64() * inv);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AffineMap;
    use crate::geometry::FlowField;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize, a: f64, b: f64, off: f64) -> Tensor<f64> {
        Tensor::from_fn3(c, h, w, |ci, y, x| {
            a * x as f64 + b * y as f64 + off + ci as f64
        })
    }

    #[test]
    fn sample_at_node_returns_stored_value() {
        let t = ramp(2, 5, 6, 1.0, 10.0, 0.25);
        let (v, ok) = bilinear_sample(&t, 2.0, 3.0).unwrap();
        assert!(ok);
        assert_eq!(v[0], t.at3(0, 3, 2));
        assert_eq!(v[1], t.at3(1, 3, 2));
    }

    #[test]
    fn sample_at_cell_midpoint_averages() {
        let t = Tensor::<f64>::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (v, ok) = bilinear_sample(&t, 0.5, 0.5).unwrap();
        assert!(ok);
        assert_eq!(v[0], 1.5);
    }

    #[test]
    fn sample_is_exact_on_linear_fields() {
        // f(x, y) = 3x + 2y sampled at (1.25, 0.5) -> 4.75.
        let t = ramp(1, 4, 4, 3.0, 2.0, 0.0);
        let (v, ok) = bilinear_sample(&t, 1.25, 0.5).unwrap();
        assert!(ok);
        assert!((v[0] - 4.75).abs() < 1e-12);
    }

    #[test]
    fn sample_out_of_bounds_is_flagged_zero() {
        let t = ramp(2, 3, 3, 1.0, 1.0, 5.0);
        let (v, ok) = bilinear_sample(&t, -0.001, 1.0).unwrap();
        assert!(!ok);
        assert_eq!(v, vec![0.0, 0.0]);
        let (_, ok) = bilinear_sample(&t, 2.0001, 1.0).unwrap();
        assert!(!ok);
        let (_, ok) = bilinear_sample(&t, 2.0, 2.0).unwrap();
        assert!(ok, "the far corner is in bounds");
    }

    #[test]
    fn warp_identity_returns_input() {
        let t = ramp(3, 4, 5, 2.0, -1.0, 0.5);
        let id = DenseCorrespondence::identity(4, 5);
        let (out, mask) = warp_features(&t, &id).unwrap();
        assert_eq!(mask.count_true(), 20);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert!((out.at3(c, y, x) - t.at3(c, y, x)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn warp_shift_on_ramp_adds_shift() {
        let t = ramp(1, 3, 8, 1.0, 0.0, 0.0); // f(x,y) = x
        let flow = {
            let mut f = FlowField::zeros(3, 8);
            for y in 0..3 {
                for x in 0..8 {
                    f.set(y, x, 2.0, 0.0);
                }
            }
            f
        };
        let id = AffineMap::identity();
        let t2 = super::super::flow::compose_transform(&id, &flow, &id, 3, 8).unwrap();
        let (out, mask) = warp_features(&t, &t2).unwrap();
        for y in 0..3 {
            for x in 0..8 {
                if mask.get(y, x) {
                    assert!((out.at3(0, y, x) - (x as f64 + 2.0)).abs() < 1e-9);
                }
            }
        }
        assert_eq!(mask.count_true(), 3 * 6);
    }

    #[test]
    fn warp_delta_relocates_mass_bilinearly() {
        // Delta at (y=1, x=2); correspondence halves coordinates, so output
        // pixel (2, 4) samples exactly the delta and pixel (2, 3) samples at
        // x = 1.5, picking up half the mass.
        let mut img = Tensor::<f64>::zeros(&[1, 4, 8]);
        img.set3(0, 1, 2, 1.0);
        let a1 = AffineMap::scale(2.0, 2.0).unwrap();
        let flow = FlowField::zeros(4, 8);
        let t = super::super::flow::compose_transform(&a1, &flow, &AffineMap::identity(), 4, 8)
            .unwrap();
        let (out, _) = warp_features(&img, &t).unwrap();
        assert!((out.at3(0, 2, 4) - 1.0).abs() < 1e-12);
        assert!((out.at3(0, 2, 3) - 0.5).abs() < 1e-12);
        assert!((out.at3(0, 2, 5) - 0.5).abs() < 1e-12);
        assert_eq!(out.at3(0, 0, 0), 0.0);
    }

    #[test]
    fn warp_inverse_on_linear_fields_round_trips() {
        // Pure-affine correspondence both ways; linear fields are preserved
        // exactly by bilinear sampling, so warping there and back is exact
        // where both steps stay in bounds.
        let f = ramp(2, 8, 8, 1.5, -0.75, 2.0);
        let a = AffineMap::translation(1.25, 0.75);
        let zero = FlowField::zeros(8, 8);
        let fwd =
            super::super::flow::compose_transform(&a.invert(), &zero, &AffineMap::identity(), 8, 8)
                .unwrap();
        let bwd =
            super::super::flow::compose_transform(&a, &zero, &AffineMap::identity(), 8, 8).unwrap();
        let (once, m1) = warp_features(&f, &fwd).unwrap();
        let (back, m2) = warp_features(&once, &bwd).unwrap();
        let mut checked = 0;
        for y in 0..8usize {
            for x in 0..8usize {
                // The round trip is exact where the intermediate samples all
                // stayed on valid data: interior pixels of both masks.
                let (tx, ty) = bwd.target(y, x);
                let interior_src = tx >= 2.0 && tx <= 5.0 && ty >= 2.0 && ty <= 5.0;
                if m2.get(y, x) && m1.get(y, x) && interior_src {
                    for c in 0..2 {
                        assert!(
                            (back.at3(c, y, x) - f.at3(c, y, x)).abs() < 1e-9,
                            "pixel ({y},{x}) channel {c}"
                        );
                    }
                    checked += 1;
                }
            }
        }
        assert!(checked > 4, "round trip never exercised: {checked}");
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let t = Tensor::<f64>::filled(&[2, 2, 3], 0.7);
        let up = upsample_bilinear(&t, 5, 9).unwrap();
        assert_eq!(up.shape(), &[2, 5, 9]);
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn upsample_1x2_matches_align_corners_thirds() {
        let t = Tensor::<f64>::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&t, 1, 4).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in up.data().iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_rejects_shrinking() {
        let t = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert!(upsample_bilinear(&t, 3, 8).is_err());
        assert!(upsample_bilinear_adjoint(&t, 5, 2).is_err());
    }

    #[test]
    fn upsample_exact_on_linear_fields_at_integer_factor() {
        let t = ramp(1, 3, 4, 2.0, 3.0, -1.0);
        let up = upsample_bilinear(&t, 7, 10).unwrap(); // 3->7 and 4->10: factors (H-1)/(h-1)=3
        for y in 0..7 {
            for x in 0..10 {
                let want = 2.0 * (x as f64 / 3.0) + 3.0 * (y as f64 / 3.0) - 1.0;
                assert!((up.at3(0, y, x) - want).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn upsample_adjoint_satisfies_inner_product_identity(seed in 0u64..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, h, w) = (2, 3, 4);
            let (oh, ow) = (6, 9);
            let a = Tensor::<f64>::from_fn3(c, h, w, |_, _, _| rng.random_range(-1.0..1.0));
            let b = Tensor::<f64>::from_fn3(c, oh, ow, |_, _, _| rng.random_range(-1.0..1.0));
            let up = upsample_bilinear(&a, oh, ow).unwrap();
            let down = upsample_bilinear_adjoint(&b, h, w).unwrap();
            let lhs: f64 = up.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            let rhs: f64 = a.data().iter().zip(down.data()).map(|(x, y)| x * y).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9, "lhs {lhs} rhs {rhs}");
        }

        #[test]
        fn warp_is_linear_in_features(seed in 0u64..32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (5, 6);
            let f = Tensor::<f64>::from_fn3(2, h, w, |_, _, _| rng.random_range(-1.0..1.0));
            let g = Tensor::<f64>::from_fn3(2, h, w, |_, _, _| rng.random_range(-1.0..1.0));
            let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mut flow = FlowField::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    flow.set(y, x, rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
                }
            }
            let id = AffineMap::identity();
            let t = super::super::flow::compose_transform(&id, &flow, &id, h, w).unwrap();
            let mut combo = f.clone();
            combo.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = alpha * *a + beta * b);
            let (wf, m) = warp_features(&f, &t).unwrap();
            let (wg, _) = warp_features(&g, &t).unwrap();
            let (wc, _) = warp_features(&combo, &t).unwrap();
            for y in 0..h {
                for x in 0..w {
                    if m.get(y, x) {
                        for c in 0..2 {
                            let want = alpha * wf.at3(c, y, x) + beta * wg.at3(c, y, x);
                            prop_assert!((wc.at3(c, y, x) - want).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let t = Tensor::<f64>::from_vec(&[2, 1, 1], vec![3.0, 4.0]).unwrap();
        let n = channel_normalize(&t, NORMALIZE_EPS).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-12);
        assert!((n.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalize_keeps_unit_vectors_and_guards_zero() {
        let t = Tensor::<f64>::from_vec(&[2, 1, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let n = channel_normalize(&t, NORMALIZE_EPS).unwrap();
        assert_eq!(n.data()[0], 1.0); // unit vector unchanged
        assert_eq!(n.data()[1], 0.0); // zero vector stays zero
        assert_eq!(n.data()[3], 0.0);
    }

    #[test]
    fn normalize_norms_are_one_or_below() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::<f64>::from_fn3(4, 3, 3, |_, _, _| rng.random_range(-2.0..2.0));
        let n = channel_normalize(&t, NORMALIZE_EPS).unwrap();
        for i in 0..9 {
            let sq: f64 = (0..4).map(|c| n.data()[c * 9 + i].powi(2)).sum();
            assert!((sq.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 3;
        let x0: Vec<f64> = (0..c * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..c * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shape = [c, 2, 2];
        let loss = |xs: &[f64]| -> f64 {
            let t = Tensor::<f64>::from_vec(&shape, xs.to_vec()).unwrap();
            let n = channel_normalize(&t, NORMALIZE_EPS).unwrap();
            n.data().iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        let t = Tensor::<f64>::from_vec(&shape, x0.clone()).unwrap();
        let (n, divisors) = channel_normalize_with_norms(&t, NORMALIZE_EPS).unwrap();
        let gt = Tensor::<f64>::from_vec(&shape, g.clone()).unwrap();
        let analytic = channel_normalize_backward(&n, &divisors, &gt, NORMALIZE_EPS).unwrap();
        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus[i] += eps;
            let mut minus = x0.clone();
            minus[i] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() / fd.abs().max(a.abs()).max(1e-4) < 1e-6,
                "index {i}: fd {fd} analytic {a}"
            );
        }
    }
}
