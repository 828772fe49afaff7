//! 2D convolution (cross-correlation) with stride, dilation, and zero
//! padding, plus its exact parameter/input adjoints.
//!
//! Accumulation order is fixed (output channel, input channel, kernel row,
//! kernel column, then rows/columns), so results are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{FloweError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Post-convolution activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
}

/// Static description of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Kernel side length: 1 or 3.
    pub kernel: usize,
    /// Spatial stride: 1 or 2.
    pub stride: usize,
    pub dilation: usize,
    /// Must equal `dilation * (kernel - 1) / 2` so spatial size is preserved
    /// up to the stride.
    pub padding: usize,
    pub has_bias: bool,
    pub activation: Activation,
}

impl ConvLayerSpec {
    /// 3x3 convolution with size-preserving padding.
    pub fn k3(in_ch: usize, out_ch: usize, stride: usize, dilation: usize, activation: Activation) -> Self {
        ConvLayerSpec {
            in_ch,
            out_ch,
            kernel: 3,
            stride,
            dilation,
            padding: dilation,
            has_bias: true,
            activation,
        }
    }

    /// 1x1 convolution (pointwise).
    pub fn k1(in_ch: usize, out_ch: usize, activation: Activation) -> Self {
        ConvLayerSpec {
            in_ch,
            out_ch,
            kernel: 1,
            stride: 1,
            dilation: 1,
            padding: 0,
            has_bias: true,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(FloweError::Config(format!(
                "conv layer channels must be positive, got {} -> {}",
                self.in_ch, self.out_ch
            )));
        }
        if !matches!(self.kernel, 1 | 3) {
            return Err(FloweError::Config(format!(
                "conv kernel must be 1 or 3, got {}",
                self.kernel
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(FloweError::Config(format!(
                "conv stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.dilation == 0 {
            return Err(FloweError::Config("conv dilation must be positive".into()));
        }
        if self.padding != self.dilation * (self.kernel - 1) / 2 {
            return Err(FloweError::Config(format!(
                "conv padding {} must equal dilation*(kernel-1)/2 = {}",
                self.padding,
                self.dilation * (self.kernel - 1) / 2
            )));
        }
        Ok(())
    }

    /// Output spatial size: `ceil(dim / stride)` under the validated padding.
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// Weight tensor shape `[out_ch, in_ch, k, k]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }
}

/// Valid output range along one axis for a given kernel tap: all `o` with
/// `0 <= o*stride + offset < size`.
#[inline]
fn tap_range(size: usize, out_size: usize, stride: usize, offset: i64) -> (usize, usize) {
    let s = stride as i64;
    let lo = (-offset + s - 1).div_euclid(s).max(0);
    let hi = ((size as i64 - 1 - offset).div_euclid(s)).min(out_size as i64 - 1);
    if hi < lo {
        (1, 0) // empty
    } else {
        (lo as usize, hi as usize)
    }
}

fn check_conv_shapes<S: Scalar>(
    x: &Tensor<S>,
    spec: &ConvLayerSpec,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(usize, usize, usize)> {
    spec.validate()?;
    let (ic, h, ww) = x.dims3()?;
    if ic != spec.in_ch {
        return Err(FloweError::dim(
            "conv2d",
            format!("input has {ic} channels, spec wants {}", spec.in_ch),
        ));
    }
    if w.shape() != spec.weight_shape() {
        return Err(FloweError::dim(
            "conv2d",
            format!(
                "weight shape {:?} does not match spec {:?}",
                w.shape(),
                spec.weight_shape()
            ),
        ));
    }
    if b.shape() != [spec.out_ch] {
        return Err(FloweError::dim(
            "conv2d",
            format!("bias shape {:?}, want [{}]", b.shape(), spec.out_ch),
        ));
    }
    Ok((ic, h, ww))
}

/// Cross-correlation with zero padding: for each output location,
/// `out[o](p) = b[o] + sum_{i,ky,kx} w[o,i,ky,kx] * x[i](p*stride + (ky,kx)*dilation - padding)`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    spec: &ConvLayerSpec,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (_, h, iw) = check_conv_shapes(x, spec, w, b)?;
    let (oh, ow) = spec.out_dims(h, iw);
    let (k, s, d, p) = (spec.kernel, spec.stride, spec.dilation, spec.padding as i64);
    let mut out = Tensor::zeros(&[spec.out_ch, oh, ow]);
    for o in 0..spec.out_ch {
        let dst = out.plane_mut(o);
        if spec.has_bias {
            dst.fill(b.data()[o]);
        }
        for i in 0..spec.in_ch {
            let src = x.plane(i);
            for ky in 0..k {
                let off_y = (ky * d) as i64 - p;
                let (oy_lo, oy_hi) = tap_range(h, oh, s, off_y);
                if oy_lo > oy_hi {
                    continue;
                }
                for kx in 0..k {
                    let off_x = (kx * d) as i64 - p;
                    let (ox_lo, ox_hi) = tap_range(iw, ow, s, off_x);
                    if ox_lo > ox_hi {
                        continue;
                    }
                    let wv = w.at4(o, i, ky, kx);
                    for oy in oy_lo..=oy_hi {
                        let iy = (oy * s) as i64 + off_y;
                        let row = &src[iy as usize * iw..(iy as usize + 1) * iw];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        let mut ix = (ox_lo * s) as i64 + off_x;
                        if s == 1 {
                            // Contiguous inner loop; the common, vectorizable case.
                            let xs = &row[ix as usize..ix as usize + (ox_hi - ox_lo + 1)];
                            for (dv, &xv) in drow[ox_lo..=ox_hi].iter_mut().zip(xs) {
                                *dv = *dv + wv * xv;
                            }
                        } else {
                            for dv in &mut drow[ox_lo..=ox_hi] {
                                *dv = *dv + wv * row[ix as usize];
                                ix += s as i64;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoints of [`conv2d`]: gradients with respect to the weights,
/// bias, and input, given the upstream gradient on the output.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    spec: &ConvLayerSpec,
    w: &Tensor<S>,
    b: &Tensor<S>,
    upstream: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (_, h, iw) = check_conv_shapes(x, spec, w, b)?;
    let (oh, ow) = spec.out_dims(h, iw);
    if upstream.shape() != [spec.out_ch, oh, ow] {
        return Err(FloweError::dim(
            "conv2d_backward",
            format!(
                "upstream shape {:?}, want [{}, {oh}, {ow}]",
                upstream.shape(),
                spec.out_ch
            ),
        ));
    }
    let (k, s, d, p) = (spec.kernel, spec.stride, spec.dilation, spec.padding as i64);
    let mut gw = Tensor::zeros(&w.shape().to_vec()[..]);
    let mut gb = Tensor::zeros(&[spec.out_ch]);
    let mut gx = Tensor::zeros(&[spec.in_ch, h, iw]);

    if spec.has_bias {
        for o in 0..spec.out_ch {
            let up = upstream.plane(o);
            gb.data_mut()[o] = up.iter().copied().sum();
        }
    }

    for o in 0..spec.out_ch {
        let up = upstream.plane(o);
        for i in 0..spec.in_ch {
            let src = x.plane(i);
            for ky in 0..k {
                let off_y = (ky * d) as i64 - p;
                let (oy_lo, oy_hi) = tap_range(h, oh, s, off_y);
                if oy_lo > oy_hi {
                    continue;
                }
                for kx in 0..k {
                    let off_x = (kx * d) as i64 - p;
                    let (ox_lo, ox_hi) = tap_range(iw, ow, s, off_x);
                    if ox_lo > ox_hi {
                        continue;
                    }
                    let wv = w.at4(o, i, ky, kx);
                    let mut acc = S::zero();
                    for oy in oy_lo..=oy_hi {
                        let iy = ((oy * s) as i64 + off_y) as usize;
                        let urow = &up[oy * ow..(oy + 1) * ow];
                        let xrow = &src[iy * iw..(iy + 1) * iw];
                        let gxrow = &mut gx.data_mut()[(i * h + iy) * iw..(i * h + iy + 1) * iw];
                        let mut ix = ((ox_lo * s) as i64 + off_x) as usize;
                        if s == 1 {
                            let xs = &xrow[ix..ix + (ox_hi - ox_lo + 1)];
                            let gs = &mut gxrow[ix..ix + (ox_hi - ox_lo + 1)];
                            for ((&uv, &xv), gv) in urow[ox_lo..=ox_hi].iter().zip(xs).zip(gs) {
                                acc = acc + uv * xv;
                                *gv = *gv + wv * uv;
                            }
                        } else {
                            for &uv in &urow[ox_lo..=ox_hi] {
                                acc = acc + uv * xrow[ix];
                                gxrow[ix] = gxrow[ix] + wv * uv;
                                ix += s;
                            }
                        }
                    }
                    let wi = ((o * spec.in_ch + i) * k + ky) * k + kx;
                    gw.data_mut()[wi] = acc;
                }
            }
        }
    }
    Ok((gw, gb, gx))
}

/// Elementwise ReLU.
pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// ReLU adjoint: passes upstream gradient where the pre-activation was
/// strictly positive (the subgradient at exactly zero is taken as zero).
pub fn relu_backward<S: Scalar>(preact: &Tensor<S>, upstream: &Tensor<S>) -> Tensor<S> {
    debug_assert_eq!(preact.shape(), upstream.shape());
    let mut out = upstream.clone();
    for (g, &pre) in out.data_mut().iter_mut().zip(preact.data()) {
        if pre <= S::zero() {
            *g = S::zero();
        }
    }
    out
}
