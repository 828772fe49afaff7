//! Frozen-encoder evaluation: extract stride-8 features, train a single
//! 1x1-convolution segmentation head with softmax cross-entropy, and score
//! predictions with per-class IoU / mIoU.
//!
//! The encoder is frozen structurally: feature extraction takes the
//! parameters by shared reference and head training never sees them, so
//! encoder gradients cannot exist. By default logits are bilinearly
//! upsampled to label resolution (full-resolution evaluation); with
//! `upsample_logits` off, labels must already live on the feature grid.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FloweError, Result};
use crate::geometry::{upsample_bilinear, upsample_bilinear_adjoint};
use crate::network::conv::{conv2d, conv2d_backward, Activation, ConvLayerSpec};
use crate::network::{forward, Layer, ModelParams};
use crate::rngstream::{derive_rng, STREAM_READOUT};
use crate::scalar::Scalar;
use crate::synthvid::LabelMap;
use crate::tensor::Tensor;
use crate::trainer::cosine_lr;

/// Sentinel accepted in `encoder_checkpoint` for a freshly initialized
/// (untrained) encoder baseline.
pub const RANDOM_ENCODER: &str = "random";

/// Linear-readout configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutConfig {
    /// Full passes over the training images.
    pub epochs: usize,
    /// Base learning rate; decays to 0 on a cosine over all steps.
    pub lr: f64,
    pub momentum: f64,
    pub class_count: usize,
    /// Checkpoint path, or [`RANDOM_ENCODER`] for an untrained encoder.
    pub encoder_checkpoint: String,
    /// Upsample logits to label resolution (otherwise labels must already
    /// match the feature grid).
    pub upsample_logits: bool,
    /// Seed for head initialization and epoch shuffling.
    pub seed: u64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        ReadoutConfig {
            epochs: 40,
            lr: 0.3,
            momentum: 0.9,
            class_count: crate::synthvid::CLASS_COUNT,
            encoder_checkpoint: RANDOM_ENCODER.to_string(),
            upsample_logits: true,
            seed: 0,
        }
    }
}

impl ReadoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(FloweError::Config(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FloweError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FloweError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Stride-8 feature map for one image from the frozen encoder. Pure: the
/// same parameters and image give bit-identical features on every call.
pub fn extract_features<S: Scalar>(params: &ModelParams<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, _, _, _) = forward(params, image, false)?;
    Ok(h)
}

/// The trained readout: one 1x1 convolution from feature channels to class
/// logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutHead<S: Scalar> {
    pub layer: Layer<S>,
}

fn check_dataset<S: Scalar>(
    features: &[Tensor<S>],
    labels: &[LabelMap],
    cfg: &ReadoutConfig,
) -> Result<usize> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(FloweError::Data(format!(
            "need matching non-empty feature/label sets, got {} features and {} label maps",
            features.len(),
            labels.len()
        )));
    }
    let (channels, _, _) = features[0].dims3()?;
    for (i, (f, l)) in features.iter().zip(labels).enumerate() {
        let (c, fh, fw) = f.dims3()?;
        if c != channels {
            return Err(FloweError::dim(
                "readout features",
                format!("image {i} has {c} channels, expected {channels}"),
            ));
        }
        if !cfg.upsample_logits && l.dims() != (fh, fw) {
            return Err(FloweError::dim(
                "readout labels",
                format!(
                    "image {i}: labels {:?} must match the {fh}x{fw} feature grid \
                     when upsample_logits is off",
                    l.dims()
                ),
            ));
        }
        if let Some(&bad) = l.data().iter().find(|&&v| v as usize >= cfg.class_count) {
            return Err(FloweError::Data(format!(
                "image {i} has class id {bad} >= class_count {}",
                cfg.class_count
            )));
        }
    }
    Ok(channels)
}

/// Train the 1x1 segmentation head on frozen features with per-pixel
/// softmax cross-entropy, SGD with momentum, and cosine learning-rate
/// decay. Returns the head and the per-step loss curve (mean cross-entropy
/// in nats). Deterministic for a fixed config.
pub fn train_linear_readout<S: Scalar>(
    features: &[Tensor<S>],
    labels: &[LabelMap],
    cfg: &ReadoutConfig,
) -> Result<(ReadoutHead<S>, Vec<f64>)> {
    cfg.validate()?;
    let channels = check_dataset(features, labels, cfg)?;
    let spec = ConvLayerSpec::k1(channels, cfg.class_count, Activation::None);
    let mut rng = derive_rng(cfg.seed, &[STREAM_READOUT]);
    let normal = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("finite std");
    let mut layer = Layer::<S>::zeros(spec.clone());
    for w in layer.w.data_mut() {
        *w = S::from_f64(normal.sample(&mut rng));
    }

    let total_steps = (cfg.epochs * features.len()) as u64;
    let mut vw = Tensor::<S>::zeros(layer.w.shape());
    let mut vb = Tensor::<S>::zeros(layer.b.shape());
    let mut curve = Vec::with_capacity(total_steps as usize);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[STREAM_READOUT, 1 + epoch as u64]));
        for &i in &order {
            let feat = &features[i];
            let (_, fh, fw) = feat.dims3()?;
            let (lh, lw) = labels[i].dims();
            let logits = conv2d(feat, &spec, &layer.w, &layer.b)?;
            let up = if cfg.upsample_logits {
                upsample_bilinear(&logits, lh, lw)?
            } else {
                logits.clone()
            };
            let (loss, grad_up) = softmax_ce(&up, &labels[i], cfg.class_count)?;
            let grad_logits = if cfg.upsample_logits {
                upsample_bilinear_adjoint(&grad_up, fh, fw)?
            } else {
                grad_up
            };
            let (gw, gb, _) = conv2d_backward(feat, &spec, &layer.w, &layer.b, &grad_logits)?;

            let lr = S::from_f64(cosine_lr(step, total_steps, cfg.lr));
            let m = S::from_f64(cfg.momentum);
            for ((w, v), g) in layer.w.data_mut().iter_mut().zip(vw.data_mut()).zip(gw.data()) {
                *v = m * *v + *g;
                *w = *w - lr * *v;
            }
            for ((b, v), g) in layer.b.data_mut().iter_mut().zip(vb.data_mut()).zip(gb.data()) {
                *v = m * *v + *g;
                *b = *b - lr * *v;
            }
            curve.push(loss);
            step += 1;
        }
    }
    Ok((ReadoutHead { layer }, curve))
}

/// Mean per-pixel softmax cross-entropy and its gradient in the logits.
fn softmax_ce<S: Scalar>(
    logits: &Tensor<S>,
    labels: &LabelMap,
    class_count: usize,
) -> Result<(f64, Tensor<S>)> {
    let (c, h, w) = logits.dims3()?;
    if c != class_count || labels.dims() != (h, w) {
        return Err(FloweError::dim(
            "softmax_ce",
            format!("logits {c}x{h}x{w} vs labels {:?} x {class_count} classes", labels.dims()),
        ));
    }
    let plane = h * w;
    let inv_n = 1.0 / plane as f64;
    let mut grad = Tensor::<S>::zeros(&[c, h, w]);
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            let base = y * w + x;
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                max = max.max(logits.data()[k * plane + base].as_f64());
            }
            let mut denom = 0.0;
            for k in 0..c {
                let e = (logits.data()[k * plane + base].as_f64() - max).exp();
                probs[k] = e;
                denom += e;
            }
            let truth = labels.get(y, x) as usize;
            loss -= (probs[truth] / denom).ln();
            for k in 0..c {
                let p = probs[k] / denom;
                let target = if k == truth { 1.0 } else { 0.0 };
                grad.data_mut()[k * plane + base] = S::from_f64((p - target) * inv_n);
            }
        }
    }
    Ok((loss * inv_n, grad))
}

/// Argmax class per pixel; `out_dims` upsamples the logits first (ties
/// resolve to the lowest class id).
pub fn predict<S: Scalar>(
    head: &ReadoutHead<S>,
    features: &Tensor<S>,
    out_dims: Option<(usize, usize)>,
) -> Result<LabelMap> {
    let logits = conv2d(features, &head.layer.spec, &head.layer.w, &head.layer.b)?;
    let logits = match out_dims {
        Some((h, w)) => upsample_bilinear(&logits, h, w)?,
        None => logits,
    };
    let (c, h, w) = logits.dims3()?;
    let plane = h * w;
    let mut out = LabelMap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let base = y * w + x;
            let mut best = 0usize;
            let mut best_v = logits.data()[base].as_f64();
            for k in 1..c {
                let v = logits.data()[k * plane + base].as_f64();
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out.set(y, x, best as u8);
        }
    }
    Ok(out)
}

/// Pixel confusion counts; rows index the true class, columns the
/// predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        ConfusionMatrix { class_count, counts: vec![0; class_count * class_count] }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Count of pixels with true class `truth` predicted as `pred`.
    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.class_count + pred]
    }

    /// Total evaluated pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one prediction/truth pair of label maps. Order of accumulation
    /// never matters: counts are sums.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(FloweError::dim(
                "ConfusionMatrix::accumulate",
                format!("pred {:?} vs truth {:?}", pred.dims(), truth.dims()),
            ));
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if p as usize >= self.class_count || t as usize >= self.class_count {
                return Err(FloweError::Data(format!(
                    "label id out of range: pred {p}, truth {t}, class_count {}",
                    self.class_count
                )));
            }
            self.counts[t as usize * self.class_count + p as usize] += 1;
        }
        Ok(())
    }

    /// Per-class IoU (None for classes absent from both truth and
    /// prediction) and their mean over present classes.
    pub fn report(&self) -> MiouReport {
        let c = self.class_count;
        let mut per_class = Vec::with_capacity(c);
        let mut sum = 0.0;
        let mut included = 0usize;
        for k in 0..c {
            let tp = self.count(k, k);
            let fp: u64 = (0..c).filter(|&t| t != k).map(|t| self.count(t, k)).sum();
            let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| self.count(k, p)).sum();
            if tp + fp + fn_ == 0 {
                per_class.push(None);
            } else {
                let iou = tp as f64 / (tp + fp + fn_) as f64;
                per_class.push(Some(iou));
                sum += iou;
                included += 1;
            }
        }
        let miou = if included == 0 { 0.0 } else { sum / included as f64 };
        MiouReport { per_class_iou: per_class, miou, confusion: self.clone() }
    }
}

/// Evaluation result: per-class IoU (null = class absent from both truth
/// and prediction, excluded from the mean), their mean, and the raw
/// confusion counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

/// Score one prediction against the truth.
pub fn eval_miou(pred: &LabelMap, truth: &LabelMap, class_count: usize) -> Result<MiouReport> {
    if class_count < 2 {
        return Err(FloweError::Config(format!(
            "class_count must be >= 2, got {class_count}"
        )));
    }
    let mut m = ConfusionMatrix::new(class_count);
    m.accumulate(pred, truth)?;
    Ok(m.report())
}

/// Fixed palette for label visualization (cycles past 8 classes).
pub fn label_color(class_id: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [40, 40, 40],    // background: dark gray
        [230, 80, 60],   // red
        [70, 140, 230],  // blue
        [80, 200, 110],  // green
        [235, 195, 50],  // yellow
        [170, 90, 220],  // purple
        [90, 210, 210],  // cyan
        [240, 140, 40],  // orange
    ];
    PALETTE[class_id as usize % PALETTE.len()]
}

/// Blend class colors over an image for inspection: `alpha` of the class
/// color over `1 - alpha` of the pixel.
pub fn overlay<S: Scalar>(image: &Tensor<S>, labels: &LabelMap, alpha: f64) -> Result<Tensor<S>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 || labels.dims() != (h, w) {
        return Err(FloweError::dim(
            "readout::overlay",
            format!("image {c}x{h}x{w} vs labels {:?}", labels.dims()),
        ));
    }
    let mut out = image.clone();
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let color = label_color(labels.get(y, x));
            for ch in 0..3 {
                let v = image.data()[ch * plane + y * w + x].as_f64();
                let blended = (1.0 - alpha) * v + alpha * color[ch] as f64 / 255.0;
                out.data_mut()[ch * plane + y * w + x] = S::from_f64(blended);
            }
        }
    }
    Ok(out)
}
