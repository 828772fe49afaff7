//! Fully convolutional encoder / projector / predictor with hand-written
//! reverse-mode gradients.
//!
//! The network is a plain sequence of convolutions (see [`conv`]); there is
//! no framework autograd. Every forward that will be differentiated records
//! a trace of layer inputs and pre-activations, and [`backward`] replays the
//! sequence in reverse using the exact adjoints from the conv module. All
//! accumulation orders are fixed, so training is bitwise reproducible.
//!
//! The encoder downsamples by exactly 8x; the projector and predictor are
//! 1x1 heads, so their parameter count is independent of input resolution
//! and they commute with spatial warps.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FloweError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use conv::{conv2d, conv2d_backward, relu, relu_backward, Activation, ConvLayerSpec};
pub use gradcheck::{finite_diff_check, GradCheckReport, LayerCheckReport};

/// Epsilon inside the square root of the optional feature standardization.
pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Network architecture: encoder trunk plus projector/predictor heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub encoder: Vec<ConvLayerSpec>,
    pub projector: Vec<ConvLayerSpec>,
    pub predictor: Vec<ConvLayerSpec>,
    /// When set, encoder features are standardized across channels at each
    /// location (zero mean, unit variance) before entering the projector.
    pub standardize_features: bool,
}

impl Arch {
    /// The default architecture: a four-layer strided/dilated encoder with
    /// output stride 8, and two-layer 1x1 projector and predictor heads.
    /// Features are standardized: the objective is scale-free in `h` (only
    /// the head outputs are normalized), so without this the feature
    /// magnitude drifts unboundedly over training, which destabilizes any
    /// fixed-lr readout trained on the frozen features.
    pub fn default_desk() -> Self {
        use Activation::{None as Lin, Relu};
        Arch {
            encoder: vec![
                ConvLayerSpec::k3(3, 16, 2, 1, Relu),
                ConvLayerSpec::k3(16, 32, 2, 1, Relu),
                ConvLayerSpec::k3(32, 64, 2, 1, Relu),
                ConvLayerSpec::k3(64, 64, 1, 2, Lin),
            ],
            projector: vec![ConvLayerSpec::k1(64, 64, Relu), ConvLayerSpec::k1(64, 32, Lin)],
            predictor: vec![ConvLayerSpec::k1(32, 32, Relu), ConvLayerSpec::k1(32, 32, Lin)],
            standardize_features: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.projector.is_empty() || self.predictor.is_empty() {
            return Err(FloweError::Config(
                "arch must have non-empty encoder, projector, and predictor".into(),
            ));
        }
        for (name, section) in [
            ("encoder", &self.encoder),
            ("projector", &self.projector),
            ("predictor", &self.predictor),
        ] {
            for (i, spec) in section.iter().enumerate() {
                spec.validate().map_err(|e| {
                    FloweError::Config(format!("{name} layer {i}: {e}"))
                })?;
            }
            for (i, pair) in section.windows(2).enumerate() {
                if pair[0].out_ch != pair[1].in_ch {
                    return Err(FloweError::Config(format!(
                        "{name} layer {i} outputs {} channels but layer {} expects {}",
                        pair[0].out_ch,
                        i + 1,
                        pair[1].in_ch
                    )));
                }
            }
        }
        let stride: usize = self.encoder.iter().map(|l| l.stride).product();
        if stride != 8 {
            return Err(FloweError::Config(format!(
                "encoder output stride must be 8, got {stride}"
            )));
        }
        for (name, section) in [("projector", &self.projector), ("predictor", &self.predictor)] {
            if section.iter().any(|l| l.kernel != 1 || l.stride != 1) {
                return Err(FloweError::Config(format!(
                    "{name} layers must all be 1x1 stride 1"
                )));
            }
        }
        if self.projector[0].in_ch != self.feature_channels() {
            return Err(FloweError::Config(format!(
                "projector expects {} channels, encoder produces {}",
                self.projector[0].in_ch,
                self.feature_channels()
            )));
        }
        if self.predictor[0].in_ch != self.embed_channels() {
            return Err(FloweError::Config(format!(
                "predictor expects {} channels, projector produces {}",
                self.predictor[0].in_ch,
                self.embed_channels()
            )));
        }
        if self.predictor.last().unwrap().out_ch != self.embed_channels() {
            return Err(FloweError::Config(
                "predictor output channels must match projector output channels".into(),
            ));
        }
        Ok(())
    }

    /// Channels of the input image the encoder expects.
    pub fn input_channels(&self) -> usize {
        self.encoder[0].in_ch
    }

    /// Channels of the dense feature map `h`.
    pub fn feature_channels(&self) -> usize {
        self.encoder.last().unwrap().out_ch
    }

    /// Channels of the embedding maps `z` and `p`.
    pub fn embed_channels(&self) -> usize {
        self.projector.last().unwrap().out_ch
    }

    /// Total spatial downsampling factor of the encoder.
    pub fn output_stride(&self) -> usize {
        self.encoder.iter().map(|l| l.stride).product()
    }

    /// SHA-256 over a canonical serialization of the architecture. Stored in
    /// checkpoints and verified on load.
    pub fn hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (tag, section) in [
            (0u8, &self.encoder),
            (1u8, &self.projector),
            (2u8, &self.predictor),
        ] {
            hasher.update([tag]);
            hasher.update((section.len() as u32).to_le_bytes());
            for l in section {
                for v in [l.in_ch, l.out_ch, l.kernel, l.stride, l.dilation, l.padding] {
                    hasher.update((v as u32).to_le_bytes());
                }
                hasher.update([l.has_bias as u8]);
                hasher.update([match l.activation {
                    Activation::None => 0u8,
                    Activation::Relu => 1u8,
                }]);
            }
        }
        hasher.update([self.standardize_features as u8]);
        hasher.finalize().into()
    }
}

/// One convolution layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S: Scalar> {
    pub spec: ConvLayerSpec,
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn zeros(spec: ConvLayerSpec) -> Self {
        Layer {
            spec,
            w: Tensor::zeros(&spec.weight_shape()),
            b: Tensor::zeros(&[spec.out_ch]),
        }
    }
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrad<S: Scalar> {
    pub gw: Tensor<S>,
    pub gb: Tensor<S>,
}

/// Online model: encoder, projector, and predictor parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar> {
    pub arch: Arch,
    pub encoder: Vec<Layer<S>>,
    pub projector: Vec<Layer<S>>,
    pub predictor: Vec<Layer<S>>,
}

/// Target model: an exponential moving average of the online encoder and
/// projector. It has no predictor and receives no gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetParams<S: Scalar> {
    pub arch: Arch,
    pub encoder: Vec<Layer<S>>,
    pub projector: Vec<Layer<S>>,
}

impl<S: Scalar> TargetParams<S> {
    /// Initialize the target as an exact copy of the online encoder and
    /// projector.
    pub fn from_online(online: &ModelParams<S>) -> Self {
        TargetParams {
            arch: online.arch.clone(),
            encoder: online.encoder.clone(),
            projector: online.projector.clone(),
        }
    }

    /// Parameter tensors in canonical order (encoder then projector; weight
    /// before bias within a layer).
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for l in self.encoder.iter_mut().chain(self.projector.iter_mut()) {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    pub fn param_tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain(self.projector.iter()) {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }
}

/// Name and role of one parameter tensor, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    pub is_bias: bool,
}

impl<S: Scalar> ModelParams<S> {
    fn sections(&self) -> [(&'static str, &Vec<Layer<S>>); 3] {
        [
            ("encoder", &self.encoder),
            ("projector", &self.projector),
            ("predictor", &self.predictor),
        ]
    }

    /// Parameter tensors in canonical order: encoder, projector, predictor;
    /// within each layer the weight precedes the bias. The optimizer,
    /// checkpoint format, and gradient containers all share this order.
    pub fn param_tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for (_, section) in self.sections() {
            for l in section {
                out.push(&l.w);
                out.push(&l.b);
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for section in [&mut self.encoder, &mut self.projector, &mut self.predictor] {
            for l in section.iter_mut() {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
        }
        out
    }

    pub fn param_meta(&self) -> Vec<ParamMeta> {
        let mut out = Vec::new();
        for (name, section) in self.sections() {
            for (i, _) in section.iter().enumerate() {
                out.push(ParamMeta { name: format!("{name}.{i}.weight"), is_bias: false });
                out.push(ParamMeta { name: format!("{name}.{i}.bias"), is_bias: true });
            }
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.param_tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let conv = |ls: &Vec<Layer<S>>| {
            ls.iter()
                .map(|l| Layer { spec: l.spec, w: l.w.cast::<T>(), b: l.b.cast::<T>() })
                .collect()
        };
        ModelParams {
            arch: self.arch.clone(),
            encoder: conv(&self.encoder),
            projector: conv(&self.projector),
            predictor: conv(&self.predictor),
        }
    }
}

/// He (fan-in) initialization: weights drawn from a normal with standard
/// deviation `sqrt(2 / fan_in)`, biases zero. Draws happen in f64 in
/// canonical parameter order, so f32 and f64 models start from the same
/// underlying values.
pub fn init_params<S: Scalar>(arch: &Arch, rng: &mut ChaCha8Rng) -> Result<ModelParams<S>> {
    arch.validate()?;
    let mut init_section = |specs: &Vec<ConvLayerSpec>| -> Vec<Layer<S>> {
        specs
            .iter()
            .map(|&spec| {
                let fan_in = spec.in_ch * spec.kernel * spec.kernel;
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("std is positive and finite");
                let n: usize = spec.weight_shape().iter().product();
                let data: Vec<S> =
                    (0..n).map(|_| S::from_f64(normal.sample(rng))).collect();
                Layer {
                    spec,
                    w: Tensor::from_vec(&spec.weight_shape(), data)
                        .expect("sampled weights are finite"),
                    b: Tensor::zeros(&[spec.out_ch]),
                }
            })
            .collect()
    };
    Ok(ModelParams {
        arch: arch.clone(),
        encoder: init_section(&arch.encoder),
        projector: init_section(&arch.projector),
        predictor: init_section(&arch.predictor),
    })
}

/// Trace of a layer sequence: the input to each conv and its
/// pre-activation output, in forward order.
#[derive(Debug, Clone)]
pub struct SeqTrace<S: Scalar> {
    pub inputs: Vec<Tensor<S>>,
    pub preacts: Vec<Tensor<S>>,
}

/// Run a layer sequence forward. With `keep_trace` the per-layer inputs and
/// pre-activations are recorded for [`run_layers_backward`].
pub fn run_layers<S: Scalar>(
    layers: &[Layer<S>],
    x: &Tensor<S>,
    keep_trace: bool,
) -> Result<(Tensor<S>, Option<SeqTrace<S>>)> {
    let mut trace = keep_trace.then(|| SeqTrace { inputs: Vec::new(), preacts: Vec::new() });
    let mut cur = x.clone();
    for layer in layers {
        let pre = conv2d(&cur, &layer.spec, &layer.w, &layer.b)?;
        let post = match layer.spec.activation {
            Activation::None => pre.clone(),
            Activation::Relu => relu(&pre),
        };
        if let Some(t) = trace.as_mut() {
            t.inputs.push(cur);
            t.preacts.push(pre);
        }
        cur = post;
    }
    Ok((cur, trace))
}

/// Reverse pass over a layer sequence: returns per-layer parameter
/// gradients (forward order) and the gradient with respect to the input.
pub fn run_layers_backward<S: Scalar>(
    layers: &[Layer<S>],
    trace: &SeqTrace<S>,
    grad_out: &Tensor<S>,
) -> Result<(Vec<LayerGrad<S>>, Tensor<S>)> {
    if trace.inputs.len() != layers.len() || trace.preacts.len() != layers.len() {
        return Err(FloweError::dim(
            "run_layers_backward",
            format!("trace has {} layers, sequence has {}", trace.inputs.len(), layers.len()),
        ));
    }
    let mut grads = Vec::with_capacity(layers.len());
    let mut g = grad_out.clone();
    for (j, layer) in layers.iter().enumerate().rev() {
        if layer.spec.activation == Activation::Relu {
            g = relu_backward(&trace.preacts[j], &g);
        }
        let (gw, gb, gx) =
            conv2d_backward(&trace.inputs[j], &layer.spec, &layer.w, &layer.b, &g)?;
        grads.push(LayerGrad { gw, gb });
        g = gx;
    }
    grads.reverse();
    Ok((grads, g))
}

/// Trace of the per-location channel standardization.
#[derive(Debug, Clone)]
pub struct StdTrace<S: Scalar> {
    /// Standardized output.
    pub y: Tensor<S>,
    /// Per-pixel `1 / sqrt(var + eps)`.
    pub inv_std: Vec<S>,
}

/// Standardize each spatial location across channels: subtract the channel
/// mean and divide by `sqrt(var + eps)`.
pub fn standardize_forward<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, StdTrace<S>)> {
    let (c, h, w) = x.dims3()?;
    let cf = S::from_f64(c as f64);
    let eps = S::from_f64(STANDARDIZE_EPS);
    let mut y = Tensor::zeros(&[c, h, w]);
    let mut inv_std = vec![S::zero(); h * w];
    for p in 0..h * w {
        let mut mean = S::zero();
        for ch in 0..c {
            mean = mean + x.data()[ch * h * w + p];
        }
        mean = mean / cf;
        let mut var = S::zero();
        for ch in 0..c {
            let d = x.data()[ch * h * w + p] - mean;
            var = var + d * d;
        }
        var = var / cf;
        let is = S::one() / (var + eps).sqrt();
        inv_std[p] = is;
        for ch in 0..c {
            y.data_mut()[ch * h * w + p] = (x.data()[ch * h * w + p] - mean) * is;
        }
    }
    let trace = StdTrace { y: y.clone(), inv_std };
    Ok((y, trace))
}

/// Adjoint of [`standardize_forward`]:
/// `dx = inv_std * (g - mean_c(g) - y * mean_c(g * y))` per location.
pub fn standardize_backward<S: Scalar>(
    trace: &StdTrace<S>,
    grad: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (c, h, w) = trace.y.dims3()?;
    if grad.shape() != trace.y.shape() {
        return Err(FloweError::dim(
            "standardize_backward",
            format!("grad shape {:?} vs trace {:?}", grad.shape(), trace.y.shape()),
        ));
    }
    let cf = S::from_f64(c as f64);
    let mut out = Tensor::zeros(&[c, h, w]);
    for p in 0..h * w {
        let mut gm = S::zero();
        let mut gym = S::zero();
        for ch in 0..c {
            let g = grad.data()[ch * h * w + p];
            gm = gm + g;
            gym = gym + g * trace.y.data()[ch * h * w + p];
        }
        gm = gm / cf;
        gym = gym / cf;
        let is = trace.inv_std[p];
        for ch in 0..c {
            let g = grad.data()[ch * h * w + p];
            let y = trace.y.data()[ch * h * w + p];
            out.data_mut()[ch * h * w + p] = is * (g - gm - y * gym);
        }
    }
    Ok(out)
}

/// Global average pool `C x H x W -> C x 1 x 1`.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = x.dims3()?;
    let n = S::from_f64((h * w) as f64);
    let mut out = Tensor::zeros(&[c, 1, 1]);
    for ch in 0..c {
        let s: S = x.plane(ch).iter().copied().sum();
        out.data_mut()[ch] = s / n;
    }
    Ok(out)
}

/// Adjoint of [`global_avg_pool`]: spreads each channel gradient uniformly
/// over the `h x w` plane.
pub fn global_avg_pool_backward<S: Scalar>(
    grad: &Tensor<S>,
    h: usize,
    w: usize,
) -> Result<Tensor<S>> {
    let (c, gh, gw) = grad.dims3()?;
    if (gh, gw) != (1, 1) {
        return Err(FloweError::dim(
            "global_avg_pool_backward",
            format!("grad must be C x 1 x 1, got {:?}", grad.shape()),
        ));
    }
    let n = S::from_f64((h * w) as f64);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let v = grad.data()[ch] / n;
        out.plane_mut(ch).fill(v);
    }
    Ok(out)
}

/// Everything recorded by a differentiable forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S: Scalar> {
    pub encoder: SeqTrace<S>,
    pub standardize: Option<StdTrace<S>>,
    /// Spatial dims of `h` when the heads ran on a pooled `C x 1 x 1` input.
    pub pooled_from: Option<(usize, usize)>,
    pub projector: SeqTrace<S>,
    pub predictor: SeqTrace<S>,
}

fn check_input<S: Scalar>(arch: &Arch, x: &Tensor<S>) -> Result<()> {
    let (c, h, w) = x.dims3()?;
    if c != arch.input_channels() {
        return Err(FloweError::dim(
            "network::forward",
            format!("input has {c} channels, arch expects {}", arch.input_channels()),
        ));
    }
    let os = arch.output_stride();
    if h % os != 0 || w % os != 0 {
        return Err(FloweError::dim(
            "network::forward",
            format!("input {h}x{w} not divisible by output stride {os}"),
        ));
    }
    Ok(())
}

fn encode<S: Scalar>(
    params: &ModelParams<S>,
    x: &Tensor<S>,
    keep_trace: bool,
) -> Result<(Tensor<S>, Option<SeqTrace<S>>, Option<StdTrace<S>>)> {
    check_input(&params.arch, x)?;
    let (h_raw, enc_trace) = run_layers(&params.encoder, x, keep_trace)?;
    if params.arch.standardize_features {
        let (h, std_trace) = standardize_forward(&h_raw)?;
        Ok((h, enc_trace, Some(std_trace)))
    } else {
        Ok((h_raw, enc_trace, None))
    }
}

/// Online forward pass: dense features `h`, embeddings `z`, and predictions
/// `p`, all at 1/8 input resolution. With `keep_trace`, returns the trace
/// needed by [`backward`].
pub fn forward<S: Scalar>(
    params: &ModelParams<S>,
    x: &Tensor<S>,
    keep_trace: bool,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, Option<ForwardTrace<S>>)> {
    let (h, enc_trace, std_trace) = encode(params, x, keep_trace)?;
    let (z, proj_trace) = run_layers(&params.projector, &h, keep_trace)?;
    let (p, pred_trace) = run_layers(&params.predictor, &z, keep_trace)?;
    let trace = keep_trace.then(|| ForwardTrace {
        encoder: enc_trace.unwrap(),
        standardize: std_trace,
        pooled_from: None,
        projector: proj_trace.unwrap(),
        predictor: pred_trace.unwrap(),
    });
    Ok((h, z, p, trace))
}

/// Online forward pass for the pooled variant: `h` is globally averaged to
/// `C x 1 x 1` before the projector and predictor.
pub fn forward_pooled<S: Scalar>(
    params: &ModelParams<S>,
    x: &Tensor<S>,
    keep_trace: bool,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, Option<ForwardTrace<S>>)> {
    let (h, enc_trace, std_trace) = encode(params, x, keep_trace)?;
    let (_, hh, hw) = h.dims3()?;
    let pooled = global_avg_pool(&h)?;
    let (z, proj_trace) = run_layers(&params.projector, &pooled, keep_trace)?;
    let (p, pred_trace) = run_layers(&params.predictor, &z, keep_trace)?;
    let trace = keep_trace.then(|| ForwardTrace {
        encoder: enc_trace.unwrap(),
        standardize: std_trace,
        pooled_from: Some((hh, hw)),
        projector: proj_trace.unwrap(),
        predictor: pred_trace.unwrap(),
    });
    Ok((h, z, p, trace))
}

/// Target forward pass: encoder and projector only, no trace, no predictor.
pub fn forward_target<S: Scalar>(target: &TargetParams<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    check_input(&target.arch, x)?;
    let (h_raw, _) = run_layers(&target.encoder, x, false)?;
    let h = if target.arch.standardize_features {
        standardize_forward(&h_raw)?.0
    } else {
        h_raw
    };
    let (z, _) = run_layers(&target.projector, &h, false)?;
    Ok(z)
}

/// Target forward pass for the pooled variant.
pub fn forward_target_pooled<S: Scalar>(
    target: &TargetParams<S>,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    check_input(&target.arch, x)?;
    let (h_raw, _) = run_layers(&target.encoder, x, false)?;
    let h = if target.arch.standardize_features {
        standardize_forward(&h_raw)?.0
    } else {
        h_raw
    };
    let (z, _) = run_layers(&target.projector, &global_avg_pool(&h)?, false)?;
    Ok(z)
}

/// Gradients for every online parameter, in the same layout as
/// [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads<S: Scalar> {
    pub encoder: Vec<LayerGrad<S>>,
    pub projector: Vec<LayerGrad<S>>,
    pub predictor: Vec<LayerGrad<S>>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn zeros_like(params: &ModelParams<S>) -> Self {
        let z = |ls: &Vec<Layer<S>>| {
            ls.iter()
                .map(|l| LayerGrad {
                    gw: Tensor::zeros(&l.spec.weight_shape()),
                    gb: Tensor::zeros(&[l.spec.out_ch]),
                })
                .collect()
        };
        ParamGrads {
            encoder: z(&params.encoder),
            projector: z(&params.projector),
            predictor: z(&params.predictor),
        }
    }

    /// Gradient tensors in canonical parameter order.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for section in [&self.encoder, &self.projector, &self.predictor] {
            for g in section {
                out.push(&g.gw);
                out.push(&g.gb);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for section in [&mut self.encoder, &mut self.projector, &mut self.predictor] {
            for g in section.iter_mut() {
                out.push(&mut g.gw);
                out.push(&mut g.gb);
            }
        }
        out
    }

    /// Accumulate `alpha * other` into `self`.
    pub fn add_scaled(&mut self, other: &ParamGrads<S>, alpha: S) {
        let others = other.tensors();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(others) {
            mine.add_scaled(theirs, alpha);
        }
    }

    pub fn scale(&mut self, alpha: S) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v = *v * alpha;
            }
        }
    }

    pub fn sq_norm_f64(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// Reverse pass for [`forward`] / [`forward_pooled`]: given the gradient of
/// the loss with respect to `p`, produce gradients for every parameter.
pub fn backward<S: Scalar>(
    params: &ModelParams<S>,
    trace: &ForwardTrace<S>,
    grad_p: &Tensor<S>,
) -> Result<ParamGrads<S>> {
    let (pred_grads, g_z) = run_layers_backward(&params.predictor, &trace.predictor, grad_p)?;
    let (proj_grads, g_h) = run_layers_backward(&params.projector, &trace.projector, &g_z)?;
    let mut g_h = g_h;
    if let Some((hh, hw)) = trace.pooled_from {
        g_h = global_avg_pool_backward(&g_h, hh, hw)?;
    }
    if let Some(std_trace) = &trace.standardize {
        g_h = standardize_backward(std_trace, &g_h)?;
    }
    let (enc_grads, _) = run_layers_backward(&params.encoder, &trace.encoder, &g_h)?;
    Ok(ParamGrads { encoder: enc_grads, projector: proj_grads, predictor: pred_grads })
}
