//! Training: the masked flow-equivariant objective, EMA target updates,
//! optimizers with cosine decay, and the full training loop.
//!
//! One step runs, in order: data acquisition, augmentation into a view
//! pair plus dense correspondence, online forward (h1, z1, p1), target
//! forward (z2, no gradients), bilinear upsampling of p1 and z2 to crop
//! resolution, warping of the target embedding through the correspondence,
//! channel normalization of both maps, the masked squared-distance loss,
//! reverse-mode backprop through the online path only, an optimizer step,
//! and the EMA update of the target. A batch with no valid pixel anywhere
//! skips the optimizer and EMA entirely: a no-information batch must not
//! decay weights.
//!
//! The loop is stateless in its randomness: every draw derives from
//! `(seed, stream, step, example)`, so runs are bitwise reproducible and a
//! resumed run continues exactly where the original would have gone.

use std::fs;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair_with, AffineMode, AugmentConfig, ViewPair};
use crate::error::{FloweError, Result};
use crate::geometry::{
    channel_normalize_backward, channel_normalize_with_norms, upsample_bilinear,
    upsample_bilinear_adjoint, warp_features, DenseCorrespondence, FlowField, Mask,
    NORMALIZE_EPS,
};
use crate::network::gradcheck::fd_sweep;
use crate::network::{
    backward, forward, forward_pooled, forward_target, forward_target_pooled, init_params,
    load_checkpoint, save_checkpoint, Activation, Arch, ForwardTrace, GradCheckReport,
    ModelParams, ParamGrads, TargetParams,
};
use crate::rngstream::{derive_rng, derive_seed, STREAM_AUGMENT, STREAM_MODEL_INIT};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive term in the LARS trust-ratio denominator.
pub const LARS_TRUST_EPS: f64 = 1e-9;

/// Optimizer choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Lars,
}

/// Target momentum schedule: cosine increase to 1, or held constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSchedule {
    Cosine,
    Constant,
}

/// Ablation switches for the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// When false, spatial maps collapse to their global average after the
    /// encoder and the loss compares single vectors (the pooled variant).
    pub pixel_based: bool,
    /// When false, both view affines are forced to identity.
    pub use_affine: bool,
    /// When false, the frame-to-frame flow is forced to zero.
    pub use_flow: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { pixel_based: true, use_affine: true, use_flow: true }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Base target momentum tau_0.
    pub ema_tau: f64,
    pub optimizer: OptimizerKind,
    pub tau_schedule: TauSchedule,
    pub ablation: AblationConfig,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0 = only the
    /// final one).
    pub checkpoint_every: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            batch_size: 8,
            base_lr: 0.1,
            weight_decay: 1e-6,
            momentum: 0.9,
            ema_tau: 0.996,
            optimizer: OptimizerKind::Lars,
            tau_schedule: TauSchedule::Cosine,
            ablation: AblationConfig::default(),
            seed: 0,
            checkpoint_every: 500,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FloweError::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(FloweError::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(FloweError::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FloweError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.ema_tau > 0.0 && self.ema_tau <= 1.0) {
            return Err(FloweError::Config(format!(
                "ema_tau must be in (0, 1], got {}",
                self.ema_tau
            )));
        }
        self.augment.validate()
    }
}

/// Per-step metrics, one JSON line each in the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub valid_pixel_fraction: f64,
    pub lr: f64,
    pub ema_tau_effective: f64,
    pub grad_norm: f64,
    /// True when no example in the batch had a valid pixel; the optimizer
    /// and EMA update were skipped.
    pub skipped: bool,
}

/// Masked mean squared distance between two channel-normalized maps:
/// `loss = (1/|mask|) * sum_{x in mask} ||p1(x) - p2(x)||^2`, together with
/// the exact gradient with respect to `p1`. Unmasked pixels contribute
/// nothing to either. An empty mask yields loss 0 and a zero gradient.
pub fn flowe_loss<S: Scalar>(
    p1: &Tensor<S>,
    p2: &Tensor<S>,
    mask: &Mask,
) -> Result<(f64, Tensor<S>)> {
    let (c, h, w) = p1.dims3()?;
    if p1.shape() != p2.shape() {
        return Err(FloweError::dim(
            "flowe_loss",
            format!("p1 {:?} vs p2 {:?}", p1.shape(), p2.shape()),
        ));
    }
    if mask.dims() != (h, w) {
        return Err(FloweError::dim(
            "flowe_loss",
            format!("mask {:?} vs maps {h}x{w}", mask.dims()),
        ));
    }
    let m = mask.count_true();
    let mut grad = Tensor::zeros(&[c, h, w]);
    if m == 0 {
        return Ok((0.0, grad));
    }
    let scale = S::from_f64(2.0 / m as f64);
    let mut loss = 0.0f64;
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let p = y * w + x;
            for ch in 0..c {
                let d = p1.data()[ch * hw + p] - p2.data()[ch * hw + p];
                loss += d.as_f64() * d.as_f64();
                grad.data_mut()[ch * hw + p] = scale * d;
            }
        }
    }
    Ok((loss / m as f64, grad))
}

/// EMA update of the target from the online parameters:
/// `xi <- tau * xi + (1 - tau) * theta`, over encoder and projector.
pub fn ema_update<S: Scalar>(
    target: &mut TargetParams<S>,
    online: &ModelParams<S>,
    tau: f64,
) -> Result<()> {
    if target.arch != online.arch {
        return Err(FloweError::Config(
            "ema_update: online and target architectures differ".into(),
        ));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(FloweError::Config(format!("ema tau must be in [0, 1], got {tau}")));
    }
    let t = S::from_f64(tau);
    let one_minus = S::from_f64(1.0 - tau);
    for (tl, ol) in target
        .encoder
        .iter_mut()
        .chain(target.projector.iter_mut())
        .zip(online.encoder.iter().chain(online.projector.iter()))
    {
        for (tt, ot) in [(&mut tl.w, &ol.w), (&mut tl.b, &ol.b)] {
            for (tv, &ov) in tt.data_mut().iter_mut().zip(ot.data()) {
                *tv = t * *tv + one_minus * ov;
            }
        }
    }
    Ok(())
}

/// Cosine-decayed learning rate: `base * (cos(pi * step / total) + 1) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

/// Cosine-increased target momentum:
/// `tau = 1 - (1 - tau0) * (cos(pi * step / total) + 1) / 2`.
pub fn ema_tau_schedule(step: u64, total_steps: u64, tau0: f64) -> f64 {
    if total_steps == 0 {
        return tau0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    1.0 - (1.0 - tau0) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

/// Optimizer state: one velocity tensor per parameter, canonical order.
#[derive(Debug, Clone)]
pub struct OptState<S: Scalar> {
    pub velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> OptState<S> {
    pub fn zeros(params: &ModelParams<S>) -> Self {
        OptState {
            velocity: params
                .param_tensors()
                .iter()
                .map(|t| Tensor::zeros(&t.shape().to_vec()))
                .collect(),
        }
    }
}

fn check_finite_grads<S: Scalar>(
    params: &ModelParams<S>,
    grads: &ParamGrads<S>,
    step: u64,
) -> Result<()> {
    for (meta, g) in params.param_meta().iter().zip(grads.tensors()) {
        if !g.all_finite() {
            return Err(FloweError::NonFiniteGradient { context: meta.name.clone(), step });
        }
    }
    Ok(())
}

/// SGD with momentum and coupled weight decay:
/// `v <- m*v + g + wd*w; w <- w - lr*v`.
pub fn sgd_momentum_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &ParamGrads<S>,
    opt: &mut OptState<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    step: u64,
) -> Result<()> {
    check_finite_grads(params, grads, step)?;
    let m = S::from_f64(momentum);
    let wd = S::from_f64(weight_decay);
    let lr_s = S::from_f64(lr);
    let gs = grads.tensors();
    for ((w, v), g) in params.param_tensors_mut().into_iter().zip(&mut opt.velocity).zip(gs) {
        for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = m * *vv + gv + wd * *wv;
            *wv = *wv - lr_s * *vv;
        }
    }
    Ok(())
}

/// LARS: the SGD-momentum update with the learning rate scaled per layer by
/// the trust ratio `||w|| / (||g|| + wd*||w|| + eps)`. Bias parameters are
/// excluded from both the adaptation and the weight decay.
pub fn lars_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &ParamGrads<S>,
    opt: &mut OptState<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    step: u64,
) -> Result<()> {
    check_finite_grads(params, grads, step)?;
    let meta = params.param_meta();
    let m = S::from_f64(momentum);
    let gs = grads.tensors();
    for (((w, v), g), meta) in params
        .param_tensors_mut()
        .into_iter()
        .zip(&mut opt.velocity)
        .zip(gs)
        .zip(meta)
    {
        let (wd, local_lr) = if meta.is_bias {
            (0.0, lr)
        } else {
            let wn = w.sq_norm_f64().sqrt();
            let gn = g.sq_norm_f64().sqrt();
            let eta = if wn > 0.0 { wn / (gn + weight_decay * wn + LARS_TRUST_EPS) } else { 1.0 };
            (weight_decay, lr * eta)
        };
        let wd_s = S::from_f64(wd);
        let lr_s = S::from_f64(local_lr);
        for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = m * *vv + gv + wd_s * *wv;
            *wv = *wv - lr_s * *vv;
        }
    }
    Ok(())
}

/// A pair of consecutive frames plus the forward flow between them.
#[derive(Debug, Clone)]
pub struct FramePair<S: Scalar> {
    pub frame1: Tensor<S>,
    pub frame2: Tensor<S>,
    /// Flow from frame1 to frame2, in raw-frame pixel units.
    pub flow: FlowField,
}

/// Deterministic source of frame pairs. Implementations must return the
/// same pair for the same `(run_seed, step, index)` triple regardless of
/// call order, so training is reproducible and resumable.
pub trait PairSource<S: Scalar> {
    fn pair(&mut self, run_seed: u64, step: u64, index: usize) -> Result<FramePair<S>>;
}

/// Mutable training state: the single owner of the online parameters.
#[derive(Debug, Clone)]
pub struct TrainState<S: Scalar> {
    pub cfg: TrainConfig,
    pub online: ModelParams<S>,
    pub target: TargetParams<S>,
    pub opt: OptState<S>,
    pub step: u64,
}

impl<S: Scalar> TrainState<S> {
    /// Fresh state: He-initialized online model, target copied from it,
    /// zero optimizer velocity, step 0.
    pub fn new(cfg: TrainConfig, arch: &Arch) -> Result<Self> {
        cfg.validate()?;
        let online = init_params::<S>(arch, &mut derive_rng(cfg.seed, &[STREAM_MODEL_INIT]))?;
        let target = TargetParams::from_online(&online);
        let opt = OptState::zeros(&online);
        Ok(TrainState { cfg, online, target, opt, step: 0 })
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        save_checkpoint(&self.online, Some(&self.target), Some(&self.opt.velocity), self.step)
    }

    pub fn from_checkpoint_bytes(cfg: TrainConfig, arch: &Arch, bytes: &[u8]) -> Result<Self> {
        cfg.validate()?;
        let ck = load_checkpoint::<S>(bytes, arch)?;
        let target = ck.target.ok_or_else(|| FloweError::CheckpointFormat {
            what: "resume requires a checkpoint with target parameters".into(),
        })?;
        let velocity = ck.velocity.ok_or_else(|| FloweError::CheckpointFormat {
            what: "resume requires a checkpoint with optimizer state".into(),
        })?;
        Ok(TrainState {
            cfg,
            online: ck.online,
            target,
            opt: OptState { velocity },
            step: ck.step,
        })
    }
}

/// One augmented example ready for the loss.
struct PreparedView<S: Scalar> {
    view: ViewPair<S>,
    t: DenseCorrespondence,
}

fn prepare_views<S: Scalar, Src: PairSource<S> + ?Sized>(
    cfg: &TrainConfig,
    source: &mut Src,
    step: u64,
) -> Result<Vec<PreparedView<S>>> {
    let mode =
        if cfg.ablation.use_affine { AffineMode::Sampled } else { AffineMode::Identity };
    (0..cfg.batch_size)
        .map(|i| {
            let pair = source.pair(cfg.seed, step, i)?;
            let flow = if cfg.ablation.use_flow {
                pair.flow
            } else {
                let (h, w) = pair.flow.dims();
                FlowField::zeros(h, w)
            };
            let aug_seed = derive_seed(cfg.seed, &[STREAM_AUGMENT, step, i as u64]);
            let (view, t) = make_view_pair_with(
                &pair.frame1,
                &pair.frame2,
                &flow,
                aug_seed,
                &cfg.augment,
                mode,
            )?;
            Ok(PreparedView { view, t })
        })
        .collect()
}

/// Everything produced by running the objective on one example.
struct ViewOut<S: Scalar> {
    loss: f64,
    valid: usize,
    total: usize,
    grads: Option<ParamGrads<S>>,
    /// ReLU signs of the online forward plus normalization clamp bits;
    /// used by the finite-difference harness to exclude kink crossings.
    pattern: Vec<bool>,
}

fn relu_pattern<S: Scalar>(params: &ModelParams<S>, trace: &ForwardTrace<S>, out: &mut Vec<bool>) {
    for (section, layers) in [
        (&trace.encoder, &params.encoder),
        (&trace.projector, &params.projector),
        (&trace.predictor, &params.predictor),
    ] {
        for (pre, layer) in section.preacts.iter().zip(layers) {
            if layer.spec.activation == Activation::Relu {
                out.extend(pre.data().iter().map(|&v| v > S::zero()));
            }
        }
    }
}

/// Run the objective on one prepared example. `want_grads` controls whether
/// the backward pass runs.
fn view_pass<S: Scalar>(
    online: &ModelParams<S>,
    target: &TargetParams<S>,
    pv: &PreparedView<S>,
    ablation: &AblationConfig,
    want_grads: bool,
) -> Result<ViewOut<S>> {
    let mut pattern = Vec::new();
    if ablation.pixel_based {
        let (_h1, _z1, p1, trace) = forward(online, &pv.view.v1, true)?;
        let trace = trace.expect("trace requested");
        relu_pattern(online, &trace, &mut pattern);
        let z2 = forward_target(target, &pv.view.v2)?;
        let (crop_h, crop_w) = pv.t.dims();
        let (_, ph, pw) = p1.dims3()?;
        let p1_up = upsample_bilinear(&p1, crop_h, crop_w)?;
        let z2_up = upsample_bilinear(&z2, crop_h, crop_w)?;
        let (p2, mask) = warp_features(&z2_up, &pv.t)?;
        let (p1n, div1) = channel_normalize_with_norms(&p1_up, NORMALIZE_EPS)?;
        let (p2n, _) = channel_normalize_with_norms(&p2, NORMALIZE_EPS)?;
        pattern.extend(div1.iter().map(|&d| d <= NORMALIZE_EPS));
        let (loss, grad_p1n) = flowe_loss(&p1n, &p2n, &mask)?;
        let valid = mask.count_true();
        let grads = if want_grads && valid > 0 {
            let g = channel_normalize_backward(&p1n, &div1, &grad_p1n, NORMALIZE_EPS)?;
            let g = upsample_bilinear_adjoint(&g, ph, pw)?;
            Some(backward(online, &trace, &g)?)
        } else {
            None
        };
        Ok(ViewOut { loss, valid, total: crop_h * crop_w, grads, pattern })
    } else {
        let (_h1, _z1, p1, trace) = forward_pooled(online, &pv.view.v1, true)?;
        let trace = trace.expect("trace requested");
        relu_pattern(online, &trace, &mut pattern);
        let z2 = forward_target_pooled(target, &pv.view.v2)?;
        let (p1n, div1) = channel_normalize_with_norms(&p1, NORMALIZE_EPS)?;
        let (z2n, _) = channel_normalize_with_norms(&z2, NORMALIZE_EPS)?;
        pattern.extend(div1.iter().map(|&d| d <= NORMALIZE_EPS));
        let mask = Mask::filled(1, 1, true);
        let (loss, grad_p1n) = flowe_loss(&p1n, &z2n, &mask)?;
        let grads = if want_grads {
            let g = channel_normalize_backward(&p1n, &div1, &grad_p1n, NORMALIZE_EPS)?;
            Some(backward(online, &trace, &g)?)
        } else {
            None
        };
        Ok(ViewOut { loss, valid: 1, total: 1, grads, pattern })
    }
}

/// Batch outcome: loss and gradients averaged over contributing examples.
struct BatchOut<S: Scalar> {
    loss: f64,
    valid_fraction: f64,
    contributing: usize,
    grads: Option<ParamGrads<S>>,
    pattern: Vec<bool>,
}

fn batch_pass<S: Scalar>(
    online: &ModelParams<S>,
    target: &TargetParams<S>,
    views: &[PreparedView<S>],
    ablation: &AblationConfig,
    want_grads: bool,
) -> Result<BatchOut<S>> {
    let mut loss_sum = 0.0;
    let mut frac_sum = 0.0;
    let mut contributing = 0usize;
    let mut grads: Option<ParamGrads<S>> = None;
    let mut pattern = Vec::new();
    for pv in views {
        let out = view_pass(online, target, pv, ablation, want_grads)?;
        frac_sum += out.valid as f64 / out.total as f64;
        pattern.extend(out.pattern);
        if out.valid > 0 {
            contributing += 1;
            loss_sum += out.loss;
            if let Some(g) = out.grads {
                match grads.as_mut() {
                    Some(acc) => acc.add_scaled(&g, S::one()),
                    None => grads = Some(g),
                }
            }
        }
    }
    if contributing > 0 {
        loss_sum /= contributing as f64;
        if let Some(acc) = grads.as_mut() {
            acc.scale(S::from_f64(1.0 / contributing as f64));
        }
    }
    Ok(BatchOut {
        loss: loss_sum,
        valid_fraction: frac_sum / views.len().max(1) as f64,
        contributing,
        grads,
        pattern,
    })
}

/// Run one full training step and advance the state.
pub fn train_step<S: Scalar, Src: PairSource<S> + ?Sized>(
    state: &mut TrainState<S>,
    source: &mut Src,
) -> Result<StepReport> {
    let step = state.step;
    let cfg = &state.cfg;
    let lr = cosine_lr(step, cfg.total_steps, cfg.base_lr);
    let tau = match cfg.tau_schedule {
        TauSchedule::Cosine => ema_tau_schedule(step, cfg.total_steps, cfg.ema_tau),
        TauSchedule::Constant => cfg.ema_tau,
    };
    let views = prepare_views(cfg, source, step)?;
    let out = batch_pass(&state.online, &state.target, &views, &cfg.ablation, true)?;

    let report = if out.contributing == 0 {
        StepReport {
            step,
            loss: 0.0,
            valid_pixel_fraction: out.valid_fraction,
            lr,
            ema_tau_effective: tau,
            grad_norm: 0.0,
            skipped: true,
        }
    } else {
        let grads = out.grads.expect("contributing examples produce gradients");
        let grad_norm = grads.sq_norm_f64().sqrt();
        let (momentum, wd) = (state.cfg.momentum, state.cfg.weight_decay);
        match state.cfg.optimizer {
            OptimizerKind::SgdMomentum => sgd_momentum_step(
                &mut state.online,
                &grads,
                &mut state.opt,
                lr,
                momentum,
                wd,
                step,
            )?,
            OptimizerKind::Lars => {
                lars_step(&mut state.online, &grads, &mut state.opt, lr, momentum, wd, step)?
            }
        }
        ema_update(&mut state.target, &state.online, tau)?;
        StepReport {
            step,
            loss: out.loss,
            valid_pixel_fraction: out.valid_fraction,
            lr,
            ema_tau_effective: tau,
            grad_norm,
            skipped: false,
        }
    };
    state.step += 1;
    Ok(report)
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.bin"))
}

/// Path of the final checkpoint written by [`train_loop`].
pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint-final.bin")
}

/// Path of the metrics log written by [`train_loop`].
pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.jsonl")
}

/// Run the training loop to `cfg.total_steps`, writing a JSON-lines metrics
/// log and periodic checkpoints into `out_dir`. With `resume`, state is
/// restored from that checkpoint and the metrics log is appended to;
/// otherwise training starts fresh. Returns the final state (also written
/// to `checkpoint-final.bin`). `on_step` observes every report.
pub fn train_loop<S: Scalar, Src: PairSource<S> + ?Sized>(
    cfg: &TrainConfig,
    arch: &Arch,
    source: &mut Src,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainState<S>> {
    cfg.validate()?;
    arch.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| FloweError::io(out_dir, e))?;
    let mut state = match resume {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| FloweError::io(path, e))?;
            let st = TrainState::<S>::from_checkpoint_bytes(cfg.clone(), arch, &bytes)?;
            if st.step > cfg.total_steps {
                return Err(FloweError::Config(format!(
                    "resume checkpoint is at step {} but total_steps is {}",
                    st.step, cfg.total_steps
                )));
            }
            st
        }
        None => TrainState::new(cfg.clone(), arch)?,
    };

    let mpath = metrics_path(out_dir);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .write(true)
        .open(&mpath)
        .map_err(|e| FloweError::io(&mpath, e))?;
    let mut metrics = BufWriter::new(file);

    while state.step < cfg.total_steps {
        let report = train_step(&mut state, source)?;
        let line = serde_json::to_string(&report)?;
        writeln!(metrics, "{line}").map_err(|e| FloweError::io(&mpath, e))?;
        on_step(&report);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            metrics.flush().map_err(|e| FloweError::io(&mpath, e))?;
            let cpath = checkpoint_path(out_dir, state.step);
            fs::write(&cpath, state.to_checkpoint_bytes())
                .map_err(|e| FloweError::io(&cpath, e))?;
        }
    }
    metrics.flush().map_err(|e| FloweError::io(&mpath, e))?;
    let fpath = final_checkpoint_path(out_dir);
    fs::write(&fpath, state.to_checkpoint_bytes()).map_err(|e| FloweError::io(&fpath, e))?;
    Ok(state)
}

/// Finite-difference check of the full composite objective (augmentation ->
/// forward -> upsample -> warp -> normalize -> masked loss) with respect to
/// every online parameter. The target network is an independent frozen
/// model so the check exercises a generic configuration. Views are prepared
/// once; the loss is then a deterministic function of the online
/// parameters.
pub fn composite_fd_check<Src: PairSource<f64> + ?Sized>(
    cfg: &TrainConfig,
    arch: &Arch,
    source: &mut Src,
    epsilon: f64,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let online = init_params::<f64>(arch, &mut derive_rng(cfg.seed, &[STREAM_MODEL_INIT]))?;
    let target_base =
        init_params::<f64>(arch, &mut derive_rng(cfg.seed, &[STREAM_MODEL_INIT, 1]))?;
    let target = TargetParams::from_online(&target_base);
    let views = prepare_views(cfg, source, 0)?;

    let base = batch_pass(&online, &target, &views, &cfg.ablation, true)?;
    if base.contributing == 0 {
        return Err(FloweError::Data(
            "composite gradient check needs at least one valid pixel".into(),
        ));
    }
    let grads = base.grads.expect("contributing batch");
    let analytic: Vec<Tensor<f64>> = grads.tensors().into_iter().cloned().collect();
    let mut eval = |p: &ModelParams<f64>| -> Result<(f64, Vec<bool>)> {
        let out = batch_pass(p, &target, &views, &cfg.ablation, false)?;
        Ok((out.loss, out.pattern))
    };
    fd_sweep(&online, &analytic, &base.pattern, epsilon, &mut eval)
}
