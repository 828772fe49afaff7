//! Finite-difference verification of the hand-written gradients.
//!
//! The check runs entirely in f64. A fixed random probe vector `c` defines
//! the scalar loss `L = sum(c * p)` over the prediction map; the analytic
//! gradient from [`backward`](super::backward) is compared against central
//! differences for every parameter scalar.
//!
//! ReLU is not differentiable at zero, so a perturbation that flips any
//! activation sign makes the finite difference meaningless. Each perturbed
//! forward records its activation pattern, and entries whose pattern differs
//! from the unperturbed one are excluded from the comparison (and counted).

use crate::error::Result;
use crate::network::{backward, forward, Activation, ModelParams};
use crate::rngstream::{derive_rng, STREAM_GRADCHECK};
use crate::tensor::Tensor;
use rand::Rng;

/// Relative error is measured as `|a - f| / max(|a|, |f|, floor)` so tiny
/// gradients do not blow up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Per-layer outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct LayerCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Parameter entries compared.
    pub checked: usize,
    /// Entries skipped because the perturbation crossed a ReLU kink.
    pub skipped: usize,
}

/// Outcome of a full finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheckReport>,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Largest |analytic gradient| over the entries that were actually
    /// compared (kink-skipped entries excluded). Zero means every compared
    /// direction was flat — e.g. a ReLU block that is dead for the probed
    /// input — in which case agreement with finite differences is vacuous
    /// and the sweep verified nothing.
    pub max_abs_analytic: f64,
}

impl GradCheckReport {
    /// True when every layer had at least one comparable entry, the
    /// analytic gradient is not identically zero, and all relative errors
    /// are below `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0
            && self.max_abs_analytic > 0.0
            && self.max_rel_err < tol
            && self.layers.iter().all(|l| l.checked > 0)
    }
}

/// Forward pass that also returns the ReLU activation sign pattern.
fn probe_forward(
    params: &ModelParams<f64>,
    input: &Tensor<f64>,
    coeffs: &Tensor<f64>,
) -> Result<(f64, Vec<bool>)> {
    let (_, _, p, trace) = forward(params, input, true)?;
    let trace = trace.expect("trace requested");
    let mut pattern = Vec::new();
    for (section, layers) in [
        (&trace.encoder, &params.encoder),
        (&trace.projector, &params.projector),
        (&trace.predictor, &params.predictor),
    ] {
        for (pre, layer) in section.preacts.iter().zip(layers) {
            if layer.spec.activation == Activation::Relu {
                pattern.extend(pre.data().iter().map(|&v| v > 0.0));
            }
        }
    }
    let loss = p.data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum();
    Ok((loss, pattern))
}

/// Central-difference sweep over every parameter of `params`.
///
/// `analytic` holds the claimed gradients in canonical parameter order;
/// `eval` maps a parameter setting to `(loss, activation pattern)`. Entries
/// whose perturbed pattern differs from `base_pattern` are skipped. Shared
/// by the probe-loss check here and the trainer's composite-loss check.
pub(crate) fn fd_sweep(
    params: &ModelParams<f64>,
    analytic: &[Tensor<f64>],
    base_pattern: &[bool],
    epsilon: f64,
    eval: &mut dyn FnMut(&ModelParams<f64>) -> Result<(f64, Vec<bool>)>,
) -> Result<GradCheckReport> {
    let meta = params.param_meta();
    assert_eq!(meta.len(), analytic.len(), "one analytic tensor per parameter");
    let mut work = params.clone();
    let mut layers: Vec<LayerCheckReport> = Vec::new();
    let mut max_abs_analytic = 0.0f64;

    for (slot, meta) in meta.iter().enumerate() {
        let layer_name = meta
            .name
            .rsplit_once('.')
            .map(|(head, _)| head.to_string())
            .unwrap_or_else(|| meta.name.clone());
        if layers.last().map(|l| l.name != layer_name).unwrap_or(true) {
            layers.push(LayerCheckReport {
                name: layer_name,
                max_rel_err: 0.0,
                checked: 0,
                skipped: 0,
            });
        }
        let report = layers.last_mut().unwrap();
        let n = analytic[slot].len();
        for idx in 0..n {
            let orig = work.param_tensors()[slot].data()[idx];
            work.param_tensors_mut()[slot].data_mut()[idx] = orig + epsilon;
            let (loss_p, pat_p) = eval(&work)?;
            work.param_tensors_mut()[slot].data_mut()[idx] = orig - epsilon;
            let (loss_m, pat_m) = eval(&work)?;
            work.param_tensors_mut()[slot].data_mut()[idx] = orig;
            if pat_p != base_pattern || pat_m != base_pattern {
                report.skipped += 1;
                continue;
            }
            let fd = (loss_p - loss_m) / (2.0 * epsilon);
            let a = analytic[slot].data()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_ERR_FLOOR);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
            max_abs_analytic = max_abs_analytic.max(a.abs());
        }
    }

    let max_rel_err = layers.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    let checked = layers.iter().map(|l| l.checked).sum();
    let skipped = layers.iter().map(|l| l.skipped).sum();
    Ok(GradCheckReport { layers, max_rel_err, checked, skipped, max_abs_analytic })
}

/// Compare analytic gradients of a probe loss against central finite
/// differences for every parameter of the model. `epsilon` is the
/// perturbation step (1e-5 is appropriate for f64).
pub fn finite_diff_check(
    params: &ModelParams<f64>,
    input: &Tensor<f64>,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let (_, _, p, trace) = forward(params, input, true)?;
    let trace = trace.expect("trace requested");
    let mut rng = derive_rng(0, &[STREAM_GRADCHECK]);
    let coeffs_data: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let coeffs = Tensor::from_vec(&p.shape().to_vec(), coeffs_data)?;
    let grads = backward(params, &trace, &coeffs)?;
    let (_, base_pattern) = probe_forward(params, input, &coeffs)?;
    let analytic: Vec<Tensor<f64>> = grads.tensors().into_iter().cloned().collect();
    let mut eval =
        |p: &ModelParams<f64>| -> Result<(f64, Vec<bool>)> { probe_forward(p, input, &coeffs) };
    fd_sweep(params, &analytic, &base_pattern, epsilon, &mut eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, Arch, ConvLayerSpec};
    use crate::rngstream::STREAM_MODEL_INIT;

    fn narrow_arch(standardize: bool) -> Arch {
        use Activation::{None as Lin, Relu};
        Arch {
            encoder: vec![
                ConvLayerSpec::k3(3, 3, 2, 1, Relu),
                ConvLayerSpec::k3(3, 4, 2, 1, Relu),
                ConvLayerSpec::k3(4, 4, 2, 1, Relu),
                ConvLayerSpec::k3(4, 4, 1, 2, Lin),
            ],
            projector: vec![ConvLayerSpec::k1(4, 4, Relu), ConvLayerSpec::k1(4, 3, Lin)],
            predictor: vec![ConvLayerSpec::k1(3, 3, Relu), ConvLayerSpec::k1(3, 3, Lin)],
            standardize_features: standardize,
        }
    }

    fn rand_input(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = derive_rng(seed, &[STREAM_GRADCHECK, 99]);
        Tensor::from_fn3(3, h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn narrow_model_passes_at_1e5() {
        let params =
            init_params::<f64>(&narrow_arch(false), &mut derive_rng(1, &[STREAM_MODEL_INIT]))
                .unwrap();
        let report = finite_diff_check(&params, &rand_input(2, 16, 16), 1e-5).unwrap();
        assert!(
            report.passes(1e-5),
            "max rel err {} (checked {}, skipped {})",
            report.max_rel_err,
            report.checked,
            report.skipped
        );
        // All conv layers show up in the report.
        assert_eq!(report.layers.len(), 8);
        // Kink exclusions must not dominate.
        assert!(report.skipped < report.checked / 10);
    }

    #[test]
    fn standardized_model_also_passes() {
        let params =
            init_params::<f64>(&narrow_arch(true), &mut derive_rng(3, &[STREAM_MODEL_INIT]))
                .unwrap();
        let report = finite_diff_check(&params, &rand_input(4, 16, 16), 1e-5).unwrap();
        assert!(report.passes(1e-5), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn linear_model_error_at_machine_eps_scale() {
        // With all activations removed the probe loss is exactly linear in
        // each parameter, so central differences are exact up to float
        // round-off.
        let mut arch = narrow_arch(false);
        for l in arch
            .encoder
            .iter_mut()
            .chain(arch.projector.iter_mut())
            .chain(arch.predictor.iter_mut())
        {
            l.activation = Activation::None;
        }
        let params =
            init_params::<f64>(&arch, &mut derive_rng(5, &[STREAM_MODEL_INIT])).unwrap();
        let report = finite_diff_check(&params, &rand_input(6, 16, 16), 1e-5).unwrap();
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_err < 1e-7, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn coarse_epsilon_shows_truncation_error() {
        // Negative control: with feature standardization the loss is
        // genuinely nonlinear in each parameter, so a coarse step must
        // produce visibly larger finite-difference error than a fine one.
        // This shows the comparison is live rather than trivially zero.
        let params =
            init_params::<f64>(&narrow_arch(true), &mut derive_rng(7, &[STREAM_MODEL_INIT]))
                .unwrap();
        let input = rand_input(8, 16, 16);
        let fine = finite_diff_check(&params, &input, 1e-5).unwrap();
        let coarse = finite_diff_check(&params, &input, 5e-2).unwrap();
        assert!(fine.max_rel_err < 1e-5);
        assert!(
            coarse.max_rel_err > 10.0 * fine.max_rel_err,
            "coarse {} vs fine {}",
            coarse.max_rel_err,
            fine.max_rel_err
        );
    }
}
