use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::Tensor;
use super::model::*;
use crate::error::{Error, Result};

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams,
    /// Loss report of every step, measured before that step's update.
    pub trace: Vec<LossReport>,
}

/// Error raised when training produces a non-finite loss; carries the
/// trace up to the failure.
#[derive(Debug, Clone)]
pub struct Divergence {
    pub error: Error,
    pub trace: Vec<LossReport>,
}

/// Plain gradient descent with a fixed step. One freshly sampled mask per
/// image and step; the mask is differentiated with the straight-through
/// estimator. Normalization running statistics are updated with the
/// configured momentum.
pub fn train(
    batch: &TrainBatch,
    params: NetParams,
    steps: usize,
    learning_rate: f64,
    rng_seed: u64,
) -> std::result::Result<TrainOutcome, Divergence> {
    let fail = |error: Error, trace: Vec<LossReport>| Divergence { error, trace };
    if steps == 0 {
        return Err(fail(Error::InvalidInput("steps must be >= 1".into()), Vec::new()));
    }
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(fail(Error::InvalidInput("learning rate must be finite and >= 0".into()), Vec::new()));
    }
    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let fwd = match forward_batch(&params, &batch.images, Gating::Sample(&mut rng), NormStats::Batch) {
            Ok(f) => f,
            Err(e) => return Err(fail(e, trace)),
        };
        let report = fwd.report(&batch.images, &params.config);
        if !report.total.is_finite() {
            trace.push(report);
            return Err(fail(Error::Diverged { step }, trace));
        }
        let grads = match backward_batch(&params, &batch.images, &fwd, MaskGradient::StraightThrough) {
            Ok(g) => g,
            Err(e) => return Err(fail(e, trace)),
        };
        trace.push(report);
        if learning_rate > 0.0 {
            for ((_, w), (_, g)) in params.weights.tensors_mut().into_iter().zip(grads.weights.tensors()) {
                for (wv, gv) in w.iter_mut().zip(g) {
                    *wv -= learning_rate * gv;
                }
            }
            update_running_stats(&mut params, &fwd);
        }
        if !params.weights.is_finite() {
            return Err(fail(Error::Diverged { step }, trace));
        }
    }
    Ok(TrainOutcome { params, trace })
}

fn update_running_stats(params: &mut NetParams, fwd: &BatchForward) {
    let m = params.config.bn_momentum;
    for (li, (mean, var)) in fwd.batch_stats().into_iter().enumerate() {
        for (r, v) in params.running_mean[li].iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in params.running_var[li].iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

/// Mean number of cells per image whose inference-time score reaches `tau`.
pub fn mean_kept_keypoints(params: &NetParams, batch: &TrainBatch, tau: f64) -> Result<f64> {
    let fwd = forward_batch(params, &batch.images, Gating::Threshold(tau), NormStats::Running)?;
    let kept: usize = fwd.levels.iter().flatten().map(|l| l.mask.count_ones()).sum();
    Ok(kept as f64 / batch.len() as f64)
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter with the largest error, as `tensor[index]`.
    pub worst: String,
    pub checked: usize,
    /// Parameters skipped because the perturbation crossed a ReLU, pooling
    /// or absolute-value kink.
    pub non_smooth: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Gradients below this magnitude are compared absolutely.
const GRAD_FLOOR: f64 = 1e-8;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale.max(GRAD_FLOOR)
    }
}

/// Frozen gates for a gradient check: one mask sample per image and level,
/// plus the score values at the unperturbed parameters.
pub struct FrozenGates {
    pub masks: Vec<Vec<crate::pyramid::BinaryMask>>,
    pub anchor: Vec<Vec<Vec<f64>>>,
}

pub fn freeze_gates(params: &NetParams, batch: &TrainBatch, rng_seed: u64) -> Result<FrozenGates> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let fwd = forward_batch(params, &batch.images, Gating::Sample(&mut rng), NormStats::Batch)?;
    Ok(FrozenGates {
        masks: fwd.levels.iter().map(|ls| ls.iter().map(|l| l.mask.clone()).collect()).collect(),
        anchor: fwd.levels.iter().map(|ls| ls.iter().map(|l| l.scores.clone()).collect()).collect(),
    })
}

fn gated_forward(params: &NetParams, batch: &TrainBatch, gates: &FrozenGates, mode: MaskGradient) -> Result<BatchForward> {
    let anchor = match mode {
        MaskGradient::StraightThrough => Some(gates.anchor.as_slice()),
        MaskGradient::Frozen => None,
    };
    forward_batch(params, &batch.images, Gating::Fixed { masks: &gates.masks, anchor }, NormStats::Batch)
}

/// Analytic gradients with the given frozen gates.
pub fn analytic_gradients(params: &NetParams, batch: &TrainBatch, gates: &FrozenGates, mode: MaskGradient) -> Result<Gradients> {
    let fwd = gated_forward(params, batch, gates, mode)?;
    backward_batch(params, &batch.images, &fwd, mode)
}

/// Compares `grads` against central differences of the batch loss,
/// perturbing every parameter by `+-epsilon` with the gates held fixed.
pub fn check_gradients(
    params: &NetParams,
    batch: &TrainBatch,
    gates: &FrozenGates,
    mode: MaskGradient,
    grads: &Gradients,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let base = gated_forward(params, batch, gates, mode)?;
    let base_sig = base.branch_signature(&batch.images, params.config.recon_norm);
    let eval = |p: &NetParams| -> Result<(f64, u64)> {
        let f = gated_forward(p, batch, gates, mode)?;
        Ok((f.report(&batch.images, &p.config).total, f.branch_signature(&batch.images, params.config.recon_norm)))
    };
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: String::new(), checked: 0, non_smooth: 0 };
    let names: Vec<(String, usize)> = params.weights.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let analytic = grads.weights.tensors();
    let mut probe = params.clone();
    for (ti, (name, len)) in names.iter().enumerate() {
        for k in 0..*len {
            let original = probe.weights.tensors()[ti].1[k];
            probe.weights.tensors_mut()[ti].1[k] = original + epsilon;
            let (plus, sig_plus) = eval(&probe)?;
            probe.weights.tensors_mut()[ti].1[k] = original - epsilon;
            let (minus, sig_minus) = eval(&probe)?;
            probe.weights.tensors_mut()[ti].1[k] = original;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.non_smooth += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[ti].1[k], numeric);
            report.checked += 1;
            if report.worst.is_empty() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = format!("{name}[{k}]");
            }
        }
    }
    Ok(report)
}

/// Maximum parameter count accepted by [`grad_check`].
pub const GRAD_CHECK_MAX_PARAMS: usize = 10_000;

/// Full gradient check with frozen masks: samples one mask set from
/// `rng_seed`, computes analytic gradients, and compares every parameter
/// against central differences.
pub fn grad_check(params: &NetParams, batch: &TrainBatch, epsilon: f64, rng_seed: u64) -> Result<GradCheckReport> {
    if params.param_count() > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::InvalidInput(format!(
            "gradient check limited to {GRAD_CHECK_MAX_PARAMS} parameters, network has {}",
            params.param_count()
        )));
    }
    let gates = freeze_gates(params, batch, rng_seed)?;
    let grads = analytic_gradients(params, batch, &gates, MaskGradient::Frozen)?;
    check_gradients(params, batch, &gates, MaskGradient::Frozen, &grads, epsilon)
}

/// Smooth synthetic grayscale images: a few Gaussian blobs on a gradient
/// background, values in `[0, 1]`.
pub fn synthetic_images(seed: u64, count: usize, rows: usize, cols: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let gx = rng.random_range(-0.3..0.3);
            let gy = rng.random_range(-0.3..0.3);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        rng.random_range(0.0..rows as f64),
                        rng.random_range(0.0..cols as f64),
                        rng.random_range(2.0..(rows as f64 / 4.0).max(2.5)),
                        rng.random_range(-0.5..0.5),
                    )
                })
                .collect();
            let mut data = Vec::with_capacity(rows * cols);
            for y in 0..rows {
                for x in 0..cols {
                    let (u, v) = (y as f64 / rows as f64 - 0.5, x as f64 / cols as f64 - 0.5);
                    let mut val = 0.5 + gy * u + gx * v;
                    for &(by, bx, s, a) in &blobs {
                        let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                        val += a * (-d2 / (2.0 * s * s)).exp();
                    }
                    data.push(val.clamp(0.0, 1.0));
                }
            }
            Tensor::from_vec(1, rows, cols, data)
        })
        .collect()
}
