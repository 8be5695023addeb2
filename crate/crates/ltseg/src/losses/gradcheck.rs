//! Finite-difference verification of the analytic loss gradients.
//!
//! Every kind is checked against central differences of its own value
//! function. Two kinds need care: the noise-perturbed loss is already a
//! deterministic function of (logits, seed), so re-evaluating at shifted
//! logits keeps the draw frozen automatically; the adaptive loss in its
//! default stop-gradient mode is checked against the value function with
//! the per-pixel weights frozen at the unperturbed logits, which is the
//! exact objective that gradient is the derivative of.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{loss_dispatch, ClassStats, LossKind, LossSpec, NoiseDist, PatVariant};
use crate::error::Result;
use crate::tensor::{onehot, softmax_channels, PixelLane, Tensor};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Componentwise relative tolerance.
pub const REL_TOL: f64 = 1e-4;
/// Absolute floor below which differences are ignored.
pub const ABS_FLOOR: f64 = 1e-8;

/// Central finite-difference gradient of `f` at `at`.
pub fn central_diff<F>(f: F, at: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut out = Tensor::zeros(at.shape());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let orig = at.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Worst component of a gradient comparison. `ratio` is the error divided
/// by its allowance max(ABS_FLOOR, REL_TOL * max(|fd|, |analytic|)); the
/// comparison passes iff ratio <= 1.
#[derive(Debug, Clone, Copy)]
pub struct Agreement {
    pub ok: bool,
    pub ratio: f64,
    pub worst_index: usize,
}

/// Compare an analytic gradient against a finite-difference one.
pub fn compare_gradients(fd: &Tensor, analytic: &Tensor) -> Agreement {
    let mut worst = Agreement { ok: true, ratio: 0.0, worst_index: 0 };
    for (i, (&f, &a)) in fd.data().iter().zip(analytic.data()).enumerate() {
        let err = (f - a).abs();
        let allowance = ABS_FLOOR.max(REL_TOL * f.abs().max(a.abs()));
        let ratio = err / allowance;
        if ratio > worst.ratio {
            worst = Agreement { ok: ratio <= 1.0, ratio, worst_index: i };
        }
    }
    worst
}

fn frozen_betas(spec: &LossSpec, logits: &Tensor, mask: &Tensor) -> Result<Vec<f64>> {
    let dims = logits.dims4()?;
    let (b, _, h, w) = dims;
    let probs = softmax_channels(logits)?;
    let targets = kernels::extract_targets(mask)?;
    let mut betas = vec![0.0; b * h * w];
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let pix = (bi * h + hi) * w + wi;
                let lane = PixelLane::at(bi, hi, wi, dims);
                let t = targets.classes[pix] as usize;
                let p_t = probs.data()[lane.idx(t)];
                betas[pix] = kernels::pat_beta_scalar(p_t, spec.temperature, spec.epsilon, spec.variant);
            }
        }
    }
    Ok(betas)
}

/// Adaptive-loss value with the per-pixel weights supplied externally
/// instead of recomputed from the logits.
fn pat_value_with_fixed_betas(
    spec: &LossSpec,
    logits: &Tensor,
    mask: &Tensor,
    betas: &[f64],
) -> Result<f64> {
    let dims = logits.dims4()?;
    let (b, l, h, w) = dims;
    let probs = softmax_channels(logits)?;
    let targets = kernels::extract_targets(mask)?;
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let pix = (bi * h + hi) * w + wi;
                let lane = PixelLane::at(bi, hi, wi, dims);
                let t = targets.classes[pix] as usize;
                let weight = if spec.normalize_by_mask_size {
                    inv_b / targets.sizes[bi * l + t] as f64
                } else {
                    inv_b
                };
                total += weight * betas[pix] * -probs.data()[lane.idx(t)].ln();
            }
        }
    }
    Ok(total)
}

/// Check one instance: analytic gradient vs central differences.
pub fn check_instance(
    spec: &LossSpec,
    logits: &Tensor,
    mask: &Tensor,
    stats: &ClassStats,
    seed: u64,
) -> Result<Agreement> {
    let analytic = loss_dispatch(spec, logits, mask, stats, seed)?.grad_logits;
    let fd = if spec.kind == LossKind::Pat && !spec.pat_full_grad {
        let betas = frozen_betas(spec, logits, mask)?;
        central_diff(|z| pat_value_with_fixed_betas(spec, z, mask, &betas), logits, FD_STEP)?
    } else {
        central_diff(|z| Ok(loss_dispatch(spec, z, mask, stats, seed)?.value), logits, FD_STEP)?
    };
    Ok(compare_gradients(&fd, &analytic))
}

/// Aggregate result of a randomized suite for one kind.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub kind: LossKind,
    pub instances: usize,
    pub failures: usize,
    /// Largest error-to-allowance ratio seen; <= 1 means everything passed.
    pub worst_ratio: f64,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.failures == 0
    }
}

/// Random small instance: logits in (-3,3), uniform random classes, counts
/// in [1,1000]. Returns (logits, one-hot mask, stats).
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, ClassStats) {
    let b = rng.gen_range(1..=2);
    let l = rng.gen_range(2..=4);
    let hw = rng.gen_range(1..=4);
    let logits = Tensor::from_vec(
        (0..b * l * hw * hw).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        &[b, l, hw, hw],
    )
    .expect("sized by construction");
    let ids = Tensor::from_vec(
        (0..b * hw * hw).map(|_| rng.gen_range(0..l) as f64).collect(),
        &[b, hw, hw],
    )
    .expect("sized by construction");
    let mask = onehot(&ids, l).expect("ids in range");
    let stats = ClassStats::new((0..l).map(|_| rng.gen_range(1..=1000)).collect());
    (logits, mask, stats)
}

/// Hyperparameter rotation so a suite covers the interesting corners of one
/// kind: normalization on/off, several gammas/temperatures, both noise
/// distributions, both adaptive variants and both gradient modes.
fn vary_spec(kind: LossKind, i: usize, rng: &mut ChaCha8Rng) -> LossSpec {
    let mut spec = LossSpec::new(kind);
    spec.normalize_by_mask_size = i % 2 == 0;
    match kind {
        LossKind::Ce | LossKind::Bms => {}
        LossKind::Focal | LossKind::CbFocal => {
            spec.gamma = [0.0, 0.5, 2.0, 5.0][i % 4];
            spec.beta_cb = [0.9, 0.99, 0.9999][i % 3];
        }
        LossKind::Cb => {
            spec.beta_cb = [0.9, 0.99, 0.9999][i % 3];
        }
        LossKind::Ldam => {
            spec.max_margin = [0.0, 0.25, 0.5][i % 3];
            spec.scale = [1.0, 10.0, 20.0][(i / 3) % 3];
        }
        LossKind::Blv => {
            spec.sigma = [0.5, 1.0, 2.0][i % 3];
            spec.dist = if i % 2 == 0 { NoiseDist::Gaussian } else { NoiseDist::Uniform };
        }
        LossKind::Pat => {
            spec.temperature = [2.0, 5.0, 20.0, 50.0][i % 4];
            spec.epsilon = [0.0, 1e-6, 1e-2][i % 3];
            spec.variant = if (i / 2) % 2 == 0 { PatVariant::Table1 } else { PatVariant::Literal };
            spec.pat_full_grad = i % 2 == 1;
        }
    }
    let _ = rng;
    spec
}

/// Run `instances` randomized checks for one kind.
pub fn run_suite(kind: LossKind, instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst_ratio: f64 = 0.0;
    for i in 0..instances {
        let (logits, mask, stats) = random_instance(&mut rng);
        let spec = vary_spec(kind, i, &mut rng);
        let noise_seed = rng.gen();
        let outcome = check_instance(&spec, &logits, &mask, &stats, noise_seed)?;
        if !outcome.ok {
            failures += 1;
        }
        worst_ratio = worst_ratio.max(outcome.ratio);
    }
    Ok(SuiteReport { kind, instances, failures, worst_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_suites_pass_for_every_kind() {
        for kind in LossKind::ALL {
            let report = run_suite(kind, 12, 100 + kind as u64).unwrap();
            assert!(
                report.ok(),
                "{kind}: {} of {} failed, worst ratio {}",
                report.failures,
                report.instances,
                report.worst_ratio
            );
        }
    }

    #[test]
    fn harness_flags_a_corrupted_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (logits, mask, stats) = random_instance(&mut rng);
        let spec = LossSpec::new(LossKind::Ce);
        let out = loss_dispatch(&spec, &logits, &mask, &stats, 0).unwrap();
        let fd = central_diff(
            |z| Ok(loss_dispatch(&spec, z, &mask, &stats, 0)?.value),
            &logits,
            FD_STEP,
        )
        .unwrap();
        assert!(compare_gradients(&fd, &out.grad_logits).ok);

        // corrupt the largest component by 1%
        let mut bad = out.grad_logits.clone();
        let (i, _) = bad
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        bad.data_mut()[i] *= 1.01;
        assert!(!compare_gradients(&fd, &bad).ok);
    }

    #[test]
    fn stop_gradient_is_not_the_full_derivative() {
        // at low temperature the weight varies fast enough with the logits
        // that the stop-gradient form must disagree with differences of the
        // unfrozen value; this proves the frozen-weight path is load-bearing.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (logits, mask, stats) = random_instance(&mut rng);
        let mut spec = LossSpec::new(LossKind::Pat);
        spec.temperature = 2.0;
        spec.normalize_by_mask_size = false;
        let analytic = loss_dispatch(&spec, &logits, &mask, &stats, 0).unwrap().grad_logits;
        let fd_full = central_diff(
            |z| Ok(loss_dispatch(&spec, z, &mask, &stats, 0)?.value),
            &logits,
            FD_STEP,
        )
        .unwrap();
        assert!(!compare_gradients(&fd_full, &analytic).ok);
    }

    #[test]
    fn full_grad_mode_matches_unfrozen_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (logits, mask, stats) = random_instance(&mut rng);
        let mut spec = LossSpec::new(LossKind::Pat);
        spec.temperature = 2.0;
        spec.pat_full_grad = true;
        let outcome = check_instance(&spec, &logits, &mask, &stats, 0).unwrap();
        assert!(outcome.ok, "ratio {}", outcome.ratio);
    }
}
