//! Shared loss plumbing: target extraction, the weighted reduction driver,
//! per-class weight/margin/shift tables, and scalar kernel pieces.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::tensor::{softmax_row, PixelLane, Tensor};

use super::{ClassStats, LossOutput, NoiseDist, PatVariant};

/// Per-pixel true classes and per-image mask sizes from a one-hot target.
pub(crate) struct Targets {
    /// True class per pixel, row-major over (b, h, w).
    pub classes: Vec<u32>,
    /// Pixel count per (image, class), indexed `b * L + l`.
    pub sizes: Vec<u64>,
}

pub(crate) fn extract_targets(mask: &Tensor) -> Result<Targets> {
    let dims = mask.dims4()?;
    let (b, l, h, w) = dims;
    let mut classes = vec![0u32; b * h * w];
    let mut sizes = vec![0u64; b * l];
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let lane = PixelLane::at(bi, hi, wi, dims);
                let mut found = None;
                for c in 0..l {
                    let v = mask.data()[lane.idx(c)];
                    if v == 1.0 {
                        if found.replace(c).is_some() {
                            found = None;
                            break;
                        }
                    } else if v != 0.0 {
                        found = None;
                        break;
                    }
                }
                let t = found.ok_or(Error::NotOneHot { batch: bi, row: hi, col: wi })?;
                classes[(bi * h + hi) * w + wi] = t as u32;
                sizes[bi * l + t] += 1;
            }
        }
    }
    Ok(Targets { classes, sizes })
}

/// Weighted per-pixel reduction shared by every loss kind.
///
/// `value_at(p_true, t)` returns the raw per-pixel term from the true-class
/// probability; `grad_at(prow, t, out)` fills the unweighted gradient lane.
/// Both are then scaled by 1/B, and additionally by 1/S(image, class) when
/// `normalize` is set.
pub(crate) fn run<V, G>(
    probs: &Tensor,
    targets: &Targets,
    normalize: bool,
    value_at: V,
    grad_at: G,
) -> Result<LossOutput>
where
    V: Fn(f64, usize) -> f64,
    G: Fn(&[f64], usize, &mut [f64]),
{
    let dims = probs.dims4()?;
    let (b, l, h, w) = dims;
    let mut grad = Tensor::zeros(probs.shape());
    let mut per_class = vec![0.0; l];
    let mut prow = vec![0.0; l];
    let mut grow = vec![0.0; l];
    let inv_b = 1.0 / b as f64;
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let lane = PixelLane::at(bi, hi, wi, dims);
                lane.read(probs.data(), &mut prow);
                let t = targets.classes[(bi * h + hi) * w + wi] as usize;
                let weight = if normalize {
                    inv_b / targets.sizes[bi * l + t] as f64
                } else {
                    inv_b
                };
                per_class[t] += weight * value_at(prow[t], t);
                grad_at(&prow, t, &mut grow);
                for c in 0..l {
                    grad.data_mut()[lane.idx(c)] = weight * grow[c];
                }
            }
        }
    }
    let value = per_class.iter().sum();
    Ok(LossOutput { value, grad_logits: grad, per_class_value: per_class })
}

fn positive_counts(stats: &ClassStats) -> Result<Vec<f64>> {
    stats
        .counts
        .iter()
        .enumerate()
        .map(|(class, &n)| if n == 0 { Err(Error::ClassAbsent { class }) } else { Ok(n as f64) })
        .collect()
}

/// Inverse effective-number class weights, rescaled to mean 1.
pub fn cb_weights(stats: &ClassStats, beta_cb: f64) -> Result<Vec<f64>> {
    if !(beta_cb > 0.0 && beta_cb < 1.0) {
        return Err(Error::BadHyper { name: "beta_cb", reason: format!("{beta_cb} outside (0,1)") });
    }
    let counts = positive_counts(stats)?;
    let raw: Vec<f64> = counts.iter().map(|&n| (1.0 - beta_cb) / (1.0 - beta_cb.powf(n))).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|r| r / mean).collect())
}

/// True-class margins, largest (= max_margin) for the rarest class:
/// margin_y = max_margin * (n_min / n_y)^(1/4).
pub fn ldam_margins(stats: &ClassStats, max_margin: f64) -> Result<Vec<f64>> {
    let counts = positive_counts(stats)?;
    let n_min = counts.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(counts.iter().map(|&n| max_margin * (n_min / n).powf(0.25)).collect())
}

/// Log-frequency shifts added to logits before the softmax. Adding ln n_c
/// instead of ln(n_c / total) is equivalent by shift invariance.
pub fn bms_log_counts(stats: &ClassStats) -> Result<Vec<f64>> {
    Ok(positive_counts(stats)?.into_iter().map(f64::ln).collect())
}

/// Noise amplitude per class: zero for the most frequent class, growing
/// logarithmically with rarity.
pub fn blv_shifts(stats: &ClassStats) -> Result<Vec<f64>> {
    let counts = positive_counts(stats)?;
    let n_max = counts.iter().copied().fold(0.0, f64::max);
    Ok(counts.iter().map(|&n| (n_max / n).ln()).collect())
}

/// Softmax of (z_c + shift_c) per pixel.
pub(crate) fn shifted_softmax(logits: &Tensor, shifts: &[f64]) -> Result<Tensor> {
    let dims = logits.dims4()?;
    logits.ensure_finite("logit")?;
    let (b, l, h, w) = dims;
    let mut out = Tensor::zeros(logits.shape());
    let mut row = vec![0.0; l];
    let mut prow = vec![0.0; l];
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let lane = PixelLane::at(bi, hi, wi, dims);
                for c in 0..l {
                    row[c] = logits.data()[lane.idx(c)] + shifts[c];
                }
                softmax_row(&row, &mut prow);
                for c in 0..l {
                    out.data_mut()[lane.idx(c)] = prow[c];
                }
            }
        }
    }
    Ok(out)
}

/// scale * (z_c - margin_t * [c == t]) as a new tensor.
pub(crate) fn margin_scaled_logits(
    logits: &Tensor,
    targets: &Targets,
    margins: &[f64],
    scale: f64,
) -> Result<Tensor> {
    let dims = logits.dims4()?;
    let (b, l, h, w) = dims;
    let mut out = Tensor::zeros(logits.shape());
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let lane = PixelLane::at(bi, hi, wi, dims);
                let t = targets.classes[(bi * h + hi) * w + wi] as usize;
                for c in 0..l {
                    let z = logits.data()[lane.idx(c)];
                    let adj = if c == t { z - margins[t] } else { z };
                    out.data_mut()[lane.idx(c)] = scale * adj;
                }
            }
        }
    }
    Ok(out)
}

/// Raw noise draws, one per element, fully determined by `seed`.
pub(crate) fn sample_noise(shape: &[usize], dist: NoiseDist, sigma: f64, seed: u64) -> Tensor {
    let mut out = Tensor::zeros(shape);
    if sigma == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match dist {
        NoiseDist::Gaussian => {
            // sigma is validated nonnegative by the caller
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            for v in out.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        NoiseDist::Uniform => {
            let uniform = Uniform::new(-sigma, sigma);
            for v in out.data_mut() {
                *v = uniform.sample(&mut rng);
            }
        }
    }
    out
}

/// z_c + shift_c * |noise_c| per element.
pub(crate) fn noise_boosted_logits(logits: &Tensor, noise: &Tensor, shifts: &[f64]) -> Result<Tensor> {
    let dims = logits.dims4()?;
    let (b, l, h, w) = dims;
    let mut out = Tensor::zeros(logits.shape());
    for bi in 0..b {
        for c in 0..l {
            let base = ((bi * l + c) * h) * w;
            for pix in 0..h * w {
                out.data_mut()[base + pix] = logits.data()[base + pix] + shifts[c] * noise.data()[base + pix].abs();
            }
        }
    }
    Ok(out)
}

/// (1 - p)^gamma * (-ln p); powf(x, 0) = 1 keeps gamma = 0 exactly plain.
pub(crate) fn focal_value(p_t: f64, gamma: f64) -> f64 {
    (1.0 - p_t).powf(gamma) * -p_t.ln()
}

/// d/dp of focal_value. The first term's limit is 0 as p -> 1 for any
/// gamma > 0, and it is identically 0 at gamma = 0; both cases would
/// otherwise produce 0 * inf.
pub(crate) fn focal_dldp(p_t: f64, gamma: f64) -> f64 {
    let omp = 1.0 - p_t;
    let bend = if gamma == 0.0 || omp <= 0.0 {
        0.0
    } else {
        gamma * omp.powf(gamma - 1.0) * p_t.ln()
    };
    bend - omp.powf(gamma) / p_t
}

/// The adaptive per-pixel weight at one probability.
pub(crate) fn pat_beta_scalar(p: f64, temperature: f64, epsilon: f64, variant: PatVariant) -> f64 {
    match variant {
        PatVariant::Table1 => ((p - 1.0 + epsilon) / temperature).exp(),
        PatVariant::Literal => ((1.0 - p - epsilon) / temperature).exp(),
    }
}
