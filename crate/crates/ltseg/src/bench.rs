//! Wall-clock timing and temporary-allocation accounting per loss kind.
//!
//! Memory is reported in psi units, one psi being the B*L*H*W f64 buffer
//! every loss touches at least twice (softmax probabilities plus the
//! returned gradient). The interesting results are orderings between
//! kinds, not absolute numbers.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alloc;
use crate::error::{Error, Result};
use crate::losses::{loss_dispatch, ClassStats, LossKind, LossSpec};
use crate::{tensor, Tensor};

#[derive(Debug, Clone)]
pub struct KindBench {
    pub kind: LossKind,
    /// Median of chunk means over the timed repetitions.
    pub mean_s: f64,
    pub std_s: f64,
    pub temp_tensor_count: u64,
    pub temp_bytes: u64,
    pub psi_units: f64,
    /// True when std/mean exceeded 0.25 after warmup.
    pub noisy: bool,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub shape: [usize; 4],
    pub reps: usize,
    pub rows: Vec<KindBench>,
}

impl BenchReport {
    pub fn row(&self, kind: LossKind) -> &KindBench {
        self.rows.iter().find(|r| r.kind == kind).expect("all kinds are benched")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,mean_s,std_s,temp_tensors,temp_bytes,psi_units\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6e},{:.6e},{},{},{:.4}\n",
                r.kind, r.mean_s, r.std_s, r.temp_tensor_count, r.temp_bytes, r.psi_units
            ));
        }
        s
    }
}

/// Benchmark every loss kind on one fixed random input.
///
/// Runs `warmup` untimed calls per kind, measures allocations over a
/// single instrumented call, then times `reps` calls. The allocation
/// region is process-exclusive, so concurrent benching returns
/// [`Error::BenchBusy`].
pub fn bench_losses(shape: [usize; 4], reps: usize, seed: u64) -> Result<BenchReport> {
    let [b, l, h, w] = shape;
    if b == 0 || l < 2 || h == 0 || w == 0 {
        return Err(Error::BadConfig { reason: format!("bad bench shape {shape:?}") });
    }
    if reps < 10 {
        return Err(Error::BadConfig { reason: format!("need at least 10 reps, got {reps}") });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::from_vec(
        (0..b * l * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        &[b, l, h, w],
    )?;
    // round-robin ids cover every class, then shuffle pixel assignments
    let px = b * h * w;
    let mut ids: Vec<f64> = (0..px).map(|i| (i % l) as f64).collect();
    for i in (1..px).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
    let mut counts = vec![0u64; l];
    for &v in &ids {
        counts[v as usize] += 1;
    }
    let stats = ClassStats::new(counts);
    let mask = tensor::onehot(&Tensor::from_vec(ids, &[b, h, w])?, l)?;
    let psi_bytes = (8 * b * l * h * w) as f64;
    let warmup = 2;
    let mut rows = Vec::with_capacity(LossKind::ALL.len());
    for kind in LossKind::ALL {
        let spec = LossSpec::new(kind);
        let run = |s: u64| loss_dispatch(&spec, &logits, &mask, &stats, s);
        for i in 0..warmup {
            run(seed ^ i)?;
        }
        alloc::start()?;
        let probe = run(seed);
        let stats_alloc = alloc::stop();
        probe?;
        let mut times = Vec::with_capacity(reps);
        for i in 0..reps {
            let t0 = Instant::now();
            run(seed ^ i as u64)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        let mean_s = median_of_means(&times);
        let flat_mean = times.iter().sum::<f64>() / reps as f64;
        let var = times.iter().map(|t| (t - flat_mean).powi(2)).sum::<f64>() / reps as f64;
        let std_s = var.sqrt();
        rows.push(KindBench {
            kind,
            mean_s,
            std_s,
            temp_tensor_count: stats_alloc.temp_tensor_count,
            temp_bytes: stats_alloc.temp_bytes,
            psi_units: stats_alloc.temp_bytes as f64 / psi_bytes,
            noisy: std_s > 0.25 * flat_mean,
        });
    }
    Ok(BenchReport { shape, reps, rows })
}

/// Robust location estimate: split into 5 chunks, average each, take the
/// median, so one scheduler hiccup cannot drag the estimate.
fn median_of_means(times: &[f64]) -> f64 {
    let chunk = (times.len() / 5).max(1);
    let mut means: Vec<f64> =
        times.chunks(chunk).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    means[means.len() / 2]
}
