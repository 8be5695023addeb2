//! Seeded training loop wiring data, model, losses, and metrics.
//!
//! Runs are paired by design: the network init and the batch schedule
//! depend only on the seed, never on the loss, so two runs with the same
//! seed and different losses see identical initialization and data order.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{loss_dispatch, LossSpec};
use crate::metrics::{Confusion, EvalReport};
use crate::model::{ConvNet, Optimizer};
use crate::{tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptName {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptName {
    type Err = Error;

    fn from_str(s: &str) -> Result<OptName> {
        match s {
            "adam" => Ok(OptName::Adam),
            "sgd" => Ok(OptName::Sgd),
            other => Err(Error::BadConfig { reason: format!("unknown optimizer '{other}'") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub optimizer: OptName,
    pub lr: f64,
    /// Only used by SGD.
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Logging cadence in steps.
    pub eval_every: usize,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn new(dataset_dir: &Path, out_dir: &Path, loss: LossSpec) -> TrainConfig {
        TrainConfig {
            loss,
            optimizer: OptName::Adam,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 8,
            steps: 2000,
            eval_every: 100,
            seed: 0,
            dataset_dir: dataset_dir.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::BadConfig { reason: "steps must be at least 1".into() });
        }
        if self.batch_size == 0 {
            return Err(Error::BadConfig { reason: "batch_size must be at least 1".into() });
        }
        if self.eval_every == 0 {
            return Err(Error::BadConfig { reason: "eval_every must be at least 1".into() });
        }
        self.loss.validate()
    }
}

/// Paths and final numbers produced by one training run.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Test-split evaluation of the final checkpoint.
    pub report: EvalReport,
    pub final_loss: f64,
    pub log_path: PathBuf,
    pub report_path: PathBuf,
    pub checkpoint_dir: PathBuf,
}

/// Image-index stream: uniform without replacement within an epoch,
/// reshuffled between epochs. Depends only on (indices, seed).
pub(crate) struct BatchSchedule {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSchedule {
    pub(crate) fn new(indices: Vec<usize>, seed: u64) -> BatchSchedule {
        let pos = indices.len();
        BatchSchedule { order: indices, pos, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub(crate) fn next_batch(&mut self, k: usize, out: &mut Vec<usize>) {
        out.clear();
        while out.len() < k {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
    }
}

const SCHEDULE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Per-step seed for losses that draw noise, decorrelated across steps.
fn step_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gather_batch(ds: &Dataset, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let (_, c, h, w) = ds.images.dims4()?;
    let px = h * w;
    let mut images = Vec::with_capacity(idx.len() * c * px);
    let mut masks = Vec::with_capacity(idx.len() * px);
    for &i in idx {
        images.extend_from_slice(&ds.images.data()[i * c * px..(i + 1) * c * px]);
        masks.extend_from_slice(&ds.masks.data()[i * px..(i + 1) * px]);
    }
    Ok((
        Tensor::from_vec(images, &[idx.len(), c, h, w])?,
        Tensor::from_vec(masks, &[idx.len(), h, w])?,
    ))
}

/// Run the configured training loop; write the log CSV, a checkpoint, and
/// the test-split report CSV under `cfg.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.dataset_dir)?;
    let stats = ds.class_stats(Split::Train)?;
    let l = ds.cfg.num_classes;
    let mut net = ConvNet::new(&ConvNet::default_plan(ds.cfg.channels, l), cfg.seed)?;
    let mut opt = match cfg.optimizer {
        OptName::Adam => Optimizer::adam(cfg.lr)?,
        OptName::Sgd => Optimizer::sgd(cfg.lr, cfg.momentum)?,
    };
    let train_indices: Vec<usize> = ds.split_range(Split::Train).collect();
    if train_indices.is_empty() {
        return Err(Error::EmptySplit { split: "train".into() });
    }
    let mut schedule = BatchSchedule::new(train_indices, cfg.seed ^ SCHEDULE_SALT);
    let mut idx = Vec::new();
    let mut log = String::from("step,loss");
    for k in 0..l {
        log.push_str(&format!(",per_class_{k}"));
    }
    log.push('\n');
    let mut final_loss = f64::NAN;
    for step in 1..=cfg.steps {
        schedule.next_batch(cfg.batch_size, &mut idx);
        let (images, masks) = gather_batch(&ds, &idx)?;
        let onehot = tensor::onehot(&masks, l)?;
        let (logits, cache) = net.forward(&images)?;
        let out = loss_dispatch(&cfg.loss, &logits, &onehot, &stats, step_seed(cfg.seed, step))?;
        if !out.value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                kind: cfg.loss.kind.as_str().to_string(),
            });
        }
        final_loss = out.value;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            log.push_str(&format!("{step},{}", out.value));
            for v in &out.per_class_value {
                log.push_str(&format!(",{v}"));
            }
            log.push('\n');
        }
        let grads = net.backward(&cache, &out.grad_logits)?;
        opt.step(&mut net, &grads)?;
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("train_log.csv");
    std::fs::write(&log_path, &log)?;
    let checkpoint_dir = cfg.out_dir.join("checkpoint");
    net.save_checkpoint(&checkpoint_dir)?;
    let report = evaluate(&net, &ds, Split::Test)?;
    let report_path = cfg.out_dir.join("report.csv");
    let mut report_csv = EvalReport::csv_header(l);
    report_csv.push('\n');
    report_csv.push_str(&report.csv_row(cfg.loss.kind.as_str(), cfg.seed));
    report_csv.push('\n');
    std::fs::write(&report_path, &report_csv)?;
    Ok(TrainOutcome { report, final_loss, log_path, report_path, checkpoint_dir })
}

/// Evaluate a network on one split. Sharding across threads is exact:
/// per-shard confusions are merged with integer adds, so the thread count
/// never changes the result.
pub fn evaluate(net: &ConvNet, ds: &Dataset, split: Split) -> Result<EvalReport> {
    let range = ds.split_range(split);
    evaluate_with_threads(net, ds, split, eval_threads(range.len()))
}

pub fn evaluate_with_threads(
    net: &ConvNet,
    ds: &Dataset,
    split: Split,
    threads: usize,
) -> Result<EvalReport> {
    let range = ds.split_range(split);
    if range.is_empty() {
        return Err(Error::EmptySplit { split: split.as_str().to_string() });
    }
    let threads = threads.clamp(1, range.len());
    let conf = if threads == 1 {
        eval_shard(net, ds, range.collect())?
    } else {
        let indices: Vec<usize> = range.collect();
        let chunk = indices.len().div_ceil(threads);
        let shards: Vec<Vec<usize>> = indices.chunks(chunk).map(|c| c.to_vec()).collect();
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = shards
                .into_iter()
                .map(|shard| scope.spawn(move || eval_shard(net, ds, shard)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Vec<Result<Confusion>>>()
        });
        let mut merged = Confusion::new(ds.cfg.num_classes);
        for r in results {
            merged.merge(&r?)?;
        }
        merged
    };
    conf.report(false)
}

fn eval_shard(net: &ConvNet, ds: &Dataset, indices: Vec<usize>) -> Result<Confusion> {
    let mut conf = Confusion::new(ds.cfg.num_classes);
    for chunk in indices.chunks(8) {
        let (images, masks) = gather_batch(ds, chunk)?;
        let (logits, _) = net.forward(&images)?;
        let pred = tensor::argmax_channels(&logits)?;
        conf.accumulate(&pred, &masks)?;
    }
    Ok(conf)
}

/// Evaluation parallelism: LTSEG_THREADS if set, else the machine's
/// available parallelism, never more than one thread per image.
fn eval_threads(n_images: usize) -> usize {
    let cap: Option<usize> = std::env::var("LTSEG_THREADS").ok().and_then(|v| v.parse().ok());
    let hw = std::thread::available_parallelism().map(|v| v.get()).unwrap_or(1);
    cap.unwrap_or(hw).clamp(1, n_images.max(1))
}
