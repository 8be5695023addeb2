//! Synthetic long-tailed segmentation datasets.
//!
//! Every image is a flat background (class 0) with one painted shape per
//! foreground class. Frequent classes are painted first and the rarest
//! class last, so tail pixels are never occluded away. Class identity is
//! carried by per-channel base intensities plus seeded Gaussian noise,
//! which keeps the task learnable by a small convnet while the tail
//! classes stay rare.

use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassStats;
use crate::{ptnsr, Tensor};

/// Configuration for the synthetic generator.
///
/// Class pixel frequencies follow a power law, freq of class `l`
/// proportional to `(l+1)^-skew`, so class 0 is the head/background.
/// `target_freqs` overrides the power law with an explicit target vector
/// (normalized internally) for distributions a single exponent cannot hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub skew: f64,
    #[serde(default)]
    pub target_freqs: Option<Vec<f64>>,
    /// Per-shape area multiplier range around the class target fraction.
    pub size_jitter: (f64, f64),
    /// Channel intensity separation between classes.
    pub contrast: f64,
    /// Std dev of the additive Gaussian pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_images: usize, height: usize, width: usize, num_classes: usize) -> SynthConfig {
        SynthConfig {
            n_images,
            channels: 3,
            height,
            width,
            num_classes,
            skew: 2.0,
            target_freqs: None,
            size_jitter: (0.85, 1.15),
            contrast: 0.25,
            noise_sigma: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::BadConfig { reason });
        if self.n_images == 0 {
            return bad("n_images must be at least 1".into());
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("channels, height, and width must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("need at least 2 classes (background plus one shape)".into());
        }
        // masks are stored as one byte per pixel
        if self.num_classes > 256 {
            return bad(format!("num_classes {} exceeds the mask byte range", self.num_classes));
        }
        if !self.skew.is_finite() || self.skew < 0.0 {
            return bad(format!("skew must be finite and nonnegative, got {}", self.skew));
        }
        if let Some(t) = &self.target_freqs {
            if t.len() != self.num_classes {
                return bad(format!(
                    "target_freqs has {} entries for {} classes",
                    t.len(),
                    self.num_classes
                ));
            }
            if t.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad("target_freqs entries must be finite and nonnegative".into());
            }
            if t[1..].iter().any(|v| *v == 0.0) {
                return bad("every foreground class needs a positive target frequency".into());
            }
        }
        let (lo, hi) = self.size_jitter;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad(format!("size_jitter ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        if !self.contrast.is_finite() || !(0.0..=1.0).contains(&self.contrast) {
            return bad(format!("contrast must lie in [0, 1], got {}", self.contrast));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return bad(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Normalized per-class target pixel frequencies.
    pub fn targets(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let raw: Vec<f64> = match &self.target_freqs {
            Some(t) => t.clone(),
            None => (0..self.num_classes)
                .map(|l| ((l + 1) as f64).powf(-self.skew))
                .collect(),
        };
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::BadConfig { reason: "target frequencies sum to zero".into() });
        }
        Ok(raw.iter().map(|v| v / sum).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::BadConfig { reason: format!("unknown split '{other}'") }),
        }
    }
}

/// An immutable generated dataset. Images lie in [0, 1]; masks hold
/// integral class ids below `cfg.num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// [N, C, H, W]
    pub images: Tensor,
    /// [N, H, W]
    pub masks: Tensor,
    /// train/val/test fractions, summing to 1.
    pub ratios: [f64; 3],
    pub cfg: SynthConfig,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    cfg: SynthConfig,
    ratios: [f64; 3],
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

impl Dataset {
    /// Contiguous image-index range of a split. Train and val sizes are
    /// floored; test takes the remainder so the ranges tile 0..n.
    pub fn split_range(&self, split: Split) -> Range<usize> {
        let n = self.cfg.n_images;
        let t = (self.ratios[0] * n as f64).floor() as usize;
        let v = (self.ratios[1] * n as f64).floor() as usize;
        match split {
            Split::Train => 0..t.min(n),
            Split::Val => t.min(n)..(t + v).min(n),
            Split::Test => (t + v).min(n)..n,
        }
    }

    /// Exact per-class pixel counts over one split.
    pub fn class_stats(&self, split: Split) -> Result<ClassStats> {
        let range = self.split_range(split);
        if range.is_empty() {
            return Err(Error::EmptySplit { split: split.as_str().to_string() });
        }
        let (_, h, w) = self.masks.dims3()?;
        let mut counts = vec![0u64; self.cfg.num_classes];
        let data = self.masks.data();
        for i in range {
            for &v in &data[i * h * w..(i + 1) * h * w] {
                counts[v as usize] += 1;
            }
        }
        Ok(ClassStats::new(counts))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        ptnsr::write_f64(&dir.join("images.ptnsr"), &self.images)?;
        ptnsr::write_mask(&dir.join("masks.ptnsr"), &self.masks)?;
        let meta = Meta { cfg: self.cfg.clone(), ratios: self.ratios };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(dir.join("meta.json"))?;
        let meta: Meta = serde_json::from_str(&text)?;
        meta.cfg.validate()?;
        let ratio_sum: f64 = meta.ratios.iter().sum();
        if (ratio_sum - 1.0).abs() > 1e-9 {
            return Err(Error::BadConfig {
                reason: format!("split ratios {:?} do not sum to 1", meta.ratios),
            });
        }
        let images = ptnsr::read_f64(&dir.join("images.ptnsr"))?;
        let masks = ptnsr::read_mask(&dir.join("masks.ptnsr"))?;
        let c = &meta.cfg;
        let want_img = [c.n_images, c.channels, c.height, c.width];
        if images.shape() != want_img {
            return Err(Error::BadShape {
                expected: format!("{want_img:?}"),
                got: images.shape().to_vec(),
            });
        }
        let want_mask = [c.n_images, c.height, c.width];
        if masks.shape() != want_mask {
            return Err(Error::BadShape {
                expected: format!("{want_mask:?}"),
                got: masks.shape().to_vec(),
            });
        }
        for (i, &v) in masks.data().iter().enumerate() {
            if v as usize >= c.num_classes {
                return Err(Error::ClassOutOfRange {
                    id: v as usize,
                    num_classes: c.num_classes,
                    position: i,
                });
            }
        }
        Ok(Dataset { images, masks, ratios: meta.ratios, cfg: meta.cfg })
    }
}

/// Generate a dataset. Deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    let targets = cfg.targets()?;
    let (n, c, h, w) = (cfg.n_images, cfg.channels, cfg.height, cfg.width);
    let l = cfg.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut masks = Tensor::zeros(&[n, h, w]);
    let mut images = Tensor::zeros(&[n, c, h, w]);
    let colors = palette(l, c, cfg.contrast);
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::BadConfig {
            reason: format!("noise distribution: {e}"),
        })?)
    } else {
        None
    };
    for i in 0..n {
        let mask = &mut masks.data_mut()[i * h * w..(i + 1) * h * w];
        for class in 1..l {
            let jitter = rng.gen_range(cfg.size_jitter.0..=cfg.size_jitter.1);
            let area = (targets[class] * (h * w) as f64 * jitter).round().max(1.0) as usize;
            let shape = sample_shape(class, area, h, w, &mut rng)?;
            place_shape(mask, h, w, class, &shape, &mut rng);
        }
        let img = &mut images.data_mut()[i * c * h * w..(i + 1) * c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                let class = mask[p] as usize;
                let mut v = colors[class * c + ch];
                if let Some(dist) = &noise {
                    v += dist.sample(&mut rng);
                }
                img[ch * h * w + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Dataset { images, masks, ratios: DEFAULT_RATIOS, cfg: cfg.clone() })
}

/// Pixel offsets of one shape inside its bounding box.
struct Footprint {
    cells: Vec<(usize, usize)>,
    bh: usize,
    bw: usize,
}

/// Small shapes are always rectangles (a discretized ellipse below a few
/// pixels degenerates); larger ones are rectangles or ellipses at random.
/// An ellipse whose jittered bounding box spills over the image falls back
/// to the more compact rectangle before the size is declared infeasible.
fn sample_shape(class: usize, area: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Footprint> {
    if area >= 6 && rng.gen_bool(0.5) {
        let aspect = rng.gen_range(0.7..1.4);
        let fp = ellipse_footprint(area, aspect);
        if fp.bh <= h && fp.bw <= w {
            return Ok(fp);
        }
    }
    let fp = rect_footprint(area, h, w);
    if fp.bh > h || fp.bw > w {
        return Err(Error::InfeasibleShape { class, area, height: h, width: w });
    }
    Ok(fp)
}

fn rect_footprint(area: usize, h: usize, w: usize) -> Footprint {
    let mut sh = ((area as f64).sqrt().round()).max(1.0) as usize;
    if sh > h {
        sh = h;
    }
    let mut sw = ((area as f64 / sh as f64).round()).max(1.0) as usize;
    if sw > w {
        sw = w;
        sh = ((area as f64 / sw as f64).round()).max(1.0) as usize;
    }
    let cells = (0..sh).flat_map(|y| (0..sw).map(move |x| (y, x))).collect();
    Footprint { cells, bh: sh, bw: sw }
}

fn ellipse_footprint(area: usize, aspect: f64) -> Footprint {
    let mut rx = (area as f64 / std::f64::consts::PI * aspect).sqrt();
    let mut ry = area as f64 / (std::f64::consts::PI * rx);
    let mut fp = ellipse_cells(rx, ry);
    // one corrective rescale keeps the discretized pixel count near the target
    let got = fp.cells.len() as f64;
    if (got - area as f64).abs() > (0.1 * area as f64).max(1.0) {
        let s = (area as f64 / got).sqrt();
        rx *= s;
        ry *= s;
        fp = ellipse_cells(rx, ry);
    }
    fp
}

fn ellipse_cells(rx: f64, ry: f64) -> Footprint {
    let cy = ry.ceil() as usize;
    let cx = rx.ceil() as usize;
    let (bh, bw) = (2 * cy + 1, 2 * cx + 1);
    let mut cells = Vec::new();
    for y in 0..bh {
        for x in 0..bw {
            let dy = (y as f64 - cy as f64) / ry.max(1e-12);
            let dx = (x as f64 - cx as f64) / rx.max(1e-12);
            if dy * dy + dx * dx <= 1.0 {
                cells.push((y, x));
            }
        }
    }
    Footprint { cells, bh, bw }
}

/// Try a handful of positions and keep the one covering the fewest
/// already-painted pixels, so shapes rarely eat each other.
fn place_shape(mask: &mut [f64], h: usize, w: usize, class: usize, fp: &Footprint, rng: &mut ChaCha8Rng) {
    let mut best = (usize::MAX, 0, 0);
    for _ in 0..6 {
        let y0 = rng.gen_range(0..=h - fp.bh);
        let x0 = rng.gen_range(0..=w - fp.bw);
        let overlap = fp
            .cells
            .iter()
            .filter(|&&(dy, dx)| mask[(y0 + dy) * w + x0 + dx] != 0.0)
            .count();
        if overlap < best.0 {
            best = (overlap, y0, x0);
        }
        if overlap == 0 {
            break;
        }
    }
    let (_, y0, x0) = best;
    for &(dy, dx) in &fp.cells {
        mask[(y0 + dy) * w + x0 + dx] = class as f64;
    }
}

/// Per-class, per-channel base intensities. With few classes each class
/// gets its own corner of the channel cube at `contrast` separation;
/// beyond 2^channels classes the values are spread by irrational steps.
fn palette(num_classes: usize, channels: usize, contrast: f64) -> Vec<f64> {
    let corner_capacity = 1usize.checked_shl(channels.min(20) as u32).unwrap_or(usize::MAX);
    let mut p = vec![0.0; num_classes * channels];
    for class in 0..num_classes {
        for ch in 0..channels {
            p[class * channels + ch] = if num_classes <= corner_capacity {
                let bit = if ch < 63 { (class >> ch) & 1 } else { 0 };
                0.35 + contrast * bit as f64
            } else {
                let irr = [0.618_033_988_75, 0.414_213_562_37, 0.732_050_807_57];
                let x = (class as f64 + 1.0) * irr[ch % 3] * (1.0 + ch as f64 / 7.0);
                0.2 + 0.6 * (x - x.floor())
            };
        }
    }
    p
}
