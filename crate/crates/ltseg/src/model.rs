//! Same-resolution convolutional per-pixel classifier with hand-written
//! forward and backward passes.
//!
//! Every layer is a 3x3 stride-1 convolution with zero padding, so spatial
//! size is preserved end to end; all layers except the last are followed by
//! ReLU. Weights are He-initialized from a seeded generator, biases start
//! at zero. The backward pass consumes a cache stamped with the net's
//! version counter, which `step` bumps, so a stale cache is rejected
//! instead of silently producing wrong gradients.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ptnsr;
use crate::tensor::Tensor;

const K: usize = 3;

/// One convolution layer; weight is `[out_c, in_c, 3, 3]`, bias `[out_c]`.
#[derive(Debug, Clone)]
pub struct Conv2D {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients for one layer, shaped like its parameters.
#[derive(Debug)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Activations retained by `forward` for the matching `backward`.
#[derive(Debug)]
pub struct ForwardCache {
    version: u64,
    images: Tensor,
    /// Post-activation output of each layer; the last entry is the logits.
    outputs: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ConvNet {
    layers: Vec<Conv2D>,
    plan: Vec<usize>,
    version: u64,
}

impl ConvNet {
    /// He-initialized net over the channel plan `[C, hidden..., L]`.
    pub fn new(plan: &[usize], seed: u64) -> Result<ConvNet> {
        if plan.len() < 2 || plan.iter().any(|&c| c == 0) {
            return Err(Error::BadConfig { reason: format!("channel plan {plan:?} needs >= 2 positive entries") });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(plan.len() - 1);
        for win in plan.windows(2) {
            let (in_c, out_c) = (win[0], win[1]);
            let std = (2.0 / (in_c * K * K) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weight = Tensor::from_vec(
                (0..out_c * in_c * K * K).map(|_| normal.sample(&mut rng)).collect(),
                &[out_c, in_c, K, K],
            )?;
            layers.push(Conv2D { weight, bias: Tensor::zeros(&[out_c]) });
        }
        Ok(ConvNet { layers, plan: plan.to_vec(), version: 0 })
    }

    /// The conventional small plan for C input channels and L classes.
    pub fn default_plan(in_channels: usize, num_classes: usize) -> Vec<usize> {
        vec![in_channels, 16, 16, num_classes]
    }

    pub fn plan(&self) -> &[usize] {
        &self.plan
    }

    pub fn layers(&self) -> &[Conv2D] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Conv2D] {
        // direct parameter edits invalidate outstanding forward caches
        self.version += 1;
        &mut self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Run the net; returns `[B, L, H, W]` logits plus the backward cache.
    pub fn forward(&self, images: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (_, c, _, _) = images.dims4()?;
        if c != self.plan[0] {
            return Err(Error::BadShape {
                expected: format!("{} input channels", self.plan[0]),
                got: images.shape().to_vec(),
            });
        }
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = images;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = conv2d(current, &layer.weight, &layer.bias)?;
            if i + 1 < self.layers.len() {
                for v in z.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            outputs.push(z);
            current = outputs.last().expect("just pushed");
        }
        let logits = outputs.last().expect("plan has >= 1 layer").clone();
        Ok((logits, ForwardCache { version: self.version, images: images.clone(), outputs }))
    }

    /// Parameter gradients for the forward pass that produced `cache`.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Vec<LayerGrads>> {
        if cache.version != self.version {
            return Err(Error::StaleCache { cache_version: cache.version, net_version: self.version });
        }
        let last = self.layers.len() - 1;
        if grad_logits.shape() != cache.outputs[last].shape() {
            return Err(Error::ShapeMismatch {
                left: grad_logits.shape().to_vec(),
                right: cache.outputs[last].shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<LayerGrads>> = (0..self.layers.len()).map(|_| None).collect();
        let mut delta = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            // delta is d(loss)/d(layer i output); apply ReLU mask except at the top
            if i != last {
                let out = &cache.outputs[i];
                for (d, &o) in delta.data_mut().iter_mut().zip(out.data()) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = if i == 0 { &cache.images } else { &cache.outputs[i - 1] };
            let (dw, db) = conv2d_param_grads(input, &delta, &self.layers[i].weight)?;
            if i > 0 {
                delta = conv2d_input_grad(&delta, &self.layers[i].weight, input.shape())?;
            }
            grads[i] = Some(LayerGrads { weight: dw, bias: db });
        }
        Ok(grads.into_iter().map(|g| g.expect("filled in reverse pass")).collect())
    }

    /// Write one PTNSR file per parameter tensor plus a manifest.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str(&format!(
            "plan {}\n",
            self.plan.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
        ));
        for (i, layer) in self.layers.iter().enumerate() {
            ptnsr::write_f64(&dir.join(format!("layer{i}_weight.ptnsr")), &layer.weight)?;
            ptnsr::write_f64(&dir.join(format!("layer{i}_bias.ptnsr")), &layer.bias)?;
            manifest.push_str(&format!("layer{i} weight {}\n", dims_csv(layer.weight.shape())));
            manifest.push_str(&format!("layer{i} bias {}\n", dims_csv(layer.bias.shape())));
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Rebuild a net from `save_checkpoint` output, validating every shape.
    pub fn load_checkpoint(dir: &Path) -> Result<ConvNet> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut lines = manifest.lines();
        let plan_line = lines
            .next()
            .ok_or_else(|| Error::CheckpointMismatch { reason: "empty manifest".into() })?;
        let plan: Vec<usize> = plan_line
            .strip_prefix("plan ")
            .ok_or_else(|| Error::CheckpointMismatch { reason: format!("bad manifest head '{plan_line}'") })?
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::CheckpointMismatch { reason: format!("bad plan '{plan_line}'") }))
            .collect::<Result<_>>()?;
        if plan.len() < 2 {
            return Err(Error::CheckpointMismatch { reason: format!("plan {plan:?} too short") });
        }
        let mut layers = Vec::with_capacity(plan.len() - 1);
        for (i, win) in plan.windows(2).enumerate() {
            let weight = ptnsr::read_f64(&dir.join(format!("layer{i}_weight.ptnsr")))?;
            let bias = ptnsr::read_f64(&dir.join(format!("layer{i}_bias.ptnsr")))?;
            let want_w = [win[1], win[0], K, K];
            if weight.shape() != want_w {
                return Err(Error::CheckpointMismatch {
                    reason: format!("layer {i} weight {:?}, plan implies {:?}", weight.shape(), want_w),
                });
            }
            if bias.shape() != [win[1]] {
                return Err(Error::CheckpointMismatch {
                    reason: format!("layer {i} bias {:?}, plan implies [{}]", bias.shape(), win[1]),
                });
            }
            for line in lines.by_ref().take(2) {
                let mut parts = line.split(' ');
                let (name, kind, dims) = (parts.next(), parts.next(), parts.next());
                if name != Some(format!("layer{i}").as_str())
                    || !matches!(kind, Some("weight") | Some("bias"))
                    || dims.is_none()
                {
                    return Err(Error::CheckpointMismatch { reason: format!("bad manifest line '{line}'") });
                }
            }
            layers.push(Conv2D { weight, bias });
        }
        Ok(ConvNet { layers, plan, version: 0 })
    }
}

fn dims_csv(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// 3x3 same-padding cross-correlation.
fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, in_c, h, w) = input.dims4()?;
    let (out_c, w_in_c, _, _) = weight.dims4()?;
    if w_in_c != in_c {
        return Err(Error::ShapeMismatch { left: weight.shape().to_vec(), right: input.shape().to_vec() });
    }
    let mut out = Tensor::zeros(&[b, out_c, h, w]);
    let x = input.data();
    let wt = weight.data();
    for bi in 0..b {
        for o in 0..out_c {
            let out_base = (bi * out_c + o) * h * w;
            let bias_o = bias.data()[o];
            for v in &mut out.data_mut()[out_base..out_base + h * w] {
                *v = bias_o;
            }
            for c in 0..in_c {
                let in_base = (bi * in_c + c) * h * w;
                let w_base = (o * in_c + c) * K * K;
                for kh in 0..K {
                    for kw in 0..K {
                        let coef = wt[w_base + kh * K + kw];
                        if coef == 0.0 {
                            continue;
                        }
                        // output (hi, wi) reads input (hi + kh - 1, wi + kw - 1)
                        let (h_lo, h_hi) = shifted_range(kh, h);
                        let (w_lo, w_hi) = shifted_range(kw, w);
                        for hi in h_lo..h_hi {
                            let src = in_base + (hi + kh - 1) * w;
                            let dst = out_base + hi * w;
                            for wi in w_lo..w_hi {
                                out.data_mut()[dst + wi] += coef * x[src + wi + kw - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Valid output index range so that index + k - 1 stays inside [0, n).
fn shifted_range(k: usize, n: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(k);
    let hi = (n + 1 - k).min(n);
    (lo, hi)
}

/// d(loss)/d(weight) and d(loss)/d(bias) given the layer input and the
/// gradient at the layer's pre-activation output.
fn conv2d_param_grads(input: &Tensor, delta: &Tensor, weight: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, in_c, h, w) = input.dims4()?;
    let (bd, out_c, hd, wd) = delta.dims4()?;
    if (bd, hd, wd) != (b, h, w) {
        return Err(Error::ShapeMismatch { left: delta.shape().to_vec(), right: input.shape().to_vec() });
    }
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[out_c]);
    let x = input.data();
    let d = delta.data();
    for bi in 0..b {
        for o in 0..out_c {
            let d_base = (bi * out_c + o) * h * w;
            let mut bias_sum = 0.0;
            for v in &d[d_base..d_base + h * w] {
                bias_sum += v;
            }
            db.data_mut()[o] += bias_sum;
            for c in 0..in_c {
                let in_base = (bi * in_c + c) * h * w;
                let w_base = (o * in_c + c) * K * K;
                for kh in 0..K {
                    for kw in 0..K {
                        let (h_lo, h_hi) = shifted_range(kh, h);
                        let (w_lo, w_hi) = shifted_range(kw, w);
                        let mut acc = 0.0;
                        for hi in h_lo..h_hi {
                            let src = in_base + (hi + kh - 1) * w;
                            let dst = d_base + hi * w;
                            for wi in w_lo..w_hi {
                                acc += d[dst + wi] * x[src + wi + kw - 1];
                            }
                        }
                        dw.data_mut()[w_base + kh * K + kw] += acc;
                    }
                }
            }
        }
    }
    Ok((dw, db))
}

/// d(loss)/d(input): correlation of delta with the kernel flipped in both
/// spatial axes.
fn conv2d_input_grad(delta: &Tensor, weight: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (b, out_c, h, w) = delta.dims4()?;
    let in_c = input_shape[1];
    let mut dx = Tensor::zeros(input_shape);
    let d = delta.data();
    let wt = weight.data();
    for bi in 0..b {
        for c in 0..in_c {
            let dx_base = (bi * in_c + c) * h * w;
            for o in 0..out_c {
                let d_base = (bi * out_c + o) * h * w;
                let w_base = (o * in_c + c) * K * K;
                for kh in 0..K {
                    for kw in 0..K {
                        let coef = wt[w_base + kh * K + kw];
                        if coef == 0.0 {
                            continue;
                        }
                        // input (hi, wi) fed output (hi - kh + 1, wi - kw + 1)
                        let (h_lo, h_hi) = shifted_range(2 - kh, h);
                        let (w_lo, w_hi) = shifted_range(2 - kw, w);
                        for hi in h_lo..h_hi {
                            let dst = dx_base + hi * w;
                            let src = d_base + (hi + 1 - kh) * w;
                            for wi in w_lo..w_hi {
                                dx.data_mut()[dst + wi] += coef * d[src + wi + 1 - kw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Gradient-descent rule applied by `Optimizer::step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    /// v = momentum*v + g; w -= lr*v
    SgdMomentum { momentum: f64 },
    /// Bias-corrected moment estimates, the standard formulation.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug)]
struct ParamState {
    /// First moment or velocity, per parameter tensor.
    m: Tensor,
    /// Second moment; unused for momentum SGD.
    v: Option<Tensor>,
}

#[derive(Debug)]
pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    /// Two states per layer: weight then bias.
    state: Vec<ParamState>,
    steps: u64,
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> Result<Optimizer> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::BadHyper { name: "lr", reason: format!("{lr} must be finite and >= 0") });
        }
        if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
            return Err(Error::BadHyper { name: "momentum", reason: format!("{momentum} outside [0,1)") });
        }
        Ok(Optimizer { kind: OptimKind::SgdMomentum { momentum }, lr, state: Vec::new(), steps: 0 })
    }

    pub fn adam(lr: f64) -> Result<Optimizer> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::BadHyper { name: "lr", reason: format!("{lr} must be finite and >= 0") });
        }
        Ok(Optimizer {
            kind: OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            lr,
            state: Vec::new(),
            steps: 0,
        })
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update. Validates gradient shapes and finiteness before
    /// touching any parameter, so a failed step leaves the net unchanged.
    pub fn step(&mut self, net: &mut ConvNet, grads: &[LayerGrads]) -> Result<()> {
        if grads.len() != net.layers.len() {
            return Err(Error::BadShape {
                expected: format!("{} layer gradients", net.layers.len()),
                got: vec![grads.len()],
            });
        }
        for (i, (layer, g)) in net.layers.iter().zip(grads).enumerate() {
            if g.weight.shape() != layer.weight.shape() || g.bias.shape() != layer.bias.shape() {
                return Err(Error::ShapeMismatch {
                    left: g.weight.shape().to_vec(),
                    right: layer.weight.shape().to_vec(),
                });
            }
            let finite = g.weight.data().iter().chain(g.bias.data()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFiniteGradient { layer: i });
            }
        }
        if self.state.is_empty() {
            let second = matches!(self.kind, OptimKind::Adam { .. });
            for layer in &net.layers {
                for t in [&layer.weight, &layer.bias] {
                    self.state.push(ParamState {
                        m: Tensor::zeros(t.shape()),
                        v: second.then(|| Tensor::zeros(t.shape())),
                    });
                }
            }
        }
        self.steps += 1;
        for (i, g) in grads.iter().enumerate() {
            let layer = &mut net.layers[i];
            for (j, (param, grad)) in [(&mut layer.weight, &g.weight), (&mut layer.bias, &g.bias)]
                .into_iter()
                .enumerate()
            {
                let st = &mut self.state[2 * i + j];
                match self.kind {
                    OptimKind::SgdMomentum { momentum } => {
                        for k in 0..param.len() {
                            let v = momentum * st.m.data()[k] + grad.data()[k];
                            st.m.data_mut()[k] = v;
                            param.data_mut()[k] -= self.lr * v;
                        }
                    }
                    OptimKind::Adam { beta1, beta2, eps } => {
                        let t = self.steps as i32;
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        let v2 = st.v.as_mut().expect("adam state has second moment");
                        for k in 0..param.len() {
                            let gk = grad.data()[k];
                            let m = beta1 * st.m.data()[k] + (1.0 - beta1) * gk;
                            let v = beta2 * v2.data()[k] + (1.0 - beta2) * gk * gk;
                            st.m.data_mut()[k] = m;
                            v2.data_mut()[k] = v;
                            param.data_mut()[k] -= self.lr * (m / c1) / ((v / c2).sqrt() + eps);
                        }
                    }
                }
            }
        }
        net.version += 1;
        Ok(())
    }
}
