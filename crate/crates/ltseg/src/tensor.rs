//! Dense f64 tensor engine.
//!
//! Storage is a flat row-major `Vec<f64>`; shape metadata lives alongside.
//! The layout convention for batched image data is `[B, L, H, W]` with the
//! channel axis second, so per-pixel channel vectors are strided by `H*W`.
//! Every constructor routes through [`Tensor::from_vec`] / [`Tensor::zeros`]
//! so the allocation counter in [`crate::alloc`] sees all whole-tensor
//! allocations. Tensors are shape-immutable; ops return new tensors.

use crate::alloc;
use crate::error::{Error, Result};

/// Dense row-major n-dimensional array of f64.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    ticket: u64,
}

impl Tensor {
    /// Zero-filled tensor. Dimensions must all be positive.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        debug_assert!(shape.iter().all(|&d| d > 0), "zero dim in {shape:?}");
        let ticket = alloc::on_alloc(n * 8);
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], ticket }
    }

    /// Take ownership of `data` as a tensor of the given shape.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::DataLength { expected: n, got: data.len() });
        }
        let ticket = alloc::on_alloc(n * 8);
        Ok(Tensor { shape: shape.to_vec(), data, ticket })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable element access. The shape stays fixed; treat shared tensors as
    /// immutable per the crate-wide contract (`&mut` enforces single-writer).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * 8
    }

    /// Interpret as `[B, L, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, l, h, w] => Ok((b, l, h, w)),
            _ => Err(Error::BadShape { expected: "[B,L,H,W]".into(), got: self.shape.clone() }),
        }
    }

    /// Interpret as `[B, H, W]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, h, w] => Ok((b, h, w)),
            _ => Err(Error::BadShape { expected: "[B,H,W]".into(), got: self.shape.clone() }),
        }
    }

    /// Error unless every element is finite; names the first offender.
    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { what, index: i, coords: unravel(i, &self.shape), value: v });
            }
        }
        Ok(())
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        let ticket = alloc::on_alloc(self.bytes());
        Tensor { shape: self.shape.clone(), data: self.data.clone(), ticket }
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        alloc::on_free(self.ticket, self.data.len() * 8);
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Multi-index from a flat row-major index.
pub fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut coords = vec![0usize; shape.len()];
    for (c, &d) in coords.iter_mut().zip(shape).rev() {
        *c = flat % d;
        flat /= d;
    }
    coords
}

/// Strided view of one pixel's channel lane in a `[B,L,H,W]` tensor.
#[derive(Clone, Copy)]
pub struct PixelLane {
    pub base: usize,
    pub stride: usize,
    pub channels: usize,
}

impl PixelLane {
    pub fn at(b: usize, h: usize, w: usize, dims: (usize, usize, usize, usize)) -> PixelLane {
        let (_, l, hh, ww) = dims;
        PixelLane { base: (b * l * hh + h) * ww + w, stride: hh * ww, channels: l }
    }

    pub fn idx(&self, channel: usize) -> usize {
        self.base + channel * self.stride
    }

    /// Copy the lane into `buf[..channels]`.
    pub fn read(&self, data: &[f64], buf: &mut [f64]) {
        for c in 0..self.channels {
            buf[c] = data[self.idx(c)];
        }
    }
}

/// Numerically stable softmax over a channel row, written into `out`.
/// Returns the log-sum-exp of the (max-subtracted) row plus the max, so
/// `log p_c = row[c] - lse`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    max + sum.ln()
}

/// Channel-axis softmax for `[B,L,H,W]` logits.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
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
                lane.read(logits.data(), &mut row);
                softmax_row(&row, &mut prow);
                for c in 0..l {
                    out.data_mut()[lane.idx(c)] = prow[c];
                }
            }
        }
    }
    Ok(out)
}

/// Channel-axis log-softmax for `[B,L,H,W]` logits. Finite for finite input.
pub fn log_softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let dims = logits.dims4()?;
    logits.ensure_finite("logit")?;
    let (b, l, h, w) = dims;
    let mut out = Tensor::zeros(logits.shape());
    let mut row = vec![0.0; l];
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let lane = PixelLane::at(bi, hi, wi, dims);
                lane.read(logits.data(), &mut row);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
                for c in 0..l {
                    out.data_mut()[lane.idx(c)] = row[c] - lse;
                }
            }
        }
    }
    Ok(out)
}

/// One-hot encode `[B,H,W]` class ids into `[B,L,H,W]`.
pub fn onehot(indices: &Tensor, num_classes: usize) -> Result<Tensor> {
    let (b, h, w) = indices.dims3()?;
    let mut out = Tensor::zeros(&[b, num_classes, h, w]);
    for (pos, &v) in indices.data().iter().enumerate() {
        let id = v as usize;
        if v < 0.0 || v.fract() != 0.0 || id >= num_classes {
            return Err(Error::ClassOutOfRange { id: id.max(v as usize), num_classes, position: pos });
        }
        let bi = pos / (h * w);
        let rest = pos % (h * w);
        out.data_mut()[(bi * num_classes + id) * h * w + rest] = 1.0;
    }
    Ok(out)
}

/// Channel-axis argmax of `[B,L,H,W]`, ties broken toward the lowest id.
pub fn argmax_channels(scores: &Tensor) -> Result<Tensor> {
    let dims = scores.dims4()?;
    let (b, l, h, w) = dims;
    let mut out = Tensor::zeros(&[b, h, w]);
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let lane = PixelLane::at(bi, hi, wi, dims);
                let mut best = 0usize;
                let mut best_v = scores.data()[lane.idx(0)];
                for c in 1..l {
                    let v = scores.data()[lane.idx(c)];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                out.data_mut()[(bi * h + hi) * w + wi] = best as f64;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t4(data: Vec<f64>, l: usize) -> Tensor {
        // single pixel, L channels
        Tensor::from_vec(data, &[1, l, 1, 1]).unwrap()
    }

    #[test]
    fn softmax_symmetric_logits() {
        let p = softmax_channels(&t4(vec![0.0, 0.0], 2)).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_huge_logits_no_overflow() {
        let p = softmax_channels(&t4(vec![1000.0, 1000.0, 1000.0], 3)).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15, "got {v}");
        }
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // 50-digit evaluation of exp(z)/sum(exp(z)) for z = [1,2,3].
        let expect = [
            0.0900305731703804579980221,
            0.2447284710547976524729596,
            0.6652409557748218895290183,
        ];
        let p = softmax_channels(&t4(vec![1.0, 2.0, 3.0], 3)).unwrap();
        for (got, want) in p.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn log_softmax_symmetric() {
        let lp = log_softmax_channels(&t4(vec![0.0, 0.0], 2)).unwrap();
        for &v in lp.data() {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
        let lp = log_softmax_channels(&t4(vec![7.5; 4], 4)).unwrap();
        for &v in lp.data() {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_matches_high_precision_oracle() {
        // 50-digit evaluation for z = [3,-1].
        let expect = [-0.01814992791780974035498332, -4.018149927917809740354983];
        let lp = log_softmax_channels(&t4(vec![3.0, -1.0], 2)).unwrap();
        for (got, want) in lp.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite_with_position() {
        let t = t4(vec![0.0, f64::NAN, 1.0], 3);
        match softmax_channels(&t) {
            Err(Error::NonFinite { index, coords, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(coords, vec![0, 1, 0, 0]);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn onehot_basic_columns() {
        let ids = Tensor::from_vec(vec![0.0], &[1, 1, 1]).unwrap();
        let oh = onehot(&ids, 2).unwrap();
        assert_eq!(oh.data(), &[1.0, 0.0]);

        let ids = Tensor::from_vec(vec![2.0], &[1, 1, 1]).unwrap();
        let oh = onehot(&ids, 4).unwrap();
        assert_eq!(oh.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn onehot_rejects_out_of_range() {
        let ids = Tensor::from_vec(vec![0.0, 3.0], &[1, 1, 2]).unwrap();
        match onehot(&ids, 3) {
            Err(Error::ClassOutOfRange { id, position, .. }) => {
                assert_eq!(id, 3);
                assert_eq!(position, 1);
            }
            other => panic!("expected ClassOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(vec![0.0; 5], &[2, 3]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(raw in proptest::collection::vec(-1e3f64..1e3, 2..12)) {
            let l = raw.len();
            let p = softmax_channels(&t4(raw, l)).unwrap();
            let sum: f64 = p.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(raw in proptest::collection::vec(-50f64..50.0, 2..8), c in -100f64..100.0) {
            let l = raw.len();
            let shifted: Vec<f64> = raw.iter().map(|&z| z + c).collect();
            let p0 = softmax_channels(&t4(raw, l)).unwrap();
            let p1 = softmax_channels(&t4(shifted, l)).unwrap();
            for (a, b) in p0.data().iter().zip(p1.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn log_softmax_is_log_of_softmax(raw in proptest::collection::vec(-50f64..50.0, 2..8)) {
            let l = raw.len();
            let p = softmax_channels(&t4(raw.clone(), l)).unwrap();
            let lp = log_softmax_channels(&t4(raw, l)).unwrap();
            for (a, b) in p.data().iter().zip(lp.data()) {
                prop_assert!((a.ln() - b).abs() <= 1e-10);
                prop_assert!(b.is_finite());
            }
        }

        #[test]
        fn onehot_argmax_roundtrip(ids in proptest::collection::vec(0u8..6, 1..24)) {
            let n = ids.len();
            let data: Vec<f64> = ids.iter().map(|&v| v as f64).collect();
            let t = Tensor::from_vec(data.clone(), &[1, 1, n]).unwrap();
            let oh = onehot(&t, 6).unwrap();
            // exactly one 1 per column
            for pos in 0..n {
                let ones: f64 = (0..6).map(|c| oh.data()[c * n + pos]).sum();
                prop_assert_eq!(ones, 1.0);
            }
            let back = argmax_channels(&oh).unwrap();
            prop_assert_eq!(back.data(), &data[..]);
        }
    }
}
