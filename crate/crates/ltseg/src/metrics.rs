//! Segmentation evaluation: confusion accumulation, per-class IoU, mean
//! IoU, pixel accuracy, and Dice error.

use crate::error::{Error, Result};
use crate::Tensor;

/// Square count matrix with rows indexed by ground truth and columns by
/// prediction. Accumulation is single-writer; shards merge exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Confusion {
        Confusion { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    /// Build from explicit rows, for tests and hand oracles.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Confusion> {
        let l = rows.len();
        if rows.iter().any(|r| r.len() != l) {
            return Err(Error::BadConfig { reason: "confusion rows must form a square".into() });
        }
        Ok(Confusion { num_classes: l, counts: rows.concat() })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one (prediction, truth) id pair per pixel. The tensors must
    /// have identical shapes; ids must be integral and below the class
    /// count.
    pub fn accumulate(&mut self, pred_ids: &Tensor, true_ids: &Tensor) -> Result<()> {
        if pred_ids.shape() != true_ids.shape() {
            return Err(Error::ShapeMismatch {
                left: pred_ids.shape().to_vec(),
                right: true_ids.shape().to_vec(),
            });
        }
        let l = self.num_classes;
        let check = |v: f64, position: usize| -> Result<usize> {
            if v < 0.0 || v.fract() != 0.0 || (v as usize) >= l {
                return Err(Error::ClassOutOfRange {
                    id: if v >= 0.0 { v as usize } else { usize::MAX },
                    num_classes: l,
                    position,
                });
            }
            Ok(v as usize)
        };
        for (i, (&p, &t)) in pred_ids.data().iter().zip(true_ids.data()).enumerate() {
            let (p, t) = (check(p, i)?, check(t, i)?);
            self.counts[t * l + p] += 1;
        }
        Ok(())
    }

    /// Exact elementwise sum, for combining evaluation shards.
    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch {
                left: vec![self.num_classes, self.num_classes],
                right: vec![other.num_classes, other.num_classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// (true positives, false positives, false negatives) per class.
    fn tallies(&self) -> Vec<(u64, u64, u64)> {
        let l = self.num_classes;
        (0..l)
            .map(|k| {
                let tp = self.counts[k * l + k];
                let row: u64 = self.counts[k * l..(k + 1) * l].iter().sum();
                let col: u64 = (0..l).map(|t| self.counts[t * l + k]).sum();
                (tp, col - tp, row - tp)
            })
            .collect()
    }

    /// Per-class intersection over union as fractions; NaN for classes
    /// absent from both truth and prediction.
    pub fn iou_fractions(&self) -> Vec<f64> {
        self.tallies()
            .iter()
            .map(|&(tp, fp, fn_)| {
                let union = tp + fp + fn_;
                if union == 0 {
                    f64::NAN
                } else {
                    tp as f64 / union as f64
                }
            })
            .collect()
    }

    /// Per-class Dice coefficient as fractions; NaN where undefined.
    pub fn dice_fractions(&self) -> Vec<f64> {
        self.tallies()
            .iter()
            .map(|&(tp, fp, fn_)| {
                let denom = 2 * tp + fp + fn_;
                if denom == 0 {
                    f64::NAN
                } else {
                    2.0 * tp as f64 / denom as f64
                }
            })
            .collect()
    }

    /// Summarize into percentages. `dice_mean` averages the per-class
    /// Dice error instead of summing it.
    pub fn report(&self, dice_mean: bool) -> Result<EvalReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::BadConfig { reason: "confusion matrix has no counts".into() });
        }
        let ious = self.iou_fractions();
        let present: Vec<f64> = ious.iter().copied().filter(|v| !v.is_nan()).collect();
        let miou = 100.0 * present.iter().sum::<f64>() / present.len() as f64;
        let l = self.num_classes;
        let trace: u64 = (0..l).map(|k| self.counts[k * l + k]).sum();
        let pix_acc = 100.0 * trace as f64 / total as f64;
        let dices: Vec<f64> = self.dice_fractions().into_iter().filter(|v| !v.is_nan()).collect();
        let mut dice_err: f64 = dices.iter().map(|d| 1.0 - d).sum();
        if dice_mean {
            dice_err /= dices.len() as f64;
        }
        Ok(EvalReport {
            miou,
            per_class_iou: ious.iter().map(|v| 100.0 * v).collect(),
            pix_acc,
            dice_err,
        })
    }
}

/// Evaluation summary. IoU and accuracy are percentages; Dice error is a
/// sum of per-class complements (so it can exceed 1) unless the report
/// was built with the mean flag.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<f64>,
    pub pix_acc: f64,
    pub dice_err: f64,
}

impl EvalReport {
    pub fn csv_header(num_classes: usize) -> String {
        let mut s = String::from("method,seed,miou,pix_acc,dice_err");
        for k in 0..num_classes {
            s.push_str(&format!(",iou_{k}"));
        }
        s
    }

    pub fn csv_row(&self, method: &str, seed: u64) -> String {
        let mut s = format!(
            "{method},{seed},{:.4},{:.4},{:.4}",
            self.miou, self.pix_acc, self.dice_err
        );
        for v in &self.per_class_iou {
            s.push_str(&format!(",{v:.4}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(shape: &[usize], vals: &[f64]) -> Tensor {
        Tensor::from_vec(vals.to_vec(), shape).unwrap()
    }

    #[test]
    fn perfect_prediction_is_all_diagonal_and_scores_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vals: Vec<f64> = (0..60).map(|_| rng.gen_range(0..4) as f64).collect();
        let t = ids(&[3, 4, 5], &vals);
        let mut conf = Confusion::new(4);
        conf.accumulate(&t, &t).unwrap();
        for truth in 0..4 {
            for pred in 0..4 {
                if truth != pred {
                    assert_eq!(conf.count(truth, pred), 0);
                }
            }
        }
        let rep = conf.report(false).unwrap();
        assert_eq!(rep.miou, 100.0);
        assert_eq!(rep.pix_acc, 100.0);
        assert_eq!(rep.dice_err, 0.0);
    }

    #[test]
    fn hand_counted_two_class_example() {
        let truth = ids(&[4], &[0.0, 0.0, 1.0, 1.0]);
        let pred = ids(&[4], &[0.0, 1.0, 1.0, 1.0]);
        let mut conf = Confusion::new(2);
        conf.accumulate(&pred, &truth).unwrap();
        assert_eq!(conf.count(0, 0), 1);
        assert_eq!(conf.count(0, 1), 1);
        assert_eq!(conf.count(1, 0), 0);
        assert_eq!(conf.count(1, 1), 2);
        let rep = conf.report(false).unwrap();
        assert!((rep.per_class_iou[0] - 50.0).abs() < 1e-12);
        assert!((rep.per_class_iou[1] - 100.0 * 2.0 / 3.0).abs() < 1e-12);
        assert!((rep.miou - 58.33).abs() < 0.01);
        assert_eq!(rep.pix_acc, 75.0);
        // (1 - 2/3) + (1 - 4/5)
        assert!((rep.dice_err - 0.5333).abs() < 0.0001);
        let mean = conf.report(true).unwrap();
        assert!((mean.dice_err - rep.dice_err / 2.0).abs() < 1e-15);
    }

    #[test]
    fn all_wrong_prediction_scores_zero() {
        let truth = ids(&[4], &[0.0, 0.0, 1.0, 1.0]);
        let pred = ids(&[4], &[1.0, 1.0, 0.0, 0.0]);
        let mut conf = Confusion::new(2);
        conf.accumulate(&pred, &truth).unwrap();
        let rep = conf.report(false).unwrap();
        assert_eq!(rep.miou, 0.0);
        assert_eq!(rep.pix_acc, 0.0);
        assert_eq!(rep.dice_err, 2.0);
    }

    #[test]
    fn accumulation_is_order_independent_and_merge_adds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t: Vec<f64> = (0..40).map(|_| rng.gen_range(0..3) as f64).collect();
        let p: Vec<f64> = (0..40).map(|_| rng.gen_range(0..3) as f64).collect();
        let mut whole = Confusion::new(3);
        whole.accumulate(&ids(&[40], &p), &ids(&[40], &t)).unwrap();
        let mut a = Confusion::new(3);
        a.accumulate(&ids(&[25], &p[..25]), &ids(&[25], &t[..25])).unwrap();
        let mut b = Confusion::new(3);
        b.accumulate(&ids(&[15], &p[25..]), &ids(&[15], &t[25..])).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, whole);
    }

    #[test]
    fn bad_ids_and_shapes_are_rejected() {
        let mut conf = Confusion::new(2);
        let ok = ids(&[2], &[0.0, 1.0]);
        let high = ids(&[2], &[0.0, 2.0]);
        let frac = ids(&[2], &[0.5, 1.0]);
        assert!(matches!(
            conf.accumulate(&high, &ok),
            Err(Error::ClassOutOfRange { id: 2, position: 1, .. })
        ));
        assert!(matches!(conf.accumulate(&frac, &ok), Err(Error::ClassOutOfRange { .. })));
        let wide = ids(&[3], &[0.0, 1.0, 0.0]);
        assert!(matches!(conf.accumulate(&wide, &ok), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(conf.merge(&Confusion::new(3)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_union_classes_are_excluded_from_the_mean() {
        let truth = ids(&[4], &[0.0, 0.0, 1.0, 1.0]);
        let pred = ids(&[4], &[0.0, 1.0, 1.0, 1.0]);
        let mut conf = Confusion::new(3);
        conf.accumulate(&pred, &truth).unwrap();
        let rep = conf.report(false).unwrap();
        assert!(rep.per_class_iou[2].is_nan());
        // mean of 1/2 and 2/3 only
        assert!((rep.miou - 100.0 * (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_confusion_cannot_be_reported() {
        assert!(matches!(Confusion::new(3).report(false), Err(Error::BadConfig { .. })));
    }

    #[test]
    fn dice_follows_from_iou_on_random_confusions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let l = rng.gen_range(2..6);
            let rows: Vec<Vec<u64>> =
                (0..l).map(|_| (0..l).map(|_| rng.gen_range(0..50)).collect()).collect();
            let conf = Confusion::from_rows(&rows).unwrap();
            for (iou, dice) in conf.iou_fractions().iter().zip(conf.dice_fractions()) {
                if iou.is_nan() {
                    assert!(dice.is_nan());
                } else {
                    assert!((dice - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn csv_row_has_one_column_per_class() {
        let conf = Confusion::from_rows(&[vec![3, 0], vec![1, 4]]).unwrap();
        let rep = conf.report(false).unwrap();
        let header = EvalReport::csv_header(2);
        let row = rep.csv_row("ce", 7);
        assert_eq!(header.split(',').count(), row.split(',').count());
        assert!(row.starts_with("ce,7,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn relabeling_classes_permutes_scores(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = rng.gen_range(2..5usize);
            let n = 60;
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0..l) as f64).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0..l) as f64).collect();
            let mut perm: Vec<usize> = (0..l).collect();
            for i in (1..l).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let apply = |v: &[f64]| -> Vec<f64> {
                v.iter().map(|&x| perm[x as usize] as f64).collect()
            };
            let mut base = Confusion::new(l);
            base.accumulate(&ids(&[n], &p), &ids(&[n], &t)).unwrap();
            let mut relab = Confusion::new(l);
            relab
                .accumulate(&ids(&[n], &apply(&p)), &ids(&[n], &apply(&t)))
                .unwrap();
            let a = base.report(false).unwrap();
            let b = relab.report(false).unwrap();
            prop_assert!((a.miou - b.miou).abs() < 1e-9);
            prop_assert!((a.pix_acc - b.pix_acc).abs() < 1e-9);
            prop_assert!((a.dice_err - b.dice_err).abs() < 1e-9);
            for k in 0..l {
                let (x, y) = (a.per_class_iou[k], b.per_class_iou[perm[k]]);
                prop_assert!(x == y || (x.is_nan() && y.is_nan()) || (x - y).abs() < 1e-9);
            }
        }
    }
}
