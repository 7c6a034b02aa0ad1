//! Pixel-level confusion counts, skill scores and threshold-sweep curves.

use serde::{Deserialize, Serialize};

use crate::dbsfnet::MaskImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn scaled(&self, k: u64) -> Self {
        ConfusionCounts {
            tp: self.tp * k,
            fp: self.fp * k,
            fn_: self.fn_ * k,
            tn: self.tn * k,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), |a, b| a + b)
    }
}

/// Tallies `pred` against `truth` over the pixels where `valid` is 1.
pub fn confusion(
    pred: &MaskImage,
    truth: &MaskImage,
    valid: Option<&MaskImage>,
) -> Result<ConfusionCounts> {
    let dims = (pred.height, pred.width);
    if (truth.height, truth.width) != dims || valid.is_some_and(|v| (v.height, v.width) != dims) {
        return Err(Error::shape(
            "confusion",
            format!(
                "prediction {}×{} vs truth {}×{}",
                pred.height, pred.width, truth.height, truth.width
            ),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
        if valid.is_some_and(|v| v.data()[i] == 0) {
            continue;
        }
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub csi: f64,
    pub back_iou: f64,
    pub miou: f64,
    pub f1: f64,
    pub kappa: f64,
    /// Names of metrics whose denominator was zero; those report 0.
    pub degenerate: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, degenerate: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        degenerate.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

pub fn metrics_from_confusion(c: ConfusionCounts) -> MetricReport {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let n = tp + fp + fn_ + tn;
    let mut d = Vec::new();
    let precision = ratio(tp, tp + fp, "precision", &mut d);
    let recall = ratio(tp, tp + fn_, "recall", &mut d);
    let accuracy = ratio(tp + tn, n, "accuracy", &mut d);
    let csi = ratio(tp, tp + fp + fn_, "csi", &mut d);
    let back_iou = ratio(tn, tn + fp + fn_, "back_iou", &mut d);
    let miou = (csi + back_iou) / 2.0;
    let f1 = ratio(2.0 * precision * recall, precision + recall, "f1", &mut d);
    // Cohen's kappa with chance agreement from the marginals
    let pe = if n > 0.0 {
        ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (n * n)
    } else {
        0.0
    };
    let kappa = ratio(accuracy - pe, 1.0 - pe, "kappa", &mut d);
    MetricReport {
        precision,
        recall,
        accuracy,
        csi,
        back_iou,
        miou,
        f1,
        kappa,
        degenerate: d,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// Ascending thresholds `i / (n − 1)`.
    pub points: Vec<CurvePoint>,
    pub roc_auc: f64,
}

/// Sweeps `num_thresholds` evenly spaced thresholds over `[0, 1]`; a pixel
/// is positive iff its probability is `>= threshold`. Pixels of all images
/// are pooled.
pub fn curves(
    prob_maps: &[Vec<f64>],
    truths: &[MaskImage],
    num_thresholds: usize,
) -> Result<Curves> {
    if prob_maps.len() != truths.len() {
        return Err(Error::shape(
            "curves",
            format!(
                "{} probability maps vs {} masks",
                prob_maps.len(),
                truths.len()
            ),
        ));
    }
    if num_thresholds < 2 {
        return Err(Error::Config(format!(
            "need at least 2 thresholds, got {num_thresholds}"
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, t) in prob_maps.iter().zip(truths) {
        if p.len() != t.data().len() {
            return Err(Error::shape(
                "curves",
                format!(
                    "{} probabilities for a {}×{} mask",
                    p.len(),
                    t.height,
                    t.width
                ),
            ));
        }
        for (&v, &m) in p.iter().zip(t.data()) {
            if m == 1 {
                pos.push(v)
            } else {
                neg.push(v)
            }
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let at_least =
        |sorted: &[f64], tau: f64| (sorted.len() - sorted.partition_point(|&v| v < tau)) as u64;

    let points: Vec<CurvePoint> = (0..num_thresholds)
        .map(|i| {
            let threshold = i as f64 / (num_thresholds - 1) as f64;
            let tp = at_least(&pos, threshold);
            let fp = at_least(&neg, threshold);
            let counts = ConfusionCounts {
                tp,
                fp,
                fn_: pos.len() as u64 - tp,
                tn: neg.len() as u64 - fp,
            };
            let r = metrics_from_confusion(counts);
            let fpr = if neg.is_empty() {
                0.0
            } else {
                fp as f64 / neg.len() as f64
            };
            CurvePoint {
                threshold,
                precision: r.precision,
                recall: r.recall,
                tpr: r.recall,
                fpr,
                counts,
            }
        })
        .collect();

    // trapezoid over (fpr, tpr), closed with the (0,0) and (1,1) corners
    let mut roc: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    roc.push((0.0, 0.0));
    roc.push((1.0, 1.0));
    roc.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let roc_auc = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(Curves { points, roc_auc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbsfnet::predict_mask;
    use crate::ndtensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, data: Vec<u8>) -> MaskImage {
        MaskImage::new(h, w, data).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MaskImage {
        mask(h, w, (0..h * w).map(|_| rng.gen_range(0..2)).collect())
    }

    #[test]
    fn confusion_trivial_cases() {
        let ones = mask(4, 4, vec![1; 16]);
        assert_eq!(
            confusion(&ones, &ones, None).unwrap(),
            ConfusionCounts {
                tp: 16,
                ..Default::default()
            }
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_mask(&mut rng, 4, 4);
        let not_t = mask(4, 4, t.data().iter().map(|v| 1 - v).collect());
        let c = confusion(&not_t, &t, None).unwrap();
        assert_eq!((c.tp, c.tn, c.total()), (0, 0, 16));
        assert!(confusion(&ones, &mask(2, 8, vec![0; 16]), None).is_err());
    }

    #[test]
    fn confusion_matches_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (p, t, v) = (
                random_mask(&mut rng, 8, 8),
                random_mask(&mut rng, 8, 8),
                random_mask(&mut rng, 8, 8),
            );
            let mut tally = [[0u64; 2]; 2];
            for y in 0..8 {
                for x in 0..8 {
                    if v.get(y, x) == 1 {
                        tally[p.get(y, x) as usize][t.get(y, x) as usize] += 1;
                    }
                }
            }
            let c = confusion(&p, &t, Some(&v)).unwrap();
            assert_eq!(
                (c.tp, c.fp, c.fn_, c.tn),
                (tally[1][1], tally[1][0], tally[0][1], tally[0][0])
            );
        }
    }

    #[test]
    fn worked_example() {
        let r = metrics_from_confusion(ConfusionCounts {
            tp: 50,
            fp: 10,
            fn_: 20,
            tn: 920,
        });
        let close = |a: f64, b: f64| (a - b).abs() < 1e-4;
        assert!(close(r.precision, 0.8333) && close(r.recall, 0.7143));
        assert!(close(r.csi, 0.625) && close(r.f1, 0.7692) && close(r.accuracy, 0.97));
        assert!(close(r.back_iou, 920.0 / 950.0) && close(r.miou, 0.7967));
        // kappa by hand: pe = (60·70 + 940·930) / 1000²
        let pe = (60.0 * 70.0 + 940.0 * 930.0) / 1e6;
        assert!((r.kappa - (0.97 - pe) / (1.0 - pe)).abs() < 1e-12);
        assert!(r.degenerate.is_empty());
    }

    #[test]
    fn perfect_and_degenerate() {
        let r = metrics_from_confusion(ConfusionCounts {
            tp: 30,
            fp: 0,
            fn_: 0,
            tn: 70,
        });
        for v in [
            r.precision,
            r.recall,
            r.accuracy,
            r.csi,
            r.back_iou,
            r.miou,
            r.f1,
            r.kappa,
        ] {
            assert_eq!(v, 1.0);
        }
        let r = metrics_from_confusion(ConfusionCounts {
            tn: 100,
            ..Default::default()
        });
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.precision, 0.0);
        assert!(r.degenerate.contains(&"precision".to_string()));
        assert!(r.degenerate.contains(&"csi".to_string()));
    }

    proptest! {
        #[test]
        fn identities_hold(tp in 0u64..5000, fp in 0u64..5000, fn_ in 0u64..5000, tn in 0u64..5000, k in 1u64..50) {
            let c = ConfusionCounts { tp, fp, fn_, tn };
            let r = metrics_from_confusion(c);
            prop_assert_eq!(r.miou, (r.csi + r.back_iou) / 2.0);
            prop_assert!(r.csi <= r.precision.min(r.recall) + 1e-15);
            prop_assert!((-1.0..=1.0).contains(&r.kappa));
            let s = metrics_from_confusion(c.scaled(k));
            for (a, b) in [(r.precision, s.precision), (r.recall, s.recall), (r.csi, s.csi), (r.f1, s.f1), (r.kappa, s.kappa), (r.miou, s.miou)] {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_separation_has_unit_auc() {
        let t = mask(2, 2, vec![1, 0, 1, 0]);
        let c = curves(&[vec![0.9, 0.1, 0.8, 0.3]], &[t], 101).unwrap();
        assert!((c.roc_auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_scores_have_half_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let probs: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let t = random_mask(&mut rng, 1, n);
        let c = curves(&[probs], &[t], 101).unwrap();
        assert!((c.roc_auc - 0.5).abs() <= 0.02, "{}", c.roc_auc);
    }

    #[test]
    fn endpoints_and_monotone_roc() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_mask(&mut rng, 16, 16);
        let probs: Vec<f64> = (0..256).map(|_| rng.gen()).collect();
        let c = curves(&[probs], &[t], 11).unwrap();
        assert_eq!(c.points[0].recall, 1.0);
        assert_eq!(c.points[0].fpr, 1.0);
        for w in c.points.windows(2) {
            assert!(w[1].fpr <= w[0].fpr && w[1].tpr <= w[0].tpr);
        }
    }

    #[test]
    fn half_threshold_point_matches_mask_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut maps = Vec::new();
        let mut truths = Vec::new();
        let mut pooled = ConfusionCounts::default();
        for _ in 0..4 {
            let logits = Tensor::from_vec(
                &[2, 8, 8],
                (0..128).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            let truth = random_mask(&mut rng, 8, 8);
            pooled += confusion(&predict_mask(&logits, 0.5).unwrap(), &truth, None).unwrap();
            maps.push(crate::dbsfnet::class_probability(&logits, 1).unwrap());
            truths.push(truth);
        }
        let c = curves(&maps, &truths, 101).unwrap();
        let p = c.points[50];
        assert_eq!(p.threshold, 0.5);
        assert_eq!(p.counts, pooled);
        let r = metrics_from_confusion(pooled);
        assert_eq!((p.precision, p.recall), (r.precision, r.recall));
    }
}
