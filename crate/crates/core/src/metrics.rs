//! Confusion counts and the derived IoU / mIoU / precision / recall / F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::LabelMap;

/// `counts[i * C + j]` = pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Result<Self> {
        if !(2..=256).contains(&classes) {
            return Err(Error::invalid(format!("{classes} classes; expected 2..=256")));
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::invalid(format!(
                "prediction is {}×{}, truth is {}×{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        if pred.num_classes() != self.classes || truth.num_classes() != self.classes {
            return Err(Error::invalid(format!(
                "class counts differ: pred {}, truth {}, accumulator {}",
                pred.num_classes(),
                truth.num_classes(),
                self.classes
            )));
        }
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("cannot merge counts with different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn tp_fp_fn(&self, class: usize) -> (u64, u64, u64) {
        let tp = self.get(class, class);
        let predicted: u64 = (0..self.classes).map(|i| self.get(i, class)).sum();
        let actual: u64 = (0..self.classes).map(|j| self.get(class, j)).sum();
        (tp, predicted - tp, actual - tp)
    }

    /// `None` when the class appears in neither truth nor prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(class);
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// The mean is accumulated as an exact fraction and rounded once, so
    /// e.g. IoUs 1/2 and 2/3 give exactly the double nearest 7/12.
    pub fn miou(&self, policy: MiouPolicy) -> Result<f64> {
        let fractions: Vec<(u64, u64)> = (0..self.classes)
            .filter_map(|c| {
                let (tp, fp, fn_) = self.tp_fp_fn(c);
                let den = tp + fp + fn_;
                (den > 0).then_some((tp, den))
            })
            .collect();
        if fractions.is_empty() {
            return Err(Error::Evaluation("every class IoU is undefined".into()));
        }
        let n = match policy {
            MiouPolicy::ExcludeUndefined => fractions.len(),
            MiouPolicy::UndefinedAsZero => self.classes,
        } as u128;
        Ok(exact_mean(&fractions, n)
            .unwrap_or_else(|| fractions.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / n as f64))
    }

    pub fn precision_recall_f1(&self, class: usize) -> Prf {
        let (tp, fp, fn_) = self.tp_fp_fn(class);
        let ratio = |den: u64| (den > 0).then(|| tp as f64 / den as f64);
        let precision = ratio(tp + fp);
        let recall = ratio(tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    pub fn report(&self, policy: MiouPolicy) -> MetricsReport {
        let per_class = (0..self.classes)
            .map(|c| {
                let prf = self.precision_recall_f1(c);
                ClassMetrics {
                    class: c,
                    support: (0..self.classes).map(|j| self.get(c, j)).sum(),
                    iou: self.iou(c),
                    precision: prf.precision,
                    recall: prf.recall,
                    f1: prf.f1,
                }
            })
            .collect();
        MetricsReport {
            pixels: self.total(),
            policy,
            miou: self.miou(policy).ok(),
            per_class,
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `Σ (num/den) / n` as one rounded division; `None` on overflow.
fn exact_mean(fractions: &[(u64, u64)], n: u128) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(a, b) in fractions {
        let (a, b) = (a as u128, b as u128);
        let g = gcd(den, b);
        let lcm = den.checked_mul(b / g)?;
        num = num.checked_mul(lcm / den)?.checked_add(a.checked_mul(lcm / b)?)?;
        den = lcm;
        let g = gcd(num, den).max(1);
        num /= g;
        den /= g;
    }
    let den = den.checked_mul(n)?;
    let g = gcd(num, den).max(1);
    let (num, den) = (num / g, den / g);
    // both below 2^53 means each converts exactly and the quotient is
    // correctly rounded
    (num < 1 << 53 && den < 1 << 53).then(|| num as f64 / den as f64)
}

/// How classes with an undefined IoU enter the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiouPolicy {
    #[default]
    ExcludeUndefined,
    UndefinedAsZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: u64,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pixels: u64,
    pub policy: MiouPolicy,
    pub miou: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:>10} {:>8} {:>9} {:>8} {:>8}",
            "class", "pixels", "IoU%", "Prec%", "Rec%", "F1%"
        );
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:>5} {:>10} {:>8} {:>9} {:>8} {:>8}",
                c.class,
                c.support,
                cell(c.iou),
                cell(c.precision),
                cell(c.recall),
                cell(c.f1)
            );
        }
        let _ = writeln!(out, "mIoU% {} over {} pixels", cell(self.miou), self.pixels);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(labels: &[u8]) -> LabelMap {
        LabelMap::new(1, labels.len(), 2, labels.to_vec()).unwrap()
    }

    fn counts(pred: &[u8], truth: &[u8]) -> ConfusionCounts {
        let mut cc = ConfusionCounts::new(2).unwrap();
        cc.accumulate(&map(pred), &map(truth)).unwrap();
        cc
    }

    #[test]
    fn accumulate_examples() {
        let cc = counts(&[1, 0, 1, 1], &[1, 0, 1, 1]);
        assert_eq!(
            (cc.get(0, 0), cc.get(1, 1), cc.get(0, 1), cc.get(1, 0)),
            (1, 3, 0, 0)
        );
        let empty = ConfusionCounts::new(2).unwrap();
        assert_eq!(empty.total(), 0);
        let cc = counts(&[1, 0, 0, 0], &[1, 1, 0, 0]);
        assert_eq!(cc.get(1, 0), 1);
        assert_eq!(cc.get(0, 1), 0);
    }

    #[test]
    fn accumulate_rejects_mismatch() {
        let mut cc = ConfusionCounts::new(2).unwrap();
        assert!(cc.accumulate(&map(&[0, 1]), &map(&[0, 1, 1])).is_err());
        let three = LabelMap::new(1, 2, 3, vec![0, 2]).unwrap();
        assert!(cc.accumulate(&three, &map(&[0, 1])).is_err());
    }

    #[test]
    fn hand_fixture() {
        let cc = counts(&[1, 0, 0, 0], &[1, 1, 0, 0]);
        assert_eq!(cc.iou(1), Some(0.5));
        assert_eq!(cc.iou(0), Some(2.0 / 3.0));
        assert_eq!(cc.miou(MiouPolicy::ExcludeUndefined).unwrap(), 7.0 / 12.0);
    }

    #[test]
    fn perfect_and_disjoint() {
        let cc = counts(&[0, 1, 1, 0], &[0, 1, 1, 0]);
        assert_eq!(cc.miou(MiouPolicy::ExcludeUndefined).unwrap(), 1.0);
        let prf = cc.precision_recall_f1(1);
        assert_eq!(
            (prf.precision, prf.recall, prf.f1),
            (Some(1.0), Some(1.0), Some(1.0))
        );
        let cc = counts(&[1, 0, 1, 0], &[0, 1, 0, 1]);
        assert_eq!(cc.iou(1), Some(0.0));
    }

    #[test]
    fn undefined_handling() {
        let cc = counts(&[0, 0], &[0, 0]);
        assert_eq!(cc.iou(1), None);
        assert_eq!(cc.miou(MiouPolicy::ExcludeUndefined).unwrap(), 1.0);
        assert_eq!(cc.miou(MiouPolicy::UndefinedAsZero).unwrap(), 0.5);
        assert!(ConfusionCounts::new(2)
            .unwrap()
            .miou(MiouPolicy::ExcludeUndefined)
            .is_err());

        let cc = counts(&[0, 0, 0, 0], &[1, 1, 0, 0]);
        let prf = cc.precision_recall_f1(1);
        assert_eq!((prf.precision, prf.recall, prf.f1), (None, Some(0.0), None));
    }

    #[test]
    fn all_positive_prediction() {
        let cc = counts(&[1, 1, 1, 1], &[1, 1, 0, 0]);
        let prf = cc.precision_recall_f1(1);
        assert_eq!(prf.precision, Some(0.5));
        assert_eq!(prf.recall, Some(1.0));
        assert!((prf.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn report_renders() {
        let r = counts(&[1, 0, 0, 0], &[1, 1, 0, 0]).report(MiouPolicy::default());
        let table = r.to_table();
        assert!(table.contains("58.33"));
        let json: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(json["policy"], "exclude-undefined");
        assert_eq!(json["per_class"][1]["iou"], 0.5);
        let empty = counts(&[0, 0], &[0, 0]).report(MiouPolicy::default());
        assert!(empty.to_table().contains("n/a"));
    }

    fn pair(n: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (prop::collection::vec(0u8..3, n), prop::collection::vec(0u8..3, n))
    }

    proptest! {
        #[test]
        fn merge_and_order_independence(chunks in prop::collection::vec(pair(6), 1..6)) {
            let maps: Vec<_> = chunks
                .iter()
                .map(|(p, t)| (LabelMap::new(2, 3, 3, p.clone()).unwrap(), LabelMap::new(2, 3, 3, t.clone()).unwrap()))
                .collect();
            let mut fwd = ConfusionCounts::new(3).unwrap();
            for (p, t) in &maps {
                fwd.accumulate(p, t).unwrap();
            }
            let mut rev = ConfusionCounts::new(3).unwrap();
            for (p, t) in maps.iter().rev() {
                let mut part = ConfusionCounts::new(3).unwrap();
                part.accumulate(p, t).unwrap();
                rev.merge(&part).unwrap();
            }
            prop_assert_eq!(&fwd, &rev);
            prop_assert_eq!(fwd.total(), 6 * maps.len() as u64);
            for c in 0..3 {
                for v in [fwd.iou(c), fwd.precision_recall_f1(c).precision, fwd.precision_recall_f1(c).recall, fwd.precision_recall_f1(c).f1].into_iter().flatten() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}
