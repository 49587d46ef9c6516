//! Fold-level mean intersection-over-union.
//!
//! Intersections and unions are summed over all episodes of a class before
//! dividing (episode-aggregated IoU). Counts are integers, so accumulation
//! order and worker partitioning never change the result.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::extraction::check_binary;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub intersection: u64,
    pub union: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    per_class: BTreeMap<u32, ClassCounts>,
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate<T: Scalar>(
        &mut self,
        class_id: u32,
        pred: &Tensor<T>,
        gt: &Tensor<T>,
    ) -> Result<()> {
        check_binary("prediction", pred)?;
        check_binary("ground truth", gt)?;
        gt.expect_dims("ground truth", pred.dims())?;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            let (p, g) = (p == T::one(), g == T::one());
            inter += u64::from(p && g);
            union += u64::from(p || g);
        }
        let e = self.per_class.entry(class_id).or_default();
        e.intersection += inter;
        e.union += union;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (&c, counts) in &other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.intersection += counts.intersection;
            e.union += counts.union;
        }
    }

    pub fn counts(&self, class_id: u32) -> ClassCounts {
        self.per_class.get(&class_id).copied().unwrap_or_default()
    }

    pub fn miou(&self, classes: &BTreeSet<u32>) -> Result<MiouReport> {
        if classes.is_empty() {
            return Err(Error::config("mIoU over an empty class set"));
        }
        let per_class: Vec<ClassIou> = classes
            .iter()
            .map(|&c| {
                let counts = self.counts(c);
                ClassIou {
                    class_id: c,
                    counts,
                    iou: (counts.union > 0)
                        .then(|| counts.intersection as f64 / counts.union as f64),
                }
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
        let miou =
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok(MiouReport { miou, per_class })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassIou {
    pub class_id: u32,
    pub counts: ClassCounts,
    /// `None` when the class never appeared in prediction or ground truth.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// Unweighted mean over classes with a defined IoU.
    pub miou: Option<f64>,
    pub per_class: Vec<ClassIou>,
}

impl MiouReport {
    pub fn undefined_classes(&self) -> Vec<u32> {
        self.per_class
            .iter()
            .filter(|c| c.iou.is_none())
            .map(|c| c.class_id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Tensor<f32> {
        let w = rows[0].len();
        let v = rows
            .iter()
            .flat_map(|r| r.chars().map(|ch| if ch == '1' { 1.0 } else { 0.0 }))
            .collect();
        Tensor::new(vec![rows.len(), w], v).unwrap()
    }

    #[test]
    fn hand_counted_block_vs_row() {
        let pred = mask(&["1100", "1100", "0000", "0000"]);
        let gt = mask(&["1111", "0000", "0000", "0000"]);
        let mut acc = ConfusionAccumulator::new();
        acc.accumulate(3, &pred, &gt).unwrap();
        assert_eq!(
            acc.counts(3),
            ClassCounts {
                intersection: 2,
                union: 6
            }
        );
        let report = acc.miou(&BTreeSet::from([3])).unwrap();
        assert!((report.miou.unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint_predictions() {
        let a = mask(&["1100", "0000"]);
        let b = mask(&["0000", "0011"]);
        let mut acc = ConfusionAccumulator::new();
        acc.accumulate(0, &a, &a).unwrap();
        assert_eq!(
            acc.counts(0),
            ClassCounts {
                intersection: 2,
                union: 2
            }
        );
        acc.accumulate(1, &a, &b).unwrap();
        assert_eq!(
            acc.counts(1),
            ClassCounts {
                intersection: 0,
                union: 4
            }
        );
    }

    #[test]
    fn mean_of_third_and_one() {
        let mut acc = ConfusionAccumulator::new();
        let pred = mask(&["1100", "1100", "0000", "0000"]);
        let gt = mask(&["1111", "0000", "0000", "0000"]);
        acc.accumulate(0, &pred, &gt).unwrap();
        acc.accumulate(1, &gt, &gt).unwrap();
        let r = acc.miou(&BTreeSet::from([0, 1])).unwrap();
        assert!((r.miou.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn classes_without_pixels_are_flagged() {
        let mut acc = ConfusionAccumulator::new();
        let m = mask(&["10"]);
        acc.accumulate(0, &m, &m).unwrap();
        let r = acc.miou(&BTreeSet::from([0, 7])).unwrap();
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.undefined_classes(), vec![7]);
        assert!(acc.miou(&BTreeSet::new()).is_err());
    }

    #[test]
    fn non_binary_or_mismatched_inputs_rejected() {
        let mut acc = ConfusionAccumulator::new();
        let m = mask(&["10"]);
        let bad = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(acc.accumulate(0, &bad, &m), Err(Error::Data(_))));
        assert!(acc.accumulate(0, &m, &mask(&["1", "0"])).is_err());
    }
}
