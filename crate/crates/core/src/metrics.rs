//! Segmentation and regression metrics.

use crate::error::{Error, Result};

/// `matrix[truth * k + pred]` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub matrix: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            matrix: vec![0; classes * classes],
        }
    }

    pub fn from_labels(pred: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        let mut c = Self::new(classes);
        c.add(pred, truth)?;
        Ok(c)
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("confusion", &[truth.len()], &[pred.len()]));
        }
        let k = self.classes;
        if let Some(bad) = pred.iter().chain(truth).find(|&&v| v >= k) {
            return Err(Error::invalid("confusion", format!("label {bad} outside [0, {k})")));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.matrix[t * k + p] += 1;
        }
        Ok(())
    }

    fn row(&self, t: usize) -> u64 {
        self.matrix[t * self.classes..(t + 1) * self.classes].iter().sum()
    }

    fn col(&self, p: usize) -> u64 {
        (0..self.classes).map(|t| self.matrix[t * self.classes + p]).sum()
    }

    fn diag(&self, c: usize) -> u64 {
        self.matrix[c * self.classes + c]
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.diag(c)).sum::<u64>() as f64 / total as f64
    }

    /// Mean over classes present in prediction or truth.
    pub fn mean_iou(&self) -> f64 {
        let ious: Vec<f64> = (0..self.classes)
            .filter_map(|c| {
                let union = self.row(c) + self.col(c) - self.diag(c);
                (union > 0).then(|| self.diag(c) as f64 / union as f64)
            })
            .collect();
        mean(&ious)
    }

    /// Mean per-class recall over classes present in the truth.
    pub fn mean_accuracy(&self) -> f64 {
        let recalls: Vec<f64> = (0..self.classes)
            .filter_map(|c| {
                let n = self.row(c);
                (n > 0).then(|| self.diag(c) as f64 / n as f64)
            })
            .collect();
        mean(&recalls)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    Ok(Confusion::from_labels(pred, truth, classes)?.mean_iou())
}

pub fn pixel_accuracy(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    Ok(Confusion::from_labels(pred, truth, classes)?.pixel_accuracy())
}

pub fn mean_accuracy(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    Ok(Confusion::from_labels(pred, truth, classes)?.mean_accuracy())
}

fn check_pair(op: &'static str, pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape(op, &[target.len()], &[pred.len()]));
    }
    if pred.is_empty() {
        return Err(Error::invalid(op, "empty input"));
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair("mae", pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair("mse", pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Per-pixel argmax over the class axis of `[N, K, H, W]` scores, in
/// `[N, H, W]` order.
pub fn argmax_labels(scores: &crate::Tensor) -> Result<Vec<usize>> {
    let (n, k, h, w) = scores.dims4("argmax_labels")?;
    let plane = h * w;
    let data = scores.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let base = b * k * plane;
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if data[base + c * plane + p] > data[base + best * plane + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let t = [0, 1, 2, 2, 1];
        assert_eq!(mean_iou(&t, &t, 3).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&t, &t, 3).unwrap(), 1.0);
        assert_eq!(mean_accuracy(&t, &t, 3).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_single_class() {
        assert_eq!(mean_iou(&[1, 1], &[0, 0], 2).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_one_wrong() {
        // truth [0,0,1,1], pred [0,1,1,1]: class 0 IoU 1/2, class 1 IoU 2/3.
        let truth = [0, 0, 1, 1];
        let pred = [0, 1, 1, 1];
        assert_eq!(mean_iou(&pred, &truth, 2).unwrap(), (0.5 + 2.0 / 3.0) / 2.0);
        assert_eq!(pixel_accuracy(&pred, &truth, 2).unwrap(), 0.75);
        assert_eq!(mean_accuracy(&pred, &truth, 2).unwrap(), (0.5 + 1.0) / 2.0);
    }

    #[test]
    fn absent_class_is_excluded() {
        assert_eq!(mean_iou(&[0, 1], &[0, 1], 5).unwrap(), 1.0);
    }

    #[test]
    fn pixel_accuracy_can_trail_mean_iou() {
        let mut truth = vec![0; 10];
        let mut pred = vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        truth.extend([2, 3, 4]);
        pred.extend([2, 3, 4]);
        assert!(pixel_accuracy(&pred, &truth, 5).unwrap() < mean_iou(&pred, &truth, 5).unwrap());
    }

    #[test]
    fn errors() {
        assert!(mean_iou(&[0], &[0, 1], 2).is_err());
        assert!(mean_iou(&[2], &[0], 2).is_err());
        assert!(mse(&[1.0], &[]).is_err());
    }

    #[test]
    fn regression_cases() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mse(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn argmax_over_classes() {
        let t = crate::Tensor::new(&[1, 3, 1, 2], vec![0.0, 5.0, 1.0, 0.0, 2.0, 3.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap(), vec![2, 0]);
    }

    proptest! {
        #[test]
        fn bounds_and_ordering(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)
        ) {
            let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let iou = mean_iou(&pred, &truth, 4).unwrap();
            let pa = pixel_accuracy(&pred, &truth, 4).unwrap();
            let ma = mean_accuracy(&pred, &truth, 4).unwrap();
            for v in [iou, pa, ma] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(ma + 1e-12 >= iou);
        }
    }
}
