//! Segmentation metrics: confusion matrix, mIoU, pixel accuracy, boundary F.

use crate::data::Mask;
use crate::error::{Error, Result};

/// `K×K` counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::dim(format!("{} counts for {k} classes", counts.len())));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::dim(format!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        for (&p, &t) in pred.labels.iter().zip(&gt.labels) {
            if p >= self.k || t >= self.k {
                return Err(Error::Data(format!("class id out of range for {} classes", self.k)));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Config(format!("merging {} classes into {}", other.k, self.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU, `None` for classes absent from both gt and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..self.k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Data("no class is present in ground truth or prediction".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("empty confusion matrix".into()));
        }
        let diag: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / total as f64)
    }
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.miou()
}

/// Pixels whose right or lower neighbor has a different class.
pub fn boundary_map(m: &Mask) -> Vec<bool> {
    let (h, w) = (m.h, m.w);
    let mut b = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = m.at(y, x);
            b[y * w + x] = (x + 1 < w && m.at(y, x + 1) != c) || (y + 1 < h && m.at(y + 1, x) != c);
        }
    }
    b
}

/// Matched and total boundary pixels on both sides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BoundaryCounts {
    pub pred_total: u64,
    pub pred_matched: u64,
    pub gt_total: u64,
    pub gt_matched: u64,
}

impl BoundaryCounts {
    pub fn add(&mut self, other: BoundaryCounts) {
        self.pred_total += other.pred_total;
        self.pred_matched += other.pred_matched;
        self.gt_total += other.gt_total;
        self.gt_matched += other.gt_matched;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.pred_matched, self.pred_total)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.gt_matched, self.gt_total)
    }

    /// Harmonic mean; 1 when neither side has any boundary.
    pub fn f_score(&self) -> f64 {
        if self.pred_total == 0 && self.gt_total == 0 {
            return 1.0;
        }
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn matched(src: &[bool], dst: &[bool], h: usize, w: usize, r: usize) -> (u64, u64) {
    let (mut total, mut hit) = (0, 0);
    for y in 0..h {
        for x in 0..w {
            if !src[y * w + x] {
                continue;
            }
            total += 1;
            let found = (y.saturating_sub(r)..(y + r + 1).min(h))
                .any(|yy| (x.saturating_sub(r)..(x + r + 1).min(w)).any(|xx| dst[yy * w + xx]));
            if found {
                hit += 1;
            }
        }
    }
    (total, hit)
}

pub fn boundary_counts(pred: &Mask, gt: &Mask, r: usize) -> Result<BoundaryCounts> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::dim(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    if r == 0 {
        return Err(Error::param("boundary radius must be at least 1"));
    }
    let (bp, bg) = (boundary_map(pred), boundary_map(gt));
    let (pred_total, pred_matched) = matched(&bp, &bg, pred.h, pred.w, r);
    let (gt_total, gt_matched) = matched(&bg, &bp, pred.h, pred.w, r);
    Ok(BoundaryCounts {
        pred_total,
        pred_matched,
        gt_total,
        gt_matched,
    })
}

pub fn boundary_f_score(pred: &Mask, gt: &Mask, r: usize) -> Result<f64> {
    Ok(boundary_counts(pred, gt, r)?.f_score())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_hand_cases() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
        assert!((cm.miou().unwrap() - 0.6).abs() < 1e-12);
        let gt = Mask::from_fn(2, 2, |_, x| x);
        let pred = Mask::filled(2, 2, 0);
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&pred, &gt).unwrap();
        assert!((cm.miou().unwrap() - 0.25).abs() < 1e-12);
        assert!((cm.pixel_accuracy().unwrap() - 0.5).abs() < 1e-12);
        assert!(ConfusionMatrix::new(3).miou().is_err());
    }

    #[test]
    fn edge_shifts_against_radius() {
        let gt = Mask::from_fn(16, 16, |_, x| usize::from(x >= 8));
        for (shift, f) in [(0, 1.0), (1, 1.0), (2, 1.0), (3, 0.0)] {
            let pred = Mask::from_fn(16, 16, |_, x| usize::from(x >= 8 + shift));
            assert_eq!(boundary_f_score(&pred, &gt, 2).unwrap(), f, "shift {shift}");
        }
        assert!(boundary_f_score(&gt, &Mask::filled(8, 8, 0), 2).is_err());
    }
}
