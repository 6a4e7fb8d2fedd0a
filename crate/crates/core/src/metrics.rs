//! Disparity and segmentation metrics. Every function returns `None` when
//! there is nothing to evaluate (empty mask, no labelled pixels).

use crate::error::{Error, Result};
use crate::tensor::Real;

fn check_len(op: &'static str, a: usize, b: usize, what: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, what, a, b));
    }
    Ok(())
}

/// Mean absolute disparity error over valid pixels.
pub fn epe<T: Real>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<Option<f64>> {
    let mut acc = DisparityStats::default();
    acc.add(pred, gt, mask)?;
    Ok(acc.epe())
}

/// Percentage of valid pixels whose error exceeds both 3 px and 5 % of the
/// ground truth.
pub fn d1_all<T: Real>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<Option<f64>> {
    let mut acc = DisparityStats::default();
    acc.add(pred, gt, mask)?;
    Ok(acc.d1_all())
}

/// Whether one pixel counts as a D1 outlier.
pub fn is_d1_outlier(pred: f64, gt: f64) -> bool {
    let err = (pred - gt).abs();
    err > 3.0 && err > 0.05 * gt.abs()
}

/// Running sums for EPE and D1 over many images.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DisparityStats {
    pub abs_err_sum: f64,
    pub outliers: u64,
    pub pixels: u64,
}

impl DisparityStats {
    pub fn add<T: Real>(&mut self, pred: &[T], gt: &[T], mask: &[bool]) -> Result<()> {
        check_len("disparity metrics", pred.len(), gt.len(), "gt")?;
        check_len("disparity metrics", pred.len(), mask.len(), "mask")?;
        for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
            if !m {
                continue;
            }
            let (p, g) = (p.as_f64(), g.as_f64());
            self.abs_err_sum += (p - g).abs();
            self.outliers += u64::from(is_d1_outlier(p, g));
            self.pixels += 1;
        }
        Ok(())
    }

    pub fn epe(&self) -> Option<f64> {
        (self.pixels > 0).then(|| self.abs_err_sum / self.pixels as f64)
    }

    pub fn d1_all(&self) -> Option<f64> {
        (self.pixels > 0).then(|| 100.0 * self.outliers as f64 / self.pixels as f64)
    }
}

/// Confusion counts, `counts[gt * n + pred]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        check_len("segmentation metrics", pred.len(), gt.len(), "gt")?;
        let n = self.n_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= n || g >= n {
                return Err(Error::contract(
                    "segmentation metrics",
                    format!("class id {} out of range for {n} classes", p.max(g)),
                ));
            }
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    pub fn labelled(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_acc(&self) -> Option<f64> {
        let total = self.labelled();
        let correct: u64 = (0..self.n_classes)
            .map(|c| self.counts[c * self.n_classes + c])
            .sum();
        (total > 0).then(|| 100.0 * correct as f64 / total as f64)
    }

    /// Per-class IoU for classes present in the ground truth.
    pub fn class_iou(&self) -> Vec<(usize, f64)> {
        let n = self.n_classes;
        (0..n)
            .filter_map(|c| {
                let gt_total: u64 = self.counts[c * n..][..n].iter().sum();
                if gt_total == 0 {
                    return None;
                }
                let pred_total: u64 = (0..n).map(|g| self.counts[g * n + c]).sum();
                let inter = self.counts[c * n + c];
                let union = gt_total + pred_total - inter;
                Some((c, inter as f64 / union as f64))
            })
            .collect()
    }

    pub fn miou(&self) -> Option<f64> {
        let ious = self.class_iou();
        (!ious.is_empty()).then(|| 100.0 * ious.iter().map(|(_, v)| v).sum::<f64>() / ious.len() as f64)
    }
}

/// Class-mean intersection over union (percent) over classes present in `gt`.
pub fn miou(pred: &[u8], gt: &[u8], n_classes: usize, ignore: u8) -> Result<Option<f64>> {
    let mut c = Confusion::new(n_classes);
    c.add(pred, gt, ignore)?;
    Ok(c.miou())
}

/// Percentage of labelled pixels predicted correctly.
pub fn pixel_acc(pred: &[u8], gt: &[u8], ignore: u8) -> Result<Option<f64>> {
    check_len("pixel_acc", pred.len(), gt.len(), "gt")?;
    let (mut correct, mut total) = (0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        if g != ignore {
            total += 1;
            correct += u64::from(p == g);
        }
    }
    Ok((total > 0).then(|| 100.0 * correct as f64 / total as f64))
}
