//! Segmentation metrics on integer label maps.

use crate::error::{Error, Result};

/// Per-class Dice similarity and the mean over foreground classes
/// (`1..k`, or class 0 alone when `k == 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct DscReport {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

fn same_len(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)` per class. A class absent from both masks
/// scores 1.
pub fn dsc_metric(pred: &[usize], gt: &[usize], k: usize) -> Result<DscReport> {
    same_len(pred, gt)?;
    let mut inter = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= k || g >= k {
            return Err(Error::dim(format!("class id out of range for {k} classes")));
        }
        total[p] += 1;
        total[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let per_class: Vec<f64> = (0..k)
        .map(|c| if total[c] == 0 { 1.0 } else { 2.0 * inter[c] as f64 / total[c] as f64 })
        .collect();
    let fg = if k == 1 { &per_class[..] } else { &per_class[1..] };
    let mean = fg.iter().sum::<f64>() / fg.len() as f64;
    Ok(DscReport { per_class, mean })
}

/// Foreground pixels with a 4-neighbour outside the mask or on the image edge.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[i * w + j] {
                continue;
            }
            let edge = i == 0 || j == 0 || i + 1 == h || j + 1 == w;
            if edge || !mask[(i - 1) * w + j] || !mask[(i + 1) * w + j] || !mask[i * w + j - 1] || !mask[i * w + j + 1] {
                out.push((i, j));
            }
        }
    }
    out
}

fn directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<f64> {
    a.iter()
        .map(|&(ai, aj)| {
            b.iter()
                .map(|&(bi, bj)| {
                    let (di, dj) = (ai as f64 - bi as f64, aj as f64 - bj as f64);
                    di * di + dj * dj
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

fn hd_impl(a: &[bool], b: &[bool], h: usize, w: usize, percentile: Option<f64>) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::dim(format!("masks do not cover a {h}x{w} grid")));
    }
    let (ba, bb) = (boundary(a, h, w), boundary(b, h, w));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(((h * h + w * w) as f64).sqrt()),
        _ => {}
    }
    let mut d = directed(&ba, &bb);
    d.extend(directed(&bb, &ba));
    Ok(match percentile {
        None => d.iter().copied().fold(0.0, f64::max),
        Some(q) => {
            d.sort_by(f64::total_cmp);
            let idx = ((q / 100.0) * (d.len() - 1) as f64).round() as usize;
            d[idx.min(d.len() - 1)]
        }
    })
}

/// Symmetric Hausdorff distance in pixels between the boundaries of two
/// binary masks. An empty mask against a non-empty one scores the image
/// diagonal; two empty masks score 0.
pub fn hausdorff(a: &[bool], b: &[bool], h: usize, w: usize) -> Result<f64> {
    hd_impl(a, b, h, w, None)
}

/// 95th percentile of the pooled boundary-to-boundary distances.
pub fn hausdorff95(a: &[bool], b: &[bool], h: usize, w: usize) -> Result<f64> {
    hd_impl(a, b, h, w, Some(95.0))
}

/// Mean Hausdorff distance over foreground classes of two label maps.
pub fn hausdorff_labels(pred: &[usize], gt: &[usize], k: usize, h: usize, w: usize, hd95: bool) -> Result<f64> {
    same_len(pred, gt)?;
    let classes: Vec<usize> = if k == 1 { vec![0] } else { (1..k).collect() };
    let mut sum = 0.0;
    for &c in &classes {
        let a: Vec<bool> = pred.iter().map(|&p| p == c).collect();
        let b: Vec<bool> = gt.iter().map(|&g| g == c).collect();
        sum += if hd95 { hausdorff95(&a, &b, h, w)? } else { hausdorff(&a, &b, h, w)? };
    }
    Ok(sum / classes.len() as f64)
}

/// Pixel counts of a binary foreground-vs-background comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionMetrics {
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
}

impl Confusion {
    pub fn tally(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::dim(format!("masks of {} and {} pixels", pred.len(), gt.len())));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// Ratios with an empty denominator count as 1.
    pub fn metrics(&self) -> ConfusionMetrics {
        let ratio = |a: usize, b: usize| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
        let total = self.tp + self.tn + self.fp + self.fn_;
        ConfusionMetrics {
            se: ratio(self.tp, self.fn_),
            sp: ratio(self.tn, self.fp),
            acc: if total == 0 { 1.0 } else { (self.tp + self.tn) as f64 / total as f64 },
        }
    }
}

/// SE, SP and ACC treating every non-zero class as foreground.
pub fn confusion_metrics(pred: &[usize], gt: &[usize]) -> Result<ConfusionMetrics> {
    let p: Vec<bool> = pred.iter().map(|&v| v != 0).collect();
    let g: Vec<bool> = gt.iter().map(|&v| v != 0).collect();
    Ok(Confusion::tally(&p, &g)?.metrics())
}
