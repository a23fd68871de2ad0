//! Overlap and surface-distance metrics for label masks.
//!
//! Surface distances use 4-connected boundary pixels. HD95 and ASD are pooled
//! over both directed distance sets: HD95 is the linearly interpolated 95th
//! percentile and ASD the mean of that pooled set.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::edt::squared_edt;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
    num_classes: usize,
    /// `(row, col)` physical pixel size.
    pub spacing: (f64, f64),
}

impl LabelMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if labels.len() != h * w || h == 0 || w == 0 {
            return dim_err(format!("{} labels for a {h}x{w} mask", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Parameter(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self { h, w, labels, num_classes, spacing: (1.0, 1.0) })
    }

    pub fn with_spacing(mut self, row: f64, col: f64) -> Self {
        self.spacing = (row, col);
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_mask(&self, class: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == class).collect()
    }

    pub fn count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == class).count()
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return dim_err(format!("mask shapes {:?} vs {:?}", self.dims(), other.dims()));
        }
        Ok(())
    }
}

/// `(dice, iou)` for one class; both are 1 when the class is absent from both.
pub fn dice_iou(pred: &LabelMask, gt: &LabelMask, class: usize) -> Result<(f64, f64)> {
    pred.same_shape(gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (p, g) = (p as usize == class, g as usize == class);
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok((1.0, 1.0));
    }
    let union = np + ng - inter;
    Ok((2.0 * inter as f64 / (np + ng) as f64, inter as f64 / union as f64))
}

/// Foreground pixels with a background 4-neighbour or on the image edge.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            if !mask[i * w + j] {
                continue;
            }
            let edge = i == 0 || j == 0 || i + 1 == h || j + 1 == w;
            out[i * w + j] = edge
                || !mask[(i - 1) * w + j]
                || !mask[(i + 1) * w + j]
                || !mask[i * w + j - 1]
                || !mask[i * w + j + 1];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistance {
    pub hd95: f64,
    pub asd: f64,
    /// One boundary set was empty and the other not: both values are the image
    /// diagonal.
    pub sentinel: bool,
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of a sorted slice.
pub fn percentile_sorted(v: &[f64], q: f64) -> f64 {
    let rank = q * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

pub fn hd95_asd(pred: &LabelMask, gt: &LabelMask, class: usize) -> Result<SurfaceDistance> {
    pred.same_shape(gt)?;
    let (h, w) = pred.dims();
    let sp = gt.spacing;
    let bp = boundary(&pred.class_mask(class), h, w);
    let bg = boundary(&gt.class_mask(class), h, w);
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    if np == 0 && ng == 0 {
        return Ok(SurfaceDistance { hd95: 0.0, asd: 0.0, sentinel: false });
    }
    if np == 0 || ng == 0 {
        let diag = ((h as f64 * sp.0).powi(2) + (w as f64 * sp.1).powi(2)).sqrt();
        return Ok(SurfaceDistance { hd95: diag, asd: diag, sentinel: true });
    }
    let to_g = squared_edt(&bg, h, w, sp).expect("non-empty boundary");
    let to_p = squared_edt(&bp, h, w, sp).expect("non-empty boundary");
    let mut d: Vec<f64> = Vec::with_capacity(np + ng);
    d.extend(bp.iter().zip(&to_g).filter(|(&b, _)| b).map(|(_, &s)| s.sqrt()));
    d.extend(bg.iter().zip(&to_p).filter(|(&b, _)| b).map(|(_, &s)| s.sqrt()));
    d.sort_by(f64::total_cmp);
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    Ok(SurfaceDistance { hd95: percentile_sorted(&d, 0.95), asd, sentinel: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
    pub asd: f64,
    pub sentinel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// Foreground classes `1..K`.
    pub per_class: Vec<ClassMetrics>,
    pub mdice: f64,
    pub miou: f64,
}

pub fn class_metrics(pred: &LabelMask, gt: &LabelMask, class: usize) -> Result<ClassMetrics> {
    let (dice, iou) = dice_iou(pred, gt, class)?;
    let s = hd95_asd(pred, gt, class)?;
    Ok(ClassMetrics { class, dice, iou, hd95: s.hd95, asd: s.asd, sentinel: s.sentinel })
}

/// Per-class metrics over the foreground classes and their macro means.
pub fn seg_metrics(pred: &LabelMask, gt: &LabelMask) -> Result<SegMetrics> {
    let k = gt.num_classes.max(pred.num_classes);
    let per_class = (1..k).map(|c| class_metrics(pred, gt, c)).collect::<Result<Vec<_>>>()?;
    let n = per_class.len().max(1) as f64;
    let mdice = per_class.iter().map(|m| m.dice).sum::<f64>() / n;
    let miou = per_class.iter().map(|m| m.iou).sum::<f64>() / n;
    Ok(SegMetrics { per_class, mdice, miou })
}

/// Overlap-only macro Dice/IoU over foreground classes, `(mdice, miou)`.
pub fn mean_dice_iou(pred: &LabelMask, gt: &LabelMask) -> Result<(f64, f64)> {
    let k = gt.num_classes.max(pred.num_classes);
    let (mut d, mut i) = (0.0, 0.0);
    for c in 1..k {
        let (dc, ic) = dice_iou(pred, gt, c)?;
        d += dc;
        i += ic;
    }
    let n = (k - 1).max(1) as f64;
    Ok((d / n, i / n))
}

/// One JSON-lines metric record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image: usize,
    pub class: usize,
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
    pub asd: f64,
}

pub fn write_jsonl<W: Write>(mut out: W, image: usize, m: &SegMetrics) -> Result<()> {
    for c in &m.per_class {
        let rec = MetricRecord { image, class: c.class, dice: c.dice, iou: c.iou, hd95: c.hd95, asd: c.asd };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
