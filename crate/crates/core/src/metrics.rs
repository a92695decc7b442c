//! Region and contour accuracy of binary masks.
//!
//! Masks are `[1, H, W]` (or `[H, W]`) tensors; values above 0.5 count as
//! foreground. Two empty masks agree perfectly under every measure.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn plane(m: &Tensor) -> Result<(usize, usize)> {
    match m.shape() {
        [1, h, w] | [h, w] => Ok((*h, *w)),
        s => Err(Error::shape("metrics", format!("expected a single-channel mask, got {s:?}"))),
    }
}

fn bits(m: &Tensor) -> Vec<bool> {
    m.data().iter().map(|&v| v > 0.5).collect()
}

fn pair(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize, Vec<bool>, Vec<bool>)> {
    let dims = plane(pred)?;
    if plane(gt)? != dims {
        return Err(Error::shape(
            "metrics",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok((dims.0, dims.1, bits(pred), bits(gt)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    inter: usize,
    pred: usize,
    gt: usize,
}

fn counts(pred: &Tensor, gt: &Tensor) -> Result<Counts> {
    let (_, _, p, g) = pair(pred, gt)?;
    let mut c = Counts::default();
    for (a, b) in p.into_iter().zip(g) {
        c.inter += (a && b) as usize;
        c.pred += a as usize;
        c.gt += b as usize;
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Intersection over union.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let c = counts(pred, gt)?;
    let union = c.pred + c.gt - c.inter;
    Ok(if union == 0 { 1.0 } else { ratio(c.inter, union) })
}

/// Pixel precision, recall and F-measure.
pub fn prf(pred: &Tensor, gt: &Tensor) -> Result<(f64, f64, f64)> {
    Ok(prf_counts(counts(pred, gt)?))
}

fn prf_counts(c: Counts) -> (f64, f64, f64) {
    if c.pred == 0 && c.gt == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = ratio(c.inter, c.pred);
    let r = ratio(c.inter, c.gt);
    (p, r, harmonic(p, r))
}

/// Mean IoU, fraction of frames above 0.5, and the drop from the first to
/// the last quarter of the sequence.
pub fn j_statistics(ious: &[f64]) -> Result<(f64, f64, f64)> {
    if ious.is_empty() {
        return Err(Error::Invalid("no frames to summarise".into()));
    }
    let n = ious.len() as f64;
    let mean = ious.iter().sum::<f64>() / n;
    let recall = ious.iter().filter(|&&v| v > 0.5).count() as f64 / n;
    let decay = if ious.len() < 4 {
        0.0
    } else {
        // Four nearly equal consecutive bins, larger ones first.
        let (q, r) = (ious.len() / 4, ious.len() % 4);
        let first = &ious[..q + (r > 0) as usize];
        let last = &ious[ious.len() - q..];
        // Offset by a shared reference so equal bins cancel exactly.
        let base = ious[0];
        let avg = |s: &[f64]| s.iter().map(|v| v - base).sum::<f64>() / s.len() as f64;
        avg(first) - avg(last)
    };
    Ok((mean, recall, decay))
}

/// Foreground pixels with a background 4-neighbour or on the image border.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: usize, x: usize| mask[y * w + x];
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            at(y, x)
                && (y == 0
                    || x == 0
                    || y == h - 1
                    || x == w - 1
                    || !at(y - 1, x)
                    || !at(y + 1, x)
                    || !at(y, x - 1)
                    || !at(y, x + 1))
        })
        .collect()
}

/// Matched fraction of the `from` boundary: pixels with a `to` boundary
/// pixel within Euclidean distance `radius`.
fn matched(from: &[bool], to: &[bool], h: usize, w: usize, radius: usize) -> (usize, usize) {
    let r = radius.min(h.max(w)) as isize;
    let r2 = (radius as f64) * (radius as f64);
    let mut hit = 0;
    let mut total = 0;
    for i in 0..h * w {
        if !from[i] {
            continue;
        }
        total += 1;
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let found = (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (yy, xx) = (y + dy, x + dx);
                yy >= 0
                    && xx >= 0
                    && (yy as usize) < h
                    && (xx as usize) < w
                    && ((dy * dy + dx * dx) as f64) <= r2
                    && to[yy as usize * w + xx as usize]
            })
        });
        hit += found as usize;
    }
    (hit, total)
}

/// Contour F-measure with an explicit matching radius in pixels.
pub fn boundary_f_radius(pred: &Tensor, gt: &Tensor, radius: usize) -> Result<f64> {
    let (h, w, p, g) = pair(pred, gt)?;
    let (bp, bg) = (boundary(&p, h, w), boundary(&g, h, w));
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let (hp, _) = matched(&bp, &bg, h, w, radius);
    let (hg, _) = matched(&bg, &bp, h, w, radius);
    Ok(harmonic(ratio(hp, np), ratio(hg, ng)))
}

/// Matching radius for a tolerance given as a fraction of the diagonal.
pub fn tolerance_radius(h: usize, w: usize, tol_frac: f64) -> usize {
    (tol_frac * ((h * h + w * w) as f64).sqrt()).ceil() as usize
}

/// Contour F-measure; the matching radius is `ceil(tol_frac * diagonal)`.
pub fn boundary_f(pred: &Tensor, gt: &Tensor, tol_frac: f64) -> Result<f64> {
    let (h, w) = plane(gt)?;
    boundary_f_radius(pred, gt, tolerance_radius(h, w, tol_frac))
}

pub const DEFAULT_TOLERANCE: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub frame: usize,
    pub iou: f64,
    pub boundary_f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub name: String,
    pub frames: Vec<FrameScore>,
    pub j_mean: f64,
    pub j_recall: f64,
    pub j_decay: f64,
    pub f_mean: f64,
    /// Pixel counts pooled over all frames.
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// Scores a predicted sequence against its ground truth.
pub fn evaluate_sequence(
    name: &str,
    preds: &[Tensor],
    gts: &[Tensor],
    tol_frac: f64,
) -> Result<SequenceReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Invalid(format!(
            "{} predicted frames for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    let mut frames = Vec::with_capacity(preds.len());
    let mut pooled = Counts::default();
    for (t, (p, g)) in preds.iter().zip(gts).enumerate() {
        let c = counts(p, g)?;
        pooled.inter += c.inter;
        pooled.pred += c.pred;
        pooled.gt += c.gt;
        frames.push(FrameScore {
            frame: t,
            iou: iou(p, g)?,
            boundary_f: boundary_f(p, g, tol_frac)?,
        });
    }
    let ious: Vec<f64> = frames.iter().map(|f| f.iou).collect();
    let (j_mean, j_recall, j_decay) = j_statistics(&ious)?;
    let f_mean = frames.iter().map(|f| f.boundary_f).sum::<f64>() / frames.len() as f64;
    let (precision, recall, f_measure) = prf_counts(pooled);
    Ok(SequenceReport {
        name: name.to_string(),
        frames,
        j_mean,
        j_recall,
        j_decay,
        f_mean,
        precision,
        recall,
        f_measure,
    })
}

impl SequenceReport {
    fn summary(&self) -> [(&'static str, f64); 7] {
        [
            ("j_mean", self.j_mean),
            ("j_recall", self.j_recall),
            ("j_decay", self.j_decay),
            ("f_mean", self.f_mean),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f_measure", self.f_measure),
        ]
    }

    /// `key=value` lines: one summary line, then one per frame.
    pub fn to_records(&self) -> String {
        let mut out = format!("sequence={}", self.name);
        for (k, v) in self.summary() {
            let _ = write!(out, " {k}={v:.6}");
        }
        out.push('\n');
        for f in &self.frames {
            let _ = writeln!(
                out,
                "sequence={} frame={} iou={:.6} boundary_f={:.6}",
                self.name, f.frame, f.iou, f.boundary_f
            );
        }
        out
    }
}

/// Aligned summary table, one row per sequence plus the mean row.
pub fn report_table(reports: &[SequenceReport]) -> String {
    let header = ["sequence", "J mean", "J recall", "J decay", "F mean", "P", "R", "F"];
    let mut rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            std::iter::once(r.name.clone())
                .chain(r.summary().iter().map(|(_, v)| format!("{v:.3}")))
                .collect()
        })
        .collect();
    if reports.len() > 1 {
        let n = reports.len() as f64;
        let mut mean = vec!["mean".to_string()];
        for k in 0..7 {
            let v = reports.iter().map(|r| r.summary()[k].1).sum::<f64>() / n;
            mean.push(format!("{v:.3}"));
        }
        rows.push(mean);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
