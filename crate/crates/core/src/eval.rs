//! Location-based detection evaluation: greedy matching, PR curves, AP50 and
//! F1-optimal thresholds.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BoxGeometry};
use crate::manifest::{Annotation, DatasetManifest};

/// When a predicted center counts as a hit on a ground-truth center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MatchMode {
    /// Distance to the ground truth at most `radius`.
    Circle { radius: f64 },
    /// IoU of side-`side` squares around both centers at least `alpha`.
    BoxIou { side: f64, alpha: f64 },
}

impl MatchMode {
    pub fn circle(radius: f64) -> Self {
        MatchMode::Circle { radius }
    }

    /// Box mode equivalent to a decision circle of radius `r`.
    pub fn box_for_radius(r: f64, alpha: f64) -> Result<Self> {
        let g = BoxGeometry::from_radius(r, alpha)?;
        Ok(MatchMode::BoxIou {
            side: g.side,
            alpha,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            MatchMode::Circle { radius } => radius > 0.0,
            MatchMode::BoxIou { side, alpha } => side > 0.0 && alpha > 0.0 && alpha < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid match mode {self:?}")))
        }
    }

    #[inline]
    pub fn accepts(&self, det: &Annotation, gt: &Annotation) -> bool {
        match *self {
            MatchMode::Circle { radius } => det.distance(gt) <= radius,
            MatchMode::BoxIou { side, alpha } => {
                iou_unchecked(side, det.cx - gt.cx, det.cy - gt.cy) >= alpha
            }
        }
    }
}

impl Default for MatchMode {
    fn default() -> Self {
        MatchMode::Circle { radius: 12.0 }
    }
}

/// One line of a matching: a true positive pairs both indices, a false
/// positive has no `gt`, a missed ground truth has no `det`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub det: Option<usize>,
    pub gt: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

fn confidence(a: &Annotation) -> f64 {
    a.confidence.unwrap_or(1.0)
}

/// Canonical processing order: confidence descending, then `(cy, cx)`
/// ascending, then input index.
pub fn canonical_order(dets: &[Annotation]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| compare_dets(&dets[i], &dets[j]).then(i.cmp(&j)));
    order
}

pub(crate) fn compare_dets(a: &Annotation, b: &Annotation) -> Ordering {
    confidence(b)
        .total_cmp(&confidence(a))
        .then(a.cy.total_cmp(&b.cy))
        .then(a.cx.total_cmp(&b.cx))
}

/// Greedy one-to-one matching. Records come out in processing order,
/// followed by unmatched ground truths in index order.
pub fn match_detections(dets: &[Annotation], gts: &[Annotation], mode: &MatchMode) -> Vec<MatchRecord> {
    let mut taken = vec![false; gts.len()];
    let mut records = Vec::with_capacity(dets.len() + gts.len());
    for di in canonical_order(dets) {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || !mode.accepts(d, g) {
                continue;
            }
            let dist = d.distance(g);
            if best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((gi, dist));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
        }
        records.push(MatchRecord {
            det: Some(di),
            gt: best.map(|(gi, _)| gi),
            confidence: Some(confidence(d)),
        });
    }
    for (gi, t) in taken.iter().enumerate() {
        if !t {
            records.push(MatchRecord {
                det: None,
                gt: Some(gi),
                confidence: None,
            });
        }
    }
    records
}

/// True positives, false positives and false negatives of a full matching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn from_records(records: &[MatchRecord]) -> Self {
        let mut c = MatchCounts::default();
        for r in records {
            match (r.det, r.gt) {
                (Some(_), Some(_)) => c.tp += 1,
                (Some(_), None) => c.fp += 1,
                (None, Some(_)) => c.fn_ += 1,
                (None, None) => {}
            }
        }
        c
    }

    pub fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scored match outcomes pooled over any number of images.
#[derive(Debug, Clone, Default)]
pub struct PooledCurve {
    /// (confidence, is_true_positive)
    scored: Vec<(f64, bool)>,
    n_gt: usize,
}

impl PooledCurve {
    /// Matches one image's detections and adds the outcomes.
    pub fn add(&mut self, dets: &[Annotation], gts: &[Annotation], mode: &MatchMode) {
        let records = match_detections(dets, gts, mode);
        self.push_image(dets, &records, gts.len());
    }

    fn push_image(&mut self, dets: &[Annotation], records: &[MatchRecord], n_gt: usize) {
        self.n_gt += n_gt;
        for r in records {
            if let Some(di) = r.det {
                self.scored.push((confidence(&dets[di]), r.gt.is_some()));
            }
        }
    }

    pub fn curve(mut self) -> Vec<PrPoint> {
        self.scored
            .sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        let mut out = Vec::new();
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < self.scored.len() {
            let t = self.scored[i].0;
            while i < self.scored.len() && self.scored[i].0 == t {
                if self.scored[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, self.n_gt);
            out.push(PrPoint {
                threshold: t,
                precision,
                recall,
                f1: f1_of(precision, recall),
            });
        }
        out
    }
}

/// Precision/recall/F1 at every distinct detection confidence, descending.
pub fn pr_curve(dets: &[Annotation], gts: &[Annotation], mode: &MatchMode) -> Vec<PrPoint> {
    let records = match_detections(dets, gts, mode);
    let mut pool = PooledCurve::default();
    pool.push_image(dets, &records, gts.len());
    pool.curve()
}

/// All-point interpolated average precision of a PR curve.
pub fn ap_from_curve(curve: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Suffix maximum of precision gives max precision at recall >= r_i.
    let mut envelope = vec![0.0; pts.len()];
    let mut best = 0.0f64;
    for i in (0..pts.len()).rev() {
        best = best.max(pts[i].1);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &(r, _)) in pts.iter().enumerate() {
        ap += (r - prev_r) * envelope[i];
        prev_r = r;
    }
    ap
}

pub fn ap50(dets: &[Annotation], gts: &[Annotation], mode: &MatchMode) -> f64 {
    ap_from_curve(&pr_curve(dets, gts, mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalF1 {
    pub threshold: f64,
    pub f1: f64,
}

/// Curve point with maximal F1; ties go to the higher threshold.
pub fn best_f1(curve: &[PrPoint]) -> Option<OptimalF1> {
    let mut best: Option<&PrPoint> = None;
    for p in curve {
        best = match best {
            None => Some(p),
            Some(b) if p.f1 > b.f1 || (p.f1 == b.f1 && p.threshold > b.threshold) => Some(p),
            keep => keep,
        };
    }
    best.map(|p| OptimalF1 {
        threshold: p.threshold,
        f1: p.f1,
    })
}

pub fn f1_optimal_threshold(
    dets: &[Annotation],
    gts: &[Annotation],
    mode: &MatchMode,
) -> Option<OptimalF1> {
    best_f1(&pr_curve(dets, gts, mode))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    pub image_path: String,
    pub records: Vec<MatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub pr_curve: Vec<PrPoint>,
    pub best_f1: f64,
    pub best_threshold: f64,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_det: usize,
    /// Nothing to evaluate (no ground truth and no detections); `ap50` is 0.
    pub empty: bool,
    pub mode: MatchMode,
    pub per_image: Vec<ImageMatches>,
}

/// Pooled evaluation of a prediction manifest against a ground-truth manifest
/// covering the same images.
pub fn evaluate_manifests(
    pred: &DatasetManifest,
    gt: &DatasetManifest,
    mode: &MatchMode,
) -> Result<EvalReport> {
    mode.validate()?;
    let gt_by_path: HashMap<&str, &[Annotation]> = gt
        .entries
        .iter()
        .map(|e| (e.image_path.as_str(), e.annotations.as_slice()))
        .collect();
    if pred.len() != gt.len()
        || pred
            .entries
            .iter()
            .any(|e| !gt_by_path.contains_key(e.image_path.as_str()))
    {
        return Err(Error::invalid(
            "prediction and ground-truth manifests cover different images",
        ));
    }

    let per_image: Vec<ImageMatches> = pred
        .entries
        .par_iter()
        .map(|e| ImageMatches {
            image_path: e.image_path.clone(),
            records: match_detections(&e.annotations, gt_by_path[e.image_path.as_str()], mode),
        })
        .collect();

    let mut pool = PooledCurve::default();
    let mut n_det = 0;
    for (e, m) in pred.entries.iter().zip(&per_image) {
        let gts = gt_by_path[e.image_path.as_str()];
        pool.push_image(&e.annotations, &m.records, gts.len());
        n_det += e.annotations.len();
    }
    let n_gt = pool.n_gt;
    let curve = pool.curve();
    let ap = ap_from_curve(&curve);
    let best = best_f1(&curve);
    Ok(EvalReport {
        ap50: ap,
        best_f1: best.map_or(0.0, |b| b.f1),
        best_threshold: best.map_or(0.0, |b| b.threshold),
        n_images: pred.len(),
        n_gt,
        n_det,
        empty: n_gt == 0 && n_det == 0,
        mode: *mode,
        pr_curve: curve,
        per_image,
    })
}

/// Renders a PR curve as a standalone SVG document.
pub fn pr_curve_svg(report: &EvalReport) -> String {
    const W: f64 = 400.0;
    const H: f64 = 400.0;
    const PAD: f64 = 40.0;
    let sx = |r: f64| PAD + r * (W - 2.0 * PAD);
    let sy = |p: f64| H - PAD - p * (H - 2.0 * PAD);
    let mut pts: Vec<(f64, f64)> = report
        .pr_curve
        .iter()
        .map(|p| (p.recall, p.precision))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let path: Vec<String> = pts
        .iter()
        .map(|(r, p)| format!("{:.2},{:.2}", sx(*r), sy(*p)))
        .collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<text x=\"{mid}\" y=\"{lx}\" text-anchor=\"middle\" font-size=\"12\">recall</text>\n",
            "<text x=\"12\" y=\"{mid}\" font-size=\"12\" transform=\"rotate(-90 12 {mid})\" text-anchor=\"middle\">precision</text>\n",
            "<text x=\"{mid}\" y=\"24\" text-anchor=\"middle\" font-size=\"13\">AP50 = {ap:.4}</text>\n",
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = W,
        h = H,
        pad = PAD,
        b = H - PAD,
        r = W - PAD,
        mid = W / 2.0,
        lx = H - 10.0,
        ap = report.ap50,
        pts = path.join(" "),
    )
}
