//! Localization, counting and detection metrics.

mod detection;
mod matching;

pub use detection::{all_point_ap, detection_eval, iou, DetectionImage, DetectionResult};
pub use matching::{hungarian, match_min_distance, match_within_radius, MatchResult};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelgen::{Annotation, BoxAnn, Point};
use crate::par;
use crate::postprocess::ImagePredictions;

/// Per-unmatched-point penalty of the mean localization error, in pixels.
pub const MLE_PENALTY: f64 = 16.0;

/// Match radius of a ground-truth box: half its diagonal.
pub fn sigma_l(w: f64, h: f64) -> Result<f64> {
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::argument(format!("degenerate box {w}x{h}")));
    }
    Ok(w.hypot(h) / 2.0)
}

/// Precision, recall and F1. `degenerate` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let mut degenerate = false;
        let mut ratio = |num: usize, den: usize| {
            if den == 0 {
                degenerate = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Prf {
            precision,
            recall,
            f1: f1_of(precision, recall),
            degenerate: degenerate || precision + recall == 0.0,
        }
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Matched/unmatched totals summed over images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, m: &MatchResult) {
        self.tp += m.tp();
        self.fp += m.fp();
        self.fn_ += m.fn_();
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.fp, self.fn_)
    }
}

/// Micro-averaged precision/recall/F1 over per-image match results.
pub fn prf(results: &[MatchResult]) -> Prf {
    let mut c = Counts::default();
    results.iter().for_each(|m| c.add(m));
    c.prf()
}

/// Ground-truth radii for σ_l matching: from boxes when present, else the
/// fallback radius for every point.
pub fn gt_radii(ann: &Annotation, fallback: f64) -> Result<Vec<f64>> {
    match &ann.boxes {
        Some(b) => b.iter().map(|b| sigma_l(b.width(), b.height())).collect(),
        None => Ok(vec![fallback; ann.points.len()]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceApAr {
    pub ap: f64,
    pub ar: f64,
    pub f1: f64,
    /// Set when no prediction exists at all, so AP is reported as 0.
    pub ap_undefined: bool,
}

/// AP/AR averaged over integer distance thresholds 1..=100, pooling counts
/// over all `(pred, gt)` images at each threshold.
pub fn ap_ar_distance(images: &[(Vec<Point>, Vec<Point>)]) -> DistanceApAr {
    let mut sum_p = 0.0;
    let mut sum_r = 0.0;
    let mut undefined = false;
    for d in 1..=100 {
        let mut c = Counts::default();
        for (pred, gt) in images {
            let radii = vec![d as f64; gt.len()];
            c.add(&match_within_radius(pred, gt, &radii));
        }
        if c.tp + c.fp == 0 {
            undefined = true;
        } else {
            sum_p += c.tp as f64 / (c.tp + c.fp) as f64;
        }
        if c.tp + c.fn_ > 0 {
            sum_r += c.tp as f64 / (c.tp + c.fn_) as f64;
        }
    }
    let (ap, ar) = (sum_p / 100.0, sum_r / 100.0);
    DistanceApAr {
        ap,
        ar,
        f1: f1_of(ap, ar),
        ap_undefined: undefined,
    }
}

/// Numerator of the localization error for one image: matched distances
/// plus the penalty for each unmatched gt and unmatched prediction.
pub fn mle_numerator(pred: &[Point], gt: &[Point]) -> f64 {
    let m = match_min_distance(pred, gt);
    m.total_distance() + MLE_PENALTY * (m.fp() + m.fn_()) as f64
}

/// Mean localization error over a dataset, `None` without any gt point.
pub fn mle(images: &[(Vec<Point>, Vec<Point>)]) -> Option<f64> {
    let total_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return None;
    }
    let num: f64 = images.iter().map(|(p, g)| mle_numerator(p, g)).sum();
    Some(num / total_gt as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountingMetrics {
    pub mae: f64,
    /// Root of the mean squared count error.
    pub mse: f64,
    pub nae: Option<f64>,
    /// Images left out of NAE because their gt count is zero.
    pub nae_excluded: usize,
}

pub fn counting_metrics(pred: &[f64], gt: &[f64]) -> Result<CountingMetrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::argument("counting metrics need equally long, non-empty lists"));
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let mse = (pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt();
    let kept: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g != 0.0)
        .map(|(p, g)| (p - g).abs() / g)
        .collect();
    Ok(CountingMetrics {
        mae,
        mse,
        nae: (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64),
        nae_excluded: pred.len() - kept.len(),
    })
}

/// Head-area classes by decades: A0 = [1, 10] (smaller areas included),
/// A1 = (10, 100], ..., A4 = (1e4, 1e5], A5 = above 1e5.
pub const AREA_BINS: usize = 6;

pub fn area_bin(area: f64) -> usize {
    let mut upper = 10.0;
    for bin in 0..AREA_BINS - 1 {
        if area <= upper {
            return bin;
        }
        upper *= 10.0;
    }
    AREA_BINS - 1
}

/// Recall per area class; `None` for classes with no gt.
pub fn area_class_recall(results: &[(MatchResult, Vec<BoxAnn>)]) -> [Option<f64>; AREA_BINS] {
    let mut total = [0usize; AREA_BINS];
    let mut hit = [0usize; AREA_BINS];
    for (m, boxes) in results {
        let mut matched = vec![false; boxes.len()];
        for &(_, g, _) in &m.pairs {
            matched[g] = true;
        }
        for (b, ok) in boxes.iter().zip(matched) {
            let k = area_bin(b.area());
            total[k] += 1;
            hit[k] += ok as usize;
        }
    }
    std::array::from_fn(|k| (total[k] > 0).then(|| hit[k] as f64 / total[k] as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Match radius for gt points without boxes.
    pub default_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            default_radius: 8.0,
        }
    }
}

/// Every metric of a dataset evaluation plus the conventions used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub localization: Prf,
    pub counts: Counts,
    pub distance: DistanceApAr,
    pub mle: Option<f64>,
    pub counting: CountingMetrics,
    pub detection: Option<DetectionSummary>,
    pub area_recall: [Option<f64>; AREA_BINS],
    /// Mean `|sigma_pred - sigma_gt| / sigma_gt` over σ_l-matched heads
    /// whose gt has a box.
    pub size_error: Option<f64>,
    pub protocol: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub iou_threshold: f64,
    pub ap: f64,
    pub prf: Prf,
}

fn protocol_notes(cfg: &EvalConfig) -> BTreeMap<String, String> {
    [
        ("matching", "max-cardinality then min-total-distance one-to-one, dist <= sigma_l inclusive"),
        ("sigma_l", "sqrt(w^2+h^2)/2 of the gt box"),
        ("distance_thresholds", "1..=100 px, counts pooled over images"),
        ("mle", "min-distance matching; +16 px per unmatched gt and pred; divided by total gt"),
        ("nae", "images with gt count 0 excluded"),
        ("detection", "greedy by descending score, best unmatched IoU, all-point interpolated AP"),
        ("area_bins", "A0 [1,10] incl. <1, A1..A4 decades, A5 >1e5"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .chain([
        ("iou_threshold".to_string(), cfg.iou_threshold.to_string()),
        ("default_radius".to_string(), cfg.default_radius.to_string()),
    ])
    .collect()
}

/// Evaluates predictions against annotations, pairing them by image id.
/// Images are processed in parallel; reductions follow id order.
pub fn evaluate(preds: &[ImagePredictions], gts: &[Annotation], cfg: &EvalConfig) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::argument("no ground-truth images"));
    }
    let by_id: BTreeMap<&str, &ImagePredictions> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut gts: Vec<&Annotation> = gts.iter().collect();
    gts.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let pairs: Vec<(&Annotation, &ImagePredictions)> = gts
        .iter()
        .map(|a| {
            by_id
                .get(a.image_id.as_str())
                .map(|p| (*a, *p))
                .ok_or_else(|| Error::argument(format!("no prediction for image `{}`", a.image_id)))
        })
        .collect::<Result<_>>()?;

    let per_image = par::try_map(&pairs, |(a, p)| -> Result<_> {
        let radii = gt_radii(a, cfg.default_radius)?;
        let pts = p.point_list();
        Ok(match_within_radius(&pts, &a.points, &radii))
    })?;

    let mut counts = Counts::default();
    per_image.iter().for_each(|m| counts.add(m));
    let point_sets: Vec<(Vec<Point>, Vec<Point>)> =
        pairs.iter().map(|(a, p)| (p.point_list(), a.points.clone())).collect();
    let pred_counts: Vec<f64> = pairs.iter().map(|(_, p)| p.count as f64).collect();
    let gt_counts: Vec<f64> = pairs.iter().map(|(a, _)| a.count() as f64).collect();

    let has_boxes = pairs.iter().all(|(a, _)| a.boxes.is_some());
    let mut detection = None;
    let mut area_recall = [None; AREA_BINS];
    let mut size_error = None;
    if has_boxes {
        let det_images = pairs
            .iter()
            .map(|(a, p)| {
                Ok(DetectionImage {
                    detections: p.scored_boxes()?,
                    gt: a.boxes.clone().unwrap_or_default(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d = detection_eval(&det_images, cfg.iou_threshold);
        detection = Some(DetectionSummary {
            iou_threshold: cfg.iou_threshold,
            ap: d.ap,
            prf: d.prf,
        });
        let with_boxes: Vec<(MatchResult, Vec<BoxAnn>)> = per_image
            .iter()
            .zip(&pairs)
            .map(|(m, (a, _))| (m.clone(), a.boxes.clone().unwrap_or_default()))
            .collect();
        area_recall = area_class_recall(&with_boxes);
        size_error = relative_size_error(&per_image, &pairs)?;
    }

    Ok(EvalReport {
        images: pairs.len(),
        localization: counts.prf(),
        counts,
        distance: ap_ar_distance(&point_sets),
        mle: mle(&point_sets),
        counting: counting_metrics(&pred_counts, &gt_counts)?,
        detection,
        area_recall,
        size_error,
        protocol: protocol_notes(cfg),
    })
}

fn relative_size_error(per_image: &[MatchResult], pairs: &[(&Annotation, &ImagePredictions)]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (m, (a, p)) in per_image.iter().zip(pairs) {
        let gt_boxes = a.boxes.as_deref().unwrap_or_default();
        let boxes = p.scored_boxes()?;
        for &(pi, gi, _) in &m.pairs {
            let g = &gt_boxes[gi];
            let s_gt = sigma_l(g.width(), g.height())?;
            let b = &boxes[pi].0;
            let s_pred = b.width().hypot(b.height()) / 2.0;
            sum += (s_pred - s_gt).abs() / s_gt;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Two-column `metric,value` CSV.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("images".into(), self.images.to_string()),
            ("precision".into(), self.localization.precision.to_string()),
            ("recall".into(), self.localization.recall.to_string()),
            ("f1_m".into(), self.localization.f1.to_string()),
            ("prf_degenerate".into(), self.localization.degenerate.to_string()),
            ("tp".into(), self.counts.tp.to_string()),
            ("fp".into(), self.counts.fp.to_string()),
            ("fn".into(), self.counts.fn_.to_string()),
            ("ap_distance".into(), self.distance.ap.to_string()),
            ("ar_distance".into(), self.distance.ar.to_string()),
            ("f1_score_distance".into(), self.distance.f1.to_string()),
            ("mle".into(), opt(self.mle)),
            ("mae".into(), self.counting.mae.to_string()),
            ("mse".into(), self.counting.mse.to_string()),
            ("nae".into(), opt(self.counting.nae)),
            ("nae_excluded".into(), self.counting.nae_excluded.to_string()),
        ];
        if let Some(d) = &self.detection {
            rows.push(("det_iou".into(), d.iou_threshold.to_string()));
            rows.push(("det_ap".into(), d.ap.to_string()));
            rows.push(("det_precision".into(), d.prf.precision.to_string()));
            rows.push(("det_recall".into(), d.prf.recall.to_string()));
            rows.push(("det_f1".into(), d.prf.f1.to_string()));
        }
        for (k, r) in self.area_recall.iter().enumerate() {
            rows.push((format!("recall_a{k}"), opt(*r)));
        }
        rows.push(("size_error".into(), opt(self.size_error)));
        for (k, v) in &self.protocol {
            rows.push((format!("protocol_{k}"), format!("\"{v}\"")));
        }
        let mut s = String::from("metric,value\n");
        for (k, v) in rows {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }
}
