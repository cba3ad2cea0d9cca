//! Box-level detection evaluation: greedy IoU matching in score order,
//! precision/recall curve and all-point interpolated AP.

use crate::labelgen::BoxAnn;

use super::Prf;

pub fn iou(a: &BoxAnn, b: &BoxAnn) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Scored detections and ground-truth boxes of one image.
#[derive(Debug, Clone, Default)]
pub struct DetectionImage {
    pub detections: Vec<(BoxAnn, f64)>,
    pub gt: Vec<BoxAnn>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// `(recall, precision)` after each detection in score order.
    pub curve: Vec<(f64, f64)>,
    pub ap: f64,
    /// Set when there is no ground truth, so AP is undefined and reported as 0.
    pub ap_undefined: bool,
    pub prf: Prf,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Area under the monotone precision envelope of a PR curve.
pub fn all_point_ap(curve: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (&(r, _), &p) in curve.iter().zip(&envelope) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

/// Evaluates detections pooled over all images. Detections are visited in
/// descending score order (ties by image, then detection index); each claims
/// the unmatched gt box of its image with the highest IoU, if that IoU is at
/// least `iou_threshold`.
pub fn detection_eval(images: &[DetectionImage], iou_threshold: f64) -> DetectionResult {
    let total_gt: usize = images.iter().map(|im| im.gt.len()).sum();
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.detections.len()).map(move |d| (i, d)))
        .collect();
    order.sort_by(|&(ia, da), &(ib, db)| {
        let (sa, sb) = (images[ia].detections[da].1, images[ib].detections[db].1);
        sb.total_cmp(&sa).then(ia.cmp(&ib)).then(da.cmp(&db))
    });

    let mut claimed: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gt.len()]).collect();
    let mut curve = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (k, &(i, d)) in order.iter().enumerate() {
        let b = &images[i].detections[d].0;
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in images[i].gt.iter().enumerate() {
            if claimed[i][g] {
                continue;
            }
            let v = iou(b, gb);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            claimed[i][g] = true;
            tp += 1;
        }
        let recall = if total_gt > 0 { tp as f64 / total_gt as f64 } else { 0.0 };
        curve.push((recall, tp as f64 / (k + 1) as f64));
    }
    let fp = order.len() - tp;
    let fn_ = total_gt - tp;
    DetectionResult {
        ap: if total_gt > 0 { all_point_ap(&curve) } else { 0.0 },
        ap_undefined: total_gt == 0,
        curve,
        prf: Prf::from_counts(tp, fp, fn_),
        tp,
        fp,
        fn_,
    }
}
