//! Ground-truth generation: independent instance maps (one disjoint blob per
//! annotated head) and the matching size maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned box given by its left-top and right-bottom corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxAnn {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxAnn {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxAnn { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }
}

impl From<[f64; 4]> for BoxAnn {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        BoxAnn { x1, y1, x2, y2 }
    }
}

impl From<BoxAnn> for [f64; 4] {
    fn from(b: BoxAnn) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Per-image point (and optionally box) annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "id")]
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BoxAnn>>,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width as f64, self.height as f64);
        if self.width == 0 || self.height == 0 {
            return Err(Error::argument(format!("{}: empty image dims", self.image_id)));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h) {
                return Err(Error::argument(format!(
                    "{}: point {i} ({}, {}) outside {}x{}",
                    self.image_id, p.x, p.y, self.width, self.height
                )));
            }
        }
        if let Some(boxes) = &self.boxes {
            if boxes.len() != self.points.len() {
                return Err(Error::argument(format!(
                    "{}: {} boxes for {} points",
                    self.image_id,
                    boxes.len(),
                    self.points.len()
                )));
            }
            for (i, (b, p)) in boxes.iter().zip(&self.points).enumerate() {
                if !(b.x2 > b.x1 && b.y2 > b.y1) {
                    return Err(Error::argument(format!("{}: box {i} is degenerate", self.image_id)));
                }
                if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                    return Err(Error::argument(format!("{}: box {i} outside image", self.image_id)));
                }
                if !b.contains(p) {
                    return Err(Error::argument(format!(
                        "{}: box {i} does not contain its point",
                        self.image_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskShape {
    #[default]
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelGenConfig {
    /// Upper bound on a blob's side length, in pixels.
    pub max_size: f64,
    /// Fraction of the nearest-neighbour distance used as blob size.
    pub ratio: f64,
    pub mask_shape: MaskShape,
}

impl Default for LabelGenConfig {
    fn default() -> Self {
        LabelGenConfig {
            max_size: 15.0,
            ratio: 0.25,
            mask_shape: MaskShape::Rectangle,
        }
    }
}

impl LabelGenConfig {
    /// Maximum blob size for the common crowd benchmarks.
    pub fn for_dataset(name: &str) -> Option<Self> {
        let c = match name.to_ascii_lowercase().as_str() {
            "shanghaitech" | "sha" | "shb" => 15.0,
            "ucf-qnrf" | "qnrf" | "nwpu" | "nwpu-crowd" | "fdst" => 30.0,
            "wider" | "wider-face" | "widerface" => 50.0,
            _ => return None,
        };
        Some(LabelGenConfig {
            max_size: c,
            ..Default::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_size > 0.0) {
            return Err(Error::argument("max_size must be positive"));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::argument("ratio must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Blob size (full width, full height) of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSize {
    pub w: f64,
    pub h: f64,
}

/// Distance from each point to its nearest other point; `+inf` when the
/// point has no neighbour.
pub fn nearest_neighbor_dist(points: &[Point]) -> Vec<f64> {
    let mut out = vec![f64::INFINITY; points.len()];
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i].dist(&points[j]);
            out[i] = out[i].min(d);
            out[j] = out[j].min(d);
        }
    }
    out
}

/// Square blob sizes `min(c, r * nn_dist)` from point annotations alone.
pub fn point_guide_sizes(points: &[Point], cfg: &LabelGenConfig) -> Vec<BlobSize> {
    nearest_neighbor_dist(points)
        .into_iter()
        .map(|d| {
            let s = cfg.max_size.min(cfg.ratio * d);
            BlobSize { w: s, h: s }
        })
        .collect()
}

/// Box-aware sizes: the dominant box side is clamped by the point-guide size
/// and the other side follows the box aspect ratio.
pub fn box_guide_sizes(points: &[Point], boxes: &[BoxAnn], cfg: &LabelGenConfig) -> Result<Vec<BlobSize>> {
    if boxes.len() != points.len() {
        return Err(Error::argument(format!(
            "{} boxes for {} points",
            boxes.len(),
            points.len()
        )));
    }
    let guide = point_guide_sizes(points, cfg);
    boxes
        .iter()
        .zip(guide)
        .enumerate()
        .map(|(i, (b, g))| {
            let (w, h) = (b.width(), b.height());
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::argument(format!("box {i} has zero width or height")));
            }
            Ok(box_guide_size(w, h, g))
        })
        .collect()
}

pub(crate) fn box_guide_size(w: f64, h: f64, guide: BlobSize) -> BlobSize {
    if w > h {
        let bw = guide.w.min(w);
        BlobSize { w: bw, h: bw * h / w }
    } else {
        let bh = guide.h.min(h);
        BlobSize { w: bh * w / h, h: bh }
    }
}

/// Half-diagonal of a box, used as the per-instance scale value.
pub fn half_diagonal(w: f64, h: f64) -> f64 {
    w.hypot(h) / 2.0
}

/// Inclusive pixel index range whose centres fall in `[center - half, center + half)`,
/// always containing the pixel under `center`.
fn pixel_span(center: f64, half: f64, limit: usize) -> (usize, usize) {
    let own = (center.floor().max(0.0) as usize).min(limit - 1);
    let lo = (center - half - 0.5).ceil().max(0.0) as usize;
    let hi = (center + half - 0.5).ceil() - 1.0;
    let hi = if hi < 0.0 { 0 } else { (hi as usize).min(limit - 1) };
    (lo.min(own), hi.max(own))
}

fn in_mask(p: &Point, size: BlobSize, shape: MaskShape, row: usize, col: usize) -> bool {
    let (cx, cy) = (col as f64 + 0.5, row as f64 + 0.5);
    if col == p.x.floor() as usize && row == p.y.floor() as usize {
        return true;
    }
    let (dx, dy) = (cx - p.x, cy - p.y);
    let (hw, hh) = (size.w / 2.0, size.h / 2.0);
    match shape {
        MaskShape::Rectangle => dx >= -hw && dx < hw && dy >= -hh && dy < hh,
        MaskShape::Ellipse => {
            hw > 0.0 && hh > 0.0 && (dx / hw).powi(2) + (dy / hh).powi(2) < 1.0
        }
    }
}

/// Pixel-to-instance ownership map: `Some(i)` where blob `i` covers the
/// pixel. Overlaps go to the nearest centre (ties to the lower index).
pub fn render_owners(ann: &Annotation, sizes: &[BlobSize], shape: MaskShape) -> Result<Vec<Option<usize>>> {
    if sizes.len() != ann.points.len() {
        return Err(Error::argument(format!(
            "{} sizes for {} points",
            sizes.len(),
            ann.points.len()
        )));
    }
    let (h, w) = (ann.height, ann.width);
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut best = vec![f64::INFINITY; h * w];
    for (i, (p, &s)) in ann.points.iter().zip(sizes).enumerate() {
        let (c0, c1) = pixel_span(p.x, s.w / 2.0, w);
        let (r0, r1) = pixel_span(p.y, s.h / 2.0, h);
        for r in r0..=r1 {
            for c in c0..=c1 {
                if !in_mask(p, s, shape, r, c) {
                    continue;
                }
                let d = (c as f64 + 0.5 - p.x).hypot(r as f64 + 0.5 - p.y);
                let k = r * w + c;
                if d < best[k] {
                    best[k] = d;
                    owner[k] = Some(i);
                }
            }
        }
    }
    Ok(owner)
}

/// Binary confidence ground truth: 1 inside each instance blob, 0 elsewhere.
pub fn render_confidence_gt(ann: &Annotation, sizes: &[BlobSize], shape: MaskShape) -> Result<Grid> {
    let owner = render_owners(ann, sizes, shape)?;
    let data = owner.iter().map(|o| if o.is_some() { 1.0 } else { 0.0 }).collect();
    Ok(Grid::from_raw(ann.height, ann.width, data))
}

/// Size ground truth: every foreground pixel of `confidence_gt` carries the
/// half-diagonal of the owning instance's box (or pseudo-box `sizes[i]` when
/// the annotation has no boxes). Where blobs overlap the nearest centre owns
/// the pixel.
pub fn render_size_gt(
    ann: &Annotation,
    sizes: &[BlobSize],
    shape: MaskShape,
    confidence_gt: &Grid,
) -> Result<Grid> {
    if confidence_gt.dims() != (ann.height, ann.width) {
        return Err(Error::shape("confidence map does not match annotation dims"));
    }
    let owner = render_owners(ann, sizes, shape)?;
    let sigma = instance_sigmas(ann, sizes);
    let data = owner
        .iter()
        .zip(confidence_gt.as_slice())
        .map(|(o, &c)| match o {
            Some(i) if c > 0.0 => sigma[*i],
            _ => 0.0,
        })
        .collect();
    Ok(Grid::from_raw(ann.height, ann.width, data))
}

fn instance_sigmas(ann: &Annotation, sizes: &[BlobSize]) -> Vec<f64> {
    match &ann.boxes {
        Some(boxes) => boxes.iter().map(|b| half_diagonal(b.width(), b.height())).collect(),
        None => sizes.iter().map(|s| half_diagonal(s.w, s.h)).collect(),
    }
}

/// Which sizing rule produced a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guide {
    Point,
    Box,
}

#[derive(Debug, Clone)]
pub struct Labels {
    pub confidence: Grid,
    pub size: Grid,
    pub sizes: Vec<BlobSize>,
    pub guide: Guide,
}

/// Full label generation for one annotation: box-guide sizes when boxes are
/// present, point-guide otherwise.
pub fn generate_labels(ann: &Annotation, cfg: &LabelGenConfig) -> Result<Labels> {
    cfg.validate()?;
    ann.validate()?;
    let (sizes, guide) = match &ann.boxes {
        Some(boxes) => (box_guide_sizes(&ann.points, boxes, cfg)?, Guide::Box),
        None => (point_guide_sizes(&ann.points, cfg), Guide::Point),
    };
    let owner = render_owners(ann, &sizes, cfg.mask_shape)?;
    let confidence = Grid::from_raw(
        ann.height,
        ann.width,
        owner.iter().map(|o| if o.is_some() { 1.0 } else { 0.0 }).collect(),
    );
    let sigma = instance_sigmas(ann, &sizes);
    let size = Grid::from_raw(
        ann.height,
        ann.width,
        owner.iter().map(|o| o.map_or(0.0, |i| sigma[i])).collect(),
    );
    Ok(Labels {
        confidence,
        size,
        sizes,
        guide,
    })
}
