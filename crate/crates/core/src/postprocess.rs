//! From binary, confidence and size maps to points, counts and scored boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::labelgen::{BoxAnn, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterMode {
    /// Mean of the component's pixel centres.
    #[default]
    Centroid,
    /// Centre of the tight bounding box.
    BoxCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Confidence at the pixel nearest the blob centre.
    #[default]
    Center,
    /// Mean confidence over the component.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub connectivity: Connectivity,
    pub center: CenterMode,
    pub score: ScoreMode,
}

/// One connected foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    /// Centre in pixel coordinates (pixel `(r, c)` spans `[c, c+1) x [r, r+1)`).
    pub x: f64,
    pub y: f64,
    /// Tight extent in pixels, at least 1.
    pub width: f64,
    pub height: f64,
    pub pixel_count: usize,
    /// Tight bounding box `(x1, y1, x2, y2)` in pixel-edge coordinates.
    pub bounds: (f64, f64, f64, f64),
    /// Row-major pixel indices of the component.
    pub pixels: Vec<usize>,
}

impl Blob {
    pub fn center(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// Pixel `(row, col)` nearest the centre.
    pub fn center_pixel(&self, height: usize, width: usize) -> (usize, usize) {
        let r = (self.y.floor().max(0.0) as usize).min(height - 1);
        let c = (self.x.floor().max(0.0) as usize).min(width - 1);
        (r, c)
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // the smaller index stays root so labels follow first-pixel order
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Per-pixel component labels (`None` for background), numbered in
/// row-major order of each component's first pixel.
pub fn label_components(binary: &Grid, connectivity: Connectivity) -> (Vec<Option<usize>>, usize) {
    let (h, w) = binary.dims();
    let fg = |i: usize| binary.as_slice()[i] > 0.5;
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !fg(i) {
                continue;
            }
            if c > 0 && fg(i - 1) {
                union(&mut parent, i, i - 1);
            }
            if r > 0 {
                if fg(i - w) {
                    union(&mut parent, i, i - w);
                }
                if connectivity == Connectivity::Eight {
                    if c > 0 && fg(i - w - 1) {
                        union(&mut parent, i, i - w - 1);
                    }
                    if c + 1 < w && fg(i - w + 1) {
                        union(&mut parent, i, i - w + 1);
                    }
                }
            }
        }
    }
    let mut id_of_root = vec![usize::MAX; h * w];
    let mut labels = vec![None; h * w];
    let mut n = 0;
    for i in 0..h * w {
        if fg(i) {
            let root = find(&mut parent, i);
            if id_of_root[root] == usize::MAX {
                id_of_root[root] = n;
                n += 1;
            }
            labels[i] = Some(id_of_root[root]);
        }
    }
    (labels, n)
}

/// Connected components of the foreground (`> 0.5`) of `binary`.
pub fn connected_components(binary: &Grid, connectivity: Connectivity) -> Vec<Blob> {
    connected_components_with(binary, connectivity, CenterMode::Centroid)
}

pub fn connected_components_with(binary: &Grid, connectivity: Connectivity, center: CenterMode) -> Vec<Blob> {
    let w = binary.width();
    let (labels, n) = label_components(binary, connectivity);
    let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            pixels[*l].push(i);
        }
    }
    pixels
        .into_iter()
        .map(|px| {
            let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
            let (mut sx, mut sy) = (0.0, 0.0);
            for &i in &px {
                let (r, c) = (i / w, i % w);
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
                sx += c as f64 + 0.5;
                sy += r as f64 + 0.5;
            }
            let k = px.len() as f64;
            let bounds = (c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64);
            let (x, y) = match center {
                CenterMode::Centroid => (sx / k, sy / k),
                CenterMode::BoxCenter => ((bounds.0 + bounds.2) / 2.0, (bounds.1 + bounds.3) / 2.0),
            };
            Blob {
                x,
                y,
                width: (c1 - c0 + 1) as f64,
                height: (r1 - r0 + 1) as f64,
                pixel_count: px.len(),
                bounds,
                pixels: px,
            }
        })
        .collect()
}

/// A decoded box with its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoxAnn,
    pub score: f64,
    /// Set when the predicted size was non-positive and the blob's own
    /// extent was used instead.
    pub fallback: bool,
}

/// Half-extents `(w, h)` of the decoded box: the predicted half-diagonal at
/// the blob centre, split along the blob's own aspect ratio. The flag is set
/// when the prediction is not positive and the blob extent is used.
pub fn decode_half_extents(blob: &Blob, size: &Grid) -> (f64, f64, bool) {
    let (r, c) = blob.center_pixel(size.height(), size.width());
    let sigma = size.get(r, c);
    if sigma.is_finite() && sigma > 0.0 {
        let diag = blob.width.hypot(blob.height);
        (sigma * blob.width / diag, sigma * blob.height / diag, false)
    } else {
        (blob.width / 2.0, blob.height / 2.0, true)
    }
}

pub fn decode_box(blob: &Blob, size: &Grid) -> (BoxAnn, bool) {
    let (hw, hh, fallback) = decode_half_extents(blob, size);
    let (w, h) = (size.width() as f64, size.height() as f64);
    let bbox = BoxAnn::new(
        (blob.x - hw).max(0.0),
        (blob.y - hh).max(0.0),
        (blob.x + hw).min(w),
        (blob.y + hh).min(h),
    );
    (bbox, fallback)
}

pub fn score(blob: &Blob, confidence: &Grid, mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::Center => {
            let (r, c) = blob.center_pixel(confidence.height(), confidence.width());
            confidence.get(r, c)
        }
        ScoreMode::Mean => {
            let s: f64 = blob.pixels.iter().map(|&i| confidence.as_slice()[i]).sum();
            s / blob.pixel_count as f64
        }
    }
}

/// Blob centres and their count.
pub fn localize(binary: &Grid, connectivity: Connectivity) -> (Vec<Point>, usize) {
    let points: Vec<Point> = connected_components(binary, connectivity).iter().map(Blob::center).collect();
    let n = points.len();
    (points, n)
}

/// Everything predicted for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub points: Vec<Point>,
    pub detections: Vec<Detection>,
}

impl Prediction {
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

pub fn predict(binary: &Grid, confidence: &Grid, size: &Grid, cfg: &PostprocessConfig) -> Result<Prediction> {
    binary.check_same_dims(confidence, "predict")?;
    binary.check_same_dims(size, "predict")?;
    let blobs = connected_components_with(binary, cfg.connectivity, cfg.center);
    let mut points = Vec::with_capacity(blobs.len());
    let mut detections = Vec::with_capacity(blobs.len());
    for b in &blobs {
        let (bbox, fallback) = decode_box(b, size);
        points.push(b.center());
        detections.push(Detection {
            bbox,
            score: score(b, confidence, cfg.score),
            fallback,
        });
    }
    Ok(Prediction { points, detections })
}

/// One image in a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub id: String,
    pub points: Vec<[f64; 2]>,
    pub boxes: Vec<[f64; 5]>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub images: Vec<ImagePredictions>,
}

impl ImagePredictions {
    pub fn from_prediction(id: &str, p: &Prediction) -> Self {
        ImagePredictions {
            id: id.to_string(),
            points: p.points.iter().map(|q| [q.x, q.y]).collect(),
            boxes: p
                .detections
                .iter()
                .map(|d| [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score])
                .collect(),
            count: p.count(),
        }
    }

    pub fn point_list(&self) -> Vec<Point> {
        self.points.iter().map(|&[x, y]| Point::new(x, y)).collect()
    }

    /// Boxes with scores, checked for positive extent.
    pub fn scored_boxes(&self) -> Result<Vec<(BoxAnn, f64)>> {
        self.boxes
            .iter()
            .map(|&[x1, y1, x2, y2, s]| {
                if x2 > x1 && y2 > y1 {
                    Ok((BoxAnn::new(x1, y1, x2, y2), s))
                } else {
                    Err(Error::argument(format!("{}: degenerate predicted box", self.id)))
                }
            })
            .collect()
    }
}
