//! PPM overlays of predictions against ground truth.

use crate::error::Result;
use crate::grid::Tensor3;
use crate::labelgen::{Annotation, BoxAnn, Point};
use crate::metrics::gt_radii;
use crate::metrics::match_within_radius;
use crate::pnm::encode_ppm;
use crate::postprocess::ImagePredictions;

const GREEN: [u8; 3] = [0, 220, 0];
const MAGENTA: [u8; 3] = [230, 0, 230];
const RED: [u8; 3] = [230, 0, 0];

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<[u8; 3]>,
}

impl Canvas {
    fn from_image(image: &Tensor3) -> Canvas {
        let n = image.plane_len();
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let rgb = (0..n)
            .map(|i| {
                if image.channels >= 3 {
                    [q(image.channel(0)[i]), q(image.channel(1)[i]), q(image.channel(2)[i])]
                } else {
                    let g = q(image.channel(0)[i]);
                    [g, g, g]
                }
            })
            .collect();
        Canvas {
            width: image.width,
            height: image.height,
            rgb,
        }
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.rgb[y as usize * self.width + x as usize] = color;
        }
    }

    fn rect(&mut self, b: &BoxAnn, color: [u8; 3]) {
        let (x1, y1) = (b.x1.floor() as i64, b.y1.floor() as i64);
        let (x2, y2) = ((b.x2.ceil() as i64 - 1).max(x1), (b.y2.ceil() as i64 - 1).max(y1));
        for x in x1..=x2 {
            self.put(x, y1, color);
            self.put(x, y2, color);
        }
        for y in y1..=y2 {
            self.put(x1, y, color);
            self.put(x2, y, color);
        }
    }

    fn cross(&mut self, p: &Point, color: [u8; 3]) {
        let (x, y) = (p.x.floor() as i64, p.y.floor() as i64);
        for d in -1..=1 {
            self.put(x + d, y, color);
            self.put(x, y + d, color);
        }
    }
}

/// Draws matched predictions green, unmatched predictions magenta and
/// missed ground truth red. Boxes are drawn when available, else crosses.
pub fn render_overlay(image: &Tensor3, gt: &Annotation, pred: &ImagePredictions, radius: f64) -> Result<Vec<u8>> {
    let mut canvas = Canvas::from_image(image);
    let points = pred.point_list();
    let boxes = pred.scored_boxes()?;
    let m = match_within_radius(&points, &gt.points, &gt_radii(gt, radius)?);
    let mut draw_pred = |i: usize, color| match boxes.get(i) {
        Some((b, _)) => canvas.rect(b, color),
        None => canvas.cross(&points[i], color),
    };
    for &(i, _, _) in &m.pairs {
        draw_pred(i, GREEN);
    }
    for &i in &m.unmatched_pred {
        draw_pred(i, MAGENTA);
    }
    for &j in &m.unmatched_gt {
        match gt.boxes.as_ref().and_then(|b| b.get(j)) {
            Some(b) => canvas.rect(b, RED),
            None => canvas.cross(&gt.points[j], RED),
        }
    }
    Ok(encode_ppm(canvas.width, canvas.height, &canvas.rgb))
}
