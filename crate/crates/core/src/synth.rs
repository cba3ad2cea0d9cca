//! Seeded synthetic crowd scenes: shaded discs on a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::labelgen::{Annotation, BoxAnn, Point};
use crate::dataset::{write_json, Dataset, Splits};
use crate::labelgen::{generate_labels, LabelGenConfig};
use crate::par;
use std::path::Path;

const SUPERSAMPLE: usize = 4;
const MAX_ATTEMPTS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive head-count range.
    pub count: (usize, usize),
    /// Head radius range in pixels.
    pub radius: (f64, f64),
    /// Range of the minimum head-over-background intensity step.
    pub contrast: (f64, f64),
    pub background: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Probability that a head is drawn at reduced contrast.
    pub low_contrast_fraction: f64,
    pub low_contrast_factor: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            count: (5, 15),
            radius: (2.0, 6.0),
            contrast: (0.3, 0.5),
            background: 0.2,
            noise: 0.03,
            low_contrast_fraction: 0.0,
            low_contrast_factor: 0.5,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Half of the heads at half contrast.
    pub fn two_contrast() -> Self {
        SceneConfig {
            low_contrast_fraction: 0.5,
            ..SceneConfig::default()
        }
    }

    /// Background and noise only.
    pub fn empty() -> Self {
        SceneConfig {
            count: (0, 0),
            ..SceneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::argument(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if self.count.0 > self.count.1 {
            return bad("head-count range is empty");
        }
        if !(self.radius.0 >= 1.0 && self.radius.0 <= self.radius.1) {
            return bad("radius range must satisfy 1 <= lo <= hi");
        }
        if !(self.contrast.0 >= 0.0 && self.contrast.0 <= self.contrast.1) {
            return bad("contrast range must satisfy 0 <= lo <= hi");
        }
        if !(0.0..=1.0).contains(&self.low_contrast_fraction) {
            return bad("low-contrast fraction must lie in [0, 1]");
        }
        if !(self.noise >= 0.0) || !(self.low_contrast_factor > 0.0) {
            return bad("noise must be >= 0 and the low-contrast factor > 0");
        }
        if 2.0 * self.radius.1 + 1.0 > self.width.min(self.height) as f64 {
            return bad("largest head does not fit in the image");
        }
        Ok(())
    }
}

/// One placed head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Head {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub contrast: f64,
    pub low_contrast: bool,
}

/// Head intensity above background at normalized radius `t` in `[0, 1]`:
/// the full step at the rim, rising by half towards the centre.
fn shading(contrast: f64, t2: f64) -> f64 {
    contrast * (1.0 + 0.5 * (1.0 - t2))
}

fn place_heads(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Head>> {
    let n = rng.gen_range(cfg.count.0..=cfg.count.1);
    let min_dist = 2.0 * cfg.radius.1;
    let mut heads: Vec<Head> = Vec::with_capacity(n);
    let mut attempts = 0;
    while heads.len() < n {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Placement {
                requested: n,
                attempts: MAX_ATTEMPTS,
            });
        }
        let r = rng.gen_range(cfg.radius.0..=cfg.radius.1);
        let x = rng.gen_range(r + 0.5..=cfg.width as f64 - r - 0.5);
        let y = rng.gen_range(r + 0.5..=cfg.height as f64 - r - 0.5);
        if heads.iter().any(|h| (h.x - x).hypot(h.y - y) < min_dist) {
            continue;
        }
        let low = cfg.low_contrast_fraction > 0.0 && rng.gen_bool(cfg.low_contrast_fraction);
        let mut contrast = rng.gen_range(cfg.contrast.0..=cfg.contrast.1);
        if low {
            contrast *= cfg.low_contrast_factor;
        }
        heads.push(Head {
            x,
            y,
            radius: r,
            contrast,
            low_contrast: low,
        });
    }
    Ok(heads)
}

/// Draws heads with 4x4 supersampled coverage onto a constant background.
pub fn render_heads(width: usize, height: usize, background: f64, heads: &[Head]) -> Grid {
    let mut g = Grid::filled(height, width, background);
    let step = 1.0 / SUPERSAMPLE as f64;
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for h in heads {
        let r2 = h.radius * h.radius;
        let c0 = (h.x - h.radius).floor().max(0.0) as usize;
        let c1 = ((h.x + h.radius).ceil() as usize).min(width);
        let r0 = (h.y - h.radius).floor().max(0.0) as usize;
        let r1 = ((h.y + h.radius).ceil() as usize).min(height);
        for row in r0..r1 {
            for col in c0..c1 {
                let mut acc = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = col as f64 + (sx as f64 + 0.5) * step;
                        let py = row as f64 + (sy as f64 + 0.5) * step;
                        let d2 = (px - h.x).powi(2) + (py - h.y).powi(2);
                        if d2 <= r2 {
                            acc += shading(h.contrast, d2 / r2);
                        }
                    }
                }
                let v = g.get(row, col) + acc * norm;
                g.set(row, col, v);
            }
        }
    }
    g
}

/// One rendered scene with the heads it was drawn from.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Grid,
    pub annotation: Annotation,
    pub heads: Vec<Head>,
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:05}")
}

/// Generates scene `index` of the sequence defined by `cfg.seed`.
pub fn gen_scene(cfg: &SceneConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index as u64);
    let heads = place_heads(cfg, &mut rng)?;
    let mut image = render_heads(cfg.width, cfg.height, cfg.background, &heads);
    if cfg.noise > 0.0 {
        let noise = Normal::new(0.0, cfg.noise).expect("valid std");
        for v in image.as_mut_slice() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let annotation = Annotation {
        image_id: image_id(index),
        width: cfg.width,
        height: cfg.height,
        points: heads.iter().map(|h| Point::new(h.x, h.y)).collect(),
        boxes: Some(
            heads
                .iter()
                .map(|h| BoxAnn::new(h.x - h.radius, h.y - h.radius, h.x + h.radius, h.y + h.radius))
                .collect(),
        ),
    };
    Ok(Scene {
        image,
        annotation,
        heads,
    })
}

/// Scenes `0..n`, generated in parallel; the output does not depend on the
/// number of workers.
pub fn gen_scenes(cfg: &SceneConfig, n: usize) -> Result<Vec<Scene>> {
    let idx: Vec<usize> = (0..n).collect();
    par::try_map(&idx, |&i| gen_scene(cfg, i))
}

/// `(train, val, test)` sizes: val and test are rounded fractions, train
/// takes the rest.
pub fn split_sizes(n: usize, val: f64, test: f64) -> Result<(usize, usize, usize)> {
    if !(val >= 0.0 && test >= 0.0 && val + test < 1.0) {
        return Err(Error::argument("split fractions must be >= 0 and sum below 1"));
    }
    let nv = (n as f64 * val).round() as usize;
    let nt = (n as f64 * test).round() as usize;
    Ok((n - nv - nt, nv, nt))
}


/// Sizes of the dataset splits written by [`gen_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Writes `n` scenes as `train/`, `val/` and `test/` dataset directories
/// under `root`, with generated labels and a `splits.json` index. Scenes are
/// assigned to splits in index order.
pub fn gen_dataset(
    cfg: &SceneConfig,
    n: usize,
    val: f64,
    test: f64,
    labels: &LabelGenConfig,
    root: &Path,
) -> Result<SplitSizes> {
    if n < 10 {
        return Err(Error::argument(format!("need at least 10 images, got {n}")));
    }
    let (nt, nv, ns) = split_sizes(n, val, test)?;
    let scenes = gen_scenes(cfg, n)?;
    let mut splits = Splits::default();
    let ranges = [("train", 0..nt), ("val", nt..nt + nv), ("test", nt + nv..n)];
    for (name, range) in ranges {
        let items: Vec<_> = scenes[range].iter().map(|s| (s.image.clone(), s.annotation.clone())).collect();
        let ds = Dataset::create(&root.join(name), &items)?;
        let rendered = par::try_map(&items, |(_, a)| generate_labels(a, labels))?;
        for ((_, a), l) in items.iter().zip(&rendered) {
            ds.write_labels(&a.image_id, &l.confidence, &l.size)?;
        }
        let ids = items.iter().map(|(_, a)| a.image_id.clone()).collect();
        match name {
            "train" => splits.train = ids,
            "val" => splits.val = ids,
            _ => splits.test = ids,
        }
    }
    write_json(&root.join("splits.json"), &splits)?;
    Ok(SplitSizes {
        train: nt,
        val: nv,
        test: ns,
    })
}
