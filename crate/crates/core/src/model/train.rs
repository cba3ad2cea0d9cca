//! Augmentation, batched gradients and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binarize::{binarize, clip_act, clip_act_grad};
use crate::error::{Error, Result};
use crate::grid::{resize_bilinear, Grid, Tensor3};
use crate::labelgen::{generate_labels, Annotation, BoxAnn, LabelGenConfig, Point};
use crate::loss::{self, LossConfig, LossReport};
use crate::par;

use super::network::{Network, OutputGrads};
use super::params::{Grads, ParamStore};
use super::TrainConfig;

/// An image with its annotation, before label generation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor3,
    pub annotation: Annotation,
}

/// A training crop with its dense targets.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image: Tensor3,
    pub confidence: Grid,
    pub size: Grid,
}

fn transform_annotation(ann: &Annotation, width: usize, height: usize, flip: bool) -> Annotation {
    let sx = width as f64 / ann.width as f64;
    let sy = height as f64 / ann.height as f64;
    let (w, h) = (width as f64, height as f64);
    // keep points strictly inside the image after flipping x = 0 onto x = w
    let inside = |v: f64, hi: f64| v.min(hi - 1e-9).max(0.0);
    let points = ann
        .points
        .iter()
        .map(|p| {
            let x = p.x * sx;
            let x = if flip { w - x } else { x };
            Point::new(inside(x, w), inside(p.y * sy, h))
        })
        .collect();
    let boxes = ann.boxes.as_ref().map(|bs| {
        bs.iter()
            .map(|b| {
                let (x1, x2) = (b.x1 * sx, b.x2 * sx);
                let (x1, x2) = if flip { (w - x2, w - x1) } else { (x1, x2) };
                BoxAnn::new(x1.max(0.0), (b.y1 * sy).max(0.0), x2.min(w), (b.y2 * sy).min(h))
            })
            .collect()
    });
    Annotation {
        image_id: ann.image_id.clone(),
        width,
        height,
        points,
        boxes,
    }
}

/// Mean of the outermost ring of pixels, used to fill canvases around
/// undersized images.
fn border_mean(g: &Grid) -> f64 {
    let (h, w) = g.dims();
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                sum += g.get(r, c);
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn place_on_canvas(g: &Grid, height: usize, width: usize, fill: f64) -> Grid {
    Grid::from_fn(height, width, |r, c| {
        if r < g.height() && c < g.width() {
            g.get(r, c)
        } else {
            fill
        }
    })
}

/// Random flip, rescale and crop. Labels are regenerated on the transformed
/// full image, then cropped together with it.
pub fn augment(sample: &Sample, labels: &LabelGenConfig, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainExample> {
    let (h0, w0) = (sample.image.height, sample.image.width);
    let s = if cfg.scale_aug {
        rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1)
    } else {
        1.0
    };
    let flip = cfg.flip && rng.gen_bool(0.5);
    let h = ((h0 as f64 * s).round() as usize).max(1);
    let w = ((w0 as f64 * s).round() as usize).max(1);

    let mut channels = Vec::with_capacity(sample.image.channels);
    for c in 0..sample.image.channels {
        let plane = sample.image.to_grid(c);
        let plane = if (h, w) == (h0, w0) { plane } else { resize_bilinear(&plane, h, w) };
        channels.push(if flip { plane.flip_horizontal() } else { plane });
    }
    let ann = transform_annotation(&sample.annotation, w, h, flip);
    let l = generate_labels(&ann, labels)?;

    let crop = cfg.crop;
    let (ch, cw) = (h.max(crop), w.max(crop));
    let top = rng.gen_range(0..=ch - crop);
    let left = rng.gen_range(0..=cw - crop);
    let cut = |g: &Grid, fill: f64| place_on_canvas(g, ch, cw, fill).crop(top, left, crop, crop);
    let planes: Vec<Grid> = channels.iter().map(|g| cut(g, border_mean(g))).collect();
    Ok(TrainExample {
        image: Tensor3::from_grids(&planes)?,
        confidence: cut(&l.confidence, 0.0),
        size: cut(&l.size, 0.0),
    })
}

/// Per-image losses and parameter gradients, each already divided by the
/// batch size.
fn sample_gradients(
    net: &Network,
    p: &ParamStore,
    ex: &TrainExample,
    cfg: &LossConfig,
    batch: usize,
    size_into_extractor: bool,
) -> Result<(LossReport, Grads)> {
    let (out, cache) = net.forward(&ex.image, p)?;
    let pred = std::slice::from_ref(&out.confidence);
    let target = std::slice::from_ref(&ex.confidence);
    let threshold = out.raw_threshold.map(clip_act);
    let binary = [binarize(&out.confidence, &threshold)?];

    let con = loss::l_con(pred, target)?;
    let thr = loss::l_thr(&binary, target)?;
    let ousr = loss::l_ousr(&binary, target, cfg.eps)?;
    let size = loss::l_size(std::slice::from_ref(&out.size), std::slice::from_ref(&ex.size), cfg.size_foreground_only)?;
    let report = loss::total_loss(con.value, thr.value, ousr.value, size.value, cfg);

    let n = batch as f64;
    let (h, w) = out.confidence.dims();
    // straight-through: L_thr reaches the threshold as -dL/dB, OUSR reaches
    // the confidence map as +dL/dB
    let d_conf = Grid::from_fn(h, w, |r, c| {
        (con.grads[0].get(r, c) + cfg.lambda * ousr.grads[0].get(r, c)) / n
    });
    let d_raw = Grid::from_fn(h, w, |r, c| {
        -thr.grads[0].get(r, c) * clip_act_grad(out.raw_threshold.get(r, c)) / n
    });
    let d_size = size.grads[0].map(|g| g / n);
    let grads = net.backward_routed(
        cache,
        &OutputGrads {
            confidence: d_conf,
            raw_threshold: d_raw,
            size: d_size,
        },
        p,
        size_into_extractor,
    )?;
    Ok((report, grads))
}

/// Batch-mean losses and summed gradients. Samples are processed in
/// parallel and reduced in input order, so the result does not depend on
/// thread scheduling.
pub fn batch_gradients(
    net: &Network,
    p: &ParamStore,
    batch: &[TrainExample],
    cfg: &LossConfig,
    size_into_extractor: bool,
) -> Result<(LossReport, Grads)> {
    if batch.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let parts = par::try_map(batch, |ex| sample_gradients(net, p, ex, cfg, batch.len(), size_into_extractor))?;
    let mut grads = p.new_grads();
    let mut report = LossReport::default();
    let n = batch.len() as f64;
    for (r, g) in &parts {
        grads.accumulate(g);
        report.l_con += r.l_con / n;
        report.l_thr += r.l_thr / n;
        report.l_ousr += r.l_ousr / n;
        report.l_size += r.l_size / n;
        report.total += r.total / n;
    }
    Ok((report, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub losses: LossReport,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRow {
    pub iteration: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub validation: Vec<ValidationRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# losses: {}\niteration,l_con,l_thr,l_ousr,l_size,total,lr\n", loss::REDUCTION);
        for r in &self.rows {
            let l = &r.losses;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.iteration, l.l_con, l.l_thr, l.l_ousr, l.l_size, l.total, r.lr
            );
        }
        s
    }

    pub fn validation_csv(&self) -> String {
        let mut s = String::from("iteration,score\n");
        for v in &self.validation {
            let _ = writeln!(s, "{},{}", v.iteration, v.score);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation score.
    pub best: ParamStore,
    pub best_iteration: usize,
    pub best_score: f64,
    /// Parameters after the final iteration.
    pub last: ParamStore,
    pub log: TrainingLog,
}

/// Trains `init` on `data`, scoring with `validate` (higher is better) every
/// `eval_every` iterations and after the last one. Ties go to the later
/// checkpoint.
pub fn train(
    net: &Network,
    init: ParamStore,
    data: &[Sample],
    labels: &LabelGenConfig,
    cfg: &TrainConfig,
    validate: &dyn Fn(&ParamStore) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::argument("training set is empty"));
    }
    let loss_cfg = cfg.loss_config();
    loss_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order: Vec<usize> = Vec::new();

    for it in 0..cfg.iterations {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        while picks.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            picks.push((order.pop().expect("refilled"), rng.gen::<u64>()));
        }
        let batch = par::try_map(&picks, |&(i, seed)| {
            augment(&data[i], labels, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
        })?;

        let (report, grads) = batch_gradients(net, &params, &batch, &loss_cfg, cfg.size_into_extractor)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                last_good: Box::new(params),
            });
        }
        params.zero_grads();
        params.set_grads(&grads);
        if let Err(e) = params.adam_step_grouped(|g| cfg.lr_at(g, it), &cfg.adam) {
            log::error!("iteration {it}: {e}");
            return Err(Error::Diverged {
                iteration: it,
                last_good: Box::new(params),
            });
        }
        log.rows.push(LogRow {
            iteration: it + 1,
            losses: report,
            lr: cfg.lr_at(super::ParamGroup::Extractor, it),
        });

        let done = it + 1;
        if (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.iterations {
            let score = validate(&params)?;
            log::info!("iteration {done}: loss {:.5}, validation {score:.4}", report.total);
            log.validation.push(ValidationRow { iteration: done, score });
            if best.as_ref().map_or(true, |(s, _, _)| score >= *s) {
                best = Some((score, done, params.clone()));
            }
        }
    }

    let (best_score, best_iteration, best) = best.unwrap_or((f64::NAN, 0, params.clone()));
    Ok(TrainOutcome {
        best,
        best_iteration,
        best_score,
        last: params,
        log,
    })
}
