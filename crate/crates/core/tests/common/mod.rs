//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use ldc_core::binarize::{binarize, clip_act_grad};
use ldc_core::grid::{Grid, Tensor3};
use ldc_core::labelgen::{BoxAnn, Point};
use ldc_core::loss::{l_con, l_ousr, l_size, l_thr, LossConfig};
use ldc_core::metrics::iou;
use ldc_core::model::{
    avg_pool_same_tensor, avg_pool_same_tensor_backward, batch_gradients, conv2d, conv2d_backward, relu,
    relu_backward, transposed_conv2d, transposed_conv2d_backward, upsample_nearest, upsample_nearest_backward,
    ConvSpec, ModelConfig, Network, ParamStore, TrainExample,
};
use ldc_core::postprocess::Connectivity;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_vec(c, h, w, random_vec(rng, c * h * w)).unwrap()
}

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid {
    Grid::from_vec(h, w, random_vec(rng, h * w)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Finite differences

/// Relative error with a floor on the denominator, so that gradients near
/// zero are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` along coordinate `k` of `x`.
pub fn central(x: &mut [f64], k: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[k];
    x[k] = orig + h;
    let plus = f(x);
    x[k] = orig - h;
    let minus = f(x);
    x[k] = orig;
    (plus - minus) / (2.0 * h)
}

/// Max relative error of `grad` against central differences of `f` over
/// every coordinate of `x`. Coordinates where two step sizes disagree sit
/// on a kink and are skipped; their count is returned alongside.
pub fn check_all(x: &mut [f64], grad: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for k in 0..x.len() {
        let fine = central(x, k, 1e-6, f);
        let coarse = central(x, k, 1e-4, f);
        if rel_err(coarse, fine, 1e-3) > 1e-6 {
            skipped += 1;
            continue;
        }
        worst = worst.max(rel_err(grad[k], fine, 1e-3));
    }
    (worst, skipped)
}

/// One layer check: worst error over input and parameters for a random
/// linear functional of the output.
pub struct LayerCheck {
    pub name: &'static str,
    pub worst: f64,
    pub skipped: usize,
}

fn conv_trial(rng: &mut ChaCha8Rng, spec: ConvSpec, h: usize, w: usize) -> (f64, usize) {
    let mut input = random_vec(rng, spec.in_channels * h * w);
    let mut weight = random_vec(rng, spec.weight_len());
    let mut bias = random_vec(rng, spec.out_channels);
    let (oh, ow) = spec.output_dims(h, w);
    let probe = random_vec(rng, spec.out_channels * oh * ow);
    let cin = spec.in_channels;
    let t = |v: &[f64]| Tensor3::from_vec(cin, h, w, v.to_vec()).unwrap();
    let g = conv2d_backward(
        &t(&input),
        &weight,
        &spec,
        &Tensor3::from_vec(spec.out_channels, oh, ow, probe.clone()).unwrap(),
        true,
    )
    .unwrap();
    let (wc, bc) = (weight.clone(), bias.clone());
    let (e1, _) = check_all(&mut input, &g.d_input.unwrap().data, &mut |x| {
        dot(&conv2d(&t(x), &wc, &bc, &spec).unwrap().data, &probe)
    });
    let inp = input.clone();
    let (e2, _) = check_all(&mut weight, &g.d_weight, &mut |x| {
        dot(&conv2d(&t(&inp), x, &bc, &spec).unwrap().data, &probe)
    });
    let (e3, _) = check_all(&mut bias, &g.d_bias, &mut |x| {
        dot(&conv2d(&t(&inp), &wc, x, &spec).unwrap().data, &probe)
    });
    (e1.max(e2).max(e3), 0)
}

fn deconv_trial(rng: &mut ChaCha8Rng) -> (f64, usize) {
    let (cin, cout, h, w) = (3, 2, 4, 5);
    let mut input = random_vec(rng, cin * h * w);
    let mut weight = random_vec(rng, cin * cout * 4);
    let mut bias = random_vec(rng, cout);
    let probe = random_vec(rng, cout * 4 * h * w);
    let t = |v: &[f64]| Tensor3::from_vec(cin, h, w, v.to_vec()).unwrap();
    let g = transposed_conv2d_backward(
        &t(&input),
        &weight,
        cout,
        &Tensor3::from_vec(cout, 2 * h, 2 * w, probe.clone()).unwrap(),
        true,
    )
    .unwrap();
    let (wc, bc) = (weight.clone(), bias.clone());
    let (e1, _) = check_all(&mut input, &g.d_input.unwrap().data, &mut |x| {
        dot(&transposed_conv2d(&t(x), &wc, &bc, cout, 2, 2).unwrap().data, &probe)
    });
    let inp = input.clone();
    let (e2, _) = check_all(&mut weight, &g.d_weight, &mut |x| {
        dot(&transposed_conv2d(&t(&inp), x, &bc, cout, 2, 2).unwrap().data, &probe)
    });
    let (e3, _) = check_all(&mut bias, &g.d_bias, &mut |x| {
        dot(&transposed_conv2d(&t(&inp), &wc, x, cout, 2, 2).unwrap().data, &probe)
    });
    (e1.max(e2).max(e3), 0)
}

fn unary_trial(
    rng: &mut ChaCha8Rng,
    (c, h, w): (usize, usize, usize),
    out_len: usize,
    fwd: &dyn Fn(&Tensor3) -> Tensor3,
    bwd: &dyn Fn(&Tensor3, &Tensor3) -> Tensor3,
) -> (f64, usize) {
    let mut input = random_vec(rng, c * h * w);
    let probe = random_vec(rng, out_len);
    let t = |v: &[f64]| Tensor3::from_vec(c, h, w, v.to_vec()).unwrap();
    let out = fwd(&t(&input));
    let probe_t = Tensor3::from_vec(out.channels, out.height, out.width, probe.clone()).unwrap();
    let g = bwd(&t(&input), &probe_t);
    check_all(&mut input, &g.data, &mut |x| dot(&fwd(&t(x)).data, &probe))
}

/// Runs `trials` random checks of every layer type.
pub fn layer_checks(trials: usize, seed: u64) -> Vec<LayerCheck> {
    let mut rng = rng(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, rng: &mut ChaCha8Rng, f: &dyn Fn(&mut ChaCha8Rng) -> (f64, usize)| {
        let mut worst: f64 = 0.0;
        let mut skipped = 0;
        for _ in 0..trials {
            let (e, s) = f(rng);
            worst = worst.max(e);
            skipped += s;
        }
        out.push(LayerCheck { name, worst, skipped });
    };
    run("conv 3x3", &mut rng, &|r| conv_trial(r, ConvSpec::new(2, 3, 3), 6, 5));
    run("conv 3x3 stride 2", &mut rng, &|r| conv_trial(r, ConvSpec::new(2, 2, 3).stride(2), 7, 6));
    run("conv 3x3 dilation 3", &mut rng, &|r| {
        conv_trial(r, ConvSpec::new(2, 2, 3).dilation(3), 8, 7)
    });
    run("conv 1x1", &mut rng, &|r| conv_trial(r, ConvSpec::new(3, 2, 1), 4, 4));
    run("transposed conv 2x2", &mut rng, &deconv_trial);
    run("relu", &mut rng, &|r| unary_trial(r, (2, 4, 4), 32, &relu, &relu_backward));
    run("avg pool 9", &mut rng, &|r| {
        unary_trial(
            r,
            (2, 6, 7),
            84,
            &|t| avg_pool_same_tensor(t, 9).unwrap(),
            &|_, g| avg_pool_same_tensor_backward(g, 9).unwrap(),
        )
    });
    run("upsample x4", &mut rng, &|r| {
        unary_trial(
            r,
            (2, 3, 2),
            2 * 12 * 8,
            &|t| upsample_nearest(t, 4),
            &|_, g| upsample_nearest_backward(g, 4),
        )
    });
    out
}

/// Worst errors of each loss's gradient w.r.t. its (continuous) prediction.
pub fn loss_checks(trials: usize, seed: u64) -> Vec<LayerCheck> {
    let mut rng = rng(seed);
    let (h, w) = (5, 6);
    let mut results: Vec<(&'static str, f64, usize)> = vec![
        ("l_con", 0.0, 0),
        ("l_thr", 0.0, 0),
        ("l_ousr", 0.0, 0),
        ("l_size", 0.0, 0),
        ("l_size (foreground)", 0.0, 0),
    ];
    for _ in 0..trials {
        let n = rng.gen_range(1..4);
        let targets: Vec<Grid> = (0..n)
            .map(|_| Grid::from_fn(h, w, |_, _| f64::from(rng.gen_bool(0.3))))
            .collect();
        let sizes: Vec<Grid> = targets.iter().map(|t| t.map(|v| v * 4.0)).collect();
        let mut pred = random_vec(&mut rng, n * h * w);
        let split = |v: &[f64]| -> Vec<Grid> {
            v.chunks(h * w)
                .map(|c| Grid::from_vec(h, w, c.to_vec()).unwrap())
                .collect()
        };
        let flat = |gs: Vec<Grid>| gs.into_iter().flat_map(Grid::into_vec).collect::<Vec<_>>();
        type LossFn<'a> = Box<dyn Fn(&[Grid]) -> ldc_core::loss::LossValue + 'a>;
        let fns: Vec<LossFn> = vec![
            Box::new(|p| l_con(p, &targets).unwrap()),
            Box::new(|p| l_thr(p, &targets).unwrap()),
            Box::new(|p| l_ousr(p, &targets, 1e-10).unwrap()),
            Box::new(|p| l_size(p, &sizes, false).unwrap()),
            Box::new(|p| l_size(p, &sizes, true).unwrap()),
        ];
        for (slot, f) in results.iter_mut().zip(&fns) {
            let g = flat(f(&split(&pred)).grads);
            let (e, s) = check_all(&mut pred, &g, &mut |x| f(&split(x)).value);
            slot.1 = slot.1.max(e);
            slot.2 += s;
        }
    }
    results
        .into_iter()
        .map(|(name, worst, skipped)| LayerCheck { name, worst, skipped })
        .collect()
}

/// Antiderivative of the stipulated threshold-activation slope, so that
/// finite differences see exactly the gradient the backward pass uses.
fn clip_surrogate(x: f64) -> f64 {
    if x < 0.25 {
        (x - 0.25).exp()
    } else if x <= 0.95 {
        1.0 + (x - 0.25)
    } else {
        1.7
    }
}

/// Result of the end-to-end check.
pub struct EndToEnd {
    pub worst: f64,
    pub worst_at: String,
    pub checked: usize,
    pub skipped: usize,
}

/// Total training loss through the straight-through surrogate of the
/// binarization layer, with the attention gate frozen, checked against
/// `batch_gradients` on random 16x16 scenes.
pub fn end_to_end_check(trials: usize, seed: u64) -> EndToEnd {
    let mut rng = rng(seed);
    let cfg = LossConfig::default();
    let mut res = EndToEnd {
        worst: 0.0,
        worst_at: String::new(),
        checked: 0,
        skipped: 0,
    };
    for trial in 0..trials {
        let (net, mut p) = Network::new(ModelConfig {
            seed: seed + trial as u64,
            ..ModelConfig::default()
        })
        .unwrap();
        for id in p.ids().collect::<Vec<_>>() {
            if p.param(id).name.ends_with("bias") {
                for v in p.value_mut(id) {
                    *v = rng.gen_range(-0.05..0.05);
                }
            }
        }
        let image = Tensor3::from_grid(&Grid::from_fn(16, 16, |_, _| rng.gen_range(0.0..1.0)));
        let conf_gt = Grid::from_fn(16, 16, |r, c| f64::from((r / 4 + c / 5) % 3 == 0));
        let size_gt = conf_gt.map(|v| v * 3.5);
        let ex = TrainExample {
            image: image.clone(),
            confidence: conf_gt.clone(),
            size: size_gt.clone(),
        };
        let (_, grads) = batch_gradients(&net, &p, std::slice::from_ref(&ex), &cfg, true).unwrap();

        let (out0, cache) = net.forward(&image, &p).unwrap();
        let gate = cache.gate().clone();
        let t0 = out0.raw_threshold.map(ldc_core::binarize::clip_act);
        let b0 = binarize(&out0.confidence, &t0).unwrap();
        let s0 = out0.raw_threshold.map(clip_surrogate);
        let loss = |p: &ParamStore| -> f64 {
            let o = net.forward_with_gate(&image, p, &gate).unwrap().0;
            let b_thr = Grid::from_fn(16, 16, |r, c| {
                b0.get(r, c) - (clip_surrogate(o.raw_threshold.get(r, c)) - s0.get(r, c))
            });
            let b_ousr = Grid::from_fn(16, 16, |r, c| b0.get(r, c) + o.confidence.get(r, c) - out0.confidence.get(r, c));
            let tg = std::slice::from_ref(&conf_gt);
            l_con(std::slice::from_ref(&o.confidence), tg).unwrap().value
                + l_thr(&[b_thr], tg).unwrap().value
                + cfg.lambda * l_ousr(&[b_ousr], tg, cfg.eps).unwrap().value
                + l_size(&[o.size], std::slice::from_ref(&size_gt), false).unwrap().value
        };
        // the surrogate's slope matches the stipulated one only where it is used
        debug_assert!((clip_act_grad(0.5) - 1.0).abs() < 1e-15);

        for id in p.ids().collect::<Vec<_>>() {
            let n = p.param(id).value.len();
            let k = rng.gen_range(0..n);
            let orig = p.value(id)[k];
            let fd = |h: f64, p: &mut ParamStore| {
                p.value_mut(id)[k] = orig + h;
                let plus = loss(p);
                p.value_mut(id)[k] = orig - h;
                let minus = loss(p);
                p.value_mut(id)[k] = orig;
                (plus - minus) / (2.0 * h)
            };
            let fine = fd(1e-6, &mut p);
            let coarse = fd(1e-5, &mut p);
            if rel_err(coarse, fine, 1e-4) > 1e-6 {
                res.skipped += 1;
                continue;
            }
            res.checked += 1;
            let a = grads.get(id)[k];
            let e = rel_err(a, fine, 1e-4);
            if e > res.worst {
                res.worst = e;
                res.worst_at = format!("{}[{k}] analytic {a:.6e} numeric {fine:.6e}", p.param(id).name);
            }
        }
    }
    res
}

// ---------------------------------------------------------------------------
// Connected components

/// Component labels by breadth-first flood fill, numbered in row-major
/// order of first pixel.
pub fn flood_fill(binary: &Grid, connectivity: Connectivity) -> (Vec<Option<usize>>, usize) {
    let (h, w) = binary.dims();
    let mut labels = vec![None; h * w];
    let mut next = 0;
    let offsets: &[(i64, i64)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    for start in 0..h * w {
        if binary.as_slice()[start] <= 0.0 || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            for &(dr, dc) in offsets {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if binary.as_slice()[j] > 0.0 && labels[j].is_none() {
                    labels[j] = Some(next);
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    (labels, next)
}

// ---------------------------------------------------------------------------
// Matching

/// Exhaustive search over all partial one-to-one assignments with
/// `dist(pred, gt) <= radius[gt]`: maximum cardinality, then minimum total
/// distance. Returns `(cardinality, total distance)`.
pub fn brute_force_match(pred: &[Point], gt: &[Point], radius: Option<&[f64]>) -> (usize, f64) {
    fn go(
        j: usize,
        pred: &[Point],
        gt: &[Point],
        radius: Option<&[f64]>,
        used: &mut Vec<bool>,
        card: usize,
        dist: f64,
        best: &mut (usize, f64),
    ) {
        if j == gt.len() {
            if card > best.0 || (card == best.0 && dist < best.1) {
                *best = (card, dist);
            }
            return;
        }
        // leave gt j unmatched
        go(j + 1, pred, gt, radius, used, card, dist, best);
        for i in 0..pred.len() {
            if used[i] {
                continue;
            }
            let d = pred[i].dist(&gt[j]);
            if radius.is_some_and(|r| d > r[j]) {
                continue;
            }
            used[i] = true;
            go(j + 1, pred, gt, radius, used, card + 1, dist + d, best);
            used[i] = false;
        }
    }
    let mut best = (0, 0.0);
    go(0, pred, gt, radius, &mut vec![false; pred.len()], 0, 0.0, &mut best);
    best
}

// ---------------------------------------------------------------------------
// Detection AP

/// All-point interpolated AP built from scratch: sort detections by score,
/// and for every prefix recompute the greedy matching to get its precision
/// and recall; then integrate the monotone precision envelope over recall.
pub fn exhaustive_ap(images: &[(Vec<(BoxAnn, f64)>, Vec<BoxAnn>)], thr: f64) -> f64 {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (img, (dets, _)) in images.iter().enumerate() {
        for (k, (_, s)) in dets.iter().enumerate() {
            all.push((*s, img, k));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let total_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    for n in 1..=all.len() {
        let mut tp = 0;
        for (img, (dets, gts)) in images.iter().enumerate() {
            let mut taken = vec![false; gts.len()];
            for &(_, i, k) in all[..n].iter() {
                if i != img {
                    continue;
                }
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts.iter().enumerate() {
                    let v = iou(&dets[k].0, g);
                    if !taken[j] && v >= thr && best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    taken[j] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / n as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let r = points[i].0;
        if r > prev_recall {
            let p_env = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * p_env;
            prev_recall = r;
        }
    }
    ap
}
