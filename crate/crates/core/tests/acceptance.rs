//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 4 to 7 train nine small models and take about 25 minutes on a
//! single core. Failures are reported but only change the exit status when
//! `LDC_ACCEPTANCE_STRICT=1` is set.

mod common;

use std::time::{Duration, Instant};

use ldc_core::binarize::{clip_act, clip_act_grad};
use ldc_core::grid::{Grid, Tensor3};
use ldc_core::labelgen::{half_diagonal, point_guide_sizes, BoxAnn, LabelGenConfig, Point};
use ldc_core::loss::ousr_single;
use ldc_core::metrics::{detection_eval, match_min_distance, match_within_radius, sigma_l, DetectionImage, EvalConfig};
use ldc_core::model::{poly_lr, train, ModelConfig, Network, ParamStore, Sample, TrainConfig, TrainOutcome};
use ldc_core::pipeline::{evaluate_samples, infer_image, validation_f1, ThresholdMode};
use ldc_core::postprocess::{decode_box, label_components, Blob, Connectivity, PostprocessConfig};
use ldc_core::synth::{gen_scenes, SceneConfig};
use rand::Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const FIXED_SWEEP: [f64; 14] = [0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90];

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(id: usize, title: &str, elapsed: Duration, v: &Verdict) {
    println!(
        "criterion {id} {:<28} {}  ({:.1}s) {}",
        title,
        if v.pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        v.detail
    );
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for c in common::layer_checks(20, 11).into_iter().chain(common::loss_checks(20, 12)) {
        let ok = c.worst <= 1e-6;
        pass &= ok;
        lines.push(format!("{} {:.1e}{}", c.name, c.worst, if ok { "" } else { " (over 1e-6)" }));
    }
    let e2e = common::end_to_end_check(20, 13);
    let ok = e2e.worst <= 1e-5 && e2e.checked > 10 * e2e.skipped;
    pass &= ok;
    lines.push(format!(
        "end-to-end {:.1e} over {} coords ({} on kinks skipped){}",
        e2e.worst,
        e2e.checked,
        e2e.skipped,
        if ok { String::new() } else { format!(" worst at {}", e2e.worst_at) }
    ));
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    Verdict {
        pass,
        detail: format!("[{}]", lines.join("; ")),
    }
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = common::rng(21);

    let mut ccl_bad = 0;
    for trial in 0..200 {
        let p = rng.gen_range(0.2..0.7);
        let g = Grid::from_fn(32, 32, |_, _| f64::from(rng.gen_bool(p)));
        let conn = if trial % 2 == 0 { Connectivity::Eight } else { Connectivity::Four };
        if label_components(&g, conn) != common::flood_fill(&g, conn) {
            ccl_bad += 1;
        }
    }

    let mut match_bad = 0;
    for _ in 0..500 {
        let n = rng.gen_range(0..=7);
        let m = rng.gen_range(0..=7);
        let pts = |rng: &mut rand_chacha::ChaCha8Rng, k| -> Vec<Point> {
            (0..k)
                .map(|_| Point::new(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)))
                .collect()
        };
        let (pred, gt) = (pts(&mut rng, n), pts(&mut rng, m));
        let radius: Vec<f64> = (0..m).map(|_| rng.gen_range(2.0..10.0)).collect();
        let got = match_within_radius(&pred, &gt, &radius);
        let (card, dist) = common::brute_force_match(&pred, &gt, Some(&radius));
        if got.tp() != card || (got.total_distance() - dist).abs() > 1e-9 {
            match_bad += 1;
        }
        let got = match_min_distance(&pred, &gt);
        let (card, dist) = common::brute_force_match(&pred, &gt, None);
        if got.tp() != card || (got.total_distance() - dist).abs() > 1e-9 {
            match_bad += 1;
        }
    }

    let mut ap_worst: f64 = 0.0;
    for _ in 0..200 {
        let images: Vec<(Vec<(BoxAnn, f64)>, Vec<BoxAnn>)> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let bx = |rng: &mut rand_chacha::ChaCha8Rng| {
                    let (x, y) = (rng.gen_range(0.0..12.0), rng.gen_range(0.0..12.0));
                    BoxAnn::new(x, y, x + rng.gen_range(2.0..6.0), y + rng.gen_range(2.0..6.0))
                };
                let dets = (0..rng.gen_range(0..=6)).map(|_| (bx(&mut rng), rng.gen::<f64>())).collect();
                let gts = (0..rng.gen_range(1..=6)).map(|_| bx(&mut rng)).collect();
                (dets, gts)
            })
            .collect();
        let lib: Vec<DetectionImage> = images
            .iter()
            .map(|(d, g)| DetectionImage {
                detections: d.clone(),
                gt: g.clone(),
            })
            .collect();
        let got = detection_eval(&lib, 0.3).ap;
        ap_worst = ap_worst.max((got - common::exhaustive_ap(&images, 0.3)).abs());
    }

    let secs = start.elapsed().as_secs_f64();
    Verdict {
        pass: ccl_bad == 0 && match_bad == 0 && ap_worst <= 1e-12 && secs < 120.0,
        detail: format!(
            "[CCL mismatches {ccl_bad}/200; matching mismatches {match_bad}/1000; AP max diff {ap_worst:.1e}]"
        ),
    }
}

fn criterion_3() -> Verdict {
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    for (x, act, grad) in [
        (0.1, 0.25, (0.1f64 - 0.25).exp()),
        (0.5, 0.5, 1.0),
        (0.95, 0.90, 1.0),
        (0.97, 0.90, 0.0),
    ] {
        check(&format!("clip_act({x})"), clip_act(x), act, 0.0);
        check(&format!("clip_act_grad({x})"), clip_act_grad(x), grad, 0.0);
    }
    let sizes = point_guide_sizes(
        &[Point::new(0.0, 0.0), Point::new(8.0, 0.0)],
        &LabelGenConfig {
            max_size: 15.0,
            ratio: 0.25,
            ..LabelGenConfig::default()
        },
    );
    check("point-guide size", sizes[0].w, 2.0, 0.0);
    check("half diagonal (3,4)", half_diagonal(3.0, 4.0), 2.5, 0.0);
    let c = Grid::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let b = Grid::from_vec(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    check("OUSR hand case", ousr_single(&b, &c, 1e-10).unwrap().0, 1.0 / 3.0, 1e-9);
    check("sigma_l(6,8)", sigma_l(6.0, 8.0).unwrap(), 5.0, 0.0);
    let blob = Blob {
        x: 10.0,
        y: 10.0,
        width: 6.0,
        height: 8.0,
        pixel_count: 48,
        bounds: (7.0, 6.0, 13.0, 14.0),
        pixels: Vec::new(),
    };
    let (bx, _) = decode_box(&blob, &Grid::filled(20, 20, 5.0));
    for (name, got, want) in [("x1", bx.x1, 7.0), ("y1", bx.y1, 6.0), ("x2", bx.x2, 13.0), ("y2", bx.y2, 14.0)] {
        check(&format!("decode_box {name}"), got, want, 1e-12);
    }
    check("poly_lr midpoint", poly_lr(1.0, 500, 1000), 0.53589, 1e-5);
    Verdict {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "[all 17 values match]".into()
        } else {
            format!("[{}]", failures.join("; "))
        },
    }
}

// ---------------------------------------------------------------------------
// Training runs shared by criteria 4 to 7

struct Split {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

fn dataset(mut scene: SceneConfig, seed: u64) -> Split {
    scene.seed = seed;
    let mut samples: Vec<Sample> = gen_scenes(&scene, 120)
        .unwrap()
        .into_iter()
        .map(|s| Sample {
            image: Tensor3::from_grid(&s.image),
            annotation: s.annotation,
        })
        .collect();
    let test = samples.split_off(110);
    let val = samples.split_off(100);
    Split {
        train: samples,
        val,
        test,
    }
}

struct Run {
    net: Network,
    outcome: Result<TrainOutcome, String>,
    secs: f64,
}

impl Run {
    fn params(&self) -> Option<&ParamStore> {
        self.outcome.as_ref().ok().map(|o| &o.best)
    }

    /// No error and every logged loss finite.
    fn finite(&self) -> bool {
        self.outcome.as_ref().is_ok_and(|o| {
            o.log.rows.iter().all(|r| {
                let l = r.losses;
                [l.l_con, l.l_thr, l.l_ousr, l.l_size, l.total].iter().all(|v| v.is_finite())
            })
        })
    }
}

fn train_run(data: &Split, seed: u64, lambda: f64) -> Run {
    let (net, init) = Network::new(ModelConfig {
        seed,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        lambda,
        seed,
        ..TrainConfig::desk_scale()
    };
    let start = Instant::now();
    let outcome = train(&net, init, &data.train, &LabelGenConfig::default(), &cfg, &|p| {
        validation_f1(&net, p, &data.val)
    })
    .map_err(|e| e.to_string());
    Run {
        net,
        outcome,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn eval(run: &Run, samples: &[Sample], mode: ThresholdMode) -> Option<ldc_core::metrics::EvalReport> {
    let p = run.params()?;
    evaluate_samples(
        &run.net,
        p,
        samples,
        mode,
        &PostprocessConfig::default(),
        &EvalConfig::default(),
    )
    .ok()
}

fn criterion_4(runs: &[Run], data: &[Split]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for ((run, d), seed) in runs.iter().zip(data).zip(SEEDS) {
        let Some(r) = eval(run, &d.test, ThresholdMode::Learned) else {
            pass = false;
            parts.push(format!("seed {seed}: training failed ({:?})", run.outcome.as_ref().err()));
            continue;
        };
        let f1 = r.localization.f1;
        let mae = r.counting.mae;
        let ap = r.detection.as_ref().map_or(0.0, |d| d.ap);
        let size = r.size_error.unwrap_or(f64::INFINITY);
        let ok = f1 >= 0.90 && mae <= 1.0 && ap >= 0.60 && size <= 0.20 && run.secs <= 900.0;
        pass &= ok;
        parts.push(format!(
            "seed {seed}: F1-m {f1:.3} MAE {mae:.2} AP@0.5 {ap:.3} size err {:.1}% train {:.0}s{}",
            100.0 * size,
            run.secs,
            if ok { "" } else { " <-" }
        ));
    }
    Verdict {
        pass,
        detail: format!("[{}]", parts.join("; ")),
    }
}

fn criterion_5(runs: &[Run], data: &[Split]) -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for ((run, d), seed) in runs.iter().zip(data).zip(SEEDS) {
        let Some(learned) = eval(run, &d.test, ThresholdMode::Learned) else {
            parts.push(format!("seed {seed}: training failed"));
            continue;
        };
        // best fixed threshold on validation F1-m; ties go to the lower threshold
        let mut best: Option<(f64, f64)> = None;
        for t in FIXED_SWEEP {
            let f1 = eval(run, &d.val, ThresholdMode::Fixed(t)).map_or(0.0, |r| r.localization.f1);
            if best.is_none_or(|(_, b)| f1 > b) {
                best = Some((t, f1));
            }
        }
        let (t, _) = best.expect("non-empty sweep");
        let fixed = eval(run, &d.test, ThresholdMode::Fixed(t)).expect("evaluated above");
        let gain = learned.localization.recall - fixed.localization.recall;
        if gain >= 0.02 {
            wins += 1;
        }
        parts.push(format!(
            "seed {seed}: learned Rec {:.3} vs fixed t={t:.2} Rec {:.3} (gain {:+.1} pts)",
            learned.localization.recall,
            fixed.localization.recall,
            100.0 * gain
        ));
    }
    Verdict {
        pass: wins >= 2,
        detail: format!("[{}; {wins}/3 seeds gain >= 2 pts]", parts.join("; ")),
    }
}

fn criterion_6(with_ousr: &[Run], without: &[Run], data: &[Split]) -> Verdict {
    let mut all_close = true;
    let mut strictly = 0;
    let mut parts = Vec::new();
    for (((a, b), d), seed) in with_ousr.iter().zip(without).zip(data).zip(SEEDS) {
        let f = |r: &Run| eval(r, &d.test, ThresholdMode::Learned).map_or(0.0, |e| e.localization.f1);
        let (fa, fb) = (f(a), f(b));
        all_close &= fa >= fb - 0.005;
        if fa > fb {
            strictly += 1;
        }
        parts.push(format!("seed {seed}: F1-m {fa:.4} (lambda 0.01) vs {fb:.4} (lambda 0)"));
    }
    Verdict {
        pass: all_close && strictly >= 2,
        detail: format!("[{}; strictly greater in {strictly}/3]", parts.join("; ")),
    }
}

fn criterion_7(model: &Run, all: &[&Run]) -> Verdict {
    let empty = gen_scenes(
        &SceneConfig {
            seed: 77,
            ..SceneConfig::empty()
        },
        10,
    )
    .unwrap();
    let zero = match model.params() {
        Some(p) => empty
            .iter()
            .filter(|s| {
                infer_image(
                    &model.net,
                    p,
                    &Tensor3::from_grid(&s.image),
                    ThresholdMode::Learned,
                    &PostprocessConfig::default(),
                )
                .is_ok_and(|inf| inf.prediction.points.is_empty())
            })
            .count(),
        None => 0,
    };
    let finite = all.iter().filter(|r| r.finite()).count();
    Verdict {
        pass: zero >= 9 && finite == all.len(),
        detail: format!(
            "[{zero}/10 empty scenes counted 0; {finite}/{} training runs free of NaN]",
            all.len()
        ),
    }
}

fn main() {
    // libtest flags such as --list are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    // optional positional arguments select criteria, e.g. `-- 1 2 3`
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| selected.is_empty() || selected.contains(&id);
    let mut verdicts: Vec<(usize, &str, Duration, Verdict)> = Vec::new();
    let mut timed = |id, title, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let v = f();
        let e = start.elapsed();
        report(id, title, e, &v);
        verdicts.push((id, title, e, v));
    };
    timed(1, "gradient fidelity", &mut criterion_1);
    timed(2, "oracle equivalence", &mut criterion_2);
    timed(3, "formula spot checks", &mut criterion_3);

    if !(4..=7).any(wanted) {
        return summarize(&verdicts);
    }
    let standard: Vec<Split> = SEEDS.iter().map(|&s| dataset(SceneConfig::default(), s)).collect();
    let two: Vec<Split> = SEEDS.iter().map(|&s| dataset(SceneConfig::two_contrast(), s)).collect();
    let train_all = |data: &[Split], lambda: f64| -> Vec<Run> {
        data.iter().zip(SEEDS).map(|(d, s)| train_run(d, s, lambda)).collect()
    };
    let start = Instant::now();
    let runs_std = train_all(&standard, 0.01);
    let runs_two = train_all(&two, 0.01);
    let runs_two_no_ousr = train_all(&two, 0.0);
    println!("trained 9 models in {:.0}s", start.elapsed().as_secs_f64());

    timed(4, "end-to-end toy training", &mut || criterion_4(&runs_std, &standard));
    timed(5, "learned threshold recall", &mut || criterion_5(&runs_two, &two));
    timed(6, "OUSR trend", &mut || criterion_6(&runs_two, &runs_two_no_ousr, &two));
    let all: Vec<&Run> = runs_std.iter().chain(&runs_two).chain(&runs_two_no_ousr).collect();
    timed(7, "robustness", &mut || criterion_7(&runs_std[0], &all));

    summarize(&verdicts);
}

const STRICT_ENV: &str = "LDC_ACCEPTANCE_STRICT";

fn summarize(verdicts: &[(usize, &str, Duration, Verdict)]) {
    println!();
    println!("acceptance summary");
    for (id, title, _, v) in verdicts {
        println!("  {id}. {:<28} {}", title, if v.pass { "PASS" } else { "FAIL" });
    }
    let failed = verdicts.iter().filter(|v| !v.3.pass).count();
    if failed > 0 {
        println!("{failed} of {} criteria failed", verdicts.len());
        if std::env::var_os(STRICT_ENV).is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
        println!("(exit status stays 0; set {STRICT_ENV}=1 to fail the run)");
    } else {
        println!("all {} criteria passed", verdicts.len());
    }
}
