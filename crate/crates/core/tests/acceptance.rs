//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

use cloak::detector::{
    decode_backward, decode_grid, detect, extract_person_score, person_score_argmax, DetectionGrid,
    DetectorAdapter, GridGrad, ScoreMode, ToyDetector,
};
use cloak::evaluation::{attack_success_rate, digital_eval, EvalConfig, EvalOutcome};
use cloak::losses::{nps_loss, nps_loss_grad, tv_loss, tv_loss_grad, LossWeights};
use cloak::synthetic::{canonical_person_scene, synthetic_set};
use cloak::trainer::{
    resume, train, Objective, TrainConfig, TrainHistory, TrainOptions, STATE_FILE,
};
use cloak::transforms::{
    batch_apply, composite_scene, occlusion_mask, read_params_log, replay_batch, sample_with,
    transform_patch, write_params_log, EotConfig, SceneComposite, TransformParams, Variant,
};
use cloak::{new_patch, InitSpec, Palette, Patch, RgbImage, SceneSet, SeedableRng, SplitTag};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn random_patch(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Patch {
    let data = (0..h * w * 3).map(|_| rng.gen::<f64>()).collect();
    Patch::from_image(RgbImage::from_raw(h, w, data).unwrap()).unwrap()
}

fn with_pixel(p: &Patch, i: usize, delta: f64) -> Patch {
    let mut data = p.data().to_vec();
    data[i] += delta;
    Patch::from_image(RgbImage::from_raw(p.height(), p.width(), data).unwrap())
        .unwrap()
        .with_aspect_hint(p.aspect_hint())
        .unwrap()
}

/// Central differences of `f` at 20 random components of `p`, compared
/// with `grad`. Returns the worst relative error.
fn fd_check(p: &Patch, grad: &[f64], h: f64, seed: u64, f: impl Fn(&Patch) -> f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.gen_range(0..grad.len());
        let fd = (f(&with_pixel(p, i, h)) - f(&with_pixel(p, i, -h))) / (2.0 * h);
        worst = worst.max(rel_err(grad[i], fd));
    }
    worst
}

fn brute_tv(p: &Patch) -> f64 {
    let (h, w) = (p.height(), p.width());
    let eps: f64 = 1e-8;
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let a = p.pixels().get(y, x);
            let down = if y + 1 < h {
                p.pixels().get(y + 1, x)
            } else {
                a
            };
            let right = if x + 1 < w {
                p.pixels().get(y, x + 1)
            } else {
                a
            };
            for k in 0..3 {
                let dv = a[k] - down[k];
                let dh = a[k] - right[k];
                total += (dv * dv + dh * dh + eps).sqrt() - eps.sqrt();
            }
        }
    }
    total
}

fn brute_nps(p: &Patch, palette: &Palette) -> f64 {
    let mut total = 0.0;
    for y in 0..p.height() {
        for x in 0..p.width() {
            let px = p.pixels().get(y, x);
            let mut best = f64::INFINITY;
            for c in palette.colors() {
                let d = ((px[0] - c[0]).powi(2) + (px[1] - c[1]).powi(2) + (px[2] - c[2]).powi(2))
                    .sqrt();
                best = best.min(d);
            }
            total += best;
        }
    }
    total
}

fn criterion_1() -> Outcome {
    let palette = Palette::default_printable();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let p = random_patch(8, 8, &mut rng);
        worst = worst.max((tv_loss(&p) - brute_tv(&p)).abs());
        worst = worst.max((nps_loss(&p, &palette).unwrap() - brute_nps(&p, &palette)).abs());
    }
    check(worst <= 1e-6, format!("max abs diff {worst:e} > 1e-6"))?;
    Ok(format!("max abs diff {worst:.2e} over 50 patches"))
}

fn random_grid(s: usize, b: usize, c: usize, rng: &mut ChaCha8Rng) -> DetectionGrid {
    let n = s * s * b;
    let mut class_probs = Vec::with_capacity(n * c);
    for _ in 0..n {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>()).collect();
        let z: f64 = raw.iter().sum();
        class_probs.extend(raw.iter().map(|v| v / z));
    }
    DetectionGrid {
        grid: s,
        boxes_per_cell: b,
        classes: c,
        geometry: (0..n).map(|_| [0.5, 0.5, 0.1, 0.1]).collect(),
        objectness: (0..n).map(|_| rng.gen()).collect(),
        class_probs,
    }
}

fn criterion_2() -> Outcome {
    let (s, b, c) = (13, 5, 80);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in 0..100 {
        let g = random_grid(s, b, c, &mut rng);
        let person = rng.gen_range(0..c);
        let mut best = f64::NEG_INFINITY;
        for row in 0..s {
            for col in 0..s {
                for a in 0..b {
                    let idx = (row * s + col) * b + a;
                    best = best.max(g.objectness[idx] * g.class_probs[idx * c + person]);
                }
            }
        }
        let got =
            extract_person_score(&g, person, ScoreMode::Product).map_err(|e| e.to_string())?;
        check(got == best, format!("grid {t}: {got} != {best}"))?;
    }
    Ok("100 grids exact".into())
}

fn zero_weights() -> LossWeights {
    LossWeights {
        lambda_tv: 0.0,
        lambda_nps: 0.0,
        mu_disappear: 0.0,
    }
}

fn criterion_3() -> Outcome {
    let palette = Palette::default_printable();
    let det = ToyDetector::bundled().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tol = 1e-3;

    let p = random_patch(6, 6, &mut rng);
    let (_, g) = tv_loss_grad(&p);
    let tv = fd_check(&p, &g, 1e-6, 31, tv_loss);
    check(tv < tol, format!("tv rel err {tv:e}"))?;
    let (_, g) = nps_loss_grad(&p, &palette).unwrap();
    let nps = fd_check(&p, &g, 1e-6, 32, |q| nps_loss(q, &palette).unwrap());
    check(nps < tol, format!("nps rel err {nps:e}"))?;

    // Detection score w.r.t. the detector input, on a person scene with noise.
    let mut image = canonical_person_scene().image;
    for v in image.data_mut() {
        *v = (*v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
    }
    let score = |img: &RgbImage| {
        let grid = decode_grid(&det.forward(img).unwrap(), det.descriptor()).unwrap();
        extract_person_score(&grid, 0, ScoreMode::Product).unwrap()
    };
    let grid = decode_grid(&det.forward(&image).unwrap(), det.descriptor()).unwrap();
    let best = person_score_argmax(&grid, 0, ScoreMode::Product).unwrap();
    let mut gg = GridGrad::zeros(&grid);
    gg.add_person_score(&grid, best.index, 0, ScoreMode::Product, 1.0);
    let g_img = det.backward(&image, &decode_backward(&grid, &gg)).unwrap();
    let mut det_worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.gen_range(0..image.data().len());
        let h = 1e-3;
        let (mut up, mut down) = (image.clone(), image.clone());
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        det_worst = det_worst.max(rel_err(
            g_img.data()[i],
            (score(&up) - score(&down)) / (2.0 * h),
        ));
    }
    check(det_worst < tol, format!("detection rel err {det_worst:e}"))?;

    // Full chain: transforms, placement, resize and detector.
    let objective = Objective {
        detector: &det,
        palette: &palette,
        weights: zero_weights(),
        score_mode: ScoreMode::Product,
    };
    let scene = canonical_person_scene();
    let mut eot = EotConfig::variant(Variant::Combined);
    eot.occlusion_fraction = cloak::transforms::Range::fixed(0.0);
    let params = sample_with(&eot, &SeedableRng::new(33));
    let patch = random_patch(12, 8, &mut rng);
    let loss_of = |q: &Patch, params: TransformParams| {
        let c = SceneComposite::build(&scene.id, &scene.image, &scene.boxes, q, &[(0, params)]);
        objective.evaluate_composites(q, &[c]).unwrap()
    };
    let (_, g) = loss_of(&patch, params);
    // Some components are ~1e-9, so a smaller step drowns in rounding.
    let chain = fd_check(&patch, &g, 1e-4, 34, |q| loss_of(q, params).0.total);
    check(chain < tol, format!("chain rel err {chain:e}"))?;

    // Occluded patch pixels get exactly zero gradient.
    let mut occ = TransformParams::identity();
    occ.brightness_add = 0.05;
    occ.contrast_mul = 0.9;
    occ.occlusion.fraction = 0.2;
    occ.occlusion.rect_seed = 35;
    let patch = random_patch(24, 16, &mut rng);
    let (_, g) = loss_of(&patch, occ);
    let mask = occlusion_mask(24, 16, &occ);
    let masked = mask.iter().filter(|m| **m).count();
    for (px, &m) in mask.iter().enumerate() {
        if m {
            check(
                g[3 * px..3 * px + 3].iter().all(|v| *v == 0.0),
                format!("non-zero gradient under occlusion at pixel {px}"),
            )?;
        }
    }
    check(g.iter().any(|v| *v != 0.0), "gradient vanished everywhere")?;
    Ok(format!(
        "max rel err tv {tv:.1e}, nps {nps:.1e}, detection {det_worst:.1e}, chain {chain:.1e}; {masked} occluded pixels exactly 0"
    ))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let patch = random_patch(30, 20, &mut rng);
    let id = transform_patch(&patch, &TransformParams::identity());
    let diff = id
        .image
        .data()
        .iter()
        .zip(patch.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(diff <= 1e-6, format!("identity differs by {diff:e}"))?;

    let set = synthetic_set(6, 4, SplitTag::Test).map_err(|e| e.to_string())?;
    let cfg = EotConfig::variant(Variant::Combined);
    let rng_a = SeedableRng::new(44);
    let a = batch_apply(&set, &patch, &cfg, &rng_a).map_err(|e| e.to_string())?;
    let b = batch_apply(&set, &patch, &cfg, &SeedableRng::new(44)).map_err(|e| e.to_string())?;
    let same = |x: &[&RgbImage], y: &[&RgbImage]| {
        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.data() == q.data())
    };
    check(
        same(&a.images(), &b.images()) && a.log == b.log,
        "same seed gave different batches",
    )?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log_path = dir.path().join("params.jsonl");
    write_params_log(&log_path, &a.log).map_err(|e| e.to_string())?;
    let log = read_params_log(&log_path).map_err(|e| e.to_string())?;
    let replayed = replay_batch(&set, &patch, &log).map_err(|e| e.to_string())?;
    check(
        same(&a.images(), &replayed.images()),
        "replayed batch differs",
    )?;

    let mut counts = Vec::new();
    for seed in 0..100 {
        let mut p = TransformParams::identity();
        p.occlusion.fraction = 0.2;
        p.occlusion.rect_seed = seed;
        let n = occlusion_mask(100, 100, &p).iter().filter(|m| **m).count();
        check(
            (1900..=2100).contains(&n),
            format!("rect seed {seed}: {n} masked pixels"),
        )?;
        counts.push(n);
    }
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    Ok(format!("identity err {diff:.1e}; batches and replay bitwise; occlusion {lo}..{hi} px over 100 seeds"))
}

fn criterion_5() -> Outcome {
    for (undetected, all, want) in [(0, 602, 0.0), (301, 602, 50.0), (90, 100, 90.0)] {
        let got = attack_success_rate(&EvalOutcome::new(all, undetected).unwrap())
            .map_err(|e| e.to_string())?;
        check(
            got == want,
            format!("({undetected},{all}) gave {got}, want {want}"),
        )?;
    }
    Ok("0%, 50%, 90% exact".into())
}

/// Setup shared by the toy end-to-end criteria.
struct Toy {
    det: ToyDetector,
    palette: Palette,
    train_set: SceneSet,
    test_set: SceneSet,
    init: Patch,
}

const TOY_EPOCHS: usize = 200;

impl Toy {
    fn new() -> Self {
        Self {
            det: ToyDetector::bundled().unwrap(),
            palette: Palette::default_printable(),
            train_set: synthetic_set(16, 100, SplitTag::Train).unwrap(),
            test_set: synthetic_set(16, 200, SplitTag::Test).unwrap(),
            init: new_patch(45, 30, &InitSpec::Random { seed: 7 }).unwrap(),
        }
    }

    fn config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            seed: 3,
            eot: EotConfig::variant(Variant::Conventional),
            ..TrainConfig::default()
        }
    }

    fn train(&self, cfg: &TrainConfig) -> (Patch, TrainHistory) {
        train(
            &self.init,
            &self.train_set,
            &self.det,
            &self.palette,
            cfg,
            &TrainOptions::default(),
        )
        .unwrap()
    }
}

fn criterion_6(toy: &Toy, run: &(Patch, TrainHistory)) -> Outcome {
    let (patch, history) = run;
    let first = history.records[0].loss.detection;
    let last = history.records.last().unwrap().loss.detection;
    let drop = 1.0 - last / first;
    let report = digital_eval(Some(patch), &toy.test_set, &toy.det, &EvalConfig::default())
        .map_err(|e| e.to_string())?;
    let again = toy.train(&toy.config(TOY_EPOCHS));
    let deterministic = again.0.data() == patch.data() && again.1.losses() == history.losses();
    let summary = format!(
        "detection loss {first:.4} -> {last:.4} ({:.1}% drop), mean R_s {:.1}% over {} persons",
        100.0 * drop,
        report.mean,
        report.n_all
    );
    check(drop >= 0.5, format!("{summary}: drop below 50%"))?;
    check(report.mean >= 80.0, format!("{summary}: R_s below 80%"))?;
    check(deterministic, format!("{summary}: rerun differs"))?;
    Ok(format!("{summary}; rerun bitwise identical"))
}

fn criterion_7(run: &(Patch, TrainHistory)) -> Outcome {
    let totals: Vec<f64> = run.1.records.iter().map(|r| r.loss.total).collect();
    let smoothed: Vec<f64> = totals
        .windows(5)
        .map(|w| w.iter().sum::<f64>() / 5.0)
        .collect();
    // Smoothed value k covers epochs k+1..=k+5; keep windows ending in the final quarter.
    let start = totals.len() - totals.len() / 4;
    let tail = &smoothed[start - 4..];
    let mut best = f64::INFINITY;
    let mut worst_ratio: f64 = 0.0;
    for &s in tail {
        if best.is_finite() {
            worst_ratio = worst_ratio.max(s / best);
        }
        best = best.min(s);
    }
    let summary = format!(
        "max smoothed rise over running minimum {:.2}%",
        100.0 * (worst_ratio - 1.0).max(0.0)
    );
    check(worst_ratio <= 1.05, summary.clone())?;
    Ok(summary)
}

fn criterion_8(toy: &Toy) -> Outcome {
    let mut cfg = toy.config(TOY_EPOCHS);
    cfg.weights.mu_disappear = 1.0;
    let (patch, _) = toy.train(&cfg);
    let eval = EvalConfig::default();
    let rng = SeedableRng::new(eval.seed);
    let mut clean = 0;
    for (i, scene) in toy.test_set.scenes.iter().enumerate() {
        let (comp, _) = composite_scene(scene, i, &patch, &eval.eot, &rng);
        let grid =
            cloak::detector::run_detector(&toy.det, &comp.image).map_err(|e| e.to_string())?;
        let regions = comp.regions();
        let hit = detect(&grid, eval.score_threshold, eval.nms_iou)
            .map_err(|e| e.to_string())?
            .iter()
            .any(|d| {
                regions
                    .iter()
                    .any(|r| d.cx >= r[0] && d.cx <= r[2] && d.cy >= r[1] && d.cy <= r[3])
            });
        if !hit {
            clean += 1;
        }
    }
    let frac = clean as f64 / toy.test_set.len() as f64;
    let summary = format!(
        "{clean}/{} held-out scenes without detections in the patch region",
        toy.test_set.len()
    );
    check(frac >= 0.7, format!("{summary} (< 70%)"))?;
    check(
        clean >= DISAPPEAR_FROZEN,
        format!("{summary}: regressed below frozen {DISAPPEAR_FROZEN}"),
    )?;
    Ok(summary)
}

/// Scene count reached by the first passing disappearance run.
const DISAPPEAR_FROZEN: usize = 14;

fn criterion_9(toy: &Toy) -> Outcome {
    let cfg = toy.config(20);
    let straight_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let halted_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = |dir: &std::path::Path, halt| TrainOptions {
        checkpoint_dir: Some(dir.to_path_buf()),
        halt_after: halt,
    };
    let straight = train(
        &toy.init,
        &toy.train_set,
        &toy.det,
        &toy.palette,
        &cfg,
        &opts(straight_dir.path(), None),
    )
    .map_err(|e| e.to_string())?;
    let halted = train(
        &toy.init,
        &toy.train_set,
        &toy.det,
        &toy.palette,
        &cfg,
        &opts(halted_dir.path(), Some(10)),
    )
    .map_err(|e| e.to_string())?;
    check(
        halted.1.records.len() == 10,
        "halt did not stop at epoch 10",
    )?;
    let resumed = resume(
        halted_dir.path(),
        &toy.train_set,
        &toy.det,
        &TrainOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let state = |d: &std::path::Path| std::fs::read(d.join(STATE_FILE)).unwrap();
    check(
        resumed.0.data() == straight.0.data(),
        "final patches differ",
    )?;
    check(
        resumed.1.losses() == straight.1.losses(),
        "loss histories differ",
    )?;
    check(
        state(straight_dir.path()) == state(halted_dir.path()),
        "optimizer states differ",
    )?;
    Ok("patch, loss history and optimizer state bitwise equal".into())
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n}: PASS ({secs:.1}s) {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n}: FAIL ({secs:.1}s) {msg}");
            }
        }
    };
    let simple: [(usize, fn() -> Outcome); 5] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
    ];
    for (n, f) in simple {
        let t = Instant::now();
        report(n, t, f());
    }

    let toy = Toy::new();
    let t = Instant::now();
    let run = toy.train(&toy.config(TOY_EPOCHS));
    report(6, t, criterion_6(&toy, &run));
    report(7, Instant::now(), criterion_7(&run));
    report(8, Instant::now(), criterion_8(&toy));
    report(9, Instant::now(), criterion_9(&toy));

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
