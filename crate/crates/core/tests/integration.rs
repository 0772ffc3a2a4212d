use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

use cloak::detector::ToyDetector;
use cloak::evaluation::{
    digital_eval, photo_eval, sweep, EvalConfig, SweepEntry, SweepSpec, META_JSON,
};
use cloak::synthetic::{canonical_person_scene, synthetic_set};
use cloak::trainer::{resume, train, TrainConfig, TrainOptions};
use cloak::transforms::{EotConfig, Variant};
use cloak::{load_scene_set, new_patch, Error, InitSpec, Palette, RgbImage, SplitTag};

fn write_rgb8(path: &Path, img: &RgbImage) {
    img.save_8bit(path).unwrap();
}

/// Independent bilinear resize: pixel centres aligned, coordinates clamped
/// to the source grid.
fn reference_resize_mean(src: &RgbImage, h: usize, w: usize) -> [f64; 3] {
    let (sh, sw) = (src.height(), src.width());
    let mut sum = [0.0; 3];
    for y in 0..h {
        for x in 0..w {
            let fy = ((y as f64 + 0.5) * sh as f64 / h as f64 - 0.5)
                .max(0.0)
                .min((sh - 1) as f64);
            let fx = ((x as f64 + 0.5) * sw as f64 / w as f64 - 0.5)
                .max(0.0)
                .min((sw - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            for (k, s) in sum.iter_mut().enumerate() {
                let top = src.get(y0, x0)[k] * (1.0 - tx) + src.get(y0, x1)[k] * tx;
                let bottom = src.get(y1, x0)[k] * (1.0 - tx) + src.get(y1, x1)[k] * tx;
                *s += top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    sum.map(|s| s / (h * w) as f64)
}

#[test]
fn image_init_matches_reference_bilinear_mean() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teddy.png");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Orange blob on a pale background.
    let src = RgbImage::from_fn(57, 41, |y, x| {
        let d = ((y as f64 - 28.0).powi(2) + (x as f64 - 20.0).powi(2)).sqrt();
        if d < 15.0 {
            [0.95, 0.55 + 0.1 * rng.gen::<f64>(), 0.1]
        } else {
            [0.9, 0.9, 0.85]
        }
    });
    write_rgb8(&path, &src);
    let reloaded = RgbImage::load(&path).unwrap();
    let patch = new_patch(300, 200, &InitSpec::FromImage { path }).unwrap();
    assert_eq!((patch.height(), patch.width()), (300, 200));
    let got = patch.pixels().mean_rgb();
    let want = reference_resize_mean(&reloaded, 300, 200);
    for k in 0..3 {
        assert!(
            (got[k] - want[k]).abs() < 1e-6,
            "channel {k}: {} vs {}",
            got[k],
            want[k]
        );
    }
}

#[test]
fn photo_eval_matches_hand_count() {
    let det = ToyDetector::bundled().unwrap();
    let root = tempfile::tempdir().unwrap();
    let person = canonical_person_scene().image;
    let blank = RgbImage::filled(64, 64, [0.2, 0.2, 0.2]);
    // 10 photos in one condition: 6 with a person, 4 empty.
    let cond = root.path().join("outdoor/2m/0deg");
    std::fs::create_dir_all(&cond).unwrap();
    for i in 0..10 {
        let img = if i < 6 { &person } else { &blank };
        img.save_png16(cond.join(format!("img_{i:02}.png")))
            .unwrap();
    }
    // Two persons declared per image, one visible each: half undetected.
    let pair = root.path().join("indoor/4m/30deg");
    std::fs::create_dir_all(&pair).unwrap();
    std::fs::write(
        root.path().join("indoor").join(META_JSON),
        r#"{"persons_per_image": 2}"#,
    )
    .unwrap();
    for i in 0..3 {
        person.save_png16(pair.join(format!("f{i}.png"))).unwrap();
    }
    std::fs::write(pair.join("broken.png"), b"not an image").unwrap();

    let report = photo_eval(root.path(), &det, &EvalConfig::default()).unwrap();
    assert_eq!(report.conditions.len(), 2);
    let indoor = &report.conditions[0];
    assert_eq!(indoor.key.to_string(), "indoor/4m/30deg");
    assert_eq!((indoor.n_all, indoor.n_undetected), (6, 3));
    assert_eq!(indoor.skipped.len(), 1);
    let outdoor = &report.conditions[1];
    assert_eq!((outdoor.n_all, outdoor.n_undetected), (10, 4));
    assert_eq!(outdoor.rs_percent, 40.0);
}

#[test]
fn digital_eval_without_patch_is_zero_and_stable() {
    let det = ToyDetector::bundled().unwrap();
    let set = synthetic_set(6, 9, SplitTag::Test).unwrap();
    let cfg = EvalConfig {
        repetitions: 3,
        ..EvalConfig::default()
    };
    let clean = digital_eval(None, &set, &det, &cfg).unwrap();
    assert!(clean.n_all > 0);
    assert!(clean.rs_percent.iter().all(|r| *r == 0.0));

    let patch = new_patch(20, 14, &InitSpec::Random { seed: 1 }).unwrap();
    let a = digital_eval(Some(&patch), &set, &det, &cfg).unwrap();
    let b = digital_eval(Some(&patch), &set, &det, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.min <= a.mean && a.mean <= a.max);
    assert_eq!(a.n_all, clean.n_all);
}

#[test]
fn scene_sets_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    let set = synthetic_set(4, 2, SplitTag::Train).unwrap();
    set.save(dir.path()).unwrap();
    let a = load_scene_set(dir.path(), SplitTag::Train).unwrap();
    let b = load_scene_set(dir.path(), SplitTag::Train).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert_eq!(a.person_count(), set.person_count());
}

fn short_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 2,
        eot: EotConfig::variant(Variant::Conventional),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_step_size_leaves_patch_unchanged() {
    let det = ToyDetector::bundled().unwrap();
    let set = synthetic_set(4, 3, SplitTag::Train).unwrap();
    let init = new_patch(12, 8, &InitSpec::Random { seed: 4 }).unwrap();
    let mut cfg = short_config(3);
    cfg.adam.step_size = 0.0;
    let (patch, history) = train(
        &init,
        &set,
        &det,
        &Palette::default_printable(),
        &cfg,
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(patch.data(), init.data());
    assert_eq!(history.records.len(), 3);
}

#[test]
fn resume_checks_corpus_and_finishes_immediately() {
    let det = ToyDetector::bundled().unwrap();
    let set = synthetic_set(4, 3, SplitTag::Train).unwrap();
    let init = new_patch(12, 8, &InitSpec::Random { seed: 4 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        halt_after: Some(1),
    };
    train(
        &init,
        &set,
        &det,
        &Palette::default_printable(),
        &short_config(2),
        &opts,
    )
    .unwrap();

    let other = synthetic_set(4, 4, SplitTag::Train).unwrap();
    let err = resume(dir.path(), &other, &det, &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");

    let (patch, history) = resume(dir.path(), &set, &det, &TrainOptions::default()).unwrap();
    assert!(history.finished);
    let (again, history2) = resume(dir.path(), &set, &det, &TrainOptions::default()).unwrap();
    assert_eq!(again.data(), patch.data());
    assert_eq!(history2.losses(), history.losses());
}

#[test]
fn sweep_ranking_is_deterministic() {
    let det = ToyDetector::bundled().unwrap();
    let train_set = synthetic_set(4, 5, SplitTag::Train).unwrap();
    let test_set = synthetic_set(4, 6, SplitTag::Test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let blob = dir.path().join("blob.png");
    write_rgb8(
        &blob,
        &RgbImage::from_fn(30, 20, |y, x| {
            if (y / 6 + x / 5) % 2 == 0 {
                [0.1, 0.4, 0.9]
            } else {
                [0.9, 0.9, 0.1]
            }
        }),
    );
    let entry = |name: &str, init, color: &str, shape: &str| SweepEntry {
        name: name.into(),
        init,
        color_tag: color.into(),
        shape_tag: shape.into(),
    };
    let spec = SweepSpec {
        entries: vec![
            entry("random", InitSpec::Random { seed: 0 }, "mixed", "none"),
            entry(
                "red",
                InitSpec::Constant {
                    rgb: [1.0, 0.0, 0.0],
                },
                "pure",
                "none",
            ),
            entry("blob", InitSpec::FromImage { path: blob }, "mixed", "blob"),
        ],
        patch_size: (15, 10),
        train: short_config(2),
        eval: EvalConfig {
            repetitions: 2,
            ..EvalConfig::default()
        },
    };
    let palette = Palette::default_printable();
    let a = sweep(&spec, &train_set, &test_set, &det, &palette).unwrap();
    let b = sweep(&spec, &train_set, &test_set, &det, &palette).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 3);
    assert!(a.rows.iter().all(|r| r.error.is_none()));
    assert!(a.rows.windows(2).all(|w| w[0].mean >= w[1].mean));

    // A one-entry sweep reports what a direct evaluation gives.
    let single = SweepSpec {
        entries: vec![spec.entries[1].clone()],
        ..spec.clone()
    };
    let row = &sweep(&single, &train_set, &test_set, &det, &palette)
        .unwrap()
        .rows[0];
    let init = new_patch(15, 10, &spec.entries[1].init).unwrap();
    let (patch, _) = train(
        &init,
        &train_set,
        &det,
        &palette,
        &spec.train,
        &TrainOptions::default(),
    )
    .unwrap();
    let direct = digital_eval(Some(&patch), &test_set, &det, &spec.eval).unwrap();
    assert_eq!(row.mean, Some(direct.mean));
}

fn cli(out: &Path, args: &[&str]) -> String {
    let output = Command::new(env!("CARGO_BIN_EXE_cloak"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "cloak {args:?}: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn cli_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    cli(&corpus, &["synth-corpus", "--count", "3"]);
    assert!(load_scene_set(&corpus, SplitTag::Train).unwrap().len() == 3);

    let run = dir.path().join("run");
    let overrides = [
        "--set",
        "patch.height=12",
        "--set",
        "patch.width=8",
        "--set",
        "data.synthetic_test=3",
    ];
    let mut args = vec!["train", "--epochs", "2", "--batch-size", "4"];
    args.extend(overrides);
    let stdout = cli(&run, &args);
    assert!(stdout.contains("trained 2 epochs"), "{stdout}");
    assert!(run.join("patch.png").exists());
    assert!(run.join("report.csv").exists());

    let eval = dir.path().join("eval");
    let patch = run.join("patch.png");
    let mut args = vec![
        "eval-digital",
        "--patch",
        patch.to_str().unwrap(),
        "--repetitions",
        "2",
    ];
    args.extend(overrides);
    cli(&eval, &args);
    let csv = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(csv.starts_with("condition,n_all,n_undetected,rs_percent\n"));

    let rerendered = dir.path().join("again");
    cli(
        &rerendered,
        &[
            "report",
            "--input",
            eval.join("report.json").to_str().unwrap(),
        ],
    );
    assert_eq!(
        std::fs::read_to_string(rerendered.join("report.csv")).unwrap(),
        csv
    );
}
