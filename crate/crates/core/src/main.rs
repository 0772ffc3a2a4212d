use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use cloak::config::Config;
use cloak::detector::ToyDetector;
use cloak::evaluation::{
    digital_eval, emit_report, photo_eval, sweep, Curve, Report, SweepEntry, SweepSpec,
};
use cloak::synthetic::synthetic_set;
use cloak::trainer::{resume, train, TrainOptions};
use cloak::transforms::{EotConfig, Variant};
use cloak::{load_scene_set, new_patch, Palette, Patch, SceneSet, SplitTag};

#[derive(Parser)]
#[command(
    name = "cloak",
    version,
    about = "Train and evaluate adversarial wearable patches against grid detectors"
)]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training and evaluation (overrides train.seed and eval.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config override `key.path=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimise a patch, checkpointing into --out, then evaluate it digitally.
    Train(TrainArgs),
    /// Repeated digital protocol on the test set.
    EvalDigital(EvalDigitalArgs),
    /// Evaluate a <scene>/<distance>/<angle> photo or frame tree.
    EvalPhotos(EvalPhotosArgs),
    /// Train and rank one patch per initialisation listed in a sweep file.
    Sweep(SweepArgs),
    /// Re-render CSV and plots from a report.json.
    Report(ReportArgs),
    /// Write a procedural toy corpus (images/ + annotations/).
    SynthCorpus(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Continue from the checkpoint in this directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs, leaving a resumable checkpoint.
    #[arg(long)]
    halt_after: Option<usize>,
    /// train.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// train.batch_size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Transform family preset: conventional, radian, wrinkle, angle, occlusion, combined.
    #[arg(long)]
    variant: Option<Variant>,
    /// patch.init
    #[arg(long)]
    init: Option<String>,
    /// Skip the digital evaluation after training.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Args)]
struct EvalDigitalArgs {
    /// Patch PNG; omit with --no-patch for the clean baseline.
    #[arg(long, required_unless_present = "no_patch")]
    patch: Option<PathBuf>,
    #[arg(long)]
    no_patch: bool,
    /// eval.repetitions
    #[arg(long)]
    repetitions: Option<usize>,
    /// eval.score_threshold
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct EvalPhotosArgs {
    /// Root of the photo tree.
    #[arg(long)]
    root: PathBuf,
    /// eval.score_threshold
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML file with `[[entries]]` tables: name, init, color, shape.
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json written by an earlier run.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value = "train")]
    split: SplitTag,
}

#[derive(Deserialize)]
struct SweepFile {
    entries: Vec<SweepFileEntry>,
}

#[derive(Deserialize)]
struct SweepFileEntry {
    name: String,
    init: String,
    #[serde(default)]
    color: String,
    #[serde(default)]
    shape: String,
}

fn build_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("train.seed={s}"));
        overrides.push(format!("eval.seed={s}"));
    }
    match &cli.command {
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                overrides.push(format!("train.epochs={e}"));
            }
            if let Some(b) = a.batch_size {
                overrides.push(format!("train.batch_size={b}"));
            }
            if let Some(i) = &a.init {
                overrides.push(format!("patch.init={i:?}"));
            }
        }
        Command::EvalDigital(a) => {
            if let Some(r) = a.repetitions {
                overrides.push(format!("eval.repetitions={r}"));
            }
            if let Some(t) = a.threshold {
                overrides.push(format!("eval.score_threshold={t}"));
            }
        }
        Command::EvalPhotos(a) => {
            if let Some(t) = a.threshold {
                overrides.push(format!("eval.score_threshold={t}"));
            }
        }
        _ => {}
    }
    let mut cfg = Config::load(cli.config.as_deref(), &overrides)?;
    if let Command::Train(TrainArgs {
        variant: Some(v), ..
    }) = &cli.command
    {
        cfg.train.eot.enabled = EotConfig::variant(*v).enabled;
    }
    Ok(cfg)
}

fn detector(cfg: &Config) -> anyhow::Result<ToyDetector> {
    Ok(match &cfg.data.detector {
        Some(dir) => ToyDetector::load_dir(dir)
            .with_context(|| format!("loading detector from {}", dir.display()))?,
        None => ToyDetector::bundled()?,
    })
}

fn palette(cfg: &Config) -> anyhow::Result<Palette> {
    Ok(match &cfg.data.palette {
        Some(p) => Palette::load(p)?,
        None => Palette::default_printable(),
    })
}

fn scenes(cfg: &Config, split: SplitTag) -> anyhow::Result<SceneSet> {
    let root = match split {
        SplitTag::Train => &cfg.data.train_root,
        SplitTag::Test => &cfg.data.test_root,
    };
    Ok(match root {
        Some(r) => load_scene_set(r, split)?,
        None => {
            let (n, salt) = match split {
                SplitTag::Train => (cfg.data.synthetic_train, 0),
                SplitTag::Test => (cfg.data.synthetic_test, 1),
            };
            log::info!("no {split:?} corpus configured; using {n} procedural scenes");
            synthetic_set(
                n,
                cfg.data.synthetic_seed.wrapping_mul(2).wrapping_add(salt),
                split,
            )?
        }
    })
}

fn load_patch(path: &Path, cfg: &Config) -> anyhow::Result<Patch> {
    Ok(Patch::load_png(path)?.with_aspect_hint(cfg.patch.aspect_hint)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Report(a) = &cli.command {
        let report = Report::load_json(&a.input)?;
        for p in emit_report(&report, &cli.out)? {
            println!("{}", p.display());
        }
        return Ok(());
    }
    let cfg = build_config(&cli)?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    std::fs::write(cli.out.join("config.toml"), cfg.to_toml()?)?;
    let det = detector(&cfg)?;

    match &cli.command {
        Command::Train(a) => {
            let train_set = scenes(&cfg, SplitTag::Train)?;
            let opts = TrainOptions {
                checkpoint_dir: Some(cli.out.join("checkpoint")),
                halt_after: a.halt_after,
            };
            let (patch, history) = match &a.resume {
                Some(dir) => resume(dir, &train_set, &det, &opts)?,
                None => {
                    let init =
                        new_patch(cfg.patch.height, cfg.patch.width, &cfg.patch.init_spec()?)?
                            .with_aspect_hint(cfg.patch.aspect_hint)?;
                    train(&init, &train_set, &det, &palette(&cfg)?, &cfg.train, &opts)?
                }
            };
            patch.save_png(cli.out.join("patch.png"))?;
            patch
                .pixels()
                .save_8bit(cli.out.join("patch_preview.png"))?;
            let mut report = Report {
                title: "train".into(),
                history: Some(history.clone()),
                ..Report::default()
            };
            if history.finished && !a.no_eval {
                let test_set = scenes(&cfg, SplitTag::Test)?;
                let d = digital_eval(Some(&patch), &test_set, &det, &cfg.eval)?;
                println!(
                    "digital R_s: mean {:.2}% (min {:.2}%, max {:.2}%)",
                    d.mean, d.min, d.max
                );
                report.rows = d.rows();
                report.digital = Some(d);
            }
            emit_report(&report, &cli.out)?;
            println!(
                "trained {} epochs{}; outputs in {}",
                history.records.len(),
                if history.finished {
                    ""
                } else {
                    " (halted, resumable)"
                },
                cli.out.display()
            );
        }
        Command::EvalDigital(a) => {
            let test_set = scenes(&cfg, SplitTag::Test)?;
            let patch = match (&a.patch, a.no_patch) {
                (_, true) => None,
                (Some(p), false) => Some(load_patch(p, &cfg)?),
                (None, false) => bail!("--patch or --no-patch is required"),
            };
            let d = digital_eval(patch.as_ref(), &test_set, &det, &cfg.eval)?;
            println!(
                "persons detected without patch: {} of {}",
                d.n_all, d.n_ground_truth
            );
            println!(
                "digital R_s: mean {:.2}% (min {:.2}%, max {:.2}%)",
                d.mean, d.min, d.max
            );
            let curve = Curve {
                name: "rs_per_repetition".into(),
                x: (1..=d.rs_percent.len()).map(|i| i as f64).collect(),
                series: vec![("rs".into(), d.rs_percent.clone())],
            };
            let report = Report {
                title: "eval-digital".into(),
                rows: d.rows(),
                digital: Some(d),
                curves: vec![curve],
                ..Report::default()
            };
            emit_report(&report, &cli.out)?;
        }
        Command::EvalPhotos(a) => {
            let p = photo_eval(&a.root, &det, &cfg.eval)?;
            for c in &p.conditions {
                println!(
                    "{}: {}/{} undetected, R_s {:.2}%",
                    c.key, c.n_undetected, c.n_all, c.rs_percent
                );
            }
            let report = Report {
                title: "eval-photos".into(),
                rows: p.rows(),
                photo: Some(p),
                ..Report::default()
            };
            emit_report(&report, &cli.out)?;
        }
        Command::Sweep(a) => {
            let text = std::fs::read_to_string(&a.spec)
                .with_context(|| format!("reading {}", a.spec.display()))?;
            let file: SweepFile =
                toml::from_str(&text).with_context(|| format!("parsing {}", a.spec.display()))?;
            let entries = file
                .entries
                .into_iter()
                .map(|e| {
                    Ok(SweepEntry {
                        init: e.init.parse()?,
                        name: e.name,
                        color_tag: e.color,
                        shape_tag: e.shape,
                    })
                })
                .collect::<cloak::Result<Vec<_>>>()?;
            let spec = SweepSpec {
                entries,
                patch_size: (cfg.patch.height, cfg.patch.width),
                train: cfg.train.clone(),
                eval: cfg.eval.clone(),
            };
            let train_set = scenes(&cfg, SplitTag::Train)?;
            let test_set = scenes(&cfg, SplitTag::Test)?;
            let s = sweep(&spec, &train_set, &test_set, &det, &palette(&cfg)?)?;
            for r in &s.rows {
                match (r.mean, &r.error) {
                    (Some(m), _) => println!("{:<24} {:>7.2}%  {:?}", r.name, m, r.class_histogram),
                    (None, Some(e)) => println!("{:<24} failed: {e}", r.name),
                    (None, None) => {}
                }
            }
            let report = Report {
                title: "sweep".into(),
                sweep: Some(s),
                ..Report::default()
            };
            emit_report(&report, &cli.out)?;
        }
        Command::SynthCorpus(a) => {
            let salt = match a.split {
                SplitTag::Train => 0,
                SplitTag::Test => 1,
            };
            let set = synthetic_set(
                a.count,
                cfg.data.synthetic_seed.wrapping_mul(2).wrapping_add(salt),
                a.split,
            )?;
            set.save(&cli.out)?;
            println!("wrote {} scenes to {}", set.len(), cli.out.display());
        }
        Command::Report(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
