//! Trains a patch against the bundled toy detector and prints the loss
//! trajectory and the digital attack success on held-out scenes.
//!
//! `cargo run --release --example toy_attack -- [epochs] [lambda_tv] [lambda_nps] [mu] [variant]`

use cloak::detector::ToyDetector;
use cloak::evaluation::{digital_eval, EvalConfig};
use cloak::palette::Palette;
use cloak::patch::{new_patch, InitSpec};
use cloak::scene::SplitTag;
use cloak::synthetic::synthetic_set;
use cloak::trainer::{train, TrainConfig, TrainOptions};
use cloak::transforms::{EotConfig, Variant};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let mut cfg = TrainConfig {
        epochs: arg(0, "200").parse()?,
        seed: 3,
        ..TrainConfig::default()
    };
    cfg.weights.lambda_tv = arg(1, &cfg.weights.lambda_tv.to_string()).parse()?;
    cfg.weights.lambda_nps = arg(2, &cfg.weights.lambda_nps.to_string()).parse()?;
    cfg.weights.mu_disappear = arg(3, "0").parse()?;
    cfg.eot = EotConfig::variant(arg(4, "conventional").parse::<Variant>()?);

    let det = ToyDetector::bundled()?;
    let train_set = synthetic_set(16, 100, SplitTag::Train)?;
    let test_set = synthetic_set(16, 200, SplitTag::Test)?;
    let init = new_patch(45, 30, &InitSpec::Random { seed: 7 })?;
    let started = std::time::Instant::now();
    let at_init = digital_eval(Some(&init), &test_set, &det, &EvalConfig::default())?;
    println!("init patch: mean R_s {:.1}%", at_init.mean);
    let (patch, history) = train(
        &init,
        &train_set,
        &det,
        &Palette::default_printable(),
        &cfg,
        &TrainOptions::default(),
    )?;
    for r in history
        .records
        .iter()
        .filter(|r| r.epoch == 1 || r.epoch % 10 == 0)
    {
        println!(
            "epoch {:>4} detection {:.4} tv {:.1} nps {:.1} disappear {:.4} total {:.4}",
            r.epoch, r.loss.detection, r.loss.tv, r.loss.nps, r.loss.disappear, r.loss.total
        );
    }
    println!("trained in {:.1}s", started.elapsed().as_secs_f64());
    let eval = EvalConfig::default();
    let clean = digital_eval(None, &test_set, &det, &eval)?;
    let attacked = digital_eval(Some(&patch), &test_set, &det, &eval)?;
    println!(
        "baseline persons {} of {}",
        attacked.n_all, attacked.n_ground_truth
    );
    println!("no patch: mean R_s {:.1}%", clean.mean);
    println!(
        "patched:  mean R_s {:.1}% (min {:.1}, max {:.1})",
        attacked.mean, attacked.min, attacked.max
    );
    Ok(())
}
