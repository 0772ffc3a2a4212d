//! Regenerates the bundled toy detector fixture.
//!
//! `cargo run --release --example pretrain_toy_detector -- [out_dir]`

use cloak::detector::pretrain::{pretrain, PretrainConfig};
use cloak::detector::toy::ToyNet;
use cloak::detector::{decode_grid, extract_person_score, DetectorAdapter, ScoreMode, ToyDetector};
use cloak::synthetic::canonical_person_scene;
use cloak::RgbImage;

fn person_score(det: &ToyDetector, image: &RgbImage) -> f64 {
    let raw = det.forward(image).expect("forward");
    let grid = decode_grid(&raw, det.descriptor()).expect("decode");
    extract_person_score(&grid, 0, ScoreMode::Product).expect("score")
}

fn main() -> cloak::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/core/fixtures".into());
    let (desc, layers) = ToyDetector::default_descriptor();
    let init = ToyDetector::new(desc, ToyNet::init(&layers, 11))?;
    let mut cfg = PretrainConfig::default();
    if let Some(v) = std::env::var("OCCLUDER_PROB")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        cfg.occluder_prob = v;
    }
    let (mut det, history) = pretrain(&init, &cfg)?;
    det.quantize_f32();
    let blank = person_score(&det, &RgbImage::filled(64, 64, [0.2, 0.2, 0.2]));
    let canonical = person_score(&det, &canonical_person_scene().image);
    println!(
        "final loss {:.4}",
        history.last().copied().unwrap_or(f64::NAN)
    );
    println!("blank person score {blank:.4}, canonical person score {canonical:.4}");
    if (blank >= 0.3 || canonical <= 0.7) && std::env::var_os("FORCE").is_none() {
        eprintln!("sanity gates failed; fixture not written");
        std::process::exit(1);
    }
    det.save_dir(&out)?;
    println!("wrote {out}");
    Ok(())
}
