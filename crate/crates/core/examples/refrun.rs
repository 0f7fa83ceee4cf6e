//! Reference mini-profile run: trains the toy detector, runs every attack
//! configuration the acceptance checks care about, and prints the numbers.
//! Used to pin seeds and verify orderings before freezing them in tests.
//!
//! Usage: cargo run --release --example refrun [phase...]
//! Phases: train, baselines, placements, targeted, materials, counts,
//! perturb, severity, defense (default: train baselines placements).

use std::time::Instant;

use xraykit::attack::{run_attack, run_baseline, AttackConfig, Baseline, PlacementStrategy};
use xraykit::detector::{train_detector, DetectorConfig, LossMode, TrainParams};
use xraykit::metrics::{evaluate_detector, perturb_eval, PerturbMode};
use xraykit::physics::MaterialId;
use xraykit::placement::ReinforceConfig;
use xraykit::scene::{generate_scene, Dataset, SceneSpec};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let phases: Vec<&str> = if args.is_empty() {
        vec!["train", "baselines", "placements"]
    } else {
        args.iter().map(String::as_str).collect()
    };

    let spec = SceneSpec::mini();
    let n_train = 300;
    let n_test = 16;
    let t0 = Instant::now();
    let train_scenes: Vec<_> = (0..n_train)
        .map(|i| generate_scene(&spec, 1000 + i as u64).unwrap())
        .collect();
    let test_scenes: Vec<_> = (0..n_test)
        .map(|i| generate_scene(&spec, 9000 + i as u64).unwrap())
        .collect();
    let train_data = Dataset::from_scenes(&train_scenes, &spec.class_names);
    let test_data = Dataset::from_scenes(&test_scenes, &spec.class_names);
    println!("scene generation: {:.1}s", t0.elapsed().as_secs_f64());

    let det_cfg = DetectorConfig { score_threshold: 0.25, ..DetectorConfig::mini(4) };
    let ckpt = std::path::Path::new("/tmp/refrun_detector.ckpt");
    let detector = if ckpt.exists() && !phases.contains(&"train") {
        xraykit::detector::ToyDetector::load(ckpt).unwrap()
    } else {
        let train_params = TrainParams { epochs: 32, lr: 0.003, ..TrainParams::default() };
        let t1 = Instant::now();
        let (detector, log) = train_detector(&train_data, &det_cfg, &train_params, 42).unwrap();
        println!(
            "train: {:.1}s, curve {:?}",
            t1.elapsed().as_secs_f64(),
            log.map_curve
        );
        detector.save(ckpt).unwrap();
        detector
    };
    let clean = evaluate_detector(&detector, &test_data.images, &test_data.annotations, "clean")
        .unwrap();
    println!("clean test mAP = {:.2}, fn = {}", clean.map, clean.fn_count);
    for c in &clean.per_class_ap {
        println!("  class {}: AP {:?} over {} gt", c.class_id, c.ap, c.gt_count);
    }

    if !phases.iter().any(|p| *p != "train") {
        return;
    }

    let attack_cfg = AttackConfig {
        reinforce: ReinforceConfig { n_iters: 120, ..ReinforceConfig::default() },
        ..AttackConfig::default()
    };
    let annotations = test_data.annotations.clone();
    let eval_images = |images: &[ndarray::Array3<f64>], label: &str| {
        let report = evaluate_detector(&detector, images, &annotations, label).unwrap();
        println!("{label}: mAP {:.2}, fn {}", report.map, report.fn_count);
        report
    };

    let mut xadv_result = None;
    if phases.contains(&"baselines") || phases.contains(&"placements") || phases.contains(&"perturb") {
        for (name, baseline) in [
            ("vanilla", Baseline::Vanilla),
            ("meshadv", Baseline::MeshAdv),
            ("advpatch", Baseline::AdvPatch),
        ] {
            if !phases.contains(&"baselines") {
                break;
            }
            let t = Instant::now();
            let results = run_baseline(&test_scenes, &detector, &attack_cfg, baseline, 7).unwrap();
            let images: Vec<_> = results.iter().flat_map(|r| r.images.clone()).collect();
            let _ = eval_images(&images, name);
            println!("  ({:.1}s)", t.elapsed().as_secs_f64());
        }
        let t = Instant::now();
        let results =
            run_attack(&test_scenes, &detector, &attack_cfg, PlacementStrategy::Reinforce, 7)
                .unwrap();
        let images: Vec<_> = results.iter().flat_map(|r| r.images.clone()).collect();
        let _ = eval_images(&images, "xadv (reinforce)");
        println!("  ({:.1}s)", t.elapsed().as_secs_f64());
        xadv_result = Some(results);
    }

    if phases.contains(&"placements") {
        for (name, strategy) in [
            ("fix", PlacementStrategy::Fix),
            ("random", PlacementStrategy::Random),
            ("greedy", PlacementStrategy::Greedy),
        ] {
            let t = Instant::now();
            let results = run_attack(&test_scenes, &detector, &attack_cfg, strategy, 7).unwrap();
            let images: Vec<_> = results.iter().flat_map(|r| r.images.clone()).collect();
            let _ = eval_images(&images, name);
            println!("  ({:.1}s)", t.elapsed().as_secs_f64());
        }
    }

    if phases.contains(&"targeted") {
        let cfg = AttackConfig { mode: LossMode::TargetedBackground, ..attack_cfg.clone() };
        let results =
            run_attack(&test_scenes, &detector, &cfg, PlacementStrategy::Reinforce, 7).unwrap();
        let images: Vec<_> = results.iter().flat_map(|r| r.images.clone()).collect();
        let _ = eval_images(&images, "targeted");
    }

    if phases.contains(&"materials") {
        for material in [MaterialId::Aluminum, MaterialId::Plastic] {
            let cfg = AttackConfig { material: material.clone(), ..attack_cfg.clone() };
            let results =
                run_attack(&test_scenes, &detector, &cfg, PlacementStrategy::Reinforce, 7)
                    .unwrap();
            let images: Vec<_> = results.iter().flat_map(|r| r.images.clone()).collect();
            let _ = eval_images(&images, material.name());
        }
    }

    if phases.contains(&"counts") {
        for n in [1usize, 2, 8] {
            let cfg = AttackConfig {
                num_objects: n,
                constant_total_area: true,
                ..attack_cfg.clone()
            };
            let results =
                run_attack(&test_scenes, &detector, &cfg, PlacementStrategy::Reinforce, 7)
                    .unwrap();
            let images: Vec<_> = results.iter().flat_map(|r| r.images.clone()).collect();
            let _ = eval_images(&images, &format!("{n} objects (fp {})", cfg.effective_footprint()));
        }
    }

    if phases.contains(&"perturb") {
        if let Some(results) = &xadv_result {
            for mode in [PerturbMode::Best, PerturbMode::Change, PerturbMode::Random] {
                let report =
                    perturb_eval(&results[0], &test_scenes, &detector, mode, 11).unwrap();
                println!("perturb {mode:?}: mAP {:.2}", report.map);
            }
        }
    }

    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
