use std::time::Instant;
use xraykit::detector::{train_detector, DetectorConfig, TrainParams};
use xraykit::metrics::evaluate_detector;
use xraykit::scene::{generate_scene, Dataset, SceneSpec};

fn main() {
    let spec = SceneSpec::mini();
    let train_scenes: Vec<_> = (0..200).map(|i| generate_scene(&spec, 1000 + i).unwrap()).collect();
    let test_scenes: Vec<_> = (0..16).map(|i| generate_scene(&spec, 9000 + i).unwrap()).collect();
    let train = Dataset::from_scenes(&train_scenes, &spec.class_names);
    let test = Dataset::from_scenes(&test_scenes, &spec.class_names);

    for (lr, epochs) in [(0.003, 40usize)] {
        let cfg = DetectorConfig { score_threshold: 0.25, ..DetectorConfig::mini(4) };
        let params = TrainParams { epochs, lr, eval_every: 10, ..TrainParams::default() };
        let t = Instant::now();
        let (det, log) = train_detector(&train, &cfg, &params, 42).unwrap();
        let report = evaluate_detector(&det, &test.images, &test.annotations, "t").unwrap();
        println!(
            "adam+context lr={lr} epochs={epochs}: test mAP {:.2} fn {} (final loss {:.2}, curve {:?}) in {:.0}s",
            report.map, report.fn_count, log.epoch_loss.last().unwrap(), log.map_curve, t.elapsed().as_secs_f64()
        );
        for c in &report.per_class_ap {
            println!("  class {}: AP {:?} over {} gt", c.class_id, c.ap.map(|v| v.round()), c.gt_count);
        }
    }
}
