//! Detection metrics and evaluation reports: mAP@0.5 with all-points
//! interpolation, false-negative counts at high confidence, TP/FP
//! confidence histograms, placement-perturbation and transfer evaluation.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::attack::AttackResult;
use crate::detector::{Detection, Detector};
use crate::error::{Error, Result};
use crate::exec;
use crate::scene::{composite, Annotation, Scene};

pub const DEFAULT_IOU: f64 = 0.5;
pub const FN_CONFIDENCE: f64 = 0.8;

/// Per-class average precision. `ap` is `None` for classes with no ground
/// truth (excluded from the mean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: Option<f64>,
    pub gt_count: usize,
}

/// Evaluation summary for one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: String,
    /// Mean AP over classes with at least one ground-truth instance, 0-100.
    pub map: f64,
    pub per_class_ap: Vec<ClassAp>,
    /// Ground-truth boxes with no confident matching detection.
    pub fn_count: usize,
    /// Confidence histograms (bin width 0.1) of matched / unmatched
    /// detections.
    pub tp_hist: [usize; 10],
    pub fp_hist: [usize; 10],
    pub n_images: usize,
    pub n_detections: usize,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Columnar text table for logs.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("setting: {}\n", self.setting));
        out.push_str(&format!(
            "images: {}  detections: {}  fn@{:.1}: {}\n",
            self.n_images, self.n_detections, FN_CONFIDENCE, self.fn_count
        ));
        out.push_str(&format!("{:<10} {:>10} {:>8}\n", "class", "AP", "gt"));
        for c in &self.per_class_ap {
            match c.ap {
                Some(ap) => out.push_str(&format!("{:<10} {:>10.2} {:>8}\n", c.class_id, ap, c.gt_count)),
                None => out.push_str(&format!("{:<10} {:>10} {:>8}\n", c.class_id, "-", c.gt_count)),
            }
        }
        out.push_str(&format!("{:<10} {:>10.2}\n", "mAP", self.map));
        for note in &self.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out
    }
}

/// Greedy matches of detections to ground truth for one class over a whole
/// dataset: detections in descending confidence, each GT used at most once,
/// difficult GT ignored.
struct ClassMatches {
    /// (confidence, is_tp, ignored) per detection, sorted by confidence desc.
    flags: Vec<(f64, bool, bool)>,
    n_positive: usize,
}

fn match_class(
    detections: &[Vec<Detection>],
    annotations: &[Vec<Annotation>],
    class_id: usize,
    iou_threshold: f64,
) -> ClassMatches {
    let mut dets: Vec<(usize, &Detection)> = Vec::new();
    for (img, ds) in detections.iter().enumerate() {
        for d in ds.iter().filter(|d| d.class_id == class_id) {
            dets.push((img, d));
        }
    }
    dets.sort_by(|a, b| {
        b.1.confidence
            .partial_cmp(&a.1.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });

    let mut used: Vec<Vec<bool>> =
        annotations.iter().map(|anns| vec![false; anns.len()]).collect();
    let mut n_positive = 0;
    for anns in annotations {
        n_positive += anns.iter().filter(|a| a.class_id == class_id && !a.difficult).count();
    }

    let mut flags = Vec::with_capacity(dets.len());
    for (img, det) in dets {
        let anns = &annotations[img];
        let mut best: Option<(usize, f64)> = None;
        for (gi, ann) in anns.iter().enumerate() {
            if ann.class_id != class_id || used[img][gi] {
                continue;
            }
            let iou = det.corners().iou(&ann.bbox);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) if anns[gi].difficult => {
                flags.push((det.confidence, false, true)); // ignored
                used[img][gi] = true;
            }
            Some((gi, _)) => {
                flags.push((det.confidence, true, false));
                used[img][gi] = true;
            }
            None => flags.push((det.confidence, false, false)),
        }
    }
    ClassMatches { flags, n_positive }
}

/// Average precision with all-points interpolation (each recall point takes
/// the maximum precision to its right).
fn average_precision(matches: &ClassMatches) -> Option<f64> {
    if matches.n_positive == 0 {
        return None;
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    for &(_, is_tp, ignored) in &matches.flags {
        if ignored {
            continue;
        }
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        points.push((tp / matches.n_positive as f64, tp / (tp + fp)));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < points.len() {
        let recall = points[i].0;
        let max_right = points[i..].iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        ap += (recall - prev_recall) * max_right;
        prev_recall = recall;
        while i < points.len() && points[i].0 == recall {
            i += 1;
        }
    }
    Some(ap * 100.0)
}

/// Per-class AP and mAP@`iou_threshold` over a dataset.
pub fn compute_map(
    detections: &[Vec<Detection>],
    annotations: &[Vec<Annotation>],
    iou_threshold: f64,
    num_classes: usize,
) -> EvalReport {
    assert_eq!(detections.len(), annotations.len(), "image count mismatch");
    let mut per_class_ap = Vec::new();
    let mut notes = Vec::new();
    let mut sum = 0.0;
    let mut counted = 0;
    for class_id in 1..num_classes {
        let matches = match_class(detections, annotations, class_id, iou_threshold);
        let ap = average_precision(&matches);
        match ap {
            Some(v) => {
                sum += v;
                counted += 1;
            }
            None => notes.push(format!("class {class_id} has no ground truth; excluded from mAP")),
        }
        per_class_ap.push(ClassAp { class_id, ap, gt_count: matches.n_positive });
    }
    let map = if counted > 0 { sum / counted as f64 } else { 0.0 };
    let (tp_hist, fp_hist) =
        confidence_distributions(detections, annotations, iou_threshold, num_classes);
    let fn_count = count_fn(detections, annotations, FN_CONFIDENCE, iou_threshold);
    EvalReport {
        setting: String::new(),
        map,
        per_class_ap,
        fn_count,
        tp_hist,
        fp_hist,
        n_images: detections.len(),
        n_detections: detections.iter().map(Vec::len).sum(),
        notes,
    }
}

/// Ground-truth boxes with no same-class detection at or above `confidence`
/// and `iou_threshold`. Higher means stronger concealment.
pub fn count_fn(
    detections: &[Vec<Detection>],
    annotations: &[Vec<Annotation>],
    confidence: f64,
    iou_threshold: f64,
) -> usize {
    let mut count = 0;
    for (dets, anns) in detections.iter().zip(annotations) {
        for ann in anns.iter().filter(|a| !a.difficult) {
            let covered = dets.iter().any(|d| {
                d.class_id == ann.class_id
                    && d.confidence >= confidence
                    && d.corners().iou(&ann.bbox) >= iou_threshold
            });
            if !covered {
                count += 1;
            }
        }
    }
    count
}

/// Confidence histograms (bin width 0.1) of TP and FP detections, where TP
/// status comes from the same greedy matching as [`compute_map`].
pub fn confidence_distributions(
    detections: &[Vec<Detection>],
    annotations: &[Vec<Annotation>],
    iou_threshold: f64,
    num_classes: usize,
) -> ([usize; 10], [usize; 10]) {
    let mut tp_hist = [0usize; 10];
    let mut fp_hist = [0usize; 10];
    for class_id in 1..num_classes {
        let matches = match_class(detections, annotations, class_id, iou_threshold);
        for (conf, is_tp, ignored) in matches.flags {
            if ignored {
                continue;
            }
            let bin = ((conf * 10.0).floor() as usize).min(9);
            if is_tp {
                tp_hist[bin] += 1;
            } else {
                fp_hist[bin] += 1;
            }
        }
    }
    (tp_hist, fp_hist)
}

/// Runs a detector over a set of images (parallel across images, output in
/// input order) and evaluates against annotations.
pub fn evaluate_detector(
    handle: &dyn Detector,
    images: &[Array3<f64>],
    annotations: &[Vec<Annotation>],
    setting: &str,
) -> Result<EvalReport> {
    let detections: Vec<Vec<Detection>> =
        exec::map_slice(images, |img| handle.detect(img).unwrap_or_default());
    let mut report =
        compute_map(&detections, annotations, DEFAULT_IOU, handle.config().num_classes);
    report.setting = setting.to_string();
    Ok(report)
}

/// Placement-perturbation mode for physical-feasibility evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    /// As-optimized locations.
    Best,
    /// Shift within +-10 px per axis and rotate in-plane within +-30 deg.
    Change,
    /// Uniform placement over the whole image.
    Random,
}

impl std::str::FromStr for PerturbMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best" => Ok(PerturbMode::Best),
            "change" => Ok(PerturbMode::Change),
            "random" => Ok(PerturbMode::Random),
            other => Err(Error::Validation(format!("unknown perturb mode {other:?}"))),
        }
    }
}

/// Re-composites an attack result under placement perturbations and
/// evaluates the detector on it. Deterministic given the seed.
pub fn perturb_eval(
    result: &AttackResult,
    scenes: &[Scene],
    handle: &dyn Detector,
    mode: PerturbMode,
    seed: u64,
) -> Result<EvalReport> {
    if scenes.len() != result.locations.len() {
        return Err(Error::Validation(format!(
            "{} scenes but {} location sets",
            scenes.len(),
            result.locations.len()
        )));
    }
    let images = perturbed_images(result, scenes, mode, seed)?;
    let annotations: Vec<Vec<Annotation>> = scenes.iter().map(|s| s.annotations.clone()).collect();
    let mut report = evaluate_detector(handle, &images, &annotations, "")?;
    report.setting = format!("perturb-{mode:?}").to_lowercase();
    Ok(report)
}

/// The composited images [`perturb_eval`] scores.
pub fn perturbed_images(
    result: &AttackResult,
    scenes: &[Scene],
    mode: PerturbMode,
    seed: u64,
) -> Result<Vec<Array3<f64>>> {
    let mut images = Vec::with_capacity(scenes.len());
    for (si, scene) in scenes.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (si as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let (iw, ih) = scene.size();
        let mut image = scene.base_image.clone();
        for (mi, mesh) in result.meshes.iter().enumerate() {
            let base_loc = result.locations[si][mi];
            let mut depth = crate::scene::project_object(mesh, base_loc, result.pixel_pitch)?;
            let (dh, dw) = depth.grid.dim();
            match mode {
                PerturbMode::Best => {}
                PerturbMode::Change => {
                    let dx = rng.random_range(-10i64..=10);
                    let dy = rng.random_range(-10i64..=10);
                    let rot = rng.random_range(-30.0..=30.0);
                    depth = depth.rotated(rot);
                    depth.origin = clamp_origin(
                        (base_loc.0 - 2 + dx, base_loc.1 - 2 + dy),
                        (dw, dh),
                        (iw, ih),
                    );
                }
                PerturbMode::Random => {
                    let x = rng.random_range(0..(iw as i64 - dw as i64).max(1));
                    let y = rng.random_range(0..(ih as i64 - dh as i64).max(1));
                    depth.origin = (x, y);
                }
            }
            image = composite(&image, &depth.cropped_to(iw, ih), &result.material)?;
        }
        images.push(image);
    }
    Ok(images)
}

fn clamp_origin(origin: (i64, i64), size: (usize, usize), canvas: (usize, usize)) -> (i64, i64) {
    (
        origin.0.clamp(0, (canvas.0 as i64 - size.0 as i64).max(0)),
        origin.1.clamp(0, (canvas.1 as i64 - size.1 as i64).max(0)),
    )
}

/// Evaluates attack images generated against detector A under detector B.
/// The report carries the (source, target) labels.
pub fn transfer_eval(
    result: &AttackResult,
    scenes: &[Scene],
    source_label: &str,
    target: &dyn Detector,
    target_label: &str,
) -> Result<EvalReport> {
    if result.images.len() != scenes.len() {
        return Err(Error::Validation(format!(
            "attack result has {} images but {} scenes were supplied",
            result.images.len(),
            scenes.len()
        )));
    }
    let annotations: Vec<Vec<Annotation>> = scenes.iter().map(|s| s.annotations.clone()).collect();
    let mut report = evaluate_detector(target, &result.images, &annotations, "")?;
    report.setting = format!("transfer {source_label} -> {target_label}");
    Ok(report)
}

/// Renders a bar plot of the report's TP/FP confidence histograms.
pub fn plot_histograms(report: &EvalReport, path: &Path) -> Result<()> {
    let (w, h) = (420usize, 240usize);
    let mut img = image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255, 255, 255]));
    let max = report
        .tp_hist
        .iter()
        .chain(report.fp_hist.iter())
        .cloned()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let base_y = h - 30;
    let plot_h = (h - 60) as f64;
    for bin in 0..10 {
        for (series, color, offset) in [
            (&report.tp_hist, image::Rgb([60u8, 120, 60]), 0usize),
            (&report.fp_hist, image::Rgb([170, 60, 60]), 16),
        ] {
            let x0 = 30 + bin * 38 + offset;
            let bar_h = (series[bin] as f64 / max * plot_h) as usize;
            for y in 0..bar_h {
                for x in x0..x0 + 14 {
                    img.put_pixel(x as u32, (base_y - y) as u32, color);
                }
            }
        }
    }
    for x in 25..(w - 10) {
        img.put_pixel(x as u32, base_y as u32 + 1, image::Rgb([0, 0, 0]));
    }
    for y in 20..=base_y + 1 {
        img.put_pixel(24, y as u32, image::Rgb([0, 0, 0]));
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::BBox;

    fn det(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, confidence: f64) -> Detection {
        Detection { cx, cy, w, h, class_id, confidence }
    }

    fn ann(x0: f64, y0: f64, x1: f64, y1: f64, class_id: usize) -> Annotation {
        Annotation { bbox: BBox::new(x0, y0, x1, y1), class_id, difficult: false }
    }

    #[test]
    fn perfect_detections_score_100() {
        let annotations =
            vec![vec![ann(10.0, 10.0, 30.0, 30.0, 1), ann(50.0, 50.0, 70.0, 80.0, 2)]];
        let detections = vec![vec![
            det(20.0, 20.0, 20.0, 20.0, 1, 0.95),
            det(60.0, 65.0, 20.0, 30.0, 2, 0.9),
        ]];
        let report = compute_map(&detections, &annotations, 0.5, 3);
        assert_eq!(report.map, 100.0);
        assert_eq!(report.fn_count, 0);
    }

    #[test]
    fn zero_detections_score_0() {
        let annotations = vec![vec![ann(10.0, 10.0, 30.0, 30.0, 1)]];
        let detections = vec![vec![]];
        let report = compute_map(&detections, &annotations, 0.5, 2);
        assert_eq!(report.map, 0.0);
        assert_eq!(report.fn_count, 1);
    }

    #[test]
    fn late_fp_does_not_lower_interpolated_ap() {
        // 1 GT; TP at 0.9 then FP at 0.8: precision at recall 1 is 1.0.
        let annotations = vec![vec![ann(10.0, 10.0, 30.0, 30.0, 1)]];
        let detections = vec![vec![
            det(20.0, 20.0, 20.0, 20.0, 1, 0.9),
            det(80.0, 80.0, 20.0, 20.0, 1, 0.8),
        ]];
        let report = compute_map(&detections, &annotations, 0.5, 2);
        assert_eq!(report.map, 100.0);
    }

    #[test]
    fn zero_confidence_fp_never_changes_ap() {
        let annotations =
            vec![vec![ann(10.0, 10.0, 30.0, 30.0, 1), ann(60.0, 60.0, 90.0, 90.0, 1)]];
        let mut detections = vec![vec![
            det(20.0, 20.0, 20.0, 20.0, 1, 0.9),
            det(40.0, 40.0, 10.0, 10.0, 1, 0.6),
        ]];
        let before = compute_map(&detections, &annotations, 0.5, 2).map;
        detections[0].push(det(100.0, 100.0, 10.0, 10.0, 1, 0.0));
        let after = compute_map(&detections, &annotations, 0.5, 2).map;
        assert!((before - after).abs() < 1e-12);
    }

    /// Brute-force oracle: recompute precision/recall from scratch at every
    /// confidence threshold, then integrate with the same interpolation.
    fn brute_force_ap(
        detections: &[Vec<Detection>],
        annotations: &[Vec<Annotation>],
        class_id: usize,
        iou: f64,
    ) -> Option<f64> {
        let n_pos: usize = annotations
            .iter()
            .map(|anns| anns.iter().filter(|a| a.class_id == class_id && !a.difficult).count())
            .sum();
        if n_pos == 0 {
            return None;
        }
        let mut confs: Vec<f64> = detections
            .iter()
            .flatten()
            .filter(|d| d.class_id == class_id)
            .map(|d| d.confidence)
            .collect();
        confs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        confs.dedup();
        let mut points = Vec::new();
        for &threshold in &confs {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (img, dets) in detections.iter().enumerate() {
                let mut remaining: Vec<&Annotation> =
                    annotations[img].iter().filter(|a| a.class_id == class_id).collect();
                let mut ds: Vec<&Detection> = dets
                    .iter()
                    .filter(|d| d.class_id == class_id && d.confidence >= threshold)
                    .collect();
                ds.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
                for d in ds {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, g) in remaining.iter().enumerate() {
                        let i = d.corners().iou(&g.bbox);
                        if i >= iou && best.map_or(true, |(_, b)| i > b) {
                            best = Some((gi, i));
                        }
                    }
                    match best {
                        Some((gi, _)) => {
                            remaining.remove(gi);
                            tp += 1.0;
                        }
                        None => fp += 1.0,
                    }
                }
            }
            points.push((tp / n_pos as f64, if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 }));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for i in 0..points.len() {
            let r = points[i].0;
            let max_right = points[i..].iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            if r > prev {
                ap += (r - prev) * max_right;
                prev = r;
            }
        }
        Some(ap * 100.0)
    }

    #[test]
    fn map_matches_brute_force_oracle_on_random_micro_cases() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for case in 0..50 {
            let n_images = rng.random_range(1..3);
            let mut annotations = Vec::new();
            let mut detections = Vec::new();
            for _ in 0..n_images {
                let n_gt = rng.random_range(0..4);
                let mut anns = Vec::new();
                for _ in 0..n_gt {
                    let x0: f64 = rng.random_range(0.0..60.0);
                    let y0: f64 = rng.random_range(0.0..60.0);
                    anns.push(ann(
                        x0,
                        y0,
                        x0 + rng.random_range(8.0..30.0),
                        y0 + rng.random_range(8.0..30.0),
                        rng.random_range(1..3),
                    ));
                }
                let n_det = rng.random_range(0..6);
                let mut dets = Vec::new();
                for _ in 0..n_det {
                    if !anns.is_empty() && rng.random_range(0.0..1.0) < 0.6 {
                        let g = &anns[rng.random_range(0..anns.len())];
                        let (cx, cy) = g.bbox.center();
                        dets.push(det(
                            cx + rng.random_range(-6.0..6.0),
                            cy + rng.random_range(-6.0..6.0),
                            g.bbox.width() * rng.random_range(0.7..1.3),
                            g.bbox.height() * rng.random_range(0.7..1.3),
                            g.class_id,
                            rng.random_range(0.05..1.0),
                        ));
                    } else {
                        dets.push(det(
                            rng.random_range(10.0..90.0),
                            rng.random_range(10.0..90.0),
                            rng.random_range(5.0..25.0),
                            rng.random_range(5.0..25.0),
                            rng.random_range(1..3),
                            rng.random_range(0.05..1.0),
                        ));
                    }
                }
                annotations.push(anns);
                detections.push(dets);
            }
            let report = compute_map(&detections, &annotations, 0.5, 3);
            for class_id in 1..3 {
                let oracle = brute_force_ap(&detections, &annotations, class_id, 0.5);
                let got = report.per_class_ap[class_id - 1].ap;
                match (oracle, got) {
                    (None, None) => {}
                    (Some(o), Some(g)) => {
                        assert!((o - g).abs() < 1e-9, "case {case} class {class_id}: {o} vs {g}")
                    }
                    other => panic!("case {case} class {class_id}: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn fn_count_basics() {
        let annotations = vec![vec![
            ann(10.0, 10.0, 30.0, 30.0, 1),
            ann(50.0, 50.0, 70.0, 70.0, 1),
            ann(80.0, 80.0, 95.0, 95.0, 2),
        ]];
        assert_eq!(count_fn(&[vec![]], &annotations, 0.8, 0.5), 3);
        let dets = vec![vec![
            det(20.0, 20.0, 20.0, 20.0, 1, 0.95),
            det(60.0, 60.0, 20.0, 20.0, 1, 0.95),
            det(87.5, 87.5, 15.0, 15.0, 2, 0.95),
        ]];
        assert_eq!(count_fn(&dets, &annotations, 0.8, 0.5), 0);
        // Matches below the confidence bar still count as FN.
        let weak = vec![vec![det(20.0, 20.0, 20.0, 20.0, 1, 0.7)]];
        assert_eq!(count_fn(&weak, &annotations, 0.8, 0.5), 3);
    }

    #[test]
    fn histograms_partition_detections() {
        let annotations = vec![vec![ann(10.0, 10.0, 30.0, 30.0, 1)]];
        let detections = vec![vec![
            det(20.0, 20.0, 20.0, 20.0, 1, 0.92),
            det(70.0, 70.0, 10.0, 10.0, 1, 0.41),
            det(20.0, 20.0, 20.0, 20.0, 1, 1.0),
        ]];
        let (tp, fp) = confidence_distributions(&detections, &annotations, 0.5, 2);
        let total: usize = tp.iter().sum::<usize>() + fp.iter().sum::<usize>();
        assert_eq!(total, 3);
        // The 1.0-confidence duplicate wins the GT; the 0.92 one becomes FP.
        assert_eq!(tp[9], 1);
        assert_eq!(fp[9], 1);
        assert_eq!(fp[4], 1);
    }

    #[test]
    fn all_tp_input_has_empty_fp_histogram() {
        let annotations = vec![vec![ann(10.0, 10.0, 30.0, 30.0, 1)]];
        let detections = vec![vec![det(20.0, 20.0, 20.0, 20.0, 1, 0.88)]];
        let (tp, fp) = confidence_distributions(&detections, &annotations, 0.5, 2);
        assert_eq!(tp.iter().sum::<usize>(), 1);
        assert_eq!(fp.iter().sum::<usize>(), 0);
    }

    #[test]
    fn report_round_trips_and_renders() {
        let annotations = vec![vec![ann(10.0, 10.0, 30.0, 30.0, 1)]];
        let detections = vec![vec![det(20.0, 20.0, 20.0, 20.0, 1, 0.9)]];
        let mut report = compute_map(&detections, &annotations, 0.5, 3);
        report.setting = "unit".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        let loaded = EvalReport::load(&path).unwrap();
        assert_eq!(report, loaded);
        let table = report.to_table();
        assert!(table.contains("mAP"));
        assert!(table.contains("unit"));
        plot_histograms(&report, &dir.path().join("hist.png")).unwrap();
        assert!(dir.path().join("hist.png").exists());
    }
}
