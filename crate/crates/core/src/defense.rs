//! Countermeasures: patch data augmentation, adversarial-example
//! detection, and adversarial training.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::attack::{run_attack, AttackConfig, PlacementStrategy};
use crate::detector::{load_checkpoint, save_checkpoint, Conv2d, Detector, Linear, LossMode, ToyDetector};
use crate::error::{Error, Result};
use crate::exec;
use crate::physics::{MaterialId, MaterialModel};
use crate::scene::{Annotation, Dataset, DatasetManifest, ManifestEntry, Scene};

/// Patch-augmentation parameters: each augmented image carries 1-4 solid
/// patches from the palette, rendered through the converter at a random
/// calibrated thickness, placed away from item centers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub count_range: (usize, usize),
    pub palette: Vec<MaterialId>,
    pub patch_size: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            count_range: (1, 4),
            // Blue (iron) and orange (plastic) patches.
            palette: vec![MaterialId::Iron, MaterialId::Plastic],
            patch_size: 20,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count_range.0 > self.count_range.1 || self.count_range.1 > 8 {
            return Err(Error::Validation(format!(
                "patch count range {:?} invalid",
                self.count_range
            )));
        }
        if self.palette.is_empty() {
            return Err(Error::Validation("empty patch palette".into()));
        }
        Ok(())
    }
}

fn stamp_patch(
    image: &mut Array3<f64>,
    x0: usize,
    y0: usize,
    size: usize,
    transmittance: [f64; 3],
) {
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            for ch in 0..3 {
                image[(ch, y, x)] *= transmittance[ch];
            }
        }
    }
}

/// Adds `count` random patches to a copy of the image, avoiding the central
/// half-box of every annotation. Returns the image and the patch count that
/// actually landed.
fn augment_image(
    image: &Array3<f64>,
    annotations: &[Annotation],
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, usize) {
    let (_, h, w) = image.dim();
    let mut out = image.clone();
    let count = rng.random_range(spec.count_range.0..=spec.count_range.1);
    let mut placed = 0;
    for _ in 0..count {
        let mut done = false;
        for _attempt in 0..16 {
            if w <= spec.patch_size || h <= spec.patch_size {
                break;
            }
            let x0 = rng.random_range(0..w - spec.patch_size);
            let y0 = rng.random_range(0..h - spec.patch_size);
            let patch = crate::scene::BBox::new(
                x0 as f64,
                y0 as f64,
                (x0 + spec.patch_size) as f64,
                (y0 + spec.patch_size) as f64,
            );
            let blocked = annotations.iter().any(|a| {
                let b = &a.bbox;
                let center = crate::scene::BBox::new(
                    b.x_min + 0.25 * b.width(),
                    b.y_min + 0.25 * b.height(),
                    b.x_max - 0.25 * b.width(),
                    b.y_max - 0.25 * b.height(),
                );
                patch.intersection(&center) > 0.0
            });
            if blocked {
                continue;
            }
            let material_id = &spec.palette[rng.random_range(0..spec.palette.len())];
            let model = MaterialModel::builtin(material_id)
                .unwrap_or_else(MaterialModel::iron);
            let thickness = rng.random_range(model.depth_range.0..=model.depth_range.1);
            stamp_patch(&mut out, x0, y0, spec.patch_size, model.transmittance(thickness));
            placed += 1;
            done = true;
            break;
        }
        if !done {
            break;
        }
    }
    (out, placed)
}

/// Interleaves each clean sample with a patch-augmented copy (1:1 mix).
/// Annotations are unchanged; only pixels move. Deterministic given the
/// seed. A count range of (0, 0) duplicates the dataset.
pub fn augment_dataset(dataset: &Dataset, spec: &AugmentSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut images = Vec::with_capacity(dataset.len() * 2);
    let mut annotations = Vec::with_capacity(dataset.len() * 2);
    let mut ids = Vec::with_capacity(dataset.len() * 2);
    let mut severities = Vec::with_capacity(dataset.len() * 2);
    for i in 0..dataset.len() {
        images.push(dataset.images[i].clone());
        annotations.push(dataset.annotations[i].clone());
        ids.push(dataset.ids[i].clone());
        severities.push(dataset.severities[i]);

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b9));
        let (augmented, _) = if spec.count_range == (0, 0) {
            (dataset.images[i].clone(), 0)
        } else {
            augment_image(&dataset.images[i], &dataset.annotations[i], spec, &mut rng)
        };
        images.push(augmented);
        annotations.push(dataset.annotations[i].clone());
        ids.push(format!("{}_aug", dataset.ids[i]));
        severities.push(dataset.severities[i]);
    }
    Ok(Dataset { images, annotations, ids, class_names: dataset.class_names.clone(), severities })
}

/// File-level augmentation: writes augmented images next to copies of the
/// original annotation files (bit-exact) and an interleaved manifest under
/// `out_dir`. Returns the new manifest path.
pub fn augment_manifest(
    manifest: &DatasetManifest,
    spec: &AugmentSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(manifest.entries.len() * 2);
    for (i, entry) in manifest.entries.iter().enumerate() {
        let image = crate::scene::load_image(&manifest.image_path(entry))?;
        let annotations = crate::scene::load_annotations(&manifest.annotation_path(entry))?;
        let clean_img = PathBuf::from(format!("clean_{i:04}.png"));
        let clean_ann = PathBuf::from(format!("clean_{i:04}.json"));
        crate::scene::save_image(&image, &out_dir.join(&clean_img))?;
        std::fs::copy(manifest.annotation_path(entry), out_dir.join(&clean_ann))?;
        entries.push(ManifestEntry { image: clean_img, annotation: clean_ann, severity: entry.severity });

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b9));
        let (augmented, _) = if spec.count_range == (0, 0) {
            (image.clone(), 0)
        } else {
            augment_image(&image, &annotations, spec, &mut rng)
        };
        let aug_img = PathBuf::from(format!("aug_{i:04}.png"));
        let aug_ann = PathBuf::from(format!("aug_{i:04}.json"));
        crate::scene::save_image(&augmented, &out_dir.join(&aug_img))?;
        std::fs::copy(manifest.annotation_path(entry), out_dir.join(&aug_ann))?;
        entries.push(ManifestEntry { image: aug_img, annotation: aug_ann, severity: entry.severity });
    }
    let out_manifest = DatasetManifest {
        split: manifest.split,
        class_names: manifest.class_names.clone(),
        entries,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join("manifest.txt");
    crate::scene::save_manifest(&out_manifest, &path)?;
    Ok(path)
}

/// Binary classifier that flags images containing adversarial objects.
#[derive(Debug, Clone)]
pub struct AdvDetectorModel {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    pub input_size: usize,
    pub threshold: f64,
}

impl AdvDetectorModel {
    pub fn new(input_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv1 = Conv2d::new(3, 8, 3, 4, 1);
        conv1.init(&mut rng);
        let mut conv2 = Conv2d::new(8, 16, 3, 4, 1);
        conv2.init(&mut rng);
        let mut fc = Linear::new(16, 1);
        fc.init(&mut rng);
        Self { conv1, conv2, fc, input_size, threshold: 0.5 }
    }

    fn forward_cache(&self, image: &Array3<f64>) -> (Array3<f64>, Array3<f64>, Vec<f64>, f64) {
        let pre1 = self.conv1.forward(image);
        let act1 = pre1.mapv(|v: f64| v.max(0.0));
        let pre2 = self.conv2.forward(&act1);
        let act2 = pre2.mapv(|v: f64| v.max(0.0));
        // Global average pool per channel.
        let (c, h, w) = act2.dim();
        let pooled: Vec<f64> = (0..c)
            .map(|ch| act2.index_axis(Axis(0), ch).sum() / (h * w) as f64)
            .collect();
        let logit = self.fc.forward(&pooled)[0];
        (pre1, pre2, pooled, logit)
    }

    /// Probability that the image contains adversarial objects.
    pub fn score(&self, image: &Array3<f64>) -> f64 {
        let (_, _, _, logit) = self.forward_cache(image);
        1.0 / (1.0 + (-logit).exp())
    }

    pub fn n_params(&self) -> usize {
        self.conv1.n_params() + self.conv2.n_params() + self.fc.n_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in [&self.conv1, &self.conv2] {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        out.extend_from_slice(&self.fc.w);
        out.extend_from_slice(&self.fc.b);
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut off = 0;
        for layer in [&mut self.conv1, &mut self.conv2] {
            let (nw, nb) = (layer.w.len(), layer.b.len());
            layer.w.copy_from_slice(&p[off..off + nw]);
            off += nw;
            layer.b.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        let (nw, nb) = (self.fc.w.len(), self.fc.b.len());
        self.fc.w.copy_from_slice(&p[off..off + nw]);
        off += nw;
        self.fc.b.copy_from_slice(&p[off..off + nb]);
    }

    /// BCE loss gradient for one labelled image, flat parameter layout.
    fn image_grad(&self, image: &Array3<f64>, label: bool) -> (f64, Vec<f64>) {
        let (pre1, pre2, pooled, logit) = self.forward_cache(image);
        let prob = 1.0 / (1.0 + (-logit).exp());
        let target = label as usize as f64;
        let loss = -(target * prob.max(1e-12).ln() + (1.0 - target) * (1.0 - prob).max(1e-12).ln());
        let dlogit = prob - target;

        let mut grads = vec![0.0; self.n_params()];
        let c1 = self.conv1.n_params();
        let c2 = self.conv2.n_params();
        let (conv_part, fc_part) = grads.split_at_mut(c1 + c2);
        let (g1, g2) = conv_part.split_at_mut(c1);
        let (fw, fb) = fc_part.split_at_mut(self.fc.w.len());
        let dpooled = self.fc.backward(&pooled, &[dlogit], fw, fb);

        let (c, h, w) = pre2.dim();
        let mut dact2 = Array3::zeros((c, h, w));
        for ch in 0..c {
            let g = dpooled[ch] / (h * w) as f64;
            dact2.index_axis_mut(Axis(0), ch).fill(g);
        }
        ndarray::Zip::from(&mut dact2).and(&pre2).for_each(|g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let act1 = pre1.mapv(|v: f64| v.max(0.0));
        let (w2, b2) = g2.split_at_mut(self.conv2.w.len());
        let mut dact1 = self.conv2.backward(&act1, &dact2, w2, b2);
        ndarray::Zip::from(&mut dact1).and(&pre1).for_each(|g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let (w1, b1) = g1.split_at_mut(self.conv1.w.len());
        let _ = self.conv1.backward(image, &dact1, w1, b1);
        (loss, grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "input_size": self.input_size,
            "threshold": self.threshold,
        });
        save_checkpoint(path, "advdet", &header, &self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = load_checkpoint(path, "advdet")?;
        let input_size = header["input_size"].as_u64().unwrap_or(0) as usize;
        let mut model = Self::new(input_size, 0);
        model.threshold = header["threshold"].as_f64().unwrap_or(0.5);
        if params.len() != model.n_params() {
            return Err(Error::Validation("adv-detector checkpoint size mismatch".into()));
        }
        model.set_params(&params);
        Ok(model)
    }
}

/// Trains the binary adversarial-image classifier. Labels: clean = false,
/// adversarial = true. Deterministic given the seed.
pub fn train_adv_detector(
    clean: &[Array3<f64>],
    adversarial: &[Array3<f64>],
    seed: u64,
) -> Result<AdvDetectorModel> {
    if clean.is_empty() || adversarial.is_empty() {
        return Err(Error::InsufficientData(
            "adversarial-detection training needs both classes".into(),
        ));
    }
    let input_size = clean[0].dim().1;
    let mut model = AdvDetectorModel::new(input_size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xadde);
    let mut items: Vec<(usize, bool)> = (0..clean.len())
        .map(|i| (i, false))
        .chain((0..adversarial.len()).map(|i| (i, true)))
        .collect();
    let (epochs, batch, lr, momentum) = (30usize, 8usize, 0.08f64, 0.9f64);
    let mut velocity = vec![0.0; model.n_params()];
    for _epoch in 0..epochs {
        for i in (1..items.len()).rev() {
            let j = rng.random_range(0..=i);
            items.swap(i, j);
        }
        for chunk in items.chunks(batch) {
            let results: Vec<(f64, Vec<f64>)> = exec::map_slice(chunk, |&(idx, label)| {
                let image = if label { &adversarial[idx] } else { &clean[idx] };
                model.image_grad(image, label)
            });
            let mut grad = vec![0.0; model.n_params()];
            for (_, g) in &results {
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut p = model.params();
            for i in 0..p.len() {
                velocity[i] = momentum * velocity[i] - lr * grad[i] * scale;
                p[i] += velocity[i];
            }
            model.set_params(&p);
        }
    }
    Ok(model)
}

/// Accuracy at the model threshold and area under the ROC curve.
pub fn eval_adv_detector(
    model: &AdvDetectorModel,
    images: &[Array3<f64>],
    labels: &[bool],
) -> (f64, f64) {
    let scores: Vec<f64> = exec::map_slice(images, |img| model.score(img));
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| (**s >= model.threshold) == l)
        .count();
    let acc = correct as f64 / labels.len().max(1) as f64;
    (acc, roc_auc(&scores, labels))
}

/// Rank-based AUC (ties get half credit), equal to the probability that a
/// random positive outscores a random negative.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut wins = 0.0;
    for (si, &li) in scores.iter().zip(labels) {
        if !li {
            continue;
        }
        for (sj, &lj) in scores.iter().zip(labels) {
            if lj {
                continue;
            }
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / (n_pos * n_neg) as f64
}

/// Adversarial-training parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvTrainParams {
    /// Fraction of the dataset attacked per epoch.
    pub subset_fraction: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub placement: PlacementStrategy,
}

impl Default for AdvTrainParams {
    fn default() -> Self {
        Self {
            subset_fraction: 0.25,
            lr: 0.002,
            momentum: 0.9,
            batch_size: 8,
            placement: PlacementStrategy::Fix,
        }
    }
}

/// Adversarial training: each epoch regenerates fresh attacks against the
/// *current* model on a sampled subset and fine-tunes on a 1:1 mix of clean
/// and attacked images. `epochs == 0` returns the input detector unchanged.
pub fn adversarial_train(
    dataset: &Dataset,
    base: &ToyDetector,
    attack_cfg: &AttackConfig,
    params: &AdvTrainParams,
    epochs: usize,
    seed: u64,
) -> Result<ToyDetector> {
    let mut detector = base.clone();
    if epochs == 0 {
        return Ok(detector);
    }
    let mut velocity = vec![0.0; detector.params().len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xad7a);
    let n = dataset.len();
    let subset = ((n as f64 * params.subset_fraction).ceil() as usize).clamp(1, n);
    for epoch in 0..epochs {
        // Sample the subset to attack this epoch.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let chosen = &order[..subset];
        let scenes: Vec<Scene> = chosen
            .iter()
            .map(|&i| Scene {
                base_image: dataset.images[i].clone(),
                annotations: dataset.annotations[i].clone(),
                placed_objects: Vec::new(),
                rng_seed: 0,
            })
            .collect();
        let mut attacked: Vec<(usize, Array3<f64>)> = Vec::new();
        let mut failures = 0usize;
        for (gi, group) in scenes.chunks(attack_cfg.batch_share).enumerate() {
            let group_seed = seed ^ ((epoch as u64) << 16) ^ (gi as u64);
            match run_attack(group, &detector, attack_cfg, params.placement, group_seed) {
                Ok(results) => {
                    let mut offset = gi * attack_cfg.batch_share;
                    for result in results {
                        for image in result.images {
                            attacked.push((chosen[offset], image));
                            offset += 1;
                        }
                    }
                }
                Err(_) => failures += group.len(),
            }
        }
        if failures * 5 > subset {
            return Err(Error::Diverged(format!(
                "attack generation failed for {failures}/{subset} images in epoch {epoch}"
            )));
        }
        // 1:1 mix: the attacked images plus an equal number of clean ones.
        let mut batch_items: Vec<(usize, Option<Array3<f64>>)> = Vec::new();
        for (idx, image) in attacked {
            batch_items.push((idx, Some(image)));
            batch_items.push((idx, None));
        }
        for i in (1..batch_items.len()).rev() {
            let j = rng.random_range(0..=i);
            batch_items.swap(i, j);
        }
        for chunk in batch_items.chunks(params.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = exec::map_slice(chunk, |(idx, image)| {
                let img = image.as_ref().unwrap_or(&dataset.images[*idx]);
                detector.image_grad(img, &dataset.annotations[*idx])
            });
            let mut grad = vec![0.0; velocity.len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in epoch {epoch}")));
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut p = detector.params();
            for i in 0..p.len() {
                velocity[i] = params.momentum * velocity[i] - params.lr * grad[i] * scale;
                p[i] += velocity[i];
            }
            detector.set_params(&p);
        }
    }
    Ok(detector)
}

/// Pixel-space projected-gradient attack within an L-infinity ball, used by
/// the PGD adversarial-training arm.
pub fn pgd_attack_image(
    handle: &dyn Detector,
    image: &Array3<f64>,
    annotations: &[Annotation],
    epsilon: f64,
    steps: usize,
) -> Result<Array3<f64>> {
    let step = epsilon / (steps as f64 / 2.5).max(1.0);
    let mut adv = image.clone();
    for _ in 0..steps {
        let (_, grad) = handle.cls_loss_grad_image(&adv, annotations, LossMode::Untargeted)?;
        ndarray::Zip::from(&mut adv).and(&grad).and(image).for_each(|a, &g, &x0| {
            *a = (*a + step * g.signum()).clamp(x0 - epsilon, x0 + epsilon).clamp(0.0, 1.0);
        });
    }
    Ok(adv)
}

/// Adversarial training with pixel-space PGD examples (epsilon 8/255,
/// 10 steps by default in the callers). Shares the mixing schedule with
/// [`adversarial_train`].
pub fn pgd_adversarial_train(
    dataset: &Dataset,
    base: &ToyDetector,
    epsilon: f64,
    steps: usize,
    params: &AdvTrainParams,
    epochs: usize,
    seed: u64,
) -> Result<ToyDetector> {
    let mut detector = base.clone();
    if epochs == 0 {
        return Ok(detector);
    }
    let mut velocity = vec![0.0; detector.params().len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d6d);
    let n = dataset.len();
    let subset = ((n as f64 * params.subset_fraction).ceil() as usize).clamp(1, n);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let chosen: Vec<usize> = order[..subset].to_vec();
        let attacked: Vec<(usize, Array3<f64>)> = exec::map_slice(&chosen, |&idx| {
            let adv = pgd_attack_image(
                &detector,
                &dataset.images[idx],
                &dataset.annotations[idx],
                epsilon,
                steps,
            )
            .unwrap_or_else(|_| dataset.images[idx].clone());
            (idx, adv)
        });
        let mut batch_items: Vec<(usize, Option<Array3<f64>>)> = Vec::new();
        for (idx, image) in attacked {
            batch_items.push((idx, Some(image)));
            batch_items.push((idx, None));
        }
        for i in (1..batch_items.len()).rev() {
            let j = rng.random_range(0..=i);
            batch_items.swap(i, j);
        }
        for chunk in batch_items.chunks(params.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = exec::map_slice(chunk, |(idx, image)| {
                let img = image.as_ref().unwrap_or(&dataset.images[*idx]);
                detector.image_grad(img, &dataset.annotations[*idx])
            });
            let mut grad = vec![0.0; velocity.len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in epoch {epoch}")));
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut p = detector.params();
            for i in 0..p.len() {
                velocity[i] = params.momentum * velocity[i] - params.lr * grad[i] * scale;
                p[i] += velocity[i];
            }
            detector.set_params(&p);
        }
    }
    Ok(detector)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::scene::{generate_scene, place_objects, SceneSpec};

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let spec = SceneSpec { canvas: 64, clutter_range: (0, 1), ..SceneSpec::mini() };
        let scenes: Vec<Scene> =
            (0..n).map(|i| generate_scene(&spec, seed + i as u64).unwrap()).collect();
        Dataset::from_scenes(&scenes, &spec.class_names)
    }

    fn tiny_detector(seed: u64) -> ToyDetector {
        let cfg = DetectorConfig { input_size: 64, channels: vec![8, 16], ..DetectorConfig::default() };
        ToyDetector::new(cfg, vec!["knife".into(), "scissors".into(), "pistol".into()], seed)
            .unwrap()
    }

    #[test]
    fn augmentation_doubles_and_preserves_annotations() {
        let data = tiny_dataset(3, 50);
        let spec = AugmentSpec { patch_size: 10, ..AugmentSpec::default() };
        let out = augment_dataset(&data, &spec, 7).unwrap();
        assert_eq!(out.len(), 6);
        for i in 0..3 {
            assert_eq!(out.annotations[2 * i], data.annotations[i]);
            assert_eq!(out.annotations[2 * i + 1], data.annotations[i]);
            assert_eq!(out.images[2 * i], data.images[i]);
        }
        // Deterministic.
        let again = augment_dataset(&data, &spec, 7).unwrap();
        assert_eq!(out.images, again.images);
    }

    #[test]
    fn zero_count_range_duplicates_only() {
        let data = tiny_dataset(2, 51);
        let spec = AugmentSpec { count_range: (0, 0), ..AugmentSpec::default() };
        let out = augment_dataset(&data, &spec, 1).unwrap();
        assert_eq!(out.len(), 4);
        for i in 0..2 {
            assert_eq!(out.images[2 * i + 1], data.images[i]);
        }
    }

    #[test]
    fn augmented_images_have_expected_patch_count() {
        let data = tiny_dataset(4, 52);
        let spec = AugmentSpec { patch_size: 8, ..AugmentSpec::default() };
        let out = augment_dataset(&data, &spec, 9).unwrap();
        for i in 0..4 {
            let clean = &out.images[2 * i];
            let aug = &out.images[2 * i + 1];
            // Count disjoint changed regions coarsely via changed pixels.
            let changed = clean
                .iter()
                .zip(aug.iter())
                .filter(|(a, b)| (**a - **b).abs() > 1e-9)
                .count();
            // Each 8x8 patch touches 3 channels x 64 pixels.
            let per_patch = 3 * 64;
            assert!(changed >= per_patch / 2, "no visible patch on image {i}");
            assert!(changed <= 4 * per_patch + per_patch, "too many patches on image {i}");
        }
    }

    #[test]
    fn roc_auc_matches_pairwise_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(5..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.5).collect();
            let auc = roc_auc(&scores, &labels);
            // Brute-force pairwise oracle.
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] && !labels[j] {
                        pairs += 1.0;
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
            }
            let expected = if pairs == 0.0 { 0.5 } else { wins / pairs };
            assert_eq!(auc, expected);
        }
    }

    #[test]
    fn adv_detector_separates_obvious_classes() {
        // Clean: light scenes. Adversarial: the same scenes with a dark
        // square stamped in. This is an easy discrimination task the tiny
        // classifier must nail.
        let data = tiny_dataset(12, 60);
        let clean = data.images.clone();
        let adversarial: Vec<Array3<f64>> = data
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let mut out = img.clone();
                let x0 = 8 + (i % 3) * 12;
                stamp_patch(&mut out, x0, 10, 12, MaterialModel::iron().transmittance(6.0));
                out
            })
            .collect();
        let model = train_adv_detector(&clean, &adversarial, 5).unwrap();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for img in &clean {
            images.push(img.clone());
            labels.push(false);
        }
        for img in &adversarial {
            images.push(img.clone());
            labels.push(true);
        }
        let (acc, auc) = eval_adv_detector(&model, &images, &labels);
        assert!(auc > 0.95, "auc {auc}");
        // Threshold accuracy lags ranking quality at this scale; require
        // better than chance only.
        assert!(acc > 0.5, "acc {acc}");
    }

    #[test]
    fn shuffled_labels_give_chance_auc() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores: Vec<f64> = (0..400).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..400).map(|_| rng.random_range(0.0..1.0) < 0.5).collect();
        let auc = roc_auc(&scores, &labels);
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
    }

    #[test]
    fn adv_detector_rejects_single_class() {
        let data = tiny_dataset(2, 61);
        assert!(matches!(
            train_adv_detector(&data.images, &[], 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn zero_epoch_adversarial_training_is_identity() {
        let data = tiny_dataset(2, 62);
        let det = tiny_detector(1);
        let cfg = AttackConfig { num_objects: 1, footprint: 10, iterations: 1, ..AttackConfig::default() };
        let out =
            adversarial_train(&data, &det, &cfg, &AdvTrainParams::default(), 0, 3).unwrap();
        assert_eq!(det.params(), out.params());
    }

    #[test]
    fn zero_iteration_attack_generation_equals_sphere_augmentation() {
        // With 0 polish iterations the adversarial images are exactly the
        // clean scenes with initial spheres composited at the corners.
        let spec = SceneSpec { canvas: 64, clutter_range: (0, 0), bag: false, ..SceneSpec::mini() };
        let scene = generate_scene(&spec, 63).unwrap();
        let det = tiny_detector(2);
        let cfg = AttackConfig {
            num_objects: 1,
            footprint: 12,
            iterations: 0,
            n_grid: 12,
            ..AttackConfig::default()
        };
        let results = run_attack(
            std::slice::from_ref(&scene),
            &det,
            &cfg,
            PlacementStrategy::Fix,
            0,
        )
        .unwrap();
        let regions = crate::attack::build_regions(std::slice::from_ref(&scene), &cfg).unwrap();
        let corners = crate::placement::place_fix(&regions[0], scene.size(), 1);
        let direct =
            place_objects(&scene, &[cfg.initial_mesh()], &corners, &cfg.material_model().unwrap())
                .unwrap();
        for (a, b) in results[0].images[0].iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pgd_stays_in_epsilon_ball() {
        let data = tiny_dataset(1, 64);
        let det = tiny_detector(3);
        let eps = 8.0 / 255.0;
        let adv = pgd_attack_image(&det, &data.images[0], &data.annotations[0], eps, 5).unwrap();
        for (a, x) in adv.iter().zip(data.images[0].iter()) {
            assert!((a - x).abs() <= eps + 1e-12);
            assert!(*a >= 0.0 && *a <= 1.0);
        }
    }
}
