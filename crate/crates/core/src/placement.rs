//! The available attack region around a prohibited item and location
//! search: a small convolutional policy trained with score-function
//! gradients (one-timestep trajectories), plus fix / random / greedy
//! baselines.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::detector::{load_checkpoint, save_checkpoint, Conv2d, Detector, Linear, LossMode};
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::Mesh;
use crate::physics::MaterialModel;
use crate::scene::{place_objects, Annotation, BBox, Scene};

/// Ring-shaped placement area around a ground-truth box: anchors are valid
/// top-left footprint positions that avoid the central exclusion box.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRegion {
    pub outer: BBox,
    pub exclusion: BBox,
    /// Candidate top-left anchors, row-major.
    pub grid: Vec<(i64, i64)>,
    pub footprint: usize,
}

impl AttackRegion {
    pub fn n_cells(&self) -> usize {
        self.grid.len()
    }

    /// A footprint at `loc` stays inside the image and clear of the
    /// exclusion box.
    pub fn is_valid(&self, loc: (i64, i64), image_size: (usize, usize)) -> bool {
        let fp = self.footprint as f64;
        let bbox = BBox::new(loc.0 as f64, loc.1 as f64, loc.0 as f64 + fp, loc.1 as f64 + fp);
        loc.0 >= 0
            && loc.1 >= 0
            && loc.0 + self.footprint as i64 <= image_size.0 as i64
            && loc.1 + self.footprint as i64 <= image_size.1 as i64
            && bbox.intersection(&self.exclusion) == 0.0
    }

    /// The four ring corners (used by the Fix baseline and corner-placed
    /// attacks), clamped into the image.
    pub fn corners(&self, image_size: (usize, usize)) -> Vec<(i64, i64)> {
        let fp = self.footprint as i64;
        let x0 = self.outer.x_min as i64;
        let y0 = self.outer.y_min as i64;
        let x1 = self.outer.x_max as i64 - fp;
        let y1 = self.outer.y_max as i64 - fp;
        let clamp = |p: (i64, i64)| {
            (
                p.0.clamp(0, image_size.0 as i64 - fp),
                p.1.clamp(0, image_size.1 as i64 - fp),
            )
        };
        vec![clamp((x0, y0)), clamp((x1, y0)), clamp((x0, y1)), clamp((x1, y1))]
    }
}

/// Builds the region for one annotation: the box expanded by `margin` px,
/// minus the central half-box of the annotation. The candidate lattice is
/// enumerated row-major and thinned evenly to `n_grid` anchors.
pub fn build_region(
    annotation: &Annotation,
    footprint: usize,
    image_size: (usize, usize),
    n_grid: usize,
    margin: f64,
) -> Result<AttackRegion> {
    let b = &annotation.bbox;
    let outer = BBox::new(
        (b.x_min - margin).max(0.0),
        (b.y_min - margin).max(0.0),
        (b.x_max + margin).min(image_size.0 as f64),
        (b.y_max + margin).min(image_size.1 as f64),
    );
    let w = b.width();
    let h = b.height();
    let exclusion = BBox::new(
        b.x_min + 0.25 * w,
        b.y_min + 0.25 * h,
        b.x_max - 0.25 * w,
        b.y_max - 0.25 * h,
    );
    let region = AttackRegion { outer, exclusion, grid: Vec::new(), footprint };

    // Enumerate at increasing density until enough valid anchors exist.
    let mut candidates = Vec::new();
    for step_div in [6usize, 8, 12, 16, 24, 0] {
        let step = if step_div == 0 {
            1
        } else {
            ((outer.width().min(outer.height()) as usize).saturating_sub(footprint) / step_div).max(1)
        };
        candidates.clear();
        let x_end = (outer.x_max as i64 - footprint as i64).max(outer.x_min as i64);
        let y_end = (outer.y_max as i64 - footprint as i64).max(outer.y_min as i64);
        let mut y = outer.y_min as i64;
        while y <= y_end {
            let mut x = outer.x_min as i64;
            while x <= x_end {
                if region.is_valid((x, y), image_size) {
                    candidates.push((x, y));
                }
                x += step as i64;
            }
            y += step as i64;
        }
        if candidates.len() >= n_grid || step == 1 {
            break;
        }
    }
    if candidates.is_empty() {
        return Err(Error::Region(format!(
            "no valid {footprint}px footprint fits the ring around {:?}",
            annotation.bbox
        )));
    }
    let grid = if candidates.len() <= n_grid {
        candidates
    } else {
        (0..n_grid)
            .map(|i| candidates[i * candidates.len() / n_grid])
            .collect()
    };
    Ok(AttackRegion { grid, ..region })
}

/// Categorical placement policy: a 2-layer conv encoder and one linear head
/// per object slot producing `n_actions` logits each.
#[derive(Debug, Clone)]
pub struct PlacementPolicy {
    conv1: Conv2d,
    conv2: Conv2d,
    heads: Vec<Linear>,
    pub temperature: f64,
    input_size: usize,
    n_actions: usize,
}

impl PlacementPolicy {
    pub fn new(input_size: usize, n_actions: usize, slots: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv1 = Conv2d::new(3, 8, 3, 4, 1);
        conv1.init(&mut rng);
        let s1 = (input_size + 2 - 3) / 4 + 1;
        let mut conv2 = Conv2d::new(8, 16, 3, 4, 1);
        conv2.init(&mut rng);
        let s2 = (s1 + 2 - 3) / 4 + 1;
        let flat = 16 * s2 * s2;
        let heads = (0..slots)
            .map(|_| {
                let mut head = Linear::new(flat, n_actions);
                head.init(&mut rng);
                head
            })
            .collect();
        Self { conv1, conv2, heads, temperature: 1.0, input_size, n_actions }
    }

    pub fn slots(&self) -> usize {
        self.heads.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn encode(&self, image: &Array3<f64>) -> (Array3<f64>, Array3<f64>, Vec<f64>) {
        let pre1 = self.conv1.forward(image);
        let act1 = pre1.mapv(|v: f64| v.max(0.0));
        let pre2 = self.conv2.forward(&act1);
        let act2 = pre2.mapv(|v: f64| v.max(0.0));
        let flat = act2.as_slice().unwrap().to_vec();
        (pre1, pre2, flat)
    }

    /// Per-slot categorical distributions over grid cells.
    pub fn probs(&self, image: &Array3<f64>) -> Vec<Vec<f64>> {
        let (_, _, flat) = self.encode(image);
        self.heads
            .iter()
            .map(|head| {
                let logits: Vec<f64> =
                    head.forward(&flat).iter().map(|l| l / self.temperature).collect();
                crate::detector::softmax(&logits)
            })
            .collect()
    }

    /// Samples one action per slot.
    pub fn sample<R: Rng>(&self, image: &Array3<f64>, k: usize, rng: &mut R) -> Vec<usize> {
        let probs = self.probs(image);
        probs
            .iter()
            .take(k)
            .map(|p| {
                let u: f64 = rng.random_range(0.0..1.0);
                let mut acc = 0.0;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i;
                    }
                }
                p.len() - 1
            })
            .collect()
    }

    /// Argmax action per slot.
    pub fn argmax(&self, image: &Array3<f64>, k: usize) -> Vec<usize> {
        self.probs(image)
            .iter()
            .take(k)
            .map(|p| {
                p.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }

    /// Log-probability of the given per-slot actions plus its gradient with
    /// respect to all policy parameters (flat layout).
    pub fn log_prob_grad(&self, image: &Array3<f64>, actions: &[usize]) -> (f64, Vec<f64>) {
        let (pre1, pre2, flat) = self.encode(image);
        let mut log_prob = 0.0;
        let mut grads = vec![0.0; self.n_params()];
        let offsets = self.param_offsets();
        let mut dflat = vec![0.0; flat.len()];
        for (slot, &action) in actions.iter().enumerate() {
            let head = &self.heads[slot];
            let logits_raw = head.forward(&flat);
            let logits: Vec<f64> = logits_raw.iter().map(|l| l / self.temperature).collect();
            let probs = crate::detector::softmax(&logits);
            log_prob += probs[action].max(1e-300).ln();
            // d log p[a] / d logits_raw = (onehot - probs) / T
            let dlogits: Vec<f64> = (0..self.n_actions)
                .map(|i| ((i == action) as usize as f64 - probs[i]) / self.temperature)
                .collect();
            let (off, _) = offsets[2 + slot];
            let (dw, db) =
                grads[off..off + head.n_params()].split_at_mut(head.w.len());
            let dx = head.backward(&flat, &dlogits, dw, db);
            for (acc, v) in dflat.iter_mut().zip(&dx) {
                *acc += v;
            }
        }
        // Back through the encoder.
        let act1 = pre1.mapv(|v: f64| v.max(0.0));
        let dact2 = Array3::from_shape_vec(pre2.dim(), dflat).unwrap();
        let dpre2 = {
            let mut d = dact2;
            ndarray::Zip::from(&mut d).and(&pre2).for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            d
        };
        let (off2, _) = offsets[1];
        let dx1 = {
            let (dw, db) =
                grads[off2..off2 + self.conv2.n_params()].split_at_mut(self.conv2.w.len());
            self.conv2.backward(&act1, &dpre2, dw, db)
        };
        let dpre1 = {
            let mut d = dx1;
            ndarray::Zip::from(&mut d).and(&pre1).for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            d
        };
        let (off1, _) = offsets[0];
        let (dw, db) = grads[off1..off1 + self.conv1.n_params()].split_at_mut(self.conv1.w.len());
        let _ = self.conv1.backward(image, &dpre1, dw, db);
        (log_prob, grads)
    }

    fn param_offsets(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::new();
        let mut off = 0;
        for n in [self.conv1.n_params(), self.conv2.n_params()] {
            offsets.push((off, n));
            off += n;
        }
        for head in &self.heads {
            offsets.push((off, head.n_params()));
            off += head.n_params();
        }
        offsets
    }

    pub fn n_params(&self) -> usize {
        self.conv1.n_params()
            + self.conv2.n_params()
            + self.heads.iter().map(Linear::n_params).sum::<usize>()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in [&self.conv1, &self.conv2] {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        for head in &self.heads {
            out.extend_from_slice(&head.w);
            out.extend_from_slice(&head.b);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let mut off = 0;
        for layer in [&mut self.conv1, &mut self.conv2] {
            let (nw, nb) = (layer.w.len(), layer.b.len());
            layer.w.copy_from_slice(&p[off..off + nw]);
            off += nw;
            layer.b.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        for head in &mut self.heads {
            let (nw, nb) = (head.w.len(), head.b.len());
            head.w.copy_from_slice(&p[off..off + nw]);
            off += nw;
            head.b.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }

    /// Mean per-slot entropy of the placement distributions.
    pub fn entropy(&self, image: &Array3<f64>) -> f64 {
        let probs = self.probs(image);
        let total: f64 = probs
            .iter()
            .map(|p| -p.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum::<f64>())
            .sum();
        total / probs.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "input_size": self.input_size,
            "n_actions": self.n_actions,
            "slots": self.heads.len(),
            "temperature": self.temperature,
        });
        save_checkpoint(path, "policy", &header, &self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = load_checkpoint(path, "policy")?;
        let input_size = header["input_size"].as_u64().unwrap_or(0) as usize;
        let n_actions = header["n_actions"].as_u64().unwrap_or(0) as usize;
        let slots = header["slots"].as_u64().unwrap_or(0) as usize;
        let mut policy = Self::new(input_size, n_actions, slots, 0);
        policy.temperature = header["temperature"].as_f64().unwrap_or(1.0);
        if params.len() != policy.n_params() {
            return Err(Error::Validation(format!(
                "policy checkpoint has {} params, model needs {}",
                params.len(),
                policy.n_params()
            )));
        }
        policy.set_params(&params);
        Ok(policy)
    }
}

/// Draws `k` grid anchors from the policy (one categorical per slot).
/// Reproducible for a fixed seed.
pub fn sample_locations(
    policy: &PlacementPolicy,
    image: &Array3<f64>,
    region: &AttackRegion,
    k: usize,
    seed: u64,
) -> Result<Vec<(i64, i64)>> {
    if k > region.n_cells() {
        return Err(Error::Placement(format!(
            "requested {k} locations from a {}-cell grid",
            region.n_cells()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions = policy.sample(image, k, &mut rng);
    Ok(actions.into_iter().map(|a| region.grid[a % region.grid.len()]).collect())
}

/// Reward weighting for the location search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardSpec {
    /// Diversity weight on the placement spread.
    pub alpha: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self { alpha: 0.05 }
    }
}

/// Population standard deviation of the chosen anchor coordinates, averaged
/// over the x and y axes.
pub fn location_spread(locations: &[(i64, i64)]) -> f64 {
    if locations.is_empty() {
        return 0.0;
    }
    let n = locations.len() as f64;
    let mean_x = locations.iter().map(|l| l.0 as f64).sum::<f64>() / n;
    let mean_y = locations.iter().map(|l| l.1 as f64).sum::<f64>() / n;
    let var_x = locations.iter().map(|l| (l.0 as f64 - mean_x).powi(2)).sum::<f64>() / n;
    let var_y = locations.iter().map(|l| (l.1 as f64 - mean_y).powi(2)).sum::<f64>() / n;
    (var_x.sqrt() + var_y.sqrt()) / 2.0
}

/// Reward for placing the *original* (unpolished) object at the candidate
/// locations: detector classification loss plus `alpha` times the placement
/// spread, averaged over the batch.
pub fn compute_reward(
    scenes: &[Scene],
    locations: &[Vec<(i64, i64)>],
    handle: &dyn Detector,
    spec: &RewardSpec,
    mesh_ori: &Mesh,
    material: &MaterialModel,
) -> Result<f64> {
    if scenes.len() != locations.len() {
        return Err(Error::Placement(format!(
            "{} scenes but {} location sets",
            scenes.len(),
            locations.len()
        )));
    }
    let mut total = 0.0;
    for (scene, locs) in scenes.iter().zip(locations) {
        total += scene_reward(scene, locs, handle, spec, mesh_ori, material)?;
    }
    Ok(total / scenes.len() as f64)
}

fn scene_reward(
    scene: &Scene,
    locations: &[(i64, i64)],
    handle: &dyn Detector,
    spec: &RewardSpec,
    mesh_ori: &Mesh,
    material: &MaterialModel,
) -> Result<f64> {
    let meshes: Vec<Mesh> = (0..locations.len()).map(|_| mesh_ori.clone()).collect();
    let image = place_objects(scene, &meshes, locations, material)?;
    let loss = handle.cls_loss(&image, &scene.annotations, LossMode::Untargeted)?;
    Ok(loss + spec.alpha * location_spread(locations))
}

/// Knobs for [`reinforce_search`] / [`reinforce_with_reward`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReinforceConfig {
    pub n_iters: usize,
    pub lr: f64,
    /// Moving-average reward baseline decay.
    pub baseline_decay: f64,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        Self { n_iters: 200, lr: 0.1, baseline_decay: 0.9 }
    }
}

/// Per-iteration record of the policy search.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SearchLog {
    pub rewards: Vec<f64>,
    pub entropy: Vec<f64>,
    pub skipped: usize,
}

/// Generic one-timestep policy-gradient loop: sample per-image actions,
/// obtain rewards, ascend `(G - baseline) * grad log pi`. The reward
/// function sees per-image sampled actions and returns per-image rewards.
pub fn reinforce_with_reward<F>(
    policy: &mut PlacementPolicy,
    images: &[Array3<f64>],
    k: usize,
    mut reward_fn: F,
    cfg: &ReinforceConfig,
    seed: u64,
) -> Result<SearchLog>
where
    F: FnMut(usize, &[usize]) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut baseline = 0.0;
    let mut baseline_init = false;
    let mut log = SearchLog::default();
    for iter in 0..cfg.n_iters {
        let mut iter_reward = 0.0;
        let mut updates = 0usize;
        let mut grad_acc = vec![0.0; policy.n_params()];
        for (img_idx, image) in images.iter().enumerate() {
            let actions = policy.sample(image, k, &mut rng);
            let reward = reward_fn(img_idx, &actions)?;
            if !reward.is_finite() {
                log.skipped += 1;
                if log.skipped * 10 > cfg.n_iters * images.len() {
                    return Err(Error::Diverged(format!(
                        "more than 10% of reward evaluations were non-finite ({} skipped by iteration {iter})",
                        log.skipped
                    )));
                }
                continue;
            }
            let advantage = if baseline_init { reward - baseline } else { 0.0 };
            baseline = if baseline_init {
                cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * reward
            } else {
                baseline_init = true;
                reward
            };
            iter_reward += reward;
            updates += 1;
            if advantage != 0.0 {
                let (_, grads) = policy.log_prob_grad(image, &actions);
                for (acc, g) in grad_acc.iter_mut().zip(&grads) {
                    *acc += advantage * g;
                }
            }
        }
        if updates > 0 {
            let mut p = policy.params();
            let scale = cfg.lr / updates as f64;
            for (pi, g) in p.iter_mut().zip(&grad_acc) {
                *pi += scale * g;
            }
            policy.set_params(&p);
            log.rewards.push(iter_reward / updates as f64);
        } else {
            log.rewards.push(f64::NAN);
        }
        log.entropy.push(policy.entropy(&images[0]));
    }
    Ok(log)
}

/// Trains the placement policy against the detector with the original
/// object shape, then returns the policy, the argmax locations per scene,
/// and the search log. Deterministic for a fixed seed.
pub fn reinforce_search(
    scenes: &[Scene],
    regions: &[AttackRegion],
    handle: &dyn Detector,
    spec: &RewardSpec,
    mesh_ori: &Mesh,
    material: &MaterialModel,
    k: usize,
    cfg: &ReinforceConfig,
    seed: u64,
) -> Result<(PlacementPolicy, Vec<Vec<(i64, i64)>>, SearchLog)> {
    if scenes.is_empty() {
        return Err(Error::Placement("no scenes to search over".into()));
    }
    if scenes.len() != regions.len() {
        return Err(Error::Placement("one region per scene is required".into()));
    }
    let n_actions = regions.iter().map(AttackRegion::n_cells).min().unwrap();
    if k > n_actions {
        return Err(Error::Placement(format!("k={k} exceeds the smallest grid ({n_actions})")));
    }
    let input_size = scenes[0].size().0;
    let mut policy = PlacementPolicy::new(input_size, n_actions, k, seed);
    let images: Vec<Array3<f64>> = scenes.iter().map(|s| s.base_image.clone()).collect();
    let log = reinforce_with_reward(
        &mut policy,
        &images,
        k,
        |img_idx, actions| {
            let region = &regions[img_idx];
            let locs: Vec<(i64, i64)> =
                actions.iter().map(|&a| region.grid[a % region.grid.len()]).collect();
            scene_reward(&scenes[img_idx], &locs, handle, spec, mesh_ori, material)
        },
        cfg,
        seed ^ 0x5eed,
    )?;
    let best: Vec<Vec<(i64, i64)>> = scenes
        .iter()
        .zip(regions)
        .map(|(scene, region)| {
            policy
                .argmax(&scene.base_image, k)
                .into_iter()
                .map(|a| region.grid[a % region.grid.len()])
                .collect()
        })
        .collect();
    Ok((policy, best, log))
}

/// Fixed placement: the ring corners (cycled if more than four objects are
/// requested).
pub fn place_fix(region: &AttackRegion, image_size: (usize, usize), k: usize) -> Vec<(i64, i64)> {
    let corners = region.corners(image_size);
    (0..k).map(|i| corners[i % corners.len()]).collect()
}

/// Random placement: `k` distinct grid anchors drawn uniformly.
pub fn place_random(region: &AttackRegion, k: usize, seed: u64) -> Result<Vec<(i64, i64)>> {
    if k > region.n_cells() {
        return Err(Error::Placement(format!(
            "k={k} exceeds the {}-cell grid",
            region.n_cells()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..region.n_cells()).collect();
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    Ok(indices[..k].iter().map(|&i| region.grid[i]).collect())
}

/// Greedy placement: score each grid cell by the detector loss with one
/// original object placed there, then take the top `k` cells (ties broken
/// by lowest grid index).
pub fn place_greedy(
    scene: &Scene,
    region: &AttackRegion,
    handle: &dyn Detector,
    k: usize,
    mesh_ori: &Mesh,
    material: &MaterialModel,
) -> Result<Vec<(i64, i64)>> {
    if k > region.n_cells() {
        return Err(Error::Placement(format!(
            "k={k} exceeds the {}-cell grid",
            region.n_cells()
        )));
    }
    let losses: Vec<f64> = exec::map_slice(&region.grid, |&loc| {
        let image = match place_objects(scene, &[mesh_ori.clone()], &[loc], material) {
            Ok(img) => img,
            Err(_) => return f64::NEG_INFINITY,
        };
        handle
            .cls_loss(&image, &scene.annotations, LossMode::Untargeted)
            .unwrap_or(f64::NEG_INFINITY)
    });
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| {
        losses[b].partial_cmp(&losses[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    Ok(order[..k].iter().map(|&i| region.grid[i]).collect())
}
