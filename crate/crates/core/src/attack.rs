//! Adversarial shape optimization through the full differentiable chain
//! (vertices -> thickness -> converter -> composite -> detector loss),
//! plus the comparison baselines: unoptimized objects, constant-color mesh
//! optimization, and direct depth-raster optimization.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::detector::{Detector, LossMode};
use crate::error::{Error, Result};
use crate::geometry::{
    perceptual_loss, perceptual_loss_grad, project_thickness_with_tape, Mesh, ProjectionParams,
};
use crate::physics::{MaterialId, MaterialModel};
use crate::placement::{
    build_region, place_fix, place_greedy, place_random, reinforce_search, AttackRegion,
    ReinforceConfig, RewardSpec,
};
use crate::scene::{composite_with_grad, load_annotations, save_annotations, Scene};

/// Attack hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Adam step size.
    pub lr: f64,
    /// Shape-polishing iterations.
    pub iterations: usize,
    /// Perceptual-loss weight.
    pub beta: f64,
    pub num_objects: usize,
    /// Object footprint side in pixels (at 1 mm/px this is also mm).
    pub footprint: usize,
    pub material: MaterialId,
    pub mode: LossMode,
    /// Images that share one group of adversarial objects.
    pub batch_share: usize,
    /// Vertex z (thickness) ceiling in millimeters.
    pub z_max: f64,
    pub pixel_pitch: f64,
    /// Scale the footprint by 1/sqrt(num_objects) against the 4-object
    /// default so total object area stays constant.
    pub constant_total_area: bool,
    /// Placement grid cells per region.
    pub n_grid: usize,
    /// Region margin around the item box, px; defaults to the footprint.
    pub region_margin: Option<f64>,
    pub reward: RewardSpec,
    pub reinforce: ReinforceConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            iterations: 24,
            beta: 0.1,
            num_objects: 4,
            footprint: 20,
            material: MaterialId::Iron,
            mode: LossMode::Untargeted,
            batch_share: 10,
            z_max: 8.0,
            pixel_pitch: 1.0,
            constant_total_area: false,
            n_grid: 32,
            region_margin: None,
            reward: RewardSpec::default(),
            reinforce: ReinforceConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.beta < 0.0 || self.num_objects == 0 {
            return Err(Error::Domain(
                "attack config requires lr > 0, beta >= 0, num_objects >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Footprint after the constant-total-area rule: the 4-object default
    /// area is preserved as the object count changes.
    pub fn effective_footprint(&self) -> usize {
        if self.constant_total_area {
            let base_area = 4.0 * (self.footprint as f64).powi(2);
            ((base_area / self.num_objects as f64).sqrt().round() as usize).max(4)
        } else {
            self.footprint
        }
    }

    pub fn margin(&self) -> f64 {
        self.region_margin.unwrap_or(self.effective_footprint() as f64)
    }

    pub fn material_model(&self) -> Result<MaterialModel> {
        MaterialModel::builtin(&self.material).ok_or_else(|| {
            Error::Validation(format!("no built-in converter for {:?}", self.material))
        })
    }

    /// The initial object: a 26-vertex sphere squashed to the footprint in
    /// XY and to the thickness ceiling in Z, in local footprint
    /// coordinates.
    pub fn initial_mesh(&self) -> Mesh {
        let fp = self.effective_footprint() as f64 * self.pixel_pitch;
        let rz = self.z_max.min(fp) / 2.0;
        Mesh::uv_sphere(8, 4, [fp / 2.0, fp / 2.0, rz], [fp / 2.0, fp / 2.0, rz])
    }
}

/// Location-search strategy for the attack driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementStrategy {
    Reinforce,
    Fix,
    Random,
    Greedy,
}

impl std::str::FromStr for PlacementStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reinforce" => Ok(Self::Reinforce),
            "fix" => Ok(Self::Fix),
            "random" => Ok(Self::Random),
            "greedy" => Ok(Self::Greedy),
            other => Err(Error::Validation(format!("unknown placement {other:?}"))),
        }
    }
}

/// Comparison attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Full attack: reinforced placement + physical shape polishing.
    XAdv,
    /// Unoptimized initial objects at the ring corners.
    Vanilla,
    /// Shape optimization with a constant-color (non-physical) converter,
    /// corner placement.
    MeshAdv,
    /// Direct optimization of per-object depth rasters, corner placement.
    AdvPatch,
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xadv" => Ok(Self::XAdv),
            "vanilla" => Ok(Self::Vanilla),
            "meshadv" => Ok(Self::MeshAdv),
            "advpatch" => Ok(Self::AdvPatch),
            other => Err(Error::Validation(format!("unknown baseline {other:?}"))),
        }
    }
}

/// One optimization-trace row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    /// Mode-specific attack loss (classification loss for untargeted,
    /// background cross-entropy for targeted).
    pub attack_loss: f64,
    pub perceptual: f64,
    /// Ascent objective: attack term minus beta * perceptual.
    pub total: f64,
}

/// Outcome of one shared-object attack group.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Optimized objects in local footprint coordinates (empty for the
    /// depth-raster baseline).
    pub meshes: Vec<Mesh>,
    pub mesh_ori: Mesh,
    /// Optimized depth rasters for the raster baseline.
    pub patches: Option<Vec<Array2<f64>>>,
    /// Per scene, per object top-left placements.
    pub locations: Vec<Vec<(i64, i64)>>,
    /// Length `iterations + 1` (initial state included).
    pub loss_trace: Vec<LossRecord>,
    /// Final composited image per scene.
    pub images: Vec<Array3<f64>>,
    pub perceptual: f64,
    pub material: MaterialModel,
    pub pixel_pitch: f64,
    pub mode: LossMode,
}

impl AttackResult {
    /// Persists meshes (OBJ subset), locations, the loss trace, composited
    /// images, and an annotation set per image into a directory.
    pub fn save(&self, dir: &Path, scenes: &[Scene]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, mesh) in self.meshes.iter().enumerate() {
            crate::geometry::save_mesh(mesh, &dir.join(format!("object_{i}.obj")))?;
        }
        let mut loc_text = String::from("scene,object,x,y\n");
        for (si, locs) in self.locations.iter().enumerate() {
            for (oi, loc) in locs.iter().enumerate() {
                loc_text.push_str(&format!("{si},{oi},{},{}\n", loc.0, loc.1));
            }
        }
        std::fs::write(dir.join("locations.csv"), loc_text)?;
        let mut trace = String::from("iter,attack_loss,perceptual,total\n");
        for r in &self.loss_trace {
            trace.push_str(&format!(
                "{},{:.9},{:.9},{:.9}\n",
                r.iter, r.attack_loss, r.perceptual, r.total
            ));
        }
        std::fs::write(dir.join("loss_trace.csv"), trace)?;
        for (i, image) in self.images.iter().enumerate() {
            crate::scene::save_image(image, &dir.join(format!("attacked_{i:03}.png")))?;
            save_annotations(&scenes[i].annotations, &dir.join(format!("attacked_{i:03}.json")))?;
        }
        // Manifest fragment for the evaluation tooling.
        let mut manifest = String::from("#split=test\nimage,annotation,severity\n");
        for i in 0..self.images.len() {
            let sev = self.locations[i].len().min(4);
            manifest
                .push_str(&format!("attacked_{i:03}.png,attacked_{i:03}.json,{sev}\n"));
        }
        std::fs::write(dir.join("manifest_fragment.txt"), manifest)?;
        Ok(())
    }
}

/// Loads the locations file written by [`AttackResult::save`].
pub fn load_locations(path: &Path) -> Result<Vec<Vec<(i64, i64)>>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut out: Vec<Vec<(i64, i64)>> = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse { line: idx + 1, msg: format!("bad location row {line:?}") });
        }
        let scene: usize = fields[0].parse().map_err(|e| Error::Parse {
            line: idx + 1,
            msg: format!("{e}"),
        })?;
        while out.len() <= scene {
            out.push(Vec::new());
        }
        let x: i64 = fields[2].parse().map_err(|e| Error::Parse { line: idx + 1, msg: format!("{e}") })?;
        let y: i64 = fields[3].parse().map_err(|e| Error::Parse { line: idx + 1, msg: format!("{e}") })?;
        out[scene].push((x, y));
    }
    Ok(out)
}

/// Rendering flavor used inside the optimization loop.
#[derive(Debug, Clone, Copy)]
enum RenderStyle {
    /// Thickness drives color through the fitted converter.
    Physical,
    /// Flat color wherever the object covers; gradients flow only through
    /// a thin coverage ramp. `color` is the display-space multiplier.
    ConstantColor { color: [f64; 3], ramp: f64 },
}

/// Multiplies one object's footprint into `base` and returns the image plus
/// d(out)/d(depth) aligned with the image.
fn render_object(
    base: &Array3<f64>,
    depth: &crate::geometry::DepthMap,
    material: &MaterialModel,
    style: RenderStyle,
) -> Result<(Array3<f64>, Array3<f64>)> {
    match style {
        RenderStyle::Physical => composite_with_grad(base, depth, material),
        RenderStyle::ConstantColor { color, ramp } => {
            let (_, ih, iw) = base.dim();
            let (dh, dw) = depth.grid.dim();
            let (ox, oy) = depth.origin;
            let mut out = base.clone();
            let mut grad = Array3::zeros(base.dim());
            for j in 0..dh {
                for i in 0..dw {
                    let d = depth.grid[(j, i)];
                    let x = ox + i as i64;
                    let y = oy + j as i64;
                    if x < 0 || y < 0 || x as usize >= iw || y as usize >= ih {
                        if d > 1e-9 {
                            return Err(Error::Placement(format!(
                                "footprint overflows the image at ({x},{y})"
                            )));
                        }
                        continue;
                    }
                    if d == 0.0 {
                        continue;
                    }
                    let alpha = (d / ramp).min(1.0);
                    let dalpha = if d < ramp { 1.0 / ramp } else { 0.0 };
                    let (x, y) = (x as usize, y as usize);
                    for ch in 0..3 {
                        let m = 1.0 - alpha * (1.0 - color[ch]);
                        let b = base[(ch, y, x)];
                        out[(ch, y, x)] = b * m;
                        grad[(ch, y, x)] = -b * dalpha * (1.0 - color[ch]);
                    }
                }
            }
            Ok((out, grad))
        }
    }
}

struct GroupForward {
    images: Vec<Array3<f64>>,
    attack_loss: f64,
    /// d(objective)/d(vertex) per object, mm units, attack term only.
    vertex_grads: Vec<Vec<[f64; 3]>>,
}

/// Forward + backward over one shared-object group: composite all objects
/// onto every scene, evaluate the detector loss, and pull gradients back to
/// the vertex coordinates. The attack term is averaged over scenes.
fn group_pass(
    meshes: &[Mesh],
    scenes: &[Scene],
    locations: &[Vec<(i64, i64)>],
    handle: &dyn Detector,
    material: &MaterialModel,
    style: RenderStyle,
    mode: LossMode,
    params: &ProjectionParams,
    want_grads: bool,
) -> Result<GroupForward> {
    let n_scenes = scenes.len() as f64;
    let mut images = Vec::with_capacity(scenes.len());
    let mut attack_loss = 0.0;
    let mut vertex_grads: Vec<Vec<[f64; 3]>> =
        meshes.iter().map(|m| vec![[0.0; 3]; m.vertices().len()]).collect();

    // Project each object once per iteration (shared across scenes).
    let mut depths = Vec::with_capacity(meshes.len());
    let mut tapes = Vec::with_capacity(meshes.len());
    for mesh in meshes {
        let shifted = mesh.translated([
            2.0 * params.pixel_pitch,
            2.0 * params.pixel_pitch,
            0.0,
        ]);
        let (depth, tape) = project_thickness_with_tape(&shifted, params)?;
        depths.push(depth);
        tapes.push(tape);
    }

    // The attack objective ascends the untargeted loss but descends the
    // targeted background cross-entropy.
    let sign = match mode {
        LossMode::Untargeted => 1.0,
        LossMode::TargetedBackground => -1.0,
    };

    for (scene, locs) in scenes.iter().zip(locations) {
        let (iw, ih) = scene.size();
        // Composite progressively, then per-object context images for
        // gradients: context_k = base * prod_{j != k} M_j. Rendering uses
        // the image-cropped raster (border objects lose only soft pad);
        // gradient mapping uses the uncropped raster the tape is aligned
        // with.
        let mut image = scene.base_image.clone();
        let mut placed = Vec::with_capacity(meshes.len());
        for (k, depth) in depths.iter().enumerate() {
            let mut d = depth.clone();
            d.origin = (locs[k].0 - 2, locs[k].1 - 2);
            let (next, _) = render_object(&image, &d.cropped_to(iw, ih), material, style)?;
            image = next;
            placed.push(d);
        }
        if !want_grads {
            let loss = handle.cls_loss(&image, &scene.annotations, mode)?;
            attack_loss += loss / n_scenes;
            images.push(image);
            continue;
        }
        let (loss, dimage) = handle.cls_loss_grad_image(&image, &scene.annotations, mode)?;
        attack_loss += loss / n_scenes;
        for k in 0..meshes.len() {
            let mut context = scene.base_image.clone();
            for (j, d) in placed.iter().enumerate() {
                if j != k {
                    let (next, _) =
                        render_object(&context, &d.cropped_to(iw, ih), material, style)?;
                    context = next;
                }
            }
            let (_, dout_ddepth) =
                render_object(&context, &placed[k].cropped_to(iw, ih), material, style)?;
            // d(loss)/d(depth grid), mapped into footprint coordinates.
            let (dh, dw) = placed[k].grid.dim();
            let (ox, oy) = placed[k].origin;
            let (_, ih, iw) = dimage.dim();
            let mut ddepth = Array2::zeros((dh, dw));
            for j in 0..dh {
                for i in 0..dw {
                    let x = ox + i as i64;
                    let y = oy + j as i64;
                    if x < 0 || y < 0 || x as usize >= iw || y as usize >= ih {
                        continue;
                    }
                    let (x, y) = (x as usize, y as usize);
                    let mut acc = 0.0;
                    for ch in 0..3 {
                        acc += dimage[(ch, y, x)] * dout_ddepth[(ch, y, x)];
                    }
                    ddepth[(j, i)] = acc;
                }
            }
            let vg = tapes[k].vjp(&ddepth);
            for (acc, g) in vertex_grads[k].iter_mut().zip(&vg) {
                for a in 0..3 {
                    acc[a] += sign * g[a] / n_scenes;
                }
            }
        }
        images.push(image);
    }
    Ok(GroupForward { images, attack_loss, vertex_grads })
}

/// The group's ascent objective at the given meshes (used by gradient
/// checks): attack term minus beta times the summed perceptual loss.
pub fn attack_objective(
    meshes: &[Mesh],
    mesh_ori: &Mesh,
    scenes: &[Scene],
    locations: &[Vec<(i64, i64)>],
    handle: &dyn Detector,
    cfg: &AttackConfig,
) -> Result<f64> {
    let material = cfg.material_model()?;
    let params = projection_params(cfg);
    let fwd = group_pass(
        meshes,
        scenes,
        locations,
        handle,
        &material,
        RenderStyle::Physical,
        cfg.mode,
        &params,
        false,
    )?;
    let sign = if cfg.mode == LossMode::Untargeted { 1.0 } else { -1.0 };
    let mut perc = 0.0;
    for mesh in meshes {
        perc += perceptual_loss(mesh, mesh_ori)?;
    }
    Ok(sign * fwd.attack_loss - cfg.beta * perc)
}

fn projection_params(cfg: &AttackConfig) -> ProjectionParams {
    let fp = cfg.effective_footprint();
    ProjectionParams::new(cfg.pixel_pitch, (fp + 4, fp + 4))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    /// Ascent step along `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] += self.lr * mh / (vh.sqrt() + EPS);
        }
    }
}

fn meshes_to_flat(meshes: &[Mesh]) -> Vec<f64> {
    let mut out = Vec::new();
    for mesh in meshes {
        for v in mesh.vertices() {
            out.extend_from_slice(v);
        }
    }
    out
}

fn flat_to_meshes(template: &[Mesh], flat: &[f64], cfg: &AttackConfig) -> Result<Vec<Mesh>> {
    let fp = cfg.effective_footprint() as f64 * cfg.pixel_pitch;
    let mut out = Vec::with_capacity(template.len());
    let mut off = 0;
    for mesh in template {
        let n = mesh.vertices().len();
        let mut verts = Vec::with_capacity(n);
        for i in 0..n {
            let base = off + i * 3;
            verts.push([
                flat[base].clamp(0.0, fp),
                flat[base + 1].clamp(0.0, fp),
                flat[base + 2].clamp(0.0, cfg.z_max),
            ]);
        }
        off += n * 3;
        out.push(mesh.with_vertices(verts)?);
    }
    Ok(out)
}

/// Shape polishing for one shared-object group: Adam ascent on vertex
/// coordinates only (topology fixed), with per-step clipping of XY to the
/// footprint box and Z to the thickness ceiling.
pub fn polish_shape(
    scenes: &[Scene],
    locations: &[Vec<(i64, i64)>],
    handle: &dyn Detector,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    polish_group(scenes, locations, handle, cfg, RenderStyle::Physical)
}

fn polish_group(
    scenes: &[Scene],
    locations: &[Vec<(i64, i64)>],
    handle: &dyn Detector,
    cfg: &AttackConfig,
    style: RenderStyle,
) -> Result<AttackResult> {
    cfg.validate()?;
    if scenes.is_empty() || scenes.len() > cfg.batch_share {
        return Err(Error::Placement(format!(
            "group must hold 1..={} scenes, got {}",
            cfg.batch_share,
            scenes.len()
        )));
    }
    if scenes.len() != locations.len() {
        return Err(Error::Placement("one location set per scene is required".into()));
    }
    for locs in locations {
        if locs.len() != cfg.num_objects {
            return Err(Error::Placement(format!(
                "expected {} locations per scene, got {}",
                cfg.num_objects,
                locs.len()
            )));
        }
    }
    if cfg.iterations > 0 && !handle.supports_input_grad() {
        return Err(Error::Capability(
            "shape polishing requires a detector with input gradients".into(),
        ));
    }
    let material = cfg.material_model()?;
    let params = projection_params(cfg);
    let mesh_ori = cfg.initial_mesh();
    let mut meshes: Vec<Mesh> = (0..cfg.num_objects).map(|_| mesh_ori.clone()).collect();

    let mut flat = meshes_to_flat(&meshes);
    // Moments reset per mesh group.
    let mut adam = Adam::new(flat.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);

    let record = |meshes: &[Mesh], iter: usize, handle: &dyn Detector| -> Result<LossRecord> {
        let fwd = group_pass(
            meshes, scenes, locations, handle, &material, style, cfg.mode, &params, false,
        )?;
        let mut perc = 0.0;
        for mesh in meshes {
            perc += perceptual_loss(mesh, &mesh_ori)?;
        }
        let sign = if cfg.mode == LossMode::Untargeted { 1.0 } else { -1.0 };
        Ok(LossRecord {
            iter,
            attack_loss: fwd.attack_loss,
            perceptual: perc,
            total: sign * fwd.attack_loss - cfg.beta * perc,
        })
    };

    trace.push(record(&meshes, 0, handle)?);
    let mut retried = false;
    let mut iter = 0;
    while iter < cfg.iterations {
        let fwd = group_pass(
            &meshes, scenes, locations, handle, &material, style, cfg.mode, &params, true,
        )?;
        let mut grad = Vec::with_capacity(flat.len());
        for (k, mesh) in meshes.iter().enumerate() {
            let perc_grad = perceptual_loss_grad(mesh, &mesh_ori)?;
            for (vg, pg) in fwd.vertex_grads[k].iter().zip(&perc_grad) {
                for a in 0..3 {
                    grad.push(vg[a] - cfg.beta * pg[a]);
                }
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            if retried {
                return Err(Error::Diverged(format!(
                    "non-finite gradient at iteration {iter} after retry; trace: {:?}",
                    trace.iter().map(|r| r.total).collect::<Vec<_>>()
                )));
            }
            retried = true;
            adam.lr /= 2.0;
            continue;
        }
        adam.step(&mut flat, &grad);
        meshes = flat_to_meshes(&meshes, &flat, cfg)?;
        flat = meshes_to_flat(&meshes); // re-read clipped values
        iter += 1;
        trace.push(record(&meshes, iter, handle)?);
    }

    let final_fwd = group_pass(
        &meshes, scenes, locations, handle, &material, style, cfg.mode, &params, false,
    )?;
    let mut perc = 0.0;
    for mesh in &meshes {
        perc += perceptual_loss(mesh, &mesh_ori)?;
    }
    Ok(AttackResult {
        meshes,
        mesh_ori,
        patches: None,
        locations: locations.to_vec(),
        loss_trace: trace,
        images: final_fwd.images,
        perceptual: perc,
        material,
        pixel_pitch: cfg.pixel_pitch,
        mode: cfg.mode,
    })
}

/// Builds per-scene regions for the first annotated item of each scene.
pub fn build_regions(scenes: &[Scene], cfg: &AttackConfig) -> Result<Vec<AttackRegion>> {
    scenes
        .iter()
        .map(|scene| {
            let ann = scene
                .annotations
                .first()
                .ok_or_else(|| Error::Region("scene has no annotated item".into()))?;
            build_region(
                ann,
                cfg.effective_footprint(),
                scene.size(),
                cfg.n_grid,
                cfg.margin(),
            )
        })
        .collect()
}

/// Chooses per-scene locations with the given strategy.
pub fn choose_locations(
    scenes: &[Scene],
    regions: &[AttackRegion],
    handle: &dyn Detector,
    cfg: &AttackConfig,
    strategy: PlacementStrategy,
    seed: u64,
) -> Result<Vec<Vec<(i64, i64)>>> {
    let k = cfg.num_objects;
    match strategy {
        PlacementStrategy::Fix => Ok(scenes
            .iter()
            .zip(regions)
            .map(|(scene, region)| place_fix(region, scene.size(), k))
            .collect()),
        PlacementStrategy::Random => scenes
            .iter()
            .zip(regions)
            .enumerate()
            .map(|(i, (_, region))| place_random(region, k, seed ^ (i as u64 + 1)))
            .collect(),
        PlacementStrategy::Greedy => {
            let mesh = cfg.initial_mesh();
            let material = cfg.material_model()?;
            scenes
                .iter()
                .zip(regions)
                .map(|(scene, region)| place_greedy(scene, region, handle, k, &mesh, &material))
                .collect()
        }
        PlacementStrategy::Reinforce => {
            let mesh = cfg.initial_mesh();
            let material = cfg.material_model()?;
            let (_, best, _) = reinforce_search(
                scenes,
                regions,
                handle,
                &cfg.reward,
                &mesh,
                &material,
                k,
                &cfg.reinforce,
                seed,
            )?;
            Ok(best)
        }
    }
}

/// Full attack driver: chunk scenes into shared-object groups, choose
/// locations per group with the strategy, polish shapes, and return one
/// result per group.
pub fn run_attack(
    scenes: &[Scene],
    handle: &dyn Detector,
    cfg: &AttackConfig,
    strategy: PlacementStrategy,
    seed: u64,
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    let mut results = Vec::new();
    for (gi, group) in scenes.chunks(cfg.batch_share).enumerate() {
        let regions = build_regions(group, cfg)?;
        let locations =
            choose_locations(group, &regions, handle, cfg, strategy, seed ^ (gi as u64) << 8)?;
        results.push(polish_group(group, &locations, handle, cfg, RenderStyle::Physical)?);
    }
    Ok(results)
}

/// Unoptimized initial objects at the ring corners; definitionally equal to
/// `polish_shape` with zero iterations and corner placement.
pub fn attack_vanilla(
    scenes: &[Scene],
    handle: &dyn Detector,
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    let cfg = AttackConfig { iterations: 0, ..cfg.clone() };
    let mut results = Vec::new();
    for group in scenes.chunks(cfg.batch_share) {
        let regions = build_regions(group, &cfg)?;
        let locations = choose_locations(group, &regions, handle, &cfg, PlacementStrategy::Fix, 0)?;
        results.push(polish_group(group, &locations, handle, &cfg, RenderStyle::Physical)?);
    }
    Ok(results)
}

/// Shape optimization through a constant-color converter (the rendered
/// color ignores thickness), corner placement.
pub fn attack_meshadv(
    scenes: &[Scene],
    handle: &dyn Detector,
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    let material = cfg.material_model()?;
    let style = RenderStyle::ConstantColor {
        color: material.transmittance(cfg.z_max / 2.0),
        ramp: 0.5,
    };
    let mut results = Vec::new();
    for group in scenes.chunks(cfg.batch_share) {
        let regions = build_regions(group, cfg)?;
        let locations = choose_locations(group, &regions, handle, cfg, PlacementStrategy::Fix, 0)?;
        results.push(polish_group(group, &locations, handle, cfg, style)?);
    }
    Ok(results)
}

/// Direct Adam optimization of per-object depth rasters (no mesh), corner
/// placement, zero-initialized so the first composite equals the clean
/// image.
pub fn attack_advpatch(
    scenes: &[Scene],
    handle: &dyn Detector,
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    if !handle.supports_input_grad() {
        return Err(Error::Capability(
            "depth-raster optimization requires a detector with input gradients".into(),
        ));
    }
    let material = cfg.material_model()?;
    let fp = cfg.effective_footprint();
    let mut results = Vec::new();
    for group in scenes.chunks(cfg.batch_share) {
        let regions = build_regions(group, cfg)?;
        let locations =
            choose_locations(group, &regions, handle, cfg, PlacementStrategy::Fix, 0)?;
        let mut patches: Vec<Array2<f64>> =
            (0..cfg.num_objects).map(|_| Array2::zeros((fp, fp))).collect();
        let mut flat: Vec<f64> = vec![0.0; cfg.num_objects * fp * fp];
        let mut adam = Adam::new(flat.len(), cfg.lr);
        let mut trace = Vec::with_capacity(cfg.iterations + 1);
        let sign = if cfg.mode == LossMode::Untargeted { 1.0 } else { -1.0 };

        let forward = |patches: &[Array2<f64>],
                       want_grads: bool|
         -> Result<(f64, Vec<Array3<f64>>, Vec<Array2<f64>>)> {
            let mut total = 0.0;
            let mut images = Vec::new();
            let mut grads: Vec<Array2<f64>> =
                patches.iter().map(|p| Array2::zeros(p.dim())).collect();
            for (scene, locs) in group.iter().zip(&locations) {
                let mut image = scene.base_image.clone();
                let mut placed = Vec::new();
                for (k, patch) in patches.iter().enumerate() {
                    let depth = crate::geometry::DepthMap {
                        grid: patch.clone(),
                        pixel_pitch: cfg.pixel_pitch,
                        origin: locs[k],
                    };
                    let (next, _) = composite_with_grad(&image, &depth, &material)?;
                    image = next;
                    placed.push(depth);
                }
                if want_grads {
                    let (loss, dimage) =
                        handle.cls_loss_grad_image(&image, &scene.annotations, cfg.mode)?;
                    total += loss / group.len() as f64;
                    for k in 0..patches.len() {
                        let mut context = scene.base_image.clone();
                        for (j, d) in placed.iter().enumerate() {
                            if j != k {
                                let (next, _) = composite_with_grad(&context, d, &material)?;
                                context = next;
                            }
                        }
                        let (_, dout) = composite_with_grad(&context, &placed[k], &material)?;
                        let (ox, oy) = placed[k].origin;
                        for j in 0..fp {
                            for i in 0..fp {
                                let (x, y) = ((ox + i as i64) as usize, (oy + j as i64) as usize);
                                let mut acc = 0.0;
                                for ch in 0..3 {
                                    acc += dimage[(ch, y, x)] * dout[(ch, y, x)];
                                }
                                grads[k][(j, i)] += sign * acc / group.len() as f64;
                            }
                        }
                    }
                } else {
                    total += handle.cls_loss(&image, &scene.annotations, cfg.mode)?
                        / group.len() as f64;
                }
                images.push(image);
            }
            Ok((total, images, grads))
        };

        let (loss0, _, _) = forward(&patches, false)?;
        trace.push(LossRecord { iter: 0, attack_loss: loss0, perceptual: 0.0, total: sign * loss0 });
        for iter in 0..cfg.iterations {
            let (_, _, grads) = forward(&patches, true)?;
            let gflat: Vec<f64> = grads.iter().flat_map(|g| g.iter().cloned()).collect();
            adam.step(&mut flat, &gflat);
            for (k, patch) in patches.iter_mut().enumerate() {
                for j in 0..fp {
                    for i in 0..fp {
                        patch[(j, i)] = flat[k * fp * fp + j * fp + i].clamp(0.0, cfg.z_max);
                    }
                }
            }
            flat = patches.iter().flat_map(|p| p.iter().cloned()).collect();
            let (loss, _, _) = forward(&patches, false)?;
            trace.push(LossRecord {
                iter: iter + 1,
                attack_loss: loss,
                perceptual: 0.0,
                total: sign * loss,
            });
        }
        let (_, images, _) = forward(&patches, false)?;
        results.push(AttackResult {
            meshes: Vec::new(),
            mesh_ori: cfg.initial_mesh(),
            patches: Some(patches),
            locations: locations.clone(),
            loss_trace: trace,
            images,
            perceptual: 0.0,
            material: material.clone(),
            pixel_pitch: cfg.pixel_pitch,
            mode: cfg.mode,
        });
    }
    Ok(results)
}

/// Runs the named baseline (or the full attack).
pub fn run_baseline(
    scenes: &[Scene],
    handle: &dyn Detector,
    cfg: &AttackConfig,
    baseline: Baseline,
    seed: u64,
) -> Result<Vec<AttackResult>> {
    match baseline {
        Baseline::XAdv => run_attack(scenes, handle, cfg, PlacementStrategy::Reinforce, seed),
        Baseline::Vanilla => attack_vanilla(scenes, handle, cfg),
        Baseline::MeshAdv => attack_meshadv(scenes, handle, cfg),
        Baseline::AdvPatch => attack_advpatch(scenes, handle, cfg),
    }
}

/// Re-loads attacked images from a result directory as a dataset fragment.
pub fn load_attacked_dataset(dir: &Path) -> Result<(Vec<Array3<f64>>, Vec<Vec<crate::scene::Annotation>>)> {
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut idx = 0;
    loop {
        let img_path = dir.join(format!("attacked_{idx:03}.png"));
        if !img_path.exists() {
            break;
        }
        images.push(crate::scene::load_image(&img_path)?);
        annotations.push(load_annotations(&dir.join(format!("attacked_{idx:03}.json")))?);
        idx += 1;
    }
    if images.is_empty() {
        return Err(Error::MissingArtifact(dir.join("attacked_000.png")));
    }
    Ok((images, annotations))
}
