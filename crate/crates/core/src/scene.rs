//! Synthetic X-ray luggage scenes, adversarial-object compositing,
//! annotations, and dataset manifests.
//!
//! Compositing is multiplicative: every object attenuates the beam by its
//! material transmittance, so overlapping items multiply and order never
//! matters. Synthetic prohibited items (knife / scissors / wrench polygon
//! families) and clutter are rendered through the same converter as the
//! adversarial objects, keeping one imaging model for the whole toolkit.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{project_thickness, DepthMap, Mesh, ProjectionParams};
use crate::physics::MaterialModel;

/// Axis-aligned box in pixel coordinates, `min` inclusive, `max` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn is_valid_within(&self, width: usize, height: usize) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width as f64
            && self.y_max <= height as f64
    }
}

/// Ground-truth box. Class 0 is reserved for background; real classes start
/// at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
    #[serde(default)]
    pub difficult: bool,
}

impl Annotation {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.class_id == 0 {
            return Err(Error::Validation("class 0 is reserved for background".into()));
        }
        if !self.bbox.is_valid_within(width, height) {
            return Err(Error::Validation(format!("bbox {:?} invalid for {width}x{height}", self.bbox)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationFile {
    objects: Vec<Annotation>,
}

pub fn save_annotations(annotations: &[Annotation], path: &Path) -> Result<()> {
    let file = AnnotationFile { objects: annotations.to_vec() };
    std::fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file: AnnotationFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(file.objects)
}

/// An adversarial object placed on a scene.
#[derive(Debug, Clone)]
pub struct PlacedObject {
    pub mesh: Mesh,
    /// Top-left corner of the object footprint in image pixels.
    pub location: (i64, i64),
    pub material: MaterialModel,
}

/// A rendered luggage scene plus its ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Display-space image in `[0,1]`, shape `[3, H, W]`.
    pub base_image: Array3<f64>,
    pub annotations: Vec<Annotation>,
    pub placed_objects: Vec<PlacedObject>,
    pub rng_seed: u64,
}

impl Scene {
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.base_image.dim();
        (w, h)
    }
}

/// Composites a depth map onto a base image: each covered pixel is
/// multiplied channel-wise by the material transmittance of the local
/// thickness. Depth-zero pixels multiply by exactly 1.
pub fn composite(base: &Array3<f64>, depth: &DepthMap, model: &MaterialModel) -> Result<Array3<f64>> {
    composite_with_grad(base, depth, model).map(|(img, _)| img)
}

/// Like [`composite`] but also returns `d(out_ch)/d(depth)` per covered
/// pixel for the attack backward pass, laid out as `[3, H, W]` aligned with
/// the output image.
pub fn composite_with_grad(
    base: &Array3<f64>,
    depth: &DepthMap,
    model: &MaterialModel,
) -> Result<(Array3<f64>, Array3<f64>)> {
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
            let inside = x >= 0 && y >= 0 && (x as usize) < iw && (y as usize) < ih;
            if !inside {
                if d > 1e-9 {
                    return Err(Error::Placement(format!(
                        "depth footprint overflows the image at ({x},{y}) with thickness {d}"
                    )));
                }
                continue;
            }
            // transmittance(0) is exactly 1, so zero-depth pixels keep the
            // base value bitwise while still carrying a gradient (zero-
            // initialized rasters must be able to move off the floor).
            let (m, dm) = model.transmittance_with_grad(d);
            let (x, y) = (x as usize, y as usize);
            for ch in 0..3 {
                let b = base[(ch, y, x)];
                out[(ch, y, x)] = b * m[ch];
                grad[(ch, y, x)] = b * dm[ch];
            }
        }
    }
    Ok((out, grad))
}

/// Projects each mesh and composites it at its location. The result is
/// order-independent because transmittances multiply.
pub fn place_objects(
    scene: &Scene,
    meshes: &[Mesh],
    locations: &[(i64, i64)],
    model: &MaterialModel,
) -> Result<Array3<f64>> {
    place_objects_constrained(scene, meshes, locations, model, None)
}

/// [`place_objects`] with an optional forbidden box that no object
/// footprint may intersect.
pub fn place_objects_constrained(
    scene: &Scene,
    meshes: &[Mesh],
    locations: &[(i64, i64)],
    model: &MaterialModel,
    forbidden: Option<&BBox>,
) -> Result<Array3<f64>> {
    if meshes.len() != locations.len() {
        return Err(Error::Placement(format!(
            "{} meshes but {} locations",
            meshes.len(),
            locations.len()
        )));
    }
    let (iw, ih) = scene.size();
    let mut image = scene.base_image.clone();
    for (mesh, &loc) in meshes.iter().zip(locations) {
        let (lo, hi) = mesh.bounds();
        let fw = (hi[0] - lo[0].min(0.0)).ceil() as i64;
        let fh = (hi[1] - lo[1].min(0.0)).ceil() as i64;
        if loc.0 < 0 || loc.1 < 0 || loc.0 + fw > iw as i64 || loc.1 + fh > ih as i64 {
            return Err(Error::Placement(format!(
                "object footprint at {loc:?} (size {fw}x{fh}) leaves the {iw}x{ih} image"
            )));
        }
        let depth = project_object(mesh, loc, 1.0)?.cropped_to(iw, ih);
        if let Some(fb) = forbidden {
            let (dh, dw) = depth.grid.dim();
            let obj = BBox::new(
                depth.origin.0 as f64,
                depth.origin.1 as f64,
                (depth.origin.0 + dw as i64) as f64,
                (depth.origin.1 + dh as i64) as f64,
            );
            if obj.intersection(fb) > 0.0 {
                return Err(Error::Constraint(format!(
                    "object at {loc:?} intersects the forbidden region {fb:?}"
                )));
            }
        }
        image = composite(&image, &depth, model)?;
    }
    Ok(image)
}

/// Projects an attack mesh (local coordinates, mm) into a depth raster
/// positioned at `location` on the image. A 2 px soft-edge pad is kept
/// around the footprint.
pub fn project_object(mesh: &Mesh, location: (i64, i64), pixel_pitch: f64) -> Result<DepthMap> {
    let pad = 2i64;
    let (lo, hi) = mesh.bounds();
    let w = ((hi[0] - lo[0].min(0.0)) / pixel_pitch).ceil() as usize + 2 * pad as usize;
    let h = ((hi[1] - lo[1].min(0.0)) / pixel_pitch).ceil() as usize + 2 * pad as usize;
    let shifted = mesh.translated([pad as f64 * pixel_pitch, pad as f64 * pixel_pitch, 0.0]);
    let params = ProjectionParams::new(pixel_pitch, (w, h));
    let mut depth = project_thickness(&shifted, &params)?;
    depth.origin = (location.0 - pad, location.1 - pad);
    Ok(depth)
}

/// Parameterized scene generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Millimeters per pixel.
    pub pixel_pitch: f64,
    /// Inclusive range of prohibited item count.
    pub prohibited_range: (usize, usize),
    /// Inclusive range of clutter item count.
    pub clutter_range: (usize, usize),
    /// Thickness range (mm) for prohibited iron items.
    pub prohibited_thickness: (f64, f64),
    /// Render the suitcase shell.
    pub bag: bool,
    pub class_names: Vec<String>,
}

impl SceneSpec {
    /// Class id for a name (ids start at 1; 0 is background).
    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name).map(|i| i + 1)
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas: 300,
            pixel_pitch: 1.0,
            prohibited_range: (1, 1),
            clutter_range: (2, 5),
            prohibited_thickness: (2.5, 4.0),
            bag: true,
            class_names: vec!["knife".into(), "scissors".into(), "pistol".into()],
        }
    }
}

impl SceneSpec {
    /// The fast profile used by tests and CI: small canvas, fewer clutter
    /// items.
    pub fn mini() -> Self {
        Self { canvas: 160, clutter_range: (2, 4), ..Self::default() }
    }
}

/// A 2D shape primitive in image pixel coordinates.
enum Part {
    Polygon(Vec<(f64, f64)>),
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, rot: f64 },
    Ring { cx: f64, cy: f64, r_outer: f64, r_inner: f64 },
}

impl Part {
    fn covers(&self, x: f64, y: f64) -> bool {
        match self {
            Part::Polygon(pts) => {
                // Even-odd rule.
                let mut inside = false;
                let n = pts.len();
                for i in 0..n {
                    let (x1, y1) = pts[i];
                    let (x2, y2) = pts[(i + 1) % n];
                    if (y1 > y) != (y2 > y) {
                        let t = (y - y1) / (y2 - y1);
                        if x < x1 + t * (x2 - x1) {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
            Part::Ellipse { cx, cy, rx, ry, rot } => {
                let (s, c) = rot.sin_cos();
                let dx = x - cx;
                let dy = y - cy;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Part::Ring { cx, cy, r_outer, r_inner } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= r_outer * r_outer && d2 >= r_inner * r_inner
            }
        }
    }
}

fn rotate_point(p: (f64, f64), center: (f64, f64), angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let dx = p.0 - center.0;
    let dy = p.1 - center.1;
    (center.0 + c * dx - s * dy, center.1 + s * dx + c * dy)
}

fn rotated_rect(cx: f64, cy: f64, w: f64, h: f64, angle: f64) -> Part {
    let pts = [
        (cx - w / 2.0, cy - h / 2.0),
        (cx + w / 2.0, cy - h / 2.0),
        (cx + w / 2.0, cy + h / 2.0),
        (cx - w / 2.0, cy + h / 2.0),
    ];
    Part::Polygon(pts.iter().map(|&p| rotate_point(p, (cx, cy), angle)).collect())
}

/// Rasterizes parts into a boolean mask over the canvas.
fn rasterize(parts: &[Part], canvas: usize) -> Array2<bool> {
    let mut mask = Array2::from_elem((canvas, canvas), false);
    for y in 0..canvas {
        for x in 0..canvas {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if parts.iter().any(|p| p.covers(px, py)) {
                mask[(y, x)] = true;
            }
        }
    }
    mask
}

fn mask_bbox(mask: &Array2<bool>) -> Option<BBox> {
    let (h, w) = mask.dim();
    let mut x0 = w;
    let mut y0 = h;
    let mut x1 = 0usize;
    let mut y1 = 0usize;
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    any.then(|| BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
}

/// Multiplies a constant transmittance into the masked pixels.
fn stamp(image: &mut Array3<f64>, mask: &Array2<bool>, transmittance: [f64; 3]) {
    let (h, w) = mask.dim();
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                for ch in 0..3 {
                    image[(ch, y, x)] *= transmittance[ch];
                }
            }
        }
    }
}

/// Prohibited item shape families. Each returns parts centered at `c` with
/// a characteristic size `len`, rotated by `angle`.
fn knife_parts(c: (f64, f64), len: f64, width: f64, angle: f64) -> Vec<Part> {
    let blade_len = 0.62 * len;
    let handle_len = len - blade_len;
    // Blade triangle pointing +x from the item center, handle behind.
    let tip = (c.0 + len / 2.0, c.1);
    let heel = c.0 + len / 2.0 - blade_len;
    let blade = vec![tip, (heel, c.1 - width / 2.0), (heel, c.1 + width / 2.0)];
    let handle = [
        (heel, c.1 - width * 0.32),
        (heel, c.1 + width * 0.32),
        (heel - handle_len, c.1 + width * 0.32),
        (heel - handle_len, c.1 - width * 0.32),
    ];
    vec![
        Part::Polygon(blade.iter().map(|&p| rotate_point(p, c, angle)).collect()),
        Part::Polygon(handle.iter().map(|&p| rotate_point(p, c, angle)).collect()),
    ]
}

fn scissors_parts(c: (f64, f64), len: f64, width: f64, angle: f64) -> Vec<Part> {
    let open = 0.22; // half-angle between the blades
    let mut parts = Vec::new();
    for side in [-1.0, 1.0] {
        let blade_angle = angle + side * open;
        let tip = rotate_point((c.0 + len * 0.52, c.1), c, blade_angle);
        let b1 = rotate_point((c.0 - len * 0.1, c.1 - width * 0.22), c, blade_angle);
        let b2 = rotate_point((c.0 - len * 0.1, c.1 + width * 0.22), c, blade_angle);
        parts.push(Part::Polygon(vec![tip, b1, b2]));
        let ring_c = rotate_point((c.0 - len * 0.34, c.1), c, blade_angle);
        parts.push(Part::Ring {
            cx: ring_c.0,
            cy: ring_c.1,
            r_outer: width * 0.42,
            r_inner: width * 0.22,
        });
    }
    parts
}

fn pistol_parts(c: (f64, f64), len: f64, width: f64, angle: f64) -> Vec<Part> {
    // L-silhouette: barrel along +x with a grip dropping at the rear.
    let barrel_c = rotate_point((c.0 + len * 0.08, c.1 - width * 0.18), c, angle);
    let barrel = rotated_rect(barrel_c.0, barrel_c.1, len * 0.84, width * 0.34, angle);
    let grip_c = rotate_point((c.0 - len * 0.26, c.1 + width * 0.22), c, angle);
    let grip = rotated_rect(grip_c.0, grip_c.1, width * 0.36, len * 0.42, angle + 0.25);
    let guard_c = rotate_point((c.0 - len * 0.05, c.1 + width * 0.16), c, angle);
    let guard = Part::Ring {
        cx: guard_c.0,
        cy: guard_c.1,
        r_outer: width * 0.26,
        r_inner: width * 0.14,
    };
    vec![barrel, grip, guard]
}

/// Deterministic scene synthesis. The same seed yields a bit-identical
/// scene.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas = spec.canvas;
    let mut image = Array3::from_elem((3, canvas, canvas), 1.0);

    let iron = MaterialModel::iron();
    let aluminum = MaterialModel::aluminum();
    let plastic = MaterialModel::plastic();

    if spec.bag {
        // Suitcase: pale organic interior plus a thicker shell border.
        let m = canvas as f64 * 0.04;
        let interior = Part::Polygon(vec![
            (m, m),
            (canvas as f64 - m, m),
            (canvas as f64 - m, canvas as f64 - m),
            (m, canvas as f64 - m),
        ]);
        let mask = rasterize(&[interior], canvas);
        stamp(&mut image, &mask, plastic.transmittance(8.0));
        let border = canvas as f64 * 0.015;
        let shell = Part::Polygon(vec![
            (m - border, m - border),
            (canvas as f64 - m + border, m - border),
            (canvas as f64 - m + border, canvas as f64 - m + border),
            (m - border, canvas as f64 - m + border),
        ]);
        let shell_mask = rasterize(&[shell], canvas);
        let mut ring_mask = shell_mask.clone();
        ndarray::Zip::from(&mut ring_mask).and(&mask).for_each(|r, &i| *r = *r && !i);
        stamp(&mut image, &ring_mask, plastic.transmittance(40.0));
    }

    // Clutter first; overlap with prohibited items is bounded below.
    let n_clutter = rng.random_range(spec.clutter_range.0..=spec.clutter_range.1);
    let mut clutter_masks: Vec<(Array2<bool>, [f64; 3])> = Vec::new();
    for _ in 0..n_clutter {
        let kind = rng.random_range(0..3);
        let size = canvas as f64 * rng.random_range(0.06..0.22);
        let cx = rng.random_range(canvas as f64 * 0.12..canvas as f64 * 0.88);
        let cy = rng.random_range(canvas as f64 * 0.12..canvas as f64 * 0.88);
        let rot = rng.random_range(0.0..std::f64::consts::PI);
        let part = match kind {
            0 => rotated_rect(cx, cy, size, size * rng.random_range(0.4..1.0), rot),
            1 => Part::Ellipse {
                cx,
                cy,
                rx: size / 2.0,
                ry: size / 2.0 * rng.random_range(0.5..1.0),
                rot,
            },
            _ => Part::Ring { cx, cy, r_outer: size / 2.0, r_inner: size / 4.0 },
        };
        // Iron blobs appear often enough that the detector learns benign
        // dark metal is not a prohibited item.
        let material_pick: f64 = rng.random_range(0.0..1.0);
        let (model, thickness) = if material_pick < 0.40 {
            let t = rng.random_range(60.0..110.0);
            (&plastic, t)
        } else if material_pick < 0.70 {
            let t = rng.random_range(5.0..40.0);
            (&aluminum, t)
        } else {
            let t = rng.random_range(0.5..6.0);
            (&iron, t)
        };
        let mask = rasterize(&[part], canvas);
        clutter_masks.push((mask, model.transmittance(thickness)));
    }

    // Prohibited items, placed centrally enough to leave attack-region room.
    let n_items = rng.random_range(spec.prohibited_range.0..=spec.prohibited_range.1);
    let mut annotations = Vec::new();
    let mut item_masks: Vec<Array2<bool>> = Vec::new();
    for _ in 0..n_items {
        let mut placed = false;
        for _attempt in 0..24 {
            let class_id = rng.random_range(1..=spec.class_names.len());
            let len = canvas as f64 * rng.random_range(0.24..0.36);
            let width = len * rng.random_range(0.22..0.32);
            let cx = rng.random_range(canvas as f64 * 0.3..canvas as f64 * 0.7);
            let cy = rng.random_range(canvas as f64 * 0.3..canvas as f64 * 0.7);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let thickness =
                rng.random_range(spec.prohibited_thickness.0..=spec.prohibited_thickness.1);
            let parts = match spec.class_names[class_id - 1].as_str() {
                "scissors" => scissors_parts((cx, cy), len, width * 1.6, angle),
                "pistol" => pistol_parts((cx, cy), len, width * 1.6, angle),
                _ => knife_parts((cx, cy), len, width, angle),
            };
            let mask = rasterize(&parts, canvas);
            let Some(bbox) = mask_bbox(&mask) else { continue };
            if !bbox.is_valid_within(canvas, canvas) {
                continue;
            }
            // Avoid stacking prohibited items on each other.
            let overlaps = annotations
                .iter()
                .any(|a: &Annotation| bbox.intersection(&a.bbox) > 0.25 * bbox.area());
            if overlaps {
                continue;
            }
            stamp(&mut image, &mask, iron.transmittance(thickness));
            annotations.push(Annotation { bbox, class_id, difficult: false });
            item_masks.push(mask);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place prohibited item {} of {n_items} after bounded retries",
                annotations.len() + 1
            )));
        }
    }

    // Apply clutter, rejecting pieces that bury a prohibited item.
    for (mask, transmittance) in clutter_masks {
        let excessive = annotations.iter().zip(&item_masks).any(|(a, imask)| {
            let covered = imask
                .iter()
                .zip(mask.iter())
                .filter(|(item, clutter)| **item && **clutter)
                .count();
            let item_total = imask.iter().filter(|v| **v).count().max(1);
            covered as f64 / item_total as f64 > 0.45 && a.bbox.area() > 0.0
        });
        if !excessive {
            stamp(&mut image, &mask, transmittance);
        }
    }

    Ok(Scene { base_image: image, annotations, placed_objects: Vec::new(), rng_seed: seed })
}

/// Train/test split marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

/// One dataset entry: paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub severity: u8,
}

/// A columnar text index over a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image)
    }

    pub fn annotation_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.annotation)
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("#split={}\n", manifest.split));
    out.push_str(&format!("#classes={}\n", manifest.class_names.join(",")));
    out.push_str("image,annotation,severity\n");
    for e in &manifest.entries {
        out.push_str(&format!(
            "{},{},{}\n",
            e.image.display(),
            e.annotation.display(),
            e.severity
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A loaded manifest plus non-fatal validation warnings (e.g. duplicate
/// image paths).
#[derive(Debug)]
pub struct ManifestLoad {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Loads and validates a manifest: referenced files must exist, severities
/// must be 0..=4, and annotation files must parse.
pub fn load_manifest(path: &Path) -> Result<ManifestLoad> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = std::fs::read_to_string(path)?;
    let mut split = None;
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#split=") {
            split = Some(rest.parse::<Split>()?);
            continue;
        }
        if let Some(rest) = line.strip_prefix("#classes=") {
            class_names = rest.split(',').map(|s| s.trim().to_string()).collect();
            continue;
        }
        if line.starts_with('#') || line == "image,annotation,severity" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected image,annotation,severity, got {line:?}"),
            });
        }
        let severity: u8 = fields[2].parse().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad severity {:?}: {e}", fields[2]),
        })?;
        if severity > 4 {
            return Err(Error::Validation(format!(
                "line {lineno}: severity {severity} outside 0..=4"
            )));
        }
        let entry = ManifestEntry {
            image: PathBuf::from(fields[0]),
            annotation: PathBuf::from(fields[1]),
            severity,
        };
        if !seen.insert(entry.image.clone()) {
            warnings.push(format!("duplicate image path {}", entry.image.display()));
        }
        let image_path = root.join(&entry.image);
        if !image_path.exists() {
            return Err(Error::MissingArtifact(image_path));
        }
        let ann_path = root.join(&entry.annotation);
        if !ann_path.exists() {
            return Err(Error::MissingArtifact(ann_path));
        }
        load_annotations(&ann_path)?;
        entries.push(entry);
    }
    let split = split.ok_or_else(|| Error::Validation("manifest missing #split header".into()))?;
    Ok(ManifestLoad {
        manifest: DatasetManifest { split, class_names, entries, root },
        warnings,
    })
}

/// An in-memory dataset: decoded images plus annotations.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Array3<f64>>,
    pub annotations: Vec<Vec<Annotation>>,
    pub ids: Vec<String>,
    pub class_names: Vec<String>,
    pub severities: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.entries.len());
        let mut annotations = Vec::with_capacity(manifest.entries.len());
        let mut ids = Vec::with_capacity(manifest.entries.len());
        let mut severities = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            images.push(load_image(&manifest.image_path(e))?);
            annotations.push(load_annotations(&manifest.annotation_path(e))?);
            ids.push(e.image.display().to_string());
            severities.push(e.severity);
        }
        Ok(Self { images, annotations, ids, class_names: manifest.class_names.clone(), severities })
    }

    /// View of one entry as a scene (no placed objects).
    pub fn scene(&self, index: usize) -> Scene {
        Scene {
            base_image: self.images[index].clone(),
            annotations: self.annotations[index].clone(),
            placed_objects: Vec::new(),
            rng_seed: 0,
        }
    }

    /// All entries as scenes.
    pub fn to_scenes(&self) -> Vec<Scene> {
        (0..self.len()).map(|i| self.scene(i)).collect()
    }

    /// Builds an in-memory dataset directly from scenes.
    pub fn from_scenes(scenes: &[Scene], class_names: &[String]) -> Self {
        Self {
            images: scenes.iter().map(|s| s.base_image.clone()).collect(),
            annotations: scenes.iter().map(|s| s.annotations.clone()).collect(),
            ids: (0..scenes.len()).map(|i| format!("scene_{i:04}")).collect(),
            class_names: class_names.to_vec(),
            severities: vec![0; scenes.len()],
        }
    }
}

/// Writes a `[3, H, W]` display image as 8-bit RGB PNG.
pub fn save_image(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Domain(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[(0, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(1, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(2, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Reads an 8-bit RGB PNG into a `[3, H, W]` display image in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                out[(ch, y, x)] = px.0[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::eval_material;

    fn blank_scene(size: usize) -> Scene {
        Scene {
            base_image: Array3::from_elem((3, size, size), 1.0),
            annotations: vec![],
            placed_objects: vec![],
            rng_seed: 0,
        }
    }

    #[test]
    fn composite_zero_depth_is_identity() {
        let base = Array3::from_elem((3, 8, 8), 0.7);
        let depth = DepthMap::zeros(8, 8, 1.0);
        let out = composite(&base, &depth, &MaterialModel::iron()).unwrap();
        assert_eq!(base, out);
    }

    #[test]
    fn composite_multiplies_white_base() {
        let base = Array3::from_elem((3, 4, 4), 1.0);
        let mut depth = DepthMap::zeros(4, 4, 1.0);
        depth.grid[(2, 2)] = 3.0;
        let model = MaterialModel::iron();
        let out = composite(&base, &depth, &model).unwrap();
        let expected = model.transmittance(3.0);
        for ch in 0..3 {
            assert!((out[(ch, 2, 2)] - expected[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_stacking_is_multiplicative() {
        // Two objects of equal thickness behave like exp-additive depths.
        let model = MaterialModel::iron();
        let base = Array3::from_elem((3, 2, 2), 1.0);
        let mut depth = DepthMap::zeros(2, 2, 1.0);
        depth.grid[(0, 0)] = 2.0;
        let once = composite(&base, &depth, &model).unwrap();
        let twice = composite(&once, &depth, &model).unwrap();
        let single = model.transmittance(2.0);
        for ch in 0..3 {
            assert!((twice[(ch, 0, 0)] - single[ch] * single[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_grad_matches_finite_differences() {
        let model = MaterialModel::iron();
        let base = Array3::from_shape_fn((3, 3, 3), |(c, y, x)| {
            0.3 + 0.1 * c as f64 + 0.05 * y as f64 + 0.02 * x as f64
        });
        let mut depth = DepthMap::zeros(3, 3, 1.0);
        depth.grid[(1, 1)] = 2.5;
        let (_, grad) = composite_with_grad(&base, &depth, &model).unwrap();
        let eps = 1e-6;
        for ch in 0..3 {
            let mut dp = depth.clone();
            dp.grid[(1, 1)] += eps;
            let mut dm = depth.clone();
            dm.grid[(1, 1)] -= eps;
            let op = composite(&base, &dp, &model).unwrap();
            let om = composite(&base, &dm, &model).unwrap();
            let fd = (op[(ch, 1, 1)] - om[(ch, 1, 1)]) / (2.0 * eps);
            assert!((fd - grad[(ch, 1, 1)]).abs() < 1e-6, "ch {ch}: {fd} vs {}", grad[(ch, 1, 1)]);
        }
    }

    #[test]
    fn composite_rejects_overflowing_footprint() {
        let base = Array3::from_elem((3, 8, 8), 1.0);
        let mut depth = DepthMap::zeros(4, 4, 1.0);
        depth.grid[(0, 0)] = 1.0;
        depth.origin = (-1, 0); // nonzero depth pixel would land at x=-1
        assert!(composite(&base, &depth, &MaterialModel::iron()).is_err());
    }

    #[test]
    fn place_objects_empty_is_identity() {
        let scene = blank_scene(32);
        let out = place_objects(&scene, &[], &[], &MaterialModel::iron()).unwrap();
        assert_eq!(out, scene.base_image);
    }

    #[test]
    fn place_objects_is_order_independent() {
        let scene = blank_scene(64);
        let model = MaterialModel::iron();
        let m1 = Mesh::uv_sphere(8, 4, [6.0, 6.0, 3.0], [8.0, 8.0, 3.0]);
        let m2 = Mesh::uv_sphere(8, 4, [6.0, 6.0, 3.0], [8.0, 8.0, 3.0]);
        let a = place_objects(&scene, &[m1.clone(), m2.clone()], &[(4, 4), (30, 30)], &model).unwrap();
        let b = place_objects(&scene, &[m2, m1], &[(30, 30), (4, 4)], &model).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn four_objects_cover_expected_fraction() {
        // 4 footprints of 20x20 px on a 300x300 canvas.
        let covered = 4.0 * 20.0 * 20.0;
        let fraction = covered / (300.0 * 300.0);
        assert!((fraction - 0.0178) < 1e-3, "fraction {fraction}");

        let scene = blank_scene(300);
        let model = MaterialModel::iron();
        let meshes: Vec<Mesh> =
            (0..4).map(|_| Mesh::uv_sphere(8, 4, [10.0, 10.0, 4.0], [10.0, 10.0, 4.0])).collect();
        let locations = [(30, 30), (240, 30), (30, 240), (240, 240)];
        let out = place_objects(&scene, &meshes, &locations, &model).unwrap();
        let changed = out
            .index_axis(ndarray::Axis(0), 2)
            .iter()
            .zip(scene.base_image.index_axis(ndarray::Axis(0), 2).iter())
            .filter(|(a, b)| (**a - **b).abs() > 1e-9)
            .count();
        let measured = changed as f64 / (300.0 * 300.0);
        // Spheres cover ~pi/4 of their footprint boxes.
        assert!(measured > 0.010 && measured < 0.0178 + 1e-3, "measured {measured}");
    }

    #[test]
    fn place_objects_respects_forbidden_region() {
        let scene = blank_scene(64);
        let model = MaterialModel::iron();
        let mesh = Mesh::uv_sphere(8, 4, [6.0, 6.0, 3.0], [8.0, 8.0, 3.0]);
        let forbidden = BBox::new(20.0, 20.0, 44.0, 44.0);
        let err = place_objects_constrained(&scene, &[mesh], &[(24, 24)], &model, Some(&forbidden));
        assert!(matches!(err, Err(Error::Constraint(_))));
    }

    #[test]
    fn generate_scene_is_deterministic() {
        let spec = SceneSpec::mini();
        let a = generate_scene(&spec, 42).unwrap();
        let b = generate_scene(&spec, 42).unwrap();
        assert_eq!(a.base_image, b.base_image);
        assert_eq!(a.annotations, b.annotations);
        let c = generate_scene(&spec, 43).unwrap();
        assert_ne!(a.base_image, c.base_image);
    }

    #[test]
    fn empty_spec_yields_blank_scene() {
        let spec = SceneSpec {
            prohibited_range: (0, 0),
            clutter_range: (0, 0),
            bag: false,
            ..SceneSpec::mini()
        };
        let scene = generate_scene(&spec, 7).unwrap();
        assert!(scene.annotations.is_empty());
        for v in scene.base_image.iter() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn knife_interior_matches_converter() {
        let spec = SceneSpec {
            clutter_range: (0, 0),
            bag: false,
            prohibited_thickness: (3.0, 3.0),
            ..SceneSpec::mini()
        };
        let scene = generate_scene(&spec, 11).unwrap();
        let expected = MaterialModel::iron().transmittance(3.0);
        // Any pixel that differs from white must be exactly the 3 mm iron
        // color (single item, no clutter).
        let (_, h, w) = scene.base_image.dim();
        let mut found = 0;
        for y in 0..h {
            for x in 0..w {
                if scene.base_image[(0, y, x)] < 0.999 {
                    for ch in 0..3 {
                        assert!((scene.base_image[(ch, y, x)] - expected[ch]).abs() < 1e-9);
                    }
                    found += 1;
                }
            }
        }
        assert!(found > 50, "knife should cover a meaningful area, found {found}");

        // eval_material agrees with the stamped color on a uniform depth.
        let depth = Array2::from_elem((1, 1), 3.0);
        let img = eval_material(&MaterialModel::iron(), &depth).unwrap();
        let rgb = crate::physics::hsv_to_rgb([
            img.pixels[(0, 0, 0)],
            img.pixels[(1, 0, 0)],
            img.pixels[(2, 0, 0)],
        ]);
        for ch in 0..3 {
            assert!((rgb[ch] - expected[ch]).abs() < 1e-9);
        }
    }

    #[test]
    fn annotations_tightly_bound_rendered_items() {
        let spec = SceneSpec { clutter_range: (0, 0), bag: false, ..SceneSpec::mini() };
        for seed in [1, 2, 3] {
            let scene = generate_scene(&spec, seed).unwrap();
            // Mask oracle: the non-white support of the image.
            let (_, h, w) = scene.base_image.dim();
            let mut mask = Array2::from_elem((h, w), false);
            for y in 0..h {
                for x in 0..w {
                    mask[(y, x)] = scene.base_image[(0, y, x)] < 0.999;
                }
            }
            let support = mask_bbox(&mask).unwrap();
            let ann = &scene.annotations[0];
            assert!(ann.bbox.iou(&support) >= 0.9, "IoU {}", ann.bbox.iou(&support));
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("annotations")).unwrap();
        let mut entries = Vec::new();
        for i in 0..3 {
            let img = Array3::from_elem((3, 4, 4), 0.5);
            let image = PathBuf::from(format!("images/s{i}.png"));
            let annotation = PathBuf::from(format!("annotations/s{i}.json"));
            save_image(&img, &root.join(&image)).unwrap();
            save_annotations(
                &[Annotation { bbox: BBox::new(0.0, 0.0, 2.0, 2.0), class_id: 1, difficult: false }],
                &root.join(&annotation),
            )
            .unwrap();
            entries.push(ManifestEntry { image, annotation, severity: (i % 5) as u8 });
        }
        let manifest = DatasetManifest {
            split: Split::Test,
            class_names: vec!["knife".into()],
            entries,
            root: root.to_path_buf(),
        };
        let path = root.join("manifest.txt");
        save_manifest(&manifest, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert!(loaded.warnings.is_empty());
        assert_eq!(loaded.manifest.split, Split::Test);
        assert_eq!(loaded.manifest.entries, manifest.entries);
    }

    #[test]
    fn empty_manifest_loads_without_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        std::fs::write(&path, "#split=train\n#classes=knife\nimage,annotation,severity\n").unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert!(loaded.manifest.entries.is_empty());
    }

    #[test]
    fn manifest_flags_duplicates_and_bad_severity() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let img = Array3::from_elem((3, 2, 2), 1.0);
        save_image(&img, &root.join("a.png")).unwrap();
        save_annotations(&[], &root.join("a.json")).unwrap();

        let dup = "#split=test\n#classes=knife\nimage,annotation,severity\na.png,a.json,0\na.png,a.json,1\n";
        let path = root.join("m1.txt");
        std::fs::write(&path, dup).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.warnings.len(), 1);

        let bad = "#split=test\n#classes=knife\nimage,annotation,severity\na.png,a.json,7\n";
        let path2 = root.join("m2.txt");
        std::fs::write(&path2, bad).unwrap();
        assert!(matches!(load_manifest(&path2), Err(Error::Validation(_))));
    }

    #[test]
    fn severity_layout_builds_expected_entry_count() {
        // 210 layouts x severities 0..=4 -> 1050 entries.
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let img = Array3::from_elem((3, 2, 2), 1.0);
        let mut entries = Vec::new();
        for layout in 0..210 {
            for severity in 0..=4u8 {
                let image = PathBuf::from(format!("l{layout:03}_s{severity}.png"));
                let annotation = PathBuf::from(format!("l{layout:03}_s{severity}.json"));
                save_image(&img, &root.join(&image)).unwrap();
                save_annotations(&[], &root.join(&annotation)).unwrap();
                entries.push(ManifestEntry { image, annotation, severity });
            }
        }
        let manifest = DatasetManifest {
            split: Split::Test,
            class_names: vec!["knife".into()],
            entries,
            root: root.to_path_buf(),
        };
        let path = root.join("manifest.txt");
        save_manifest(&manifest, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.manifest.entries.len(), 1050);
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn image_round_trip_is_lossless_at_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Array3::from_shape_fn((3, 5, 7), |(c, y, x)| {
            ((c * 37 + y * 11 + x * 3) % 256) as f64 / 255.0
        });
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
