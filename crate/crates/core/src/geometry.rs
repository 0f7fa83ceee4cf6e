//! Triangle meshes and the differentiable projection to a beam-axis
//! thickness map.
//!
//! Coordinates are millimeters. The canvas X axis points right, Y points
//! down (image rows), and the beam travels along +Z, so per-pixel thickness
//! is the total Z-extent of material the beam traverses. Projection sums
//! signed per-face depths: faces whose outward normal has positive Z are
//! beam exits (+z contribution), negative Z are entries (-z), which equals
//! physical traversal length for closed meshes, convex or not.
//!
//! Silhouette pixels get a soft coverage weight (smoothstep of the signed
//! pixel-to-edge distance) so the map is differentiable in vertex XY;
//! strictly interior pixels saturate at coverage 1 and are exact.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// An immutable vertex/face mesh with per-vertex adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    adjacency: Vec<Vec<usize>>,
}

impl Mesh {
    /// Builds a mesh, validating face indices and rejecting degenerate
    /// faces; adjacency is derived from shared edges.
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &vi in f {
                if vi >= n {
                    return Err(Error::Geometry(format!(
                        "face {fi} references vertex {vi}, but mesh has {n} vertices"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Geometry(format!("face {fi} is degenerate: {f:?}")));
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        for f in &faces {
            for (u, v) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                if !adjacency[u].contains(&v) {
                    adjacency[u].push(v);
                }
                if !adjacency[v].contains(&u) {
                    adjacency[v].push(u);
                }
            }
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }
        Ok(Self { vertices, faces, adjacency })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Sorted neighbor list of vertex `v`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    /// Same topology, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<[f64; 3]>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Geometry(format!(
                "vertex count mismatch: {} vs {}",
                vertices.len(),
                self.vertices.len()
            )));
        }
        Ok(Self { vertices, faces: self.faces.clone(), adjacency: self.adjacency.clone() })
    }

    pub fn translated(&self, delta: [f64; 3]) -> Self {
        let vertices = self
            .vertices
            .iter()
            .map(|v| [v[0] + delta[0], v[1] + delta[1], v[2] + delta[2]])
            .collect();
        Self { vertices, faces: self.faces.clone(), adjacency: self.adjacency.clone() }
    }

    /// Axis-aligned bounds as (min, max) corners.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Signed volume by the tetrahedron formula; positive for outward
    /// orientation.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]];
                (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                    + a[2] * (b[0] * c[1] - b[1] * c[0]))
                    / 6.0
            })
            .sum()
    }

    /// Verifies the mesh is a closed, consistently oriented surface: every
    /// undirected edge is shared by exactly two faces traversing it in
    /// opposite directions.
    pub fn check_closed_oriented(&self) -> Result<()> {
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for (u, v) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *directed.entry((u, v)).or_insert(0) += 1;
            }
        }
        for (&(u, v), &count) in &directed {
            if count > 1 {
                return Err(Error::Geometry(format!(
                    "edge ({u},{v}) traversed {count} times in the same direction"
                )));
            }
            let opposite = directed.get(&(v, u)).copied().unwrap_or(0);
            if opposite != 1 {
                return Err(Error::Geometry(format!(
                    "edge ({u},{v}) is not matched by an opposite traversal (open or inconsistent surface)"
                )));
            }
        }
        Ok(())
    }

    /// Attempts to repair face winding by flood-filling a consistent
    /// orientation from face 0, then flipping globally if the signed volume
    /// came out negative. Non-manifold edges are an error.
    pub fn repair_orientation(&self) -> Result<Self> {
        let mut edge_faces: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for (u, v) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (u.min(v), u.max(v));
                edge_faces.entry(key).or_default().push(fi);
            }
        }
        for (&(u, v), fs) in &edge_faces {
            if fs.len() != 2 {
                return Err(Error::Geometry(format!(
                    "edge ({u},{v}) is shared by {} faces; cannot orient a non-manifold surface",
                    fs.len()
                )));
            }
        }
        let mut faces = self.faces.clone();
        let mut visited = vec![false; faces.len()];
        let mut queue = std::collections::VecDeque::new();
        visited[0] = true;
        queue.push_back(0usize);
        while let Some(fi) = queue.pop_front() {
            let f = faces[fi];
            for (u, v) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (u.min(v), u.max(v));
                for &other in &edge_faces[&key] {
                    if other == fi || visited[other] {
                        continue;
                    }
                    let g = faces[other];
                    // Consistent orientation traverses the shared edge in
                    // the opposite direction.
                    let same_direction = [(g[0], g[1]), (g[1], g[2]), (g[2], g[0])]
                        .iter()
                        .any(|&(a, b)| a == u && b == v);
                    if same_direction {
                        faces[other] = [g[0], g[2], g[1]];
                    }
                    visited[other] = true;
                    queue.push_back(other);
                }
            }
        }
        if visited.iter().any(|v| !v) {
            return Err(Error::Geometry("mesh has disconnected faces; cannot orient".into()));
        }
        let mut repaired = Mesh::new(self.vertices.clone(), faces)?;
        repaired.check_closed_oriented()?;
        if repaired.signed_volume() < 0.0 {
            let flipped: Vec<[usize; 3]> =
                repaired.faces.iter().map(|f| [f[0], f[2], f[1]]).collect();
            repaired = Mesh::new(self.vertices.clone(), flipped)?;
        }
        Ok(repaired)
    }

    /// Longitude/latitude sphere with `n_lon` segments and `n_lat` latitude
    /// bands, scaled by per-axis radii around `center`. The default
    /// (8 segments, 4 bands) has 26 vertices and 48 faces.
    pub fn uv_sphere(n_lon: usize, n_lat: usize, radii: [f64; 3], center: [f64; 3]) -> Self {
        assert!(n_lon >= 3 && n_lat >= 2);
        let mut vertices = Vec::with_capacity(n_lon * (n_lat - 1) + 2);
        vertices.push([center[0], center[1], center[2] + radii[2]]); // north pole
        for ring in 1..n_lat {
            let polar = std::f64::consts::PI * ring as f64 / n_lat as f64;
            for seg in 0..n_lon {
                let azim = 2.0 * std::f64::consts::PI * seg as f64 / n_lon as f64;
                vertices.push([
                    center[0] + radii[0] * polar.sin() * azim.cos(),
                    center[1] + radii[1] * polar.sin() * azim.sin(),
                    center[2] + radii[2] * polar.cos(),
                ]);
            }
        }
        vertices.push([center[0], center[1], center[2] - radii[2]]); // south pole
        let south = vertices.len() - 1;
        let ring_start = |ring: usize| 1 + (ring - 1) * n_lon;

        let mut faces = Vec::with_capacity(2 * n_lon * (n_lat - 1));
        for seg in 0..n_lon {
            let next = (seg + 1) % n_lon;
            faces.push([0, ring_start(1) + seg, ring_start(1) + next]);
        }
        for ring in 1..n_lat - 1 {
            let upper = ring_start(ring);
            let lower = ring_start(ring + 1);
            for seg in 0..n_lon {
                let next = (seg + 1) % n_lon;
                faces.push([upper + seg, lower + seg, lower + next]);
                faces.push([upper + seg, lower + next, upper + next]);
            }
        }
        let last = ring_start(n_lat - 1);
        for seg in 0..n_lon {
            let next = (seg + 1) % n_lon;
            faces.push([south, last + next, last + seg]);
        }
        let mesh = Mesh::new(vertices, faces).expect("sphere construction is well-formed");
        debug_assert!(mesh.check_closed_oriented().is_ok());
        mesh
    }

    /// The default initial object: a 26-vertex, 48-face sphere of the given
    /// diameter centered at the origin.
    pub fn default_sphere(diameter: f64) -> Self {
        let r = diameter / 2.0;
        Self::uv_sphere(8, 4, [r, r, r], [0.0, 0.0, 0.0])
    }
}

/// Per-vertex displacement relative to an original mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexPerturbation {
    pub deltas: Vec<[f64; 3]>,
}

impl VertexPerturbation {
    pub fn between(original: &Mesh, perturbed: &Mesh) -> Result<Self> {
        if original.vertices.len() != perturbed.vertices.len() {
            return Err(Error::Geometry(format!(
                "perturbation cardinality mismatch: {} vs {}",
                original.vertices.len(),
                perturbed.vertices.len()
            )));
        }
        let deltas = original
            .vertices
            .iter()
            .zip(&perturbed.vertices)
            .map(|(o, p)| [p[0] - o[0], p[1] - o[1], p[2] - o[2]])
            .collect();
        Ok(Self { deltas })
    }
}

fn check_same_topology(a: &Mesh, b: &Mesh) -> Result<()> {
    if a.vertices.len() != b.vertices.len() || a.faces != b.faces {
        return Err(Error::Geometry("meshes do not share a topology".into()));
    }
    Ok(())
}

/// Neighborhood-smoothness loss: the mean over vertices of the summed
/// squared differences between a vertex's displacement and each neighbor's.
/// Zero iff all displacements are equal (so uniform translations are free).
pub fn perceptual_loss(mesh_adv: &Mesh, mesh_ori: &Mesh) -> Result<f64> {
    check_same_topology(mesh_adv, mesh_ori)?;
    let deltas = VertexPerturbation::between(mesh_ori, mesh_adv)?.deltas;
    let n = deltas.len() as f64;
    let mut total = 0.0;
    for (i, di) in deltas.iter().enumerate() {
        for &q in mesh_adv.neighbors(i) {
            let dq = deltas[q];
            let diff = [di[0] - dq[0], di[1] - dq[1], di[2] - dq[2]];
            total += diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2];
        }
    }
    Ok(total / n)
}

/// Gradient of [`perceptual_loss`] with respect to the perturbed mesh's
/// vertex coordinates.
pub fn perceptual_loss_grad(mesh_adv: &Mesh, mesh_ori: &Mesh) -> Result<Vec<[f64; 3]>> {
    check_same_topology(mesh_adv, mesh_ori)?;
    let deltas = VertexPerturbation::between(mesh_ori, mesh_adv)?.deltas;
    let n = deltas.len() as f64;
    let mut grad = vec![[0.0; 3]; deltas.len()];
    for (i, di) in deltas.iter().enumerate() {
        for &q in mesh_adv.neighbors(i) {
            let dq = deltas[q];
            for k in 0..3 {
                grad[i][k] += 4.0 * (di[k] - dq[k]) / n;
            }
        }
    }
    Ok(grad)
}

/// A per-pixel thickness raster, positioned on a larger image by `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    /// Thickness in millimeters, shape `[H, W]`, all entries >= 0.
    pub grid: Array2<f64>,
    /// Millimeters per pixel.
    pub pixel_pitch: f64,
    /// Placement offset (x, y) of the raster's top-left corner in image
    /// pixels.
    pub origin: (i64, i64),
}

impl DepthMap {
    pub fn zeros(width: usize, height: usize, pixel_pitch: f64) -> Self {
        Self { grid: Array2::zeros((height, width)), pixel_pitch, origin: (0, 0) }
    }

    /// Crops the raster to the part that lands inside a `width` x `height`
    /// image, adjusting the origin. Objects flush with the image border
    /// lose only their soft-silhouette pad.
    pub fn cropped_to(&self, width: usize, height: usize) -> Self {
        let (h, w) = self.grid.dim();
        let x0 = (-self.origin.0).clamp(0, w as i64) as usize;
        let y0 = (-self.origin.1).clamp(0, h as i64) as usize;
        let x1 = ((width as i64 - self.origin.0).clamp(0, w as i64)) as usize;
        let y1 = ((height as i64 - self.origin.1).clamp(0, h as i64)) as usize;
        if x0 >= x1 || y0 >= y1 {
            return Self {
                grid: Array2::zeros((0, 0)),
                pixel_pitch: self.pixel_pitch,
                origin: (0, 0),
            };
        }
        let grid = self.grid.slice(ndarray::s![y0..y1, x0..x1]).to_owned();
        Self {
            grid,
            pixel_pitch: self.pixel_pitch,
            origin: (self.origin.0 + x0 as i64, self.origin.1 + y0 as i64),
        }
    }

    /// In-plane rotation about the raster center by `degrees`, bilinear
    /// resampling. Used by placement-perturbation evaluation.
    pub fn rotated(&self, degrees: f64) -> Self {
        let (h, w) = self.grid.dim();
        let theta = degrees.to_radians();
        let (sin, cos) = (theta.sin(), theta.cos());
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                // Inverse-rotate the destination pixel into source space.
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let sx = cx + cos * dx + sin * dy;
                let sy = cy - sin * dx + cos * dy;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let mut acc = 0.0;
                for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                    for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                        let xi = x0 as i64 + ox;
                        let yi = y0 as i64 + oy;
                        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                            acc += wy * wx * self.grid[(yi as usize, xi as usize)];
                        }
                    }
                }
                out[(y, x)] = acc;
            }
        }
        Self { grid: out, pixel_pitch: self.pixel_pitch, origin: self.origin }
    }
}

/// Parameters for [`project_thickness`].
#[derive(Debug, Clone)]
pub struct ProjectionParams {
    /// Millimeters per pixel (1.0 makes a 20 mm object span 20 px).
    pub pixel_pitch: f64,
    /// Raster size (width, height) in pixels.
    pub canvas: (usize, usize),
    /// Soft-silhouette band half-width in pixels.
    pub edge_softness: f64,
}

impl ProjectionParams {
    pub fn new(pixel_pitch: f64, canvas: (usize, usize)) -> Self {
        Self { pixel_pitch, canvas, edge_softness: 1.0 }
    }
}

/// One pixel-face contribution recorded for the backward pass.
#[derive(Debug, Clone)]
struct TapeEntry {
    face: usize,
    pixel: (usize, usize),
    /// Barycentric weights of the pixel center in the projected triangle.
    bary: [f64; 3],
    /// Interpolated depth (mm) and coverage at this pixel.
    z_interp: f64,
    cov: f64,
    sign: f64,
    /// d(coverage)/d(signed distance); zero outside the soft band.
    dcov_dsd: f64,
    /// Index (0..3) of the edge realizing the minimum signed distance.
    min_edge: usize,
}

/// Reverse-mode tape produced by [`project_thickness_with_tape`].
#[derive(Debug, Clone)]
pub struct ProjectionTape {
    entries: Vec<TapeEntry>,
    /// Raw signed accumulation before the >= 0 clamp.
    raw: Array2<f64>,
    faces: Vec<[usize; 3]>,
    /// Projected pixel-space vertex coordinates (x, y) and depth z.
    proj: Vec<[f64; 3]>,
    pixel_pitch: f64,
    n_vertices: usize,
}

fn smoothstep(t: f64) -> (f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0)
    } else {
        (t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t))
    }
}

/// Projects a mesh to per-pixel beam traversal thickness.
pub fn project_thickness(mesh: &Mesh, params: &ProjectionParams) -> Result<DepthMap> {
    project_thickness_with_tape(mesh, params).map(|(d, _)| d)
}

/// Like [`project_thickness`], but also returns the tape for
/// [`ProjectionTape::vjp`].
pub fn project_thickness_with_tape(
    mesh: &Mesh,
    params: &ProjectionParams,
) -> Result<(DepthMap, ProjectionTape)> {
    mesh.check_closed_oriented()?;
    let (w, h) = params.canvas;
    let pitch = params.pixel_pitch;
    if pitch <= 0.0 {
        return Err(Error::Domain(format!("pixel pitch must be positive, got {pitch}")));
    }
    let soft = params.edge_softness.max(1e-6);

    let proj: Vec<[f64; 3]> =
        mesh.vertices.iter().map(|v| [v[0] / pitch, v[1] / pitch, v[2]]).collect();
    let (lo, hi) = mesh.bounds();
    if lo[0] / pitch < -soft - 1.0
        || lo[1] / pitch < -soft - 1.0
        || hi[0] / pitch > w as f64 + soft + 1.0
        || hi[1] / pitch > h as f64 + soft + 1.0
    {
        return Err(Error::Geometry(format!(
            "mesh XY footprint [{:.2},{:.2}]x[{:.2},{:.2}] mm exceeds the {}x{} px canvas at pitch {pitch}",
            lo[0], hi[0], lo[1], hi[1], w, h
        )));
    }

    let mut raw = Array2::zeros((h, w));
    let mut entries = Vec::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        let [p0, p1, p2] = [proj[f[0]], proj[f[1]], proj[f[2]]];
        let area2 = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        if area2.abs() < 1e-9 {
            continue; // beam-parallel face: no projected footprint
        }
        let sign = area2.signum();
        let xs = [p0[0], p1[0], p2[0]];
        let ys = [p0[1], p1[1], p2[1]];
        let zs = [p0[2], p1[2], p2[2]];
        let pad = soft + 1.0;
        let x_min = (xs.iter().cloned().fold(f64::INFINITY, f64::min) - pad).floor().max(0.0) as usize;
        let x_max =
            (xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad).ceil().min(w as f64) as usize;
        let y_min = (ys.iter().cloned().fold(f64::INFINITY, f64::min) - pad).floor().max(0.0) as usize;
        let y_max =
            (ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad).ceil().min(h as f64) as usize;

        for py in y_min..y_max {
            for px in x_min..x_max {
                let cx = px as f64 + 0.5;
                let cy = py as f64 + 0.5;
                // Signed distance to each edge line, positive inside.
                let mut sd = f64::INFINITY;
                let mut min_edge = 0usize;
                for e in 0..3 {
                    let (ax, ay) = (xs[e], ys[e]);
                    let (bx, by) = (xs[(e + 1) % 3], ys[(e + 1) % 3]);
                    let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt().max(1e-12);
                    let d = sign * ((bx - ax) * (cy - ay) - (by - ay) * (cx - ax)) / len;
                    if d < sd {
                        sd = d;
                        min_edge = e;
                    }
                }
                let (cov, dcov_dt) = smoothstep(sd / soft + 0.5);
                if cov == 0.0 {
                    continue;
                }
                // Barycentric weights (unclamped; linear extension outside).
                let w0 = ((xs[1] - cx) * (ys[2] - cy) - (xs[2] - cx) * (ys[1] - cy)) / area2;
                let w1 = ((xs[2] - cx) * (ys[0] - cy) - (xs[0] - cx) * (ys[2] - cy)) / area2;
                let w2 = 1.0 - w0 - w1;
                let z_interp = w0 * zs[0] + w1 * zs[1] + w2 * zs[2];
                raw[(py, px)] += sign * z_interp * cov;
                entries.push(TapeEntry {
                    face: fi,
                    pixel: (py, px),
                    bary: [w0, w1, w2],
                    z_interp,
                    cov,
                    sign,
                    dcov_dsd: dcov_dt / soft,
                    min_edge,
                });
            }
        }
    }

    let grid = raw.mapv(|v: f64| v.max(0.0));
    let tape = ProjectionTape {
        entries,
        raw,
        faces: mesh.faces.clone(),
        proj,
        pixel_pitch: pitch,
        n_vertices: mesh.vertices.len(),
    };
    Ok((DepthMap { grid, pixel_pitch: pitch, origin: (0, 0) }, tape))
}

impl ProjectionTape {
    /// Pulls a gradient with respect to the thickness grid back to vertex
    /// coordinates (mm).
    pub fn vjp(&self, dloss_dgrid: &Array2<f64>) -> Vec<[f64; 3]> {
        let mut grad = vec![[0.0; 3]; self.n_vertices];
        for e in &self.entries {
            let up = dloss_dgrid[e.pixel];
            if up == 0.0 || self.raw[e.pixel] <= 0.0 {
                continue;
            }
            let f = self.faces[e.face];
            let [p0, p1, p2] = [self.proj[f[0]], self.proj[f[1]], self.proj[f[2]]];
            let xs = [p0[0], p1[0], p2[0]];
            let ys = [p0[1], p1[1], p2[1]];
            let zs = [p0[2], p1[2], p2[2]];
            let (py, px) = e.pixel;
            let cx = px as f64 + 0.5;
            let cy = py as f64 + 0.5;
            let area2 = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0]);

            // Depth path: d(raw)/dz_k = sign * cov * w_k.
            for k in 0..3 {
                grad[f[k]][2] += up * e.sign * e.cov * e.bary[k];
            }

            // Projected-XY paths, converted back to mm via 1/pitch.
            // (a) Interpolated z depends on vertex XY through the
            //     barycentric weights w_i = A_i / area2, where sub-area i is
            //     spanned by the pixel center and the two other vertices.
            let mut da = [[[0.0f64; 2]; 3]; 3]; // da[i][vertex][axis]
            for i in 0..3 {
                let j = (i + 1) % 3;
                let k = (i + 2) % 3;
                // A_i = (x_j - cx)(y_k - cy) - (x_k - cx)(y_j - cy)
                da[i][j][0] = ys[k] - cy;
                da[i][j][1] = -(xs[k] - cx);
                da[i][k][0] = -(ys[j] - cy);
                da[i][k][1] = xs[j] - cx;
            }
            let darea = [
                [ys[1] - ys[2], xs[2] - xs[1]],
                [ys[2] - ys[0], xs[0] - xs[2]],
                [ys[0] - ys[1], xs[1] - xs[0]],
            ];
            let coeff = up * e.sign * e.cov;
            for vtx in 0..3 {
                for axis in 0..2 {
                    let mut dz = 0.0;
                    for i in 0..3 {
                        let dwi = (da[i][vtx][axis] - e.bary[i] * darea[vtx][axis]) / area2;
                        dz += zs[i] * dwi;
                    }
                    grad[f[vtx]][axis] += coeff * dz / self.pixel_pitch;
                }
            }

            // (b) Coverage depends on vertex XY through the signed distance
            //     of the active (minimum) edge.
            if e.dcov_dsd != 0.0 {
                let a = e.min_edge;
                let b = (a + 1) % 3;
                let (ax, ay) = (xs[a], ys[a]);
                let (bx, by) = (xs[b], ys[b]);
                let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt().max(1e-12);
                let num = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
                let dn = [
                    [by - cy, cx - bx], // d num / d (ax, ay)
                    [cy - ay, ax - cx], // d num / d (bx, by)
                ];
                let dl = [[-(bx - ax) / len, -(by - ay) / len], [(bx - ax) / len, (by - ay) / len]];
                let scale = up * e.sign * e.z_interp * e.dcov_dsd;
                for (slot, vtx) in [(0usize, a), (1usize, b)] {
                    for axis in 0..2 {
                        let dsd = e.sign * (dn[slot][axis] * len - num * dl[slot][axis]) / (len * len);
                        grad[f[vtx]][axis] += scale * dsd / self.pixel_pitch;
                    }
                }
            }
        }
        grad
    }
}

/// Reads a plain OBJ-subset mesh: `v x y z` and `f i j k` (1-based indices),
/// plus comments and blank lines.
pub fn load_mesh(path: &Path) -> Result<Mesh> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap();
        let rest: Vec<&str> = parts.collect();
        match tag {
            "v" => {
                if rest.len() != 3 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("vertex needs 3 coordinates, got {}", rest.len()),
                    });
                }
                let mut v = [0.0; 3];
                for (k, tok) in rest.iter().enumerate() {
                    v[k] = tok.parse().map_err(|e| Error::Parse {
                        line: lineno,
                        msg: format!("bad coordinate {tok:?}: {e}"),
                    })?;
                }
                vertices.push(v);
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("face needs 3 indices, got {}", rest.len()),
                    });
                }
                let mut f = [0usize; 3];
                for (k, tok) in rest.iter().enumerate() {
                    let i: i64 = tok.parse().map_err(|e| Error::Parse {
                        line: lineno,
                        msg: format!("bad index {tok:?}: {e}"),
                    })?;
                    if i < 1 {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: format!("face indices are 1-based, got {i}"),
                        });
                    }
                    if i as usize > vertices.len() {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: format!("face index {i} exceeds {} vertices", vertices.len()),
                        });
                    }
                    f[k] = (i - 1) as usize;
                }
                faces.push(f);
            }
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unsupported directive {other:?}"),
                });
            }
        }
    }
    Mesh::new(vertices, faces)
}

/// Writes the OBJ-subset format read by [`load_mesh`].
pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut out = String::new();
    for v in mesh.vertices() {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for f in mesh.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Exports a closed oriented mesh as binary STL (80-byte header, u32 facet
/// count, 50-byte facets, facet normals recomputed from winding). Winding
/// repair is attempted first; a non-manifold mesh is refused.
pub fn export_stl(mesh: &Mesh, path: &Path) -> Result<()> {
    let mesh = if mesh.check_closed_oriented().is_ok() {
        mesh.clone()
    } else {
        mesh.repair_orientation()?
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = [0u8; 80];
    let tag = b"binary stl (units: mm)";
    header[..tag.len()].copy_from_slice(tag);
    file.write_all(&header)?;
    file.write_all(&(mesh.faces().len() as u32).to_le_bytes())?;
    // Normals are derived from the f32-rounded vertices that actually land
    // in the file, so export -> import -> export is byte-identical.
    let round = |v: [f64; 3]| [v[0] as f32 as f64, v[1] as f32 as f64, v[2] as f32 as f64];
    for f in mesh.faces() {
        let [a, b, c] = [
            round(mesh.vertices[f[0]]),
            round(mesh.vertices[f[1]]),
            round(mesh.vertices[f[2]]),
        ];
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let mut n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len > 0.0 {
            for k in &mut n {
                *k /= len;
            }
        }
        for k in n {
            file.write_all(&(k as f32).to_le_bytes())?;
        }
        for vtx in [a, b, c] {
            for k in vtx {
                file.write_all(&(k as f32).to_le_bytes())?;
            }
        }
        file.write_all(&0u16.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a binary STL back into a mesh, merging identical vertices in
/// first-seen order.
pub fn import_stl(path: &Path) -> Result<Mesh> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 80];
    file.read_exact(&mut header)?;
    let mut count_bytes = [0u8; 4];
    file.read_exact(&mut count_bytes)?;
    let count = u32::from_le_bytes(count_bytes) as usize;

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut index: HashMap<[u32; 3], usize> = HashMap::new();
    let mut faces = Vec::with_capacity(count);
    let mut buf = [0u8; 50];
    for fi in 0..count {
        file.read_exact(&mut buf).map_err(|_| Error::Parse {
            line: fi + 1,
            msg: "truncated facet record".into(),
        })?;
        let mut face = [0usize; 3];
        for (k, slot) in face.iter_mut().enumerate() {
            let off = 12 + k * 12;
            let bits = [
                u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()),
                u32::from_le_bytes(buf[off + 4..off + 8].try_into().unwrap()),
                u32::from_le_bytes(buf[off + 8..off + 12].try_into().unwrap()),
            ];
            let next = vertices.len();
            let idx = *index.entry(bits).or_insert_with(|| {
                vertices.push([
                    f32::from_bits(bits[0]) as f64,
                    f32::from_bits(bits[1]) as f64,
                    f32::from_bits(bits[2]) as f64,
                ]);
                next
            });
            *slot = idx;
        }
        faces.push(face);
    }
    Mesh::new(vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box(w: f64, d: f64, h: f64, origin: [f64; 3]) -> Mesh {
        // Axis-aligned box as 12 triangles, outward orientation.
        let [ox, oy, oz] = origin;
        let v = vec![
            [ox, oy, oz],
            [ox + w, oy, oz],
            [ox + w, oy + d, oz],
            [ox, oy + d, oz],
            [ox, oy, oz + h],
            [ox + w, oy, oz + h],
            [ox + w, oy + d, oz + h],
            [ox, oy + d, oz + h],
        ];
        let f = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [1, 2, 6],
            [1, 6, 5],
            [2, 3, 7],
            [2, 7, 6],
            [3, 0, 4],
            [3, 4, 7],
        ];
        Mesh::new(v, f).unwrap()
    }

    #[test]
    fn default_sphere_has_expected_topology() {
        let sphere = Mesh::default_sphere(20.0);
        assert_eq!(sphere.vertices().len(), 26);
        assert_eq!(sphere.faces().len(), 48);
        sphere.check_closed_oriented().unwrap();
        assert!(sphere.signed_volume() > 0.0);
    }

    #[test]
    fn adjacency_is_symmetric() {
        let sphere = Mesh::default_sphere(10.0);
        for v in 0..sphere.vertices().len() {
            for &u in sphere.neighbors(v) {
                assert!(sphere.neighbors(u).contains(&v), "adjacency not symmetric at ({u},{v})");
            }
        }
    }

    #[test]
    fn out_of_range_face_rejected() {
        let err = Mesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 5]]);
        assert!(matches!(err, Err(Error::Geometry(_))));
    }

    #[test]
    fn open_mesh_fails_closure_check() {
        let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let mesh = Mesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert!(mesh.check_closed_oriented().is_err());
    }

    #[test]
    fn box_thickness_on_interior_pixels() {
        let mesh = unit_box(20.0, 20.0, 6.0, [2.0, 2.0, 0.0]);
        let params = ProjectionParams::new(1.0, (26, 26));
        let depth = project_thickness(&mesh, &params).unwrap();
        for y in 5..19 {
            for x in 5..19 {
                assert!(
                    (depth.grid[(y, x)] - 6.0).abs() < 1e-9,
                    "pixel ({y},{x}) = {}",
                    depth.grid[(y, x)]
                );
            }
        }
        assert_eq!(depth.grid[(0, 0)], 0.0);
        assert_eq!(depth.grid[(25, 25)], 0.0);
    }

    #[test]
    fn sphere_central_chord_approximates_diameter() {
        let r = 10.0;
        let sphere = Mesh::default_sphere(2.0 * r).translated([12.0, 12.0, 0.0]);
        let params = ProjectionParams::new(1.0, (24, 24));
        let depth = project_thickness(&sphere, &params).unwrap();
        let center = depth.grid[(12, 12)].max(depth.grid[(11, 11)]);
        assert!(
            (center - 2.0 * r).abs() / (2.0 * r) < 0.05,
            "central thickness {center} vs diameter {}",
            2.0 * r
        );
    }

    #[test]
    fn thickness_conserves_volume() {
        let r = 10.0;
        let sphere = Mesh::default_sphere(2.0 * r).translated([12.0, 12.0, 0.0]);
        let pitch = 0.25;
        let params = ProjectionParams::new(pitch, (96, 96));
        let depth = project_thickness(&sphere, &params).unwrap();
        let integral: f64 = depth.grid.iter().sum::<f64>() * pitch * pitch;
        let volume = sphere.signed_volume();
        assert!(
            (integral - volume).abs() / volume < 0.02,
            "raster integral {integral} vs mesh volume {volume}"
        );
    }

    #[test]
    fn translation_equivariance() {
        let sphere = Mesh::default_sphere(8.0).translated([6.0, 6.0, 0.0]);
        let params = ProjectionParams::new(1.0, (32, 32));
        let base = project_thickness(&sphere, &params).unwrap();
        let shifted = project_thickness(&sphere.translated([5.0, 3.0, 0.0]), &params).unwrap();
        for y in 0..29 {
            for x in 0..27 {
                let a = base.grid[(y, x)];
                let b = shifted.grid[(y + 3, x + 5)];
                assert!((a - b).abs() < 1e-12, "({y},{x}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn projection_z_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sphere = Mesh::default_sphere(8.0).translated([8.0, 8.0, 4.5]);
        let params = ProjectionParams::new(1.0, (16, 16));
        let (depth, tape) = project_thickness_with_tape(&sphere, &params).unwrap();
        let ones = Array2::ones(depth.grid.dim());
        let grad = tape.vjp(&ones);
        for _ in 0..10 {
            let k = rng.random_range(0..sphere.vertices().len());
            let eps = 1e-5;
            let mut plus = sphere.vertices().to_vec();
            plus[k][2] += eps;
            let mut minus = sphere.vertices().to_vec();
            minus[k][2] -= eps;
            let dp = project_thickness(&sphere.with_vertices(plus).unwrap(), &params).unwrap();
            let dm = project_thickness(&sphere.with_vertices(minus).unwrap(), &params).unwrap();
            let fd = (dp.grid.sum() - dm.grid.sum()) / (2.0 * eps);
            let an = grad[k][2];
            assert!(
                (fd - an).abs() / fd.abs().max(1e-6) < 1e-3,
                "vertex {k}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn projection_xy_gradient_matches_finite_differences() {
        // Weighted sum so both the barycentric and silhouette paths carry
        // signal; tolerance is loose because the FD step crosses soft-band
        // curvature.
        let sphere = Mesh::default_sphere(8.0).translated([8.0, 8.0, 4.5]);
        let params = ProjectionParams::new(1.0, (16, 16));
        let (depth, tape) = project_thickness_with_tape(&sphere, &params).unwrap();
        let weights = Array2::from_shape_fn(depth.grid.dim(), |(y, x)| {
            ((y * 31 + x * 17) % 7) as f64 / 7.0
        });
        let grad = tape.vjp(&weights);
        let loss = |m: &Mesh| -> f64 {
            let d = project_thickness(m, &params).unwrap();
            (&d.grid * &weights).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 8 {
            let k = rng.random_range(0..sphere.vertices().len());
            let axis = rng.random_range(0..2);
            let eps = 1e-5;
            let mut plus = sphere.vertices().to_vec();
            plus[k][axis] += eps;
            let mut minus = sphere.vertices().to_vec();
            minus[k][axis] -= eps;
            let fd = (loss(&sphere.with_vertices(plus).unwrap())
                - loss(&sphere.with_vertices(minus).unwrap()))
                / (2.0 * eps);
            let an = grad[k][axis];
            if fd.abs() < 1e-3 {
                continue; // skip near-zero directional derivatives
            }
            assert!((fd - an).abs() / fd.abs() < 5e-2, "vertex {k} axis {axis}: fd={fd} an={an}");
            checked += 1;
        }
    }

    #[test]
    fn perceptual_loss_identities() {
        let ori = Mesh::default_sphere(10.0);
        assert_eq!(perceptual_loss(&ori, &ori).unwrap(), 0.0);
        // Exactly representable coordinates keep the translation exact.
        let box_mesh = unit_box(20.0, 20.0, 6.0, [0.0, 0.0, 0.0]);
        let translated = box_mesh.translated([1.0, 2.0, 3.0]);
        assert_eq!(perceptual_loss(&translated, &box_mesh).unwrap(), 0.0);
        // Irrational sphere coordinates accumulate only rounding residue.
        let sphere_translated = ori.translated([1.0, 2.0, 3.0]);
        assert!(perceptual_loss(&sphere_translated, &ori).unwrap() < 1e-24);
    }

    #[test]
    fn perceptual_loss_single_vertex_matches_oracle() {
        let ori = Mesh::default_sphere(10.0);
        let delta = [0.3, -0.2, 0.5];
        let moved_vertex = 7;
        let mut verts = ori.vertices().to_vec();
        for k in 0..3 {
            verts[moved_vertex][k] += delta[k];
        }
        let adv = ori.with_vertices(verts).unwrap();
        let loss = perceptual_loss(&adv, &ori).unwrap();
        let deg = ori.neighbors(moved_vertex).len() as f64;
        let norm2 = delta.iter().map(|d| d * d).sum::<f64>();
        let expected = 2.0 * deg * norm2 / ori.vertices().len() as f64;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");

        // Independent double-sum oracle over the adjacency.
        let mut oracle = 0.0;
        let deltas: Vec<[f64; 3]> = (0..ori.vertices().len())
            .map(|i| {
                let mut d = [0.0; 3];
                for k in 0..3 {
                    d[k] = adv.vertices()[i][k] - ori.vertices()[i][k];
                }
                d
            })
            .collect();
        for i in 0..ori.vertices().len() {
            for &q in ori.neighbors(i) {
                for k in 0..3 {
                    oracle += (deltas[i][k] - deltas[q][k]).powi(2);
                }
            }
        }
        oracle /= ori.vertices().len() as f64;
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn perceptual_loss_grad_matches_finite_differences() {
        let ori = Mesh::default_sphere(10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let verts: Vec<[f64; 3]> = ori
            .vertices()
            .iter()
            .map(|v| {
                [
                    v[0] + rng.random_range(-0.5..0.5),
                    v[1] + rng.random_range(-0.5..0.5),
                    v[2] + rng.random_range(-0.5..0.5),
                ]
            })
            .collect();
        let adv = ori.with_vertices(verts).unwrap();
        let grad = perceptual_loss_grad(&adv, &ori).unwrap();
        for _ in 0..10 {
            let k = rng.random_range(0..adv.vertices().len());
            let axis = rng.random_range(0..3);
            let eps = 1e-6;
            let mut plus = adv.vertices().to_vec();
            plus[k][axis] += eps;
            let mut minus = adv.vertices().to_vec();
            minus[k][axis] -= eps;
            let fd = (perceptual_loss(&ori.with_vertices(plus).unwrap(), &ori).unwrap()
                - perceptual_loss(&ori.with_vertices(minus).unwrap(), &ori).unwrap())
                / (2.0 * eps);
            let an = grad[k][axis];
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "fd={fd} an={an}");
        }
    }

    #[test]
    fn perceptual_loss_rejects_topology_mismatch() {
        let a = Mesh::default_sphere(10.0);
        let b = Mesh::uv_sphere(6, 3, [5.0; 3], [0.0; 3]);
        assert!(perceptual_loss(&a, &b).is_err());
    }

    #[test]
    fn bundled_sphere_asset_loads() {
        let path =
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/sphere26.obj");
        let mesh = load_mesh(&path).unwrap();
        assert_eq!(mesh.vertices().len(), 26);
        assert_eq!(mesh.faces().len(), 48);
        mesh.check_closed_oriented().unwrap();
        assert_eq!(&mesh, &Mesh::default_sphere(20.0));
    }

    #[test]
    fn obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sphere.obj");
        let mesh = Mesh::default_sphere(12.0);
        save_mesh(&mesh, &path).unwrap();
        let loaded = load_mesh(&path).unwrap();
        assert_eq!(mesh, loaded);
    }

    #[test]
    fn obj_rejects_zero_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n").unwrap();
        match load_mesh(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn stl_round_trip_and_idempotent_export() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = Mesh::default_sphere(14.0);
        let p1 = dir.path().join("a.stl");
        export_stl(&mesh, &p1).unwrap();
        let bytes1 = std::fs::read(&p1).unwrap();
        assert_eq!(bytes1.len(), 84 + 50 * mesh.faces().len());

        let imported = import_stl(&p1).unwrap();
        assert_eq!(imported.faces().len(), mesh.faces().len());
        imported.check_closed_oriented().unwrap();
        assert_eq!(imported.vertices().len(), mesh.vertices().len());
        for v in imported.vertices() {
            let nearest = mesh
                .vertices()
                .iter()
                .map(|u| (u[0] - v[0]).abs().max((u[1] - v[1]).abs()).max((u[2] - v[2]).abs()))
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-5, "vertex {v:?} has no counterpart (nearest {nearest})");
        }

        let p2 = dir.path().join("b.stl");
        export_stl(&imported, &p2).unwrap();
        let bytes2 = std::fs::read(&p2).unwrap();
        assert_eq!(bytes1, bytes2, "second export differs");
    }

    #[test]
    fn stl_tetrahedron_normals_match_cross_products() {
        let v = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let f = vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]];
        let mesh = Mesh::new(v.clone(), f.clone()).unwrap();
        mesh.check_closed_oriented().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tet.stl");
        export_stl(&mesh, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for (fi, face) in f.iter().enumerate() {
            let off = 84 + fi * 50;
            let n: Vec<f32> = (0..3)
                .map(|k| f32::from_le_bytes(bytes[off + 4 * k..off + 4 * k + 4].try_into().unwrap()))
                .collect();
            let [a, b, c] = [v[face[0]], v[face[1]], v[face[2]]];
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let w = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let mut expected = [
                u[1] * w[2] - u[2] * w[1],
                u[2] * w[0] - u[0] * w[2],
                u[0] * w[1] - u[1] * w[0],
            ];
            let len = expected.iter().map(|x| x * x).sum::<f64>().sqrt();
            for e in &mut expected {
                *e /= len;
            }
            for k in 0..3 {
                assert!((n[k] as f64 - expected[k]).abs() < 1e-6, "face {fi} normal {n:?}");
            }
        }
    }

    #[test]
    fn export_refuses_non_manifold() {
        let v = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.5, 0.5, 1.0],
        ];
        let f = vec![[0, 1, 2], [1, 3, 2], [1, 2, 4]];
        let mesh = Mesh::new(v, f).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(export_stl(&mesh, &dir.path().join("bad.stl")).is_err());
    }

    #[test]
    fn orientation_repair_fixes_flipped_faces() {
        let sphere = Mesh::default_sphere(10.0);
        let mut faces = sphere.faces().to_vec();
        for f in faces.iter_mut().step_by(3) {
            f.swap(1, 2);
        }
        let broken = Mesh::new(sphere.vertices().to_vec(), faces).unwrap();
        assert!(broken.check_closed_oriented().is_err());
        let repaired = broken.repair_orientation().unwrap();
        repaired.check_closed_oriented().unwrap();
        assert!(repaired.signed_volume() > 0.0);
    }

    #[test]
    fn depth_map_rotation_preserves_mass_approximately() {
        let sphere = Mesh::default_sphere(10.0).translated([10.0, 10.0, 0.0]);
        let params = ProjectionParams::new(1.0, (20, 20));
        let depth = project_thickness(&sphere, &params).unwrap();
        let rotated = depth.rotated(30.0);
        let m0: f64 = depth.grid.sum();
        let m1: f64 = rotated.grid.sum();
        assert!((m0 - m1).abs() / m0 < 0.05, "{m0} vs {m1}");
        let zero = depth.rotated(0.0);
        for (a, b) in depth.grid.iter().zip(zero.grid.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
