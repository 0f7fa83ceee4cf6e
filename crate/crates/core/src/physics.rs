//! X-ray attenuation and the per-material depth→color converter.
//!
//! A scanned object darkens the pseudo-color image according to how much
//! beam it absorbs. We model each color channel of the converter space as
//! an exponential law `g(d) = a * exp(-b * d) + q` in object thickness `d`
//! (millimeters) and fit `(a, b, q)` per channel from calibration samples.
//! The converter space is cylindrical hue/saturation/value: hue is constant
//! per material, while saturation and value vary with thickness. Fitted
//! saturation channels carry a negative amplitude `a` so that zero thickness
//! is unsaturated (white-equivalent) and deep material is strongly tinted;
//! value channels attenuate with `a > 0`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Beam intensity after traversing `thickness` mm of a medium with linear
/// attenuation coefficient `mu` (per mm).
pub fn attenuate(intensity_in: f64, mu: f64, thickness: f64) -> Result<f64> {
    if !(intensity_in >= 0.0) || !(mu >= 0.0) || !(thickness >= 0.0) {
        return Err(Error::Domain(format!(
            "attenuate requires non-negative inputs, got I0={intensity_in}, mu={mu}, x={thickness}"
        )));
    }
    Ok(intensity_in * (-mu * thickness).exp())
}

/// One exponential channel law `g(d) = a * exp(-b * d) + q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelLaw {
    pub a: f64,
    pub b: f64,
    pub q: f64,
}

impl ChannelLaw {
    pub fn new(a: f64, b: f64, q: f64) -> Self {
        Self { a, b, q }
    }

    pub fn constant(value: f64) -> Self {
        Self { a: 0.0, b: 0.0, q: value }
    }

    /// Raw law value, unclamped.
    pub fn eval(&self, depth: f64) -> f64 {
        self.a * (-self.b * depth).exp() + self.q
    }

    /// Law value clamped to the unit interval.
    pub fn eval_clamped(&self, depth: f64) -> f64 {
        self.eval(depth).clamp(0.0, 1.0)
    }

    /// Analytic derivative `dg/dd = -a * b * exp(-b * d)`.
    pub fn deriv(&self, depth: f64) -> f64 {
        -self.a * self.b * (-self.b * depth).exp()
    }

    /// Derivative of the clamped value (zero where the clamp is active).
    pub fn deriv_clamped(&self, depth: f64) -> f64 {
        let g = self.eval(depth);
        if (0.0..=1.0).contains(&g) {
            self.deriv(depth)
        } else {
            0.0
        }
    }

    pub fn is_constant(&self) -> bool {
        self.b == 0.0 || self.a == 0.0
    }
}

/// Material identity. Density and atomic composition are not modeled
/// separately; they are absorbed into the fitted channel coefficients.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaterialId {
    Iron,
    Aluminum,
    Plastic,
    Custom(String),
}

impl MaterialId {
    pub fn name(&self) -> &str {
        match self {
            MaterialId::Iron => "iron",
            MaterialId::Aluminum => "aluminum",
            MaterialId::Plastic => "plastic",
            MaterialId::Custom(name) => name,
        }
    }
}

impl std::str::FromStr for MaterialId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "iron" => MaterialId::Iron,
            "aluminum" => MaterialId::Aluminum,
            "plastic" => MaterialId::Plastic,
            other => MaterialId::Custom(other.to_string()),
        })
    }
}

/// Per-channel fit quality: coefficient of determination, or a marker for
/// channels fitted as constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitQuality {
    Constant,
    RSquared(f64),
}

impl FitQuality {
    pub fn r_squared(&self) -> Option<f64> {
        match self {
            FitQuality::Constant => None,
            FitQuality::RSquared(r2) => Some(*r2),
        }
    }
}

/// Converter-space channel indices.
pub const CH_HUE: usize = 0;
pub const CH_SAT: usize = 1;
pub const CH_VAL: usize = 2;

/// A fitted depth→color converter for one material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialModel {
    pub material_id: MaterialId,
    /// Laws for the hue, saturation, and value channels, in that order.
    pub channel_laws: [ChannelLaw; 3],
    /// Validity interval of the calibration, in millimeters.
    pub depth_range: (f64, f64),
    pub fit_quality: [FitQuality; 3],
}

impl MaterialModel {
    pub fn new(
        material_id: MaterialId,
        channel_laws: [ChannelLaw; 3],
        depth_range: (f64, f64),
        fit_quality: [FitQuality; 3],
    ) -> Result<Self> {
        let model = Self { material_id, channel_laws, depth_range, fit_quality };
        model.validate()?;
        Ok(model)
    }

    /// Checks the structural invariants: a valid depth range, finite
    /// coefficients, and strict decay over the range for attenuation-sense
    /// laws (`a > 0`, `b > 0`).
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_range;
        if !(lo >= 0.0) || !(lo < hi) || !hi.is_finite() {
            return Err(Error::Domain(format!(
                "depth_range must satisfy 0 <= min < max, got ({lo}, {hi})"
            )));
        }
        for (i, law) in self.channel_laws.iter().enumerate() {
            if !law.a.is_finite() || !law.b.is_finite() || !law.q.is_finite() {
                return Err(Error::Domain(format!("channel {i} has non-finite coefficients")));
            }
            if law.b < 0.0 {
                return Err(Error::Domain(format!("channel {i} has negative rate b={}", law.b)));
            }
            if law.a > 0.0 && law.b > 0.0 {
                // Strictly decreasing over the range; spot-check endpoints.
                let steps = 16;
                let mut prev = law.eval(lo);
                for k in 1..=steps {
                    let d = lo + (hi - lo) * k as f64 / steps as f64;
                    let g = law.eval(d);
                    if g >= prev {
                        return Err(Error::Domain(format!(
                            "channel {i} is not strictly decreasing over the depth range"
                        )));
                    }
                    prev = g;
                }
            }
        }
        Ok(())
    }

    /// Converter-space color at zero thickness (one law evaluation per
    /// channel). This is the background color the compositor normalizes by.
    pub fn zero_depth_color(&self) -> [f64; 3] {
        [
            self.channel_laws[CH_HUE].eval_clamped(0.0),
            self.channel_laws[CH_SAT].eval_clamped(0.0),
            self.channel_laws[CH_VAL].eval_clamped(0.0),
        ]
    }

    /// Display-space per-channel multiplier for a beam that crossed `depth`
    /// mm of this material. `transmittance(0) == [1, 1, 1]` by construction:
    /// the display color is normalized by the zero-depth display color.
    pub fn transmittance(&self, depth: f64) -> [f64; 3] {
        self.transmittance_with_grad(depth).0
    }

    /// Multiplier plus its derivative with respect to depth.
    pub fn transmittance_with_grad(&self, depth: f64) -> ([f64; 3], [f64; 3]) {
        let h = self.channel_laws[CH_HUE].eval_clamped(depth);
        let s = self.channel_laws[CH_SAT].eval_clamped(depth);
        let v = self.channel_laws[CH_VAL].eval_clamped(depth);
        let dh = self.channel_laws[CH_HUE].deriv_clamped(depth);
        let ds = self.channel_laws[CH_SAT].deriv_clamped(depth);
        let dv = self.channel_laws[CH_VAL].deriv_clamped(depth);

        let bg = hsv_to_rgb(self.zero_depth_color());
        let mut m = [0.0; 3];
        let mut dm = [0.0; 3];
        for ch in 0..3 {
            let (t, dt_dh) = hue_kernel(h, ch);
            // rgb = v * (1 - s * (1 - t))
            let rgb = v * (1.0 - s * (1.0 - t));
            let drgb = dv * (1.0 - s * (1.0 - t)) - v * ds * (1.0 - t) + v * s * dt_dh * dh;
            let denom = bg[ch].max(1e-9);
            let raw = rgb / denom;
            m[ch] = raw.clamp(0.0, 1.0);
            dm[ch] = if (0.0..=1.0).contains(&raw) { drgb / denom } else { 0.0 };
        }
        (m, dm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let model: MaterialModel = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    /// Reference iron converter: constant blue hue, saturation rising from
    /// white, value attenuating quickly. Calibrated thickness 0.2–8 mm.
    pub fn iron() -> Self {
        Self {
            material_id: MaterialId::Iron,
            channel_laws: [
                ChannelLaw::constant(0.61),
                ChannelLaw::new(-0.92, 0.55, 0.92),
                ChannelLaw::new(0.85, 0.35, 0.15),
            ],
            depth_range: (0.2, 8.0),
            fit_quality: [FitQuality::Constant, FitQuality::RSquared(1.0), FitQuality::RSquared(1.0)],
        }
    }

    /// Reference aluminum converter: green hue, slow attenuation, calibrated
    /// thickness 1–60 mm.
    pub fn aluminum() -> Self {
        Self {
            material_id: MaterialId::Aluminum,
            channel_laws: [
                ChannelLaw::constant(0.36),
                ChannelLaw::new(-0.85, 0.060, 0.85),
                ChannelLaw::new(0.80, 0.045, 0.20),
            ],
            depth_range: (1.0, 60.0),
            fit_quality: [FitQuality::Constant, FitQuality::RSquared(1.0), FitQuality::RSquared(1.0)],
        }
    }

    /// Reference plastic converter: orange hue, very slow attenuation,
    /// calibrated thickness 60–120 mm.
    pub fn plastic() -> Self {
        Self {
            material_id: MaterialId::Plastic,
            channel_laws: [
                ChannelLaw::constant(0.075),
                ChannelLaw::new(-0.80, 0.015, 0.80),
                ChannelLaw::new(0.75, 0.010, 0.25),
            ],
            depth_range: (60.0, 120.0),
            fit_quality: [FitQuality::Constant, FitQuality::RSquared(1.0), FitQuality::RSquared(1.0)],
        }
    }

    /// Look up a reference converter by material id.
    pub fn builtin(id: &MaterialId) -> Option<Self> {
        match id {
            MaterialId::Iron => Some(Self::iron()),
            MaterialId::Aluminum => Some(Self::aluminum()),
            MaterialId::Plastic => Some(Self::plastic()),
            MaterialId::Custom(_) => None,
        }
    }
}

/// A converter-space image evaluated from a depth map, with extrapolation
/// metadata. Pixels with zero depth are background and never counted.
#[derive(Debug, Clone)]
pub struct MaterialImage {
    /// Converter-space channels, shape `[3, H, W]`, clamped to `[0, 1]`.
    pub pixels: Array3<f64>,
    /// Number of nonzero-depth pixels outside the calibrated depth range.
    pub extrapolated_pixels: usize,
}

impl MaterialImage {
    pub fn has_extrapolation(&self) -> bool {
        self.extrapolated_pixels > 0
    }
}

/// Evaluate the converter over a depth map. Depths must be non-negative and
/// finite; depths outside the calibrated range are evaluated anyway and
/// counted in the result metadata.
pub fn eval_material(model: &MaterialModel, depth_map: &Array2<f64>) -> Result<MaterialImage> {
    let (h, w) = depth_map.dim();
    let mut pixels = Array3::zeros((3, h, w));
    let (lo, hi) = model.depth_range;
    let mut extrapolated = 0usize;
    for y in 0..h {
        for x in 0..w {
            let d = depth_map[(y, x)];
            if !d.is_finite() || d < 0.0 {
                return Err(Error::Domain(format!("depth at ({y},{x}) is {d}; must be >= 0")));
            }
            if d > 0.0 && (d < lo || d > hi) {
                extrapolated += 1;
            }
            for ch in 0..3 {
                pixels[(ch, y, x)] = model.channel_laws[ch].eval_clamped(d);
            }
        }
    }
    Ok(MaterialImage { pixels, extrapolated_pixels: extrapolated })
}

/// One calibration measurement: thickness and the converter-space color
/// sampled from the scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub depth: f64,
    pub color: [f64; 3],
}

impl CalibrationSample {
    pub fn validate(&self) -> Result<()> {
        if !self.depth.is_finite() || self.depth < 0.0 {
            return Err(Error::Domain(format!("sample depth {} invalid", self.depth)));
        }
        for c in self.color {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Domain(format!("sample channel {c} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Reads newline-delimited `depth_mm,c1,c2,c3` records with a one-line header.
pub fn load_samples(path: &Path) -> Result<Vec<CalibrationSample>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue; // header
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 comma-separated fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 4];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f.parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad number {f:?}: {e}"),
            })?;
        }
        let sample = CalibrationSample { depth: vals[0], color: [vals[1], vals[2], vals[3]] };
        sample.validate().map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn save_samples(samples: &[CalibrationSample], path: &Path) -> Result<()> {
    let mut out = String::from("depth_mm,c1,c2,c3\n");
    for s in samples {
        out.push_str(&format!("{},{},{},{}\n", s.depth, s.color[0], s.color[1], s.color[2]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Options for [`fit_converter_with`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// A channel whose sample variance falls below this is fitted as constant.
    pub constant_tol: f64,
    pub max_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { constant_tol: 1e-6, max_iters: 200 }
    }
}

/// Fit a converter from calibration samples with default options.
pub fn fit_converter(samples: &[CalibrationSample], material_id: MaterialId) -> Result<MaterialModel> {
    fit_converter_with(samples, material_id, &FitOptions::default())
}

/// Per-channel nonlinear least squares of `(a, b, q)`: log-linear
/// initialization followed by damped Gauss-Newton refinement. Low-variance
/// channels become constants. A fit that fails to converge returns its best
/// iterate; the reported R² tells the caller how good it is.
pub fn fit_converter_with(
    samples: &[CalibrationSample],
    material_id: MaterialId,
    opts: &FitOptions,
) -> Result<MaterialModel> {
    for s in samples {
        s.validate()?;
    }
    let mut depths: Vec<f64> = samples.iter().map(|s| s.depth).collect();
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    depths.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if samples.len() < 4 || depths.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need >= 4 samples over >= 3 distinct depths, got {} samples over {} depths",
            samples.len(),
            depths.len()
        )));
    }
    let depth_range = (depths[0], *depths.last().unwrap());

    let mut laws = [ChannelLaw::constant(0.0); 3];
    let mut quality = [FitQuality::Constant; 3];
    for ch in 0..3 {
        let xs: Vec<f64> = samples.iter().map(|s| s.depth).collect();
        let ys: Vec<f64> = samples.iter().map(|s| s.color[ch]).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
        if var < opts.constant_tol {
            laws[ch] = ChannelLaw::constant(mean);
            quality[ch] = FitQuality::Constant;
            continue;
        }
        let (law, r2) = fit_channel(&xs, &ys, opts.max_iters);
        laws[ch] = law;
        quality[ch] = FitQuality::RSquared(r2);
    }

    let model = MaterialModel { material_id, channel_laws: laws, depth_range, fit_quality: quality };
    // Fitted laws may legitimately increase (negative amplitude); validate
    // only the structural parts here.
    let (lo, hi) = model.depth_range;
    if !(lo >= 0.0) || !(lo < hi) {
        return Err(Error::Domain(format!("fitted depth_range invalid: ({lo}, {hi})")));
    }
    Ok(model)
}

/// Levenberg-Marquardt on a single channel. Returns the best iterate and R².
fn fit_channel(xs: &[f64], ys: &[f64], max_iters: usize) -> (ChannelLaw, f64) {
    let n = xs.len();
    // Log-linear initialization: take q just past the far-depth color so the
    // residual keeps one sign, then regress log |color - q| on depth.
    let (mut near, mut far) = (0usize, 0usize);
    for i in 1..n {
        if xs[i] < xs[near] {
            near = i;
        }
        if xs[i] > xs[far] {
            far = i;
        }
    }
    let span = ys[near] - ys[far];
    let sign = if span >= 0.0 { 1.0 } else { -1.0 };
    let offset = if span.abs() > 1e-9 { 0.05 * span } else { sign * 1e-3 };
    let q0 = ys[far] - offset;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut m = 0.0;
    for i in 0..n {
        let r = (ys[i] - q0) * sign;
        if r <= 0.0 {
            continue;
        }
        let ly = r.ln();
        sx += xs[i];
        sy += ly;
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ly;
        m += 1.0;
    }
    let (mut a, mut b, mut q);
    if m >= 2.0 && (m * sxx - sx * sx).abs() > 1e-12 {
        let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
        let intercept = (sy - slope * sx) / m;
        b = (-slope).max(1e-6);
        a = sign * intercept.exp();
        q = q0;
    } else {
        a = span;
        b = 0.1;
        q = q0;
    }

    let sse_of = |a: f64, b: f64, q: f64| -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(&x, &y)| {
                let e = a * (-b * x).exp() + q - y;
                e * e
            })
            .sum()
    };

    let mut lambda = 1e-3;
    let mut sse = sse_of(a, b, q);
    let mut best = (a, b, q, sse);
    for _ in 0..max_iters {
        // Normal equations J^T J + lambda * diag(J^T J).
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jte = [0.0f64; 3];
        for i in 0..n {
            let ex = (-b * xs[i]).exp();
            let e = a * ex + q - ys[i];
            let j = [ex, -a * xs[i] * ex, 1.0];
            for r in 0..3 {
                for c in 0..3 {
                    jtj[r][c] += j[r] * j[c];
                }
                jte[r] += j[r] * e;
            }
        }
        let mut aug = jtj;
        for r in 0..3 {
            aug[r][r] *= 1.0 + lambda;
            aug[r][r] += 1e-12;
        }
        let rhs = [-jte[0], -jte[1], -jte[2]];
        let Some(step) = solve3(aug, rhs) else {
            lambda *= 5.0;
            continue;
        };
        let (na, nb, nq) = (a + step[0], (b + step[1]).max(0.0), q + step[2]);
        let nsse = sse_of(na, nb, nq);
        if nsse.is_finite() && nsse < sse {
            a = na;
            b = nb;
            q = nq;
            sse = nsse;
            lambda = (lambda / 3.0).max(1e-12);
            if sse < best.3 {
                best = (a, b, q, sse);
            }
            if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-12 {
                break;
            }
        } else {
            lambda *= 5.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    let (a, b, q, sse) = best;
    let mean = ys.iter().sum::<f64>() / n as f64;
    let sstot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = if sstot > 0.0 { 1.0 - sse / sstot } else { 1.0 };
    (ChannelLaw { a, b, q }, r2)
}

/// Solve a 3x3 linear system by Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut rhs: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let mut pivot = col;
        for r in col + 1..3 {
            if m[r][col].abs() > m[pivot][col].abs() {
                pivot = r;
            }
        }
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for r in col + 1..3 {
            let f = m[r][col] / m[col][col];
            for c in col..3 {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let mut acc = rhs[r];
        for c in r + 1..3 {
            acc -= m[r][c] * x[c];
        }
        x[r] = acc / m[r][r];
    }
    Some(x)
}

/// Channel kernel of the hue→rgb mapping and its derivative in hue.
/// `rgb_ch = v * (1 - s * (1 - kernel))`.
fn hue_kernel(h: f64, ch: usize) -> (f64, f64) {
    // r: |6h-3|-1, g: 2-|6h-2|, b: 2-|6h-4|, all clamped to [0,1].
    let (raw, draw) = match ch {
        0 => {
            let u = 6.0 * h - 3.0;
            (u.abs() - 1.0, 6.0 * u.signum())
        }
        1 => {
            let u = 6.0 * h - 2.0;
            (2.0 - u.abs(), -6.0 * u.signum())
        }
        _ => {
            let u = 6.0 * h - 4.0;
            (2.0 - u.abs(), -6.0 * u.signum())
        }
    };
    if (0.0..=1.0).contains(&raw) {
        (raw, draw)
    } else {
        (raw.clamp(0.0, 1.0), 0.0)
    }
}

/// Display RGB from cylindrical hue/saturation/value, all channels in [0,1].
pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let mut rgb = [0.0; 3];
    for ch in 0..3 {
        let (t, _) = hue_kernel(h, ch);
        rgb[ch] = v * (1.0 - s * (1.0 - t));
    }
    rgb
}

/// Cylindrical hue/saturation/value from display RGB. Gray pixels take hue 0
/// by convention.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, v]
}

/// Direction for [`color_space_convert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvertDirection {
    ToConverterSpace,
    ToDisplaySpace,
}

/// Convert a `[3, H, W]` image between display RGB and the converter space.
pub fn color_space_convert(image: &Array3<f64>, direction: ConvertDirection) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Domain(format!("expected 3 channels, got {c}")));
    }
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = [image[(0, y, x)], image[(1, y, x)], image[(2, y, x)]];
            for v in px {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Domain(format!("channel value {v} outside [0,1] at ({y},{x})")));
                }
            }
            let converted = match direction {
                ConvertDirection::ToConverterSpace => rgb_to_hsv(px),
                ConvertDirection::ToDisplaySpace => hsv_to_rgb(px),
            };
            for ch in 0..3 {
                out[(ch, y, x)] = converted[ch];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attenuate_zero_thickness_is_identity() {
        assert_eq!(attenuate(1.0, 3.7, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn attenuate_transparent_medium() {
        assert_eq!(attenuate(1.0, 0.0, 5.0).unwrap(), 1.0);
    }

    #[test]
    fn attenuate_matches_scalar_evaluation() {
        let got = attenuate(2.0, 0.5, 2.0).unwrap();
        assert!((got - 0.7357588823428847).abs() < 1e-12);
    }

    #[test]
    fn attenuate_rejects_negative_inputs() {
        assert!(attenuate(-1.0, 0.5, 1.0).is_err());
        assert!(attenuate(1.0, -0.5, 1.0).is_err());
        assert!(attenuate(1.0, 0.5, -1.0).is_err());
    }

    #[test]
    fn attenuate_monotone_in_thickness() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mu = rng.random_range(0.01..2.0);
            let x1 = rng.random_range(0.0..10.0);
            let x2 = x1 + rng.random_range(0.0..5.0);
            assert!(attenuate(1.0, mu, x2).unwrap() <= attenuate(1.0, mu, x1).unwrap());
        }
    }

    #[test]
    fn law_constant_when_b_zero() {
        let law = ChannelLaw::new(1.0, 0.0, 0.0);
        for d in [0.0, 1.0, 250.0] {
            assert_eq!(law.eval_clamped(d), 1.0);
        }
    }

    #[test]
    fn law_zero_depth_is_a_plus_q() {
        let law = ChannelLaw::new(0.8, 0.5, 0.1);
        assert_eq!(law.eval(0.0), 0.9);
    }

    #[test]
    fn law_matches_scalar_evaluation() {
        let law = ChannelLaw::new(0.8, 0.5, 0.1);
        assert!((law.eval(2.0) - 0.39430355293715386).abs() < 1e-12);
    }

    #[test]
    fn law_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(0.01..2.0);
            let q: f64 = rng.random_range(-0.5..0.5);
            // Keep b*d moderate so the central-difference oracle itself
            // retains enough significant digits.
            let d: f64 = rng.random_range(0.0..(10.0f64).min(5.0 / b));
            let law = ChannelLaw::new(a, b, q);
            let eps = 1e-6 * (1.0 + d.abs());
            let fd = (law.eval(d + eps) - law.eval(d - eps)) / (2.0 * eps);
            let an = law.deriv(d);
            let denom = an.abs().max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-5,
                "a={a} b={b} q={q} d={d}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn law_strictly_monotone_for_positive_rate() {
        // Attenuation-sense laws (a > 0) decrease; saturation-sense laws
        // (a < 0) increase. Either way b > 0 means strictly monotone.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let a = rng.random_range(0.1..1.0);
            let b = rng.random_range(0.05..1.0);
            let law_dec = ChannelLaw::new(a, b, 0.0);
            let law_inc = ChannelLaw::new(-a, b, a);
            let d1 = rng.random_range(0.0..8.0);
            let d2 = d1 + rng.random_range(1e-3..4.0);
            assert!(law_dec.eval(d2) < law_dec.eval(d1));
            assert!(law_inc.eval(d2) > law_inc.eval(d1));
        }
    }

    #[test]
    fn eval_material_basics() {
        let model = MaterialModel::new(
            MaterialId::Custom("test".into()),
            [
                ChannelLaw::new(1.0, 0.0, 0.0),
                ChannelLaw::new(0.8, 0.5, 0.1),
                ChannelLaw::new(0.8, 0.5, 0.1),
            ],
            (0.0, 8.0),
            [FitQuality::Constant; 3],
        );
        // depth_range.min == depth_range.max is invalid, so use (0, 8): min
        // must be < max and >= 0.
        let model = model.unwrap();
        let depth = Array2::from_shape_fn((2, 2), |(y, x)| (y * 2 + x) as f64);
        let img = eval_material(&model, &depth).unwrap();
        // b=0 constant law.
        assert_eq!(img.pixels[(0, 1, 1)], 1.0);
        // g(0) = a + q.
        assert!((img.pixels[(1, 0, 0)] - 0.9).abs() < 1e-12);
        // g(2) scalar evaluation.
        assert!((img.pixels[(1, 1, 0)] - 0.39430355293715386).abs() < 1e-12);
        assert_eq!(img.extrapolated_pixels, 0);
    }

    #[test]
    fn eval_material_flags_extrapolation() {
        let model = MaterialModel::iron();
        let depth = Array2::from_shape_fn((1, 3), |(_, x)| match x {
            0 => 0.0,  // background, exempt
            1 => 4.0,  // in range
            _ => 20.0, // beyond calibration
        });
        let img = eval_material(&model, &depth).unwrap();
        assert_eq!(img.extrapolated_pixels, 1);
        assert!(img.has_extrapolation());
    }

    #[test]
    fn eval_material_rejects_negative_depth() {
        let model = MaterialModel::iron();
        let depth = Array2::from_elem((1, 1), -0.5);
        assert!(eval_material(&model, &depth).is_err());
    }

    #[test]
    fn eval_material_never_nan_for_finite_depth() {
        let model = MaterialModel::iron();
        for d in [0.0, 1e-300, 1.0, 1e6, 1e300] {
            let depth = Array2::from_elem((1, 1), d);
            let img = eval_material(&model, &depth).unwrap();
            for ch in 0..3 {
                assert!(img.pixels[(ch, 0, 0)].is_finite());
            }
        }
    }

    #[test]
    fn transmittance_is_identity_at_zero_depth() {
        for model in [MaterialModel::iron(), MaterialModel::aluminum(), MaterialModel::plastic()] {
            let m = model.transmittance(0.0);
            for ch in 0..3 {
                assert!((m[ch] - 1.0).abs() < 1e-12, "{:?} -> {m:?}", model.material_id);
            }
        }
    }

    #[test]
    fn transmittance_gradient_matches_finite_differences() {
        let model = MaterialModel::iron();
        for d in [0.5, 1.0, 2.5, 5.0, 7.5] {
            let (_, grad) = model.transmittance_with_grad(d);
            let eps = 1e-6;
            let lo = model.transmittance(d - eps);
            let hi = model.transmittance(d + eps);
            for ch in 0..3 {
                let fd = (hi[ch] - lo[ch]) / (2.0 * eps);
                assert!(
                    (fd - grad[ch]).abs() < 1e-6 * (1.0 + grad[ch].abs()),
                    "d={d} ch={ch}: fd={fd} analytic={}",
                    grad[ch]
                );
            }
        }
    }

    #[test]
    fn iron_renders_darker_with_depth() {
        let model = MaterialModel::iron();
        let thin = model.transmittance(0.5);
        let thick = model.transmittance(6.0);
        // Blue channel survives best; red/green attenuate hard.
        assert!(thick[2] > thick[0]);
        assert!(thin.iter().sum::<f64>() > thick.iter().sum::<f64>());
    }

    #[test]
    fn fit_recovers_exact_coefficients() {
        let law = ChannelLaw::new(0.8, 0.5, 0.1);
        let samples: Vec<CalibrationSample> = (0..8)
            .map(|i| {
                let d = i as f64;
                CalibrationSample { depth: d, color: [0.5, law.eval(d), law.eval(d)] }
            })
            .collect();
        let model = fit_converter(&samples, MaterialId::Custom("synth".into())).unwrap();
        let fitted = model.channel_laws[CH_SAT];
        assert!((fitted.a - 0.8).abs() < 1e-6, "a={}", fitted.a);
        assert!((fitted.b - 0.5).abs() < 1e-6, "b={}", fitted.b);
        assert!((fitted.q - 0.1).abs() < 1e-6, "q={}", fitted.q);
        match model.fit_quality[CH_SAT] {
            FitQuality::RSquared(r2) => assert!(r2 > 1.0 - 1e-9, "r2={r2}"),
            FitQuality::Constant => panic!("expected fitted channel"),
        }
        assert_eq!(model.fit_quality[CH_HUE], FitQuality::Constant);
        assert_eq!(model.channel_laws[CH_HUE].eval(3.0), 0.5);
    }

    #[test]
    fn fit_recovers_negative_amplitude() {
        let law = ChannelLaw::new(-0.92, 0.55, 0.92);
        let samples: Vec<CalibrationSample> = [0.2, 0.5, 1.0, 2.0, 3.0, 5.0, 6.5, 8.0]
            .iter()
            .map(|&d| CalibrationSample { depth: d, color: [0.61, law.eval(d), 0.3] })
            .collect();
        let model = fit_converter(&samples, MaterialId::Iron).unwrap();
        let fitted = model.channel_laws[CH_SAT];
        assert!((fitted.a + 0.92).abs() < 1e-6, "a={}", fitted.a);
        assert!((fitted.b - 0.55).abs() < 1e-6, "b={}", fitted.b);
        assert!((fitted.q - 0.92).abs() < 1e-6, "q={}", fitted.q);
    }

    #[test]
    fn fit_constant_channel() {
        let samples: Vec<CalibrationSample> = (0..6)
            .map(|i| CalibrationSample { depth: i as f64, color: [0.61, 0.61, 0.61] })
            .collect();
        let model = fit_converter(&samples, MaterialId::Iron).unwrap();
        for ch in 0..3 {
            assert_eq!(model.fit_quality[ch], FitQuality::Constant);
            assert_eq!(model.channel_laws[ch].b, 0.0);
            assert!((model.channel_laws[ch].eval(42.0) - 0.61).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_rejects_insufficient_depths() {
        let samples = vec![
            CalibrationSample { depth: 1.0, color: [0.5, 0.5, 0.5] },
            CalibrationSample { depth: 1.0, color: [0.5, 0.5, 0.5] },
            CalibrationSample { depth: 2.0, color: [0.4, 0.4, 0.4] },
            CalibrationSample { depth: 2.0, color: [0.4, 0.4, 0.4] },
        ];
        match fit_converter(&samples, MaterialId::Iron) {
            Err(Error::InsufficientData(_)) => {}
            other => panic!("expected insufficient data, got {other:?}"),
        }
    }

    #[test]
    fn fit_idempotence() {
        // Fitting samples generated from a fitted model recovers the model.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let law = ChannelLaw::new(0.7, 0.4, 0.2);
        let noisy: Vec<CalibrationSample> = (0..10)
            .map(|i| {
                let d = i as f64 * 0.8;
                let y = (law.eval(d) + rng.random_range(-0.004..0.004)).clamp(0.0, 1.0);
                CalibrationSample { depth: d, color: [0.5, y, y] }
            })
            .collect();
        let first = fit_converter(&noisy, MaterialId::Custom("x".into())).unwrap();
        let regen: Vec<CalibrationSample> = (0..10)
            .map(|i| {
                let d = i as f64 * 0.8;
                CalibrationSample {
                    depth: d,
                    color: [
                        first.channel_laws[0].eval_clamped(d),
                        first.channel_laws[1].eval_clamped(d),
                        first.channel_laws[2].eval_clamped(d),
                    ],
                }
            })
            .collect();
        let second = fit_converter(&regen, MaterialId::Custom("x".into())).unwrap();
        for ch in 1..3 {
            assert!((first.channel_laws[ch].a - second.channel_laws[ch].a).abs() < 1e-4);
            assert!((first.channel_laws[ch].b - second.channel_laws[ch].b).abs() < 1e-4);
            assert!((first.channel_laws[ch].q - second.channel_laws[ch].q).abs() < 1e-4);
        }
    }

    #[test]
    fn bundled_iron_calibration_fits_cleanly() {
        // Noisy analogue of the iron scan: saturation and value fit with
        // high R-squared, hue comes out constant.
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("assets/iron_calibration.csv");
        let samples = load_samples(&path).unwrap();
        assert_eq!(samples.len(), 8);
        let model = fit_converter(&samples, MaterialId::Iron).unwrap();
        assert_eq!(model.fit_quality[CH_HUE], FitQuality::Constant);
        for ch in [CH_SAT, CH_VAL] {
            match model.fit_quality[ch] {
                FitQuality::RSquared(r2) => assert!(r2 > 0.98, "channel {ch} R2 = {r2}"),
                FitQuality::Constant => panic!("channel {ch} unexpectedly constant"),
            }
        }
    }

    #[test]
    fn color_convert_canonical_values() {
        let red = rgb_to_hsv([1.0, 0.0, 0.0]);
        assert_eq!(red, [0.0, 1.0, 1.0]);
        let gray = rgb_to_hsv([0.5, 0.5, 0.5]);
        assert_eq!(gray, [0.0, 0.0, 0.5]);
    }

    #[test]
    fn color_convert_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(0.0..1.0));
        let hsv = color_space_convert(&img, ConvertDirection::ToConverterSpace).unwrap();
        let back = color_space_convert(&hsv, ConvertDirection::ToDisplaySpace).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn color_convert_rejects_out_of_range() {
        let img = Array3::from_elem((3, 1, 1), 1.5);
        assert!(color_space_convert(&img, ConvertDirection::ToConverterSpace).is_err());
    }

    #[test]
    fn model_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("iron.json");
        let model = MaterialModel::iron();
        model.save(&path).unwrap();
        let loaded = MaterialModel::load(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn samples_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let samples = vec![
            CalibrationSample { depth: 0.2, color: [0.61, 0.1, 0.9] },
            CalibrationSample { depth: 8.0, color: [0.61, 0.85, 0.2] },
        ];
        save_samples(&samples, &path).unwrap();
        let loaded = load_samples(&path).unwrap();
        assert_eq!(samples, loaded);
    }
}
