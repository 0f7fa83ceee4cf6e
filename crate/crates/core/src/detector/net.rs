//! Minimal conv/linear primitives with explicit backward passes.
//!
//! Everything runs in f64 so analytic gradients can be checked against
//! central finite differences at tight tolerances. Layers own flat weight
//! vectors; optimizers and checkpoints see each network as one flat
//! parameter slice via `params` / `set_params`.

use ndarray::Array3;
use rand::Rng;

/// 2-D convolution, square kernel, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Weights `[out_ch, in_ch, k, k]`, then biases `[out_ch]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self { in_ch, out_ch, k, stride, pad, w: vec![0.0; out_ch * in_ch * k * k], b: vec![0.0; out_ch] }
    }

    /// He-style initialization.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let fan_in = (self.in_ch * self.k * self.k) as f64;
        let std = (2.0 / fan_in).sqrt();
        for w in &mut self.w {
            // Deterministic approximate normal from three uniforms.
            let u: f64 = (0..3).map(|_| rng.random_range(-1.0f64..1.0)).sum();
            *w = u * std * 0.578;
        }
        for b in &mut self.b {
            *b = 0.0;
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Valid output range `lo..hi` along one axis for kernel offset `k`,
    /// such that every sampled input index stays in `0..extent`.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let p = self.pad as isize;
        let k = k as isize;
        // 0 <= o*s + k - p < extent
        let lo = ((p - k + s - 1).max(0) / s) as usize;
        let hi_inclusive = (extent as isize - 1 + p - k) / s;
        if hi_inclusive < lo as isize {
            (0, 0)
        } else {
            (lo, (hi_inclusive as usize + 1).min(out_extent))
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (ci, h, w) = x.dim();
        assert_eq!(ci, self.in_ch);
        let (oh, ow) = self.out_hw(h, w);
        let xs = x.as_slice().unwrap();
        let mut out = Array3::zeros((self.out_ch, oh, ow));
        let os = out.as_slice_mut().unwrap();
        let kk = self.k * self.k;
        let s = self.stride;
        for o in 0..self.out_ch {
            let out_base = o * oh * ow;
            os[out_base..out_base + oh * ow].fill(self.b[o]);
            for i in 0..ci {
                let w_base = (o * ci + i) * kk;
                let x_base = i * h * w;
                for ky in 0..self.k {
                    let (oy_lo, oy_hi) = self.valid_range(ky, h, oh);
                    for kx in 0..self.k {
                        let wv = self.w[w_base + ky * self.k + kx];
                        let (ox_lo, ox_hi) = self.valid_range(kx, w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let y = oy * s + ky - self.pad;
                            let row = x_base + y * w;
                            let orow = out_base + oy * ow;
                            let x0 = ox_lo * s + kx - self.pad;
                            let src = &xs[row + x0..row + x0 + (ox_hi - ox_lo - 1) * s + 1];
                            let dst = &mut os[orow + ox_lo..orow + ox_hi];
                            for (d, v) in dst.iter_mut().zip(src.iter().step_by(s)) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Backward pass: returns the input gradient and accumulates weight and
    /// bias gradients into `dw`/`db` (same layout as `w`/`b`).
    pub fn backward(
        &self,
        x: &Array3<f64>,
        dy: &Array3<f64>,
        dw: &mut [f64],
        db: &mut [f64],
    ) -> Array3<f64> {
        let (ci, h, w) = x.dim();
        let (co, oh, ow) = dy.dim();
        assert_eq!(ci, self.in_ch);
        assert_eq!(co, self.out_ch);
        let xs = x.as_slice().unwrap();
        let dys = dy.as_slice().unwrap();
        let mut dx = Array3::zeros((ci, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        let kk = self.k * self.k;
        let s = self.stride;
        for o in 0..co {
            let out_base = o * oh * ow;
            db[o] += dys[out_base..out_base + oh * ow].iter().sum::<f64>();
            for i in 0..ci {
                let w_base = (o * ci + i) * kk;
                let x_base = i * h * w;
                for ky in 0..self.k {
                    let (oy_lo, oy_hi) = self.valid_range(ky, h, oh);
                    for kx in 0..self.k {
                        let widx = w_base + ky * self.k + kx;
                        let wv = self.w[widx];
                        let (ox_lo, ox_hi) = self.valid_range(kx, w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut dwacc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let y = oy * s + ky - self.pad;
                            let row = x_base + y * w;
                            let orow = out_base + oy * ow;
                            let x0 = ox_lo * s + kx - self.pad;
                            let g_row = &dys[orow + ox_lo..orow + ox_hi];
                            let span = row + x0..row + x0 + (ox_hi - ox_lo - 1) * s + 1;
                            for (g, xv) in g_row.iter().zip(xs[span.clone()].iter().step_by(s)) {
                                dwacc += g * xv;
                            }
                            for (g, dxv) in
                                g_row.iter().zip(dxs[span].iter_mut().step_by(s))
                            {
                                *dxv += g * wv;
                            }
                        }
                        dw[widx] += dwacc;
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer over a flat input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Weights `[out_dim, in_dim]`, then biases `[out_dim]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, w: vec![0.0; out_dim * in_dim], b: vec![0.0; out_dim] }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let std = (2.0 / self.in_dim as f64).sqrt();
        for w in &mut self.w {
            let u: f64 = (0..3).map(|_| rng.random_range(-1.0f64..1.0)).sum();
            *w = u * std * 0.578;
        }
        for b in &mut self.b {
            *b = 0.0;
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim);
        let mut out = self.b.clone();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            out[o] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let g = dy[o];
            db[o] += g;
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let drow = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                drow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward of relu given the pre-activation values.
pub fn relu_backward(pre: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of a softmax distribution against a hard target; returns
/// the loss and d(loss)/d(logits).
pub fn softmax_ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -probs[target].max(1e-300).ln();
    let mut grad = probs;
    grad[target] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1);
        conv.init(&mut rng);
        let x = Array3::from_shape_fn((2, 6, 6), |_| rng.random_range(-1.0..1.0));
        let weights = Array3::from_shape_fn(
            {
                let (oh, ow) = conv.out_hw(6, 6);
                (3, oh, ow)
            },
            |_| rng.random_range(-1.0..1.0),
        );
        let loss = |c: &Conv2d, x: &Array3<f64>| (&c.forward(x) * &weights).sum();

        let mut dw = vec![0.0; conv.w.len()];
        let mut db = vec![0.0; conv.b.len()];
        let dx = conv.backward(&x, &weights, &mut dw, &mut db);

        let eps = 1e-6;
        // Input gradient.
        for probe in [(0usize, 2usize, 3usize), (1, 0, 0), (1, 5, 5)] {
            let mut xp = x.clone();
            xp[probe] += eps;
            let mut xm = x.clone();
            xm[probe] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((fd - dx[probe]).abs() < 1e-8, "dx {probe:?}: {fd} vs {}", dx[probe]);
        }
        // Weight gradient.
        for widx in [0usize, 7, conv.w.len() - 1] {
            let mut cp = conv.clone();
            cp.w[widx] += eps;
            let mut cm = conv.clone();
            cm.w[widx] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((fd - dw[widx]).abs() < 1e-8, "dw[{widx}]: {fd} vs {}", dw[widx]);
        }
        // Bias gradient.
        let mut cp = conv.clone();
        cp.b[1] += eps;
        let mut cm = conv.clone();
        cm.b[1] -= eps;
        let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
        assert!((fd - db[1]).abs() < 1e-8);
    }

    #[test]
    fn conv_backward_is_local() {
        // Gradient w.r.t. the input is zero outside the receptive field of
        // the output cells that received gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::new(1, 2, 3, 2, 1);
        conv.init(&mut rng);
        let x = Array3::from_shape_fn((1, 16, 16), |_| rng.random_range(-1.0..1.0));
        let (oh, ow) = conv.out_hw(16, 16);
        let mut dy = Array3::zeros((2, oh, ow));
        dy[(0, 0, 0)] = 1.0; // only the top-left output cell
        let mut dw = vec![0.0; conv.w.len()];
        let mut db = vec![0.0; conv.b.len()];
        let dx = conv.backward(&x, &dy, &mut dw, &mut db);
        for y in 0..16 {
            for x_ in 0..16 {
                let inside = y < 2 && x_ < 2; // 3x3 kernel at stride 2, pad 1
                if !inside {
                    assert_eq!(dx[(0, y, x_)], 0.0, "leak at ({y},{x_})");
                }
            }
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut lin = Linear::new(5, 3);
        lin.init(&mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |l: &Linear, x: &[f64]| -> f64 {
            l.forward(x).iter().zip(&dy).map(|(o, g)| o * g).sum()
        };
        let mut dw = vec![0.0; lin.w.len()];
        let mut db = vec![0.0; lin.b.len()];
        let dx = lin.backward(&x, &dy, &mut dw, &mut db);
        let eps = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
        for widx in [0usize, 7, 14] {
            let mut lp = lin.clone();
            lp.w[widx] += eps;
            let mut lm = lin.clone();
            lm.w[widx] -= eps;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            assert!((fd - dw[widx]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_ce_gradient() {
        let logits = vec![0.2, -1.3, 0.7, 0.1];
        let (loss, grad) = softmax_ce(&logits, 2);
        assert!(loss > 0.0);
        let eps = 1e-6;
        for i in 0..4 {
            let mut lp = logits.clone();
            lp[i] += eps;
            let mut lm = logits.clone();
            lm[i] -= eps;
            let fd = (softmax_ce(&lp, 2).0 - softmax_ce(&lm, 2).0) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-9);
        }
        // Perfectly confident prediction has near-zero loss.
        let confident = vec![-30.0, -30.0, 30.0, -30.0];
        assert!(softmax_ce(&confident, 2).0 < 1e-3);
    }
}
