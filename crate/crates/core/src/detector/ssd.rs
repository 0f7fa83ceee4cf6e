//! A small trainable single-shot detector.
//!
//! The trunk is a stack of stride-2 3x3 conv+relu blocks (one per entry in
//! `DetectorConfig::channels`) followed by a 1x1 head that predicts, per
//! grid cell, class logits (background first) and a 4-vector of box offsets
//! against the cell's single square anchor. Matching follows the usual
//! single-shot convention: each ground-truth box claims its best anchor,
//! anchors above the positive IoU threshold join in, anchors below the
//! negative threshold are background, and the rest are ignored. The
//! classification term uses hard-negative mining at a fixed negative:positive
//! ratio; localization is smooth-L1 on the matched anchors.
//!
//! Everything is f64 and deterministic for a fixed seed; batch gradients
//! are computed per image (in parallel) and reduced in index order, so the
//! result does not depend on the worker count.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use super::net::{relu, relu_backward, softmax, softmax_ce, Conv2d};
use super::{Detection, Detector, DetectorConfig, LossMode};
use crate::error::{Error, Result};
use crate::exec;
use crate::scene::{Annotation, BBox, Dataset};

/// Score floor for boxes included in the targeted-background loss.
const TARGETED_SCORE_FLOOR: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct ToyDetector {
    config: DetectorConfig,
    class_names: Vec<String>,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

struct Activations {
    /// Input to each trunk conv; `inputs[0]` is the image.
    inputs: Vec<Array3<f64>>,
    /// Pre-relu trunk outputs.
    pres: Vec<Array3<f64>>,
    /// Raw head output `[num_classes + 4, gh, gw]`.
    head_out: Array3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AnchorTarget {
    Positive { gt: usize },
    Negative,
    Ignore,
}

impl ToyDetector {
    /// Fresh randomly initialized detector.
    pub fn new(config: DetectorConfig, class_names: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if class_names.len() + 1 != config.num_classes {
            return Err(Error::Validation(format!(
                "{} class names for {} classes (background excluded)",
                class_names.len(),
                config.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for &out_ch in &config.channels {
            let mut conv = Conv2d::new(in_ch, out_ch, 3, 2, 1);
            conv.init(&mut rng);
            convs.push(conv);
            in_ch = out_ch;
        }
        for _ in 0..config.context_convs {
            let mut conv = Conv2d::new(in_ch, in_ch, 3, 1, 1);
            conv.init(&mut rng);
            convs.push(conv);
        }
        let mut head = Conv2d::new(in_ch, config.num_classes + 4, 1, 1, 0);
        head.init(&mut rng);
        // Background-prior bias keeps early training from flooding the
        // grid with false positives.
        head.b[0] = 2.0;
        Ok(Self { config, class_names, convs, head })
    }

    fn check_image(&self, image: &Array3<f64>) -> Result<()> {
        let (c, h, w) = image.dim();
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Domain(format!(
                "expected image [3, {s}, {s}], got [{c}, {h}, {w}]"
            )));
        }
        Ok(())
    }

    fn forward_full(&self, image: &Array3<f64>) -> Activations {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pres = Vec::with_capacity(self.convs.len());
        // Center the mostly-white scans; a constant shift leaves input
        // gradients unchanged.
        let mut x = image.mapv(|v| v - 0.5);
        for conv in &self.convs {
            inputs.push(x.clone());
            let pre = conv.forward(&x);
            x = relu(&pre);
            pres.push(pre);
        }
        let head_out = self.head.forward(&x);
        Activations { inputs, pres, head_out }
    }

    fn anchor_center(&self, gy: usize, gx: usize) -> (f64, f64) {
        let s = self.config.stride() as f64;
        ((gx as f64 + 0.5) * s, (gy as f64 + 0.5) * s)
    }

    fn anchor_box(&self, gy: usize, gx: usize) -> BBox {
        let (cx, cy) = self.anchor_center(gy, gx);
        let a = self.config.anchor_size();
        BBox::new(cx - a / 2.0, cy - a / 2.0, cx + a / 2.0, cy + a / 2.0)
    }

    fn decode_cell(&self, head: &Array3<f64>, gy: usize, gx: usize) -> (Vec<f64>, Detection) {
        let c = self.config.num_classes;
        let logits: Vec<f64> = (0..c).map(|k| head[(k, gy, gx)]).collect();
        let a = self.config.anchor_size();
        let (acx, acy) = self.anchor_center(gy, gx);
        let t = [
            head[(c, gy, gx)],
            head[(c + 1, gy, gx)],
            head[(c + 2, gy, gx)].clamp(-4.0, 4.0),
            head[(c + 3, gy, gx)].clamp(-4.0, 4.0),
        ];
        let det = Detection {
            cx: acx + t[0] * a,
            cy: acy + t[1] * a,
            w: a * t[2].exp(),
            h: a * t[3].exp(),
            class_id: 0,
            confidence: 0.0,
        };
        (logits, det)
    }

    fn encode(&self, gt: &BBox, gy: usize, gx: usize) -> [f64; 4] {
        let a = self.config.anchor_size();
        let (acx, acy) = self.anchor_center(gy, gx);
        let (gcx, gcy) = gt.center();
        [
            (gcx - acx) / a,
            (gcy - acy) / a,
            (gt.width() / a).ln(),
            (gt.height() / a).ln(),
        ]
    }

    /// Anchor assignment for one image.
    fn match_anchors(&self, annotations: &[Annotation]) -> Vec<AnchorTarget> {
        let g = self.config.grid();
        let n = g * g;
        let mut targets = vec![AnchorTarget::Negative; n];
        if annotations.is_empty() {
            return targets;
        }
        let mut best_iou = vec![0.0f64; n];
        let mut best_gt = vec![0usize; n];
        let mut gt_best: Vec<(usize, f64)> = vec![(0, 0.0); annotations.len()];
        for gy in 0..g {
            for gx in 0..g {
                let idx = gy * g + gx;
                let anchor = self.anchor_box(gy, gx);
                for (gi, ann) in annotations.iter().enumerate() {
                    let iou = anchor.iou(&ann.bbox);
                    if iou > best_iou[idx] {
                        best_iou[idx] = iou;
                        best_gt[idx] = gi;
                    }
                    if iou > gt_best[gi].1 {
                        gt_best[gi] = (idx, iou);
                    }
                }
            }
        }
        for idx in 0..n {
            if best_iou[idx] >= self.config.match_iou_pos {
                targets[idx] = AnchorTarget::Positive { gt: best_gt[idx] };
            } else if best_iou[idx] >= self.config.match_iou_neg {
                targets[idx] = AnchorTarget::Ignore;
            }
        }
        // Every ground truth claims its best anchor, beating thresholds.
        for (gi, &(idx, iou)) in gt_best.iter().enumerate() {
            if iou > 0.05 {
                targets[idx] = AnchorTarget::Positive { gt: gi };
            }
        }
        targets
    }

    /// Loss surface and its gradient w.r.t. the raw head output. Returns
    /// (cls_loss, loc_loss, dhead). `include_loc` adds the localization
    /// gradient to `dhead` (training); the attack surface differentiates
    /// the classification term alone.
    fn loss_and_head_grad(
        &self,
        head: &Array3<f64>,
        annotations: &[Annotation],
        mode: LossMode,
        include_loc: bool,
    ) -> (f64, f64, Array3<f64>) {
        let g = self.config.grid();
        let c = self.config.num_classes;
        let mut dhead = Array3::zeros(head.dim());

        if mode == LossMode::TargetedBackground {
            // Cross-entropy toward background over every decoded box whose
            // confidence clears a low floor, pre-NMS.
            let mut total = 0.0;
            for gy in 0..g {
                for gx in 0..g {
                    let logits: Vec<f64> = (0..c).map(|k| head[(k, gy, gx)]).collect();
                    let probs = softmax(&logits);
                    let conf = probs[1..].iter().cloned().fold(0.0, f64::max);
                    if conf < TARGETED_SCORE_FLOOR {
                        continue;
                    }
                    let (loss, grad) = softmax_ce(&logits, 0);
                    total += loss;
                    for k in 0..c {
                        dhead[(k, gy, gx)] += grad[k];
                    }
                }
            }
            return (total, 0.0, dhead);
        }

        let targets = self.match_anchors(annotations);
        let n_pos = targets
            .iter()
            .filter(|t| matches!(t, AnchorTarget::Positive { .. }))
            .count();

        // Classification: positives plus hard-mined negatives.
        let mut neg_losses: Vec<(f64, usize)> = Vec::new();
        let mut cls_loss = 0.0;
        let mut cls_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for (idx, target) in targets.iter().enumerate() {
            let (gy, gx) = (idx / g, idx % g);
            let logits: Vec<f64> = (0..c).map(|k| head[(k, gy, gx)]).collect();
            match target {
                AnchorTarget::Positive { gt } => {
                    let (loss, grad) = softmax_ce(&logits, annotations[*gt].class_id);
                    cls_loss += loss;
                    cls_grads.push((idx, grad));
                }
                AnchorTarget::Negative => {
                    let (loss, _) = softmax_ce(&logits, 0);
                    neg_losses.push((loss, idx));
                }
                AnchorTarget::Ignore => {}
            }
        }
        neg_losses.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let n_neg = if n_pos > 0 {
            ((n_pos as f64 * self.config.neg_pos_ratio) as usize).min(neg_losses.len())
        } else {
            // Background-only fallback keeps the loss defined.
            neg_losses.len().min(8)
        };
        for &(loss, idx) in neg_losses.iter().take(n_neg) {
            let (gy, gx) = (idx / g, idx % g);
            let logits: Vec<f64> = (0..c).map(|k| head[(k, gy, gx)]).collect();
            let (_, grad) = softmax_ce(&logits, 0);
            cls_loss += loss;
            cls_grads.push((idx, grad));
        }
        let norm = n_pos.max(if n_pos == 0 { n_neg.max(1) } else { n_pos }) as f64;
        cls_loss /= norm;
        for (idx, grad) in cls_grads {
            let (gy, gx) = (idx / g, idx % g);
            for k in 0..c {
                dhead[(k, gy, gx)] += grad[k] / norm;
            }
        }

        // Localization: smooth-L1 on positives.
        let mut loc_loss = 0.0;
        if n_pos > 0 {
            let loc_norm = n_pos as f64;
            for (idx, target) in targets.iter().enumerate() {
                let AnchorTarget::Positive { gt } = target else { continue };
                let (gy, gx) = (idx / g, idx % g);
                let enc = self.encode(&annotations[*gt].bbox, gy, gx);
                for k in 0..4 {
                    let pred = head[(c + k, gy, gx)];
                    let diff = pred - enc[k];
                    let (l, dl) = if diff.abs() < 1.0 {
                        (0.5 * diff * diff, diff)
                    } else {
                        (diff.abs() - 0.5, diff.signum())
                    };
                    loc_loss += l / loc_norm;
                    if include_loc {
                        dhead[(c + k, gy, gx)] +=
                            self.config.loc_weight * dl / loc_norm;
                    }
                }
            }
        }
        (cls_loss, loc_loss, dhead)
    }

    /// Backpropagates a head gradient to parameter gradients (appended into
    /// `flat`) and, optionally, the input-image gradient.
    fn backward(
        &self,
        acts: &Activations,
        dhead: &Array3<f64>,
        flat: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let mut scratch; // parameter gradients, flat layout
        let grads: &mut [f64] = match flat {
            Some(f) => f,
            None => {
                scratch = vec![0.0; self.n_params()];
                &mut scratch
            }
        };
        let mut offsets = self.param_offsets();
        let (head_off, _) = offsets.pop().unwrap();
        let head_in = relu(acts.pres.last().unwrap());
        let (hw, hb) = split_wb(&mut grads[head_off..head_off + self.head.n_params()], self.head.w.len());
        let mut dx = self.head.backward(&head_in, dhead, hw, hb);
        for i in (0..self.convs.len()).rev() {
            let dpre = relu_backward(&acts.pres[i], &dx);
            let (off, len) = offsets[i];
            let (cw, cb) = split_wb(&mut grads[off..off + len], self.convs[i].w.len());
            let need_dx = i > 0 || want_input_grad;
            if need_dx {
                dx = self.convs[i].backward(&acts.inputs[i], &dpre, cw, cb);
            } else {
                // Parameter gradients only; input gradient of the first
                // layer is skipped when not requested.
                let _ = self.convs[i].backward(&acts.inputs[i], &dpre, cw, cb);
                return None;
            }
        }
        want_input_grad.then_some(dx)
    }

    fn param_offsets(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::new();
        let mut off = 0;
        for conv in &self.convs {
            offsets.push((off, conv.n_params()));
            off += conv.n_params();
        }
        offsets.push((off, self.head.n_params()));
        offsets
    }

    pub fn n_params(&self) -> usize {
        self.convs.iter().map(Conv2d::n_params).sum::<usize>() + self.head.n_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for conv in &self.convs {
            out.extend_from_slice(&conv.w);
            out.extend_from_slice(&conv.b);
        }
        out.extend_from_slice(&self.head.w);
        out.extend_from_slice(&self.head.b);
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let mut off = 0;
        for conv in &mut self.convs {
            let (nw, nb) = (conv.w.len(), conv.b.len());
            conv.w.copy_from_slice(&p[off..off + nw]);
            off += nw;
            conv.b.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        let (nw, nb) = (self.head.w.len(), self.head.b.len());
        self.head.w.copy_from_slice(&p[off..off + nw]);
        off += nw;
        self.head.b.copy_from_slice(&p[off..off + nb]);
    }

    /// Loss and flat parameter gradient for one training image.
    pub(crate) fn image_grad(&self, image: &Array3<f64>, annotations: &[Annotation]) -> (f64, Vec<f64>) {
        let acts = self.forward_full(image);
        let (cls, loc, dhead) =
            self.loss_and_head_grad(&acts.head_out, annotations, LossMode::Untargeted, true);
        let mut flat = vec![0.0; self.n_params()];
        self.backward(&acts, &dhead, Some(&mut flat), false);
        (cls + self.config.loc_weight * loc, flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "config": self.config,
            "class_names": self.class_names,
        });
        save_checkpoint(path, "detector", &header, &self.params())
    }

    /// Save with a provenance record (defense type, seeds, attack config
    /// hash); loadable by the plain [`ToyDetector::load`].
    pub fn save_with_provenance(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "config": self.config,
            "class_names": self.class_names,
            "provenance": provenance,
        });
        save_checkpoint(path, "detector", &header, &self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = load_checkpoint(path, "detector")?;
        let config: DetectorConfig = serde_json::from_value(header["config"].clone())?;
        let class_names: Vec<String> = serde_json::from_value(header["class_names"].clone())?;
        let mut det = Self::new(config, class_names, 0)?;
        if params.len() != det.n_params() {
            return Err(Error::Validation(format!(
                "checkpoint has {} params, model needs {}",
                params.len(),
                det.n_params()
            )));
        }
        det.set_params(&params);
        Ok(det)
    }

    /// The anchors the untargeted loss actually selects (positives plus
    /// mined negatives). Central-difference gradient checks are only valid
    /// at probes where this selection is stable.
    #[cfg(test)]
    pub(crate) fn selected_anchors_for_test(
        &self,
        image: &Array3<f64>,
        annotations: &[Annotation],
    ) -> Vec<usize> {
        let acts = self.forward_full(image);
        let head = &acts.head_out;
        let g = self.config.grid();
        let c = self.config.num_classes;
        let targets = self.match_anchors(annotations);
        let n_pos =
            targets.iter().filter(|t| matches!(t, AnchorTarget::Positive { .. })).count();
        let mut selected = Vec::new();
        let mut neg_losses: Vec<(f64, usize)> = Vec::new();
        for (idx, target) in targets.iter().enumerate() {
            let (gy, gx) = (idx / g, idx % g);
            let logits: Vec<f64> = (0..c).map(|k| head[(k, gy, gx)]).collect();
            match target {
                AnchorTarget::Positive { .. } => selected.push(idx),
                AnchorTarget::Negative => {
                    neg_losses.push((softmax_ce(&logits, 0).0, idx));
                }
                AnchorTarget::Ignore => {}
            }
        }
        neg_losses.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let n_neg = if n_pos > 0 {
            ((n_pos as f64 * self.config.neg_pos_ratio) as usize).min(neg_losses.len())
        } else {
            neg_losses.len().min(8)
        };
        selected.extend(neg_losses.iter().take(n_neg).map(|&(_, idx)| idx));
        selected.sort_unstable();
        selected
    }

    /// Sign pattern of every trunk pre-activation. A finite-difference
    /// probe is only meaningful when no relu flips within the step.
    #[cfg(test)]
    pub(crate) fn relu_signature_for_test(&self, image: &Array3<f64>) -> Vec<bool> {
        let acts = self.forward_full(image);
        acts.pres.iter().flat_map(|p| p.iter().map(|&v| v > 0.0)).collect()
    }

    #[cfg(test)]
    pub(crate) fn head_grad_for_test(
        &self,
        image: &Array3<f64>,
        annotations: &[Annotation],
        mode: LossMode,
    ) -> Array3<f64> {
        let acts = self.forward_full(image);
        self.loss_and_head_grad(&acts.head_out, annotations, mode, false).2
    }

    #[cfg(test)]
    pub(crate) fn head_bias_mut(&mut self) -> &mut [f64] {
        &mut self.head.b
    }
}

fn split_wb(buf: &mut [f64], w_len: usize) -> (&mut [f64], &mut [f64]) {
    buf.split_at_mut(w_len)
}

impl Detector for ToyDetector {
    fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn detect(&self, image: &Array3<f64>) -> Result<Vec<Detection>> {
        self.check_image(image)?;
        let acts = self.forward_full(image);
        let g = self.config.grid();
        let mut raw = Vec::new();
        for gy in 0..g {
            for gx in 0..g {
                let (logits, mut det) = self.decode_cell(&acts.head_out, gy, gx);
                let probs = softmax(&logits);
                let (best, conf) = probs[1..]
                    .iter()
                    .enumerate()
                    .fold((0usize, 0.0f64), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
                if conf >= self.config.score_threshold {
                    det.class_id = best + 1;
                    det.confidence = conf;
                    raw.push(det);
                }
            }
        }
        Ok(super::nms(&raw, self.config.nms_iou))
    }

    fn cls_loss(&self, image: &Array3<f64>, annotations: &[Annotation], mode: LossMode) -> Result<f64> {
        self.check_image(image)?;
        let acts = self.forward_full(image);
        let (cls, _, _) = self.loss_and_head_grad(&acts.head_out, annotations, mode, false);
        Ok(cls)
    }

    fn cls_loss_grad_image(
        &self,
        image: &Array3<f64>,
        annotations: &[Annotation],
        mode: LossMode,
    ) -> Result<(f64, Array3<f64>)> {
        self.check_image(image)?;
        let acts = self.forward_full(image);
        let (cls, _, dhead) = self.loss_and_head_grad(&acts.head_out, annotations, mode, false);
        let grad = self
            .backward(&acts, &dhead, None, true)
            .expect("input gradient requested");
        Ok((cls, grad))
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear learning-rate warmup over this many epochs.
    pub warmup_epochs: usize,
    /// Global gradient-norm cap.
    pub clip_norm: f64,
    /// Evaluate train-subset mAP every this many epochs (0 disables).
    pub eval_every: usize,
    /// Random horizontal flips during training.
    pub augment_flip: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 2,
            clip_norm: 10.0,
            eval_every: 5,
            augment_flip: true,
        }
    }
}

/// Per-run training record.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    /// (epoch, mAP on the train subset).
    pub map_curve: Vec<(usize, f64)>,
}

fn flip_image(image: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| image[(ch, y, w - 1 - x)])
}

fn flip_annotations(anns: &[Annotation], width: f64) -> Vec<Annotation> {
    anns.iter()
        .map(|a| Annotation {
            bbox: BBox::new(width - a.bbox.x_max, a.bbox.y_min, width - a.bbox.x_min, a.bbox.y_max),
            class_id: a.class_id,
            difficult: a.difficult,
        })
        .collect()
}

/// Quarter-turn clockwise on a square image: (y, x) <- (H-1-x, y).
fn rot90_image(image: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = image.dim();
    debug_assert_eq!(h, w);
    Array3::from_shape_fn((c, w, h), |(ch, y, x)| image[(ch, h - 1 - x, y)])
}

fn rot90_annotations(anns: &[Annotation], side: f64) -> Vec<Annotation> {
    anns.iter()
        .map(|a| Annotation {
            // Clockwise quarter-turn maps (x, y) to (side - y, x).
            bbox: BBox::new(side - a.bbox.y_max, a.bbox.x_min, side - a.bbox.y_min, a.bbox.x_max),
            class_id: a.class_id,
            difficult: a.difficult,
        })
        .collect()
}

/// One of the 8 dihedral variants of a square training sample.
fn dihedral_sample(
    image: &Array3<f64>,
    anns: &[Annotation],
    quarter_turns: usize,
    flip: bool,
    side: f64,
) -> (Array3<f64>, Vec<Annotation>) {
    let mut img = image.clone();
    let mut out_anns = anns.to_vec();
    for _ in 0..quarter_turns % 4 {
        img = rot90_image(&img);
        out_anns = rot90_annotations(&out_anns, side);
    }
    if flip {
        img = flip_image(&img);
        out_anns = flip_annotations(&out_anns, side);
    }
    (img, out_anns)
}

/// Trains a detector by SGD with momentum and weight decay. Deterministic
/// for a fixed seed; per-image gradients are reduced in index order.
pub fn train_detector(
    dataset: &Dataset,
    config: &DetectorConfig,
    params: &TrainParams,
    seed: u64,
) -> Result<(ToyDetector, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("training dataset is empty".into()));
    }
    let mut detector = ToyDetector::new(config.clone(), dataset.class_names.clone(), seed)?;
    let n_params = detector.n_params();
    // Adam moments; the toy net is far less step-size sensitive under Adam
    // than under plain momentum SGD.
    let mut m1 = vec![0.0f64; n_params];
    let mut m2 = vec![0.0f64; n_params];
    let mut step_count = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ce);
    let mut log = TrainLog::default();

    let n = dataset.len();
    let eval_count = n.min(48);
    for epoch in 0..params.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        // Linear warmup into cosine decay.
        let lr = if epoch < params.warmup_epochs {
            params.lr * (epoch + 1) as f64 / params.warmup_epochs as f64
        } else {
            let progress = (epoch - params.warmup_epochs) as f64
                / (params.epochs - params.warmup_epochs).max(1) as f64;
            params.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        };
        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch_size) {
            let variants: Vec<(usize, usize, bool)> = batch
                .iter()
                .map(|&idx| {
                    if params.augment_flip {
                        (idx, rng.random_range(0..4usize), rng.random_range(0.0..1.0) < 0.5)
                    } else {
                        (idx, 0, false)
                    }
                })
                .collect();
            let results: Vec<(f64, Vec<f64>)> =
                exec::map_slice(&variants, |&(idx, turns, flip)| {
                    if turns == 0 && !flip {
                        detector.image_grad(&dataset.images[idx], &dataset.annotations[idx])
                    } else {
                        let (img, anns) = dihedral_sample(
                            &dataset.images[idx],
                            &dataset.annotations[idx],
                            turns,
                            flip,
                            config.input_size as f64,
                        );
                        detector.image_grad(&img, &anns)
                    }
                });
            let mut grad = vec![0.0f64; n_params];
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}: {batch_loss}"
                )));
            }
            epoch_loss += batch_loss * batch.len() as f64;
            let norm = grad.iter().map(|g| (g * scale).powi(2)).sum::<f64>().sqrt();
            let clip = if norm > params.clip_norm { params.clip_norm / norm } else { 1.0 };
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            step_count += 1;
            let bc1 = 1.0 - B1.powi(step_count);
            let bc2 = 1.0 - B2.powi(step_count);
            let mut p = detector.params();
            for i in 0..n_params {
                let g = grad[i] * scale * clip + params.weight_decay * p[i];
                m1[i] = B1 * m1[i] + (1.0 - B1) * g;
                m2[i] = B2 * m2[i] + (1.0 - B2) * g * g;
                p[i] -= lr * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + 1e-8);
            }
            detector.set_params(&p);
        }
        log.epoch_loss.push(epoch_loss / n as f64);

        if params.eval_every > 0
            && (epoch % params.eval_every == params.eval_every - 1 || epoch + 1 == params.epochs)
        {
            let report = crate::metrics::evaluate_detector(
                &detector,
                &dataset.images[..eval_count],
                &dataset.annotations[..eval_count],
                "train-subset",
            )?;
            log.map_curve.push((epoch + 1, report.map));
        }
    }
    Ok((detector, log))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"XRKCKPT1";

/// Versioned binary blob: magic, kind, JSON header, f64 parameter payload.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    header: &serde_json::Value,
    params: &[f64],
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    let kind_bytes = kind.as_bytes();
    file.write_all(&(kind_bytes.len() as u32).to_le_bytes())?;
    file.write_all(kind_bytes)?;
    let header_bytes = serde_json::to_vec(header)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        file.write_all(&p.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], validating the kind.
pub fn load_checkpoint(path: &Path, expected_kind: &str) -> Result<(serde_json::Value, Vec<f64>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Validation("not a checkpoint file (bad magic)".into()));
    }
    let mut len4 = [0u8; 4];
    file.read_exact(&mut len4)?;
    let mut kind = vec![0u8; u32::from_le_bytes(len4) as usize];
    file.read_exact(&mut kind)?;
    let kind = String::from_utf8(kind).map_err(|e| Error::Validation(e.to_string()))?;
    if kind != expected_kind {
        return Err(Error::Validation(format!(
            "checkpoint kind {kind:?} but expected {expected_kind:?}"
        )));
    }
    file.read_exact(&mut len4)?;
    let mut header = vec![0u8; u32::from_le_bytes(len4) as usize];
    file.read_exact(&mut header)?;
    let header: serde_json::Value = serde_json::from_slice(&header)?;
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)?;
    let n = u64::from_le_bytes(len8) as usize;
    let mut params = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        file.read_exact(&mut buf)?;
        params.push(f64::from_le_bytes(buf));
    }
    Ok((header, params))
}

/// Writes detections as columnar text: image id, class, score, center-size
/// box.
pub fn save_detections(ids: &[String], detections: &[Vec<Detection>], path: &Path) -> Result<()> {
    let mut out = String::from("image,class_id,confidence,cx,cy,w,h\n");
    for (id, dets) in ids.iter().zip(detections) {
        for d in dets {
            out.push_str(&format!(
                "{id},{},{:.6},{:.2},{:.2},{:.2},{:.2}\n",
                d.class_id, d.confidence, d.cx, d.cy, d.w, d.h
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
