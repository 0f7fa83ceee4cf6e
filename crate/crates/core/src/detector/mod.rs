//! Detection data model, the pluggable detector interface, and NMS.

mod net;
mod ssd;

pub use net::{softmax, softmax_ce, Conv2d, Linear};
pub use ssd::{
    load_checkpoint, save_checkpoint, save_detections, train_detector, ToyDetector, TrainLog,
    TrainParams,
};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Annotation, BBox};

/// One scored box in center-size form (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn corners(&self) -> BBox {
        BBox::new(
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn iou(&self, other: &Detection) -> f64 {
        self.corners().iou(&other.corners())
    }
}

/// Detector hyperparameters. `channels` fixes the conv trunk (one stride-2
/// block per entry); the anchor grid stride is `2^channels.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_size: usize,
    /// Total classes including background id 0.
    pub num_classes: usize,
    pub channels: Vec<usize>,
    /// Extra stride-1 3x3 convs on the final feature map; each adds two
    /// grid strides of receptive field without changing the grid.
    pub context_convs: usize,
    /// Anchor side length as a multiple of the grid stride.
    pub anchor_scale: f64,
    /// Weight of the localization term in the training loss.
    pub loc_weight: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    /// Hard-negative mining ratio (negatives per positive).
    pub neg_pos_ratio: f64,
    pub match_iou_pos: f64,
    pub match_iou_neg: f64,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loc_weight <= 0.0 {
            return Err(Error::Domain("loc_weight must be positive".into()));
        }
        for t in [self.nms_iou, self.score_threshold, self.match_iou_pos, self.match_iou_neg] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Domain(format!("threshold {t} outside [0,1]")));
            }
        }
        if self.channels.is_empty() || self.num_classes < 2 {
            return Err(Error::Domain("need at least one conv block and two classes".into()));
        }
        if self.input_size % self.stride() != 0 {
            return Err(Error::Domain(format!(
                "input size {} must be divisible by the grid stride {}",
                self.input_size,
                self.stride()
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.stride()
    }

    pub fn anchor_size(&self) -> f64 {
        self.anchor_scale * self.stride() as f64
    }

    /// The mini profile used throughout tests: 160 px input, 10x10 grid.
    pub fn mini(num_classes: usize) -> Self {
        Self { input_size: 160, num_classes, ..Self::default() }
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 160,
            num_classes: 4,
            channels: vec![12, 24, 32, 48],
            context_convs: 1,
            anchor_scale: 3.0,
            loc_weight: 1.0,
            nms_iou: 0.45,
            score_threshold: 0.5,
            neg_pos_ratio: 3.0,
            match_iou_pos: 0.5,
            match_iou_neg: 0.4,
        }
    }
}

/// Loss flavor exposed to the attack modules: maximize the training
/// classification loss (untargeted) or minimize cross-entropy toward the
/// background class over all confident predictions (targeted concealment).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Untargeted,
    TargetedBackground,
}

/// The pluggable detector handle: deterministic detection in eval mode plus
/// a classification-loss surface differentiable in the input pixels.
pub trait Detector: Send + Sync {
    fn config(&self) -> &DetectorConfig;
    fn class_names(&self) -> &[String];

    /// Decoded, thresholded, NMS-suppressed detections sorted by descending
    /// confidence.
    fn detect(&self, image: &Array3<f64>) -> Result<Vec<Detection>>;

    /// Classification loss of the image against the annotations.
    fn cls_loss(&self, image: &Array3<f64>, annotations: &[Annotation], mode: LossMode) -> Result<f64>;

    /// Loss plus its gradient with respect to every input pixel. Handles
    /// without gradient support return a capability error.
    fn cls_loss_grad_image(
        &self,
        image: &Array3<f64>,
        annotations: &[Annotation],
        mode: LossMode,
    ) -> Result<(f64, Array3<f64>)>;

    fn supports_input_grad(&self) -> bool {
        true
    }
}

/// Greedy class-wise non-maximum suppression: boxes are visited in
/// descending confidence; a box is dropped iff it overlaps an already-kept
/// box of the same class above the threshold.
pub fn nms(boxes: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .confidence
            .partial_cmp(&boxes[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = boxes[idx];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && k.iou(&cand) > iou_threshold);
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, confidence: f64) -> Detection {
        Detection { cx, cy, w, h, class_id, confidence }
    }

    #[test]
    fn nms_single_box_is_identity() {
        let boxes = vec![det(10.0, 10.0, 8.0, 8.0, 1, 0.9)];
        assert_eq!(nms(&boxes, 0.5), boxes);
    }

    #[test]
    fn nms_suppresses_overlapping_same_class() {
        // Two 10x10 boxes offset by 2.5 px in x: intersection 7.5*10 = 75,
        // union 125, IoU 0.6.
        let a = det(10.0, 10.0, 10.0, 10.0, 1, 0.9);
        let b = det(12.5, 10.0, 10.0, 10.0, 1, 0.8);
        assert!((a.iou(&b) - 0.6).abs() < 1e-12);
        let kept = nms(&[a, b], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
    }

    #[test]
    fn nms_keeps_different_classes() {
        let a = det(10.0, 10.0, 10.0, 10.0, 1, 0.9);
        let b = det(10.5, 10.0, 10.0, 10.0, 2, 0.8);
        assert!(a.iou(&b) > 0.9);
        assert_eq!(nms(&[a, b], 0.5).len(), 2);
    }

    #[test]
    fn nms_empty_input() {
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_output_is_subset_with_descending_confidence() {
        let boxes: Vec<Detection> = (0..20)
            .map(|i| {
                det(
                    (i % 5) as f64 * 6.0 + 10.0,
                    (i / 5) as f64 * 6.0 + 10.0,
                    8.0,
                    8.0,
                    (i % 3) + 1,
                    0.2 + 0.03 * i as f64,
                )
            })
            .collect();
        let kept = nms(&boxes, 0.4);
        assert!(kept.len() <= boxes.len());
        for w in kept.windows(2) {
            assert!(w[0].confidence >= w[1].confidence);
        }
        for k in &kept {
            assert!(boxes.iter().any(|b| b == k));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = DetectorConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stride(), 16);
        assert_eq!(cfg.grid(), 10);
        cfg.loc_weight = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg2 = DetectorConfig::default();
        cfg2.input_size = 150; // not divisible by 16
        assert!(cfg2.validate().is_err());
    }
}
