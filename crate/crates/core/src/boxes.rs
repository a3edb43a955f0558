//! Box geometry: IoU, clipping, delta encoding, and NMS.

use alloc::vec::Vec;

/// Axis-aligned box in corner form, pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoxCorners {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxCorners {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    /// Clip to an image of the given width/height.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    /// Horizontal mirror within an image of the given width.
    pub fn flip_horizontal(&self, width: f64) -> Self {
        Self {
            x_min: width - self.x_max,
            y_min: self.y_min,
            x_max: width - self.x_min,
            y_max: self.y_max,
        }
    }
}

/// Intersection over union of two boxes. Degenerate boxes contribute zero
/// intersection and their (non-negative) area to the union.
pub fn iou(a: &BoxCorners, b: &BoxCorners) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Standard box-delta encoding (tx, ty, tw, th) of `gt` relative to `anchor`.
pub fn encode_deltas(anchor: &BoxCorners, gt: &BoxCorners) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width().max(1e-6), anchor.height().max(1e-6));
    let (gx, gy) = gt.center();
    let (gw, gh) = (gt.width().max(1e-6), gt.height().max(1e-6));
    [(gx - ax) / aw, (gy - ay) / ah, libm::log(gw / aw), libm::log(gh / ah)]
}

/// Inverse of [`encode_deltas`].
pub fn decode_deltas(anchor: &BoxCorners, d: &[f64]) -> BoxCorners {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width().max(1e-6), anchor.height().max(1e-6));
    // clamp exp inputs so garbage predictions cannot overflow
    let cx = ax + d[0].clamp(-4.0, 4.0) * aw;
    let cy = ay + d[1].clamp(-4.0, 4.0) * ah;
    let w = aw * libm::exp(d[2].clamp(-4.0, 4.0));
    let h = ah * libm::exp(d[3].clamp(-4.0, 4.0));
    BoxCorners::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Greedy non-maximum suppression. Returns indices of kept boxes in order of
/// descending score; ties are broken by lower input index so the result is a
/// deterministic function of (boxes, scores, threshold).
pub fn nms(boxes: &[BoxCorners], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut keep = Vec::new();
    let mut suppressed = alloc::vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
