//! Axis-aligned boxes and the anchor-relative delta parameterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side length (pixels) a clipped box is allowed to collapse to.
pub const MIN_CLIPPED_SIDE: f64 = 1.0;

/// Axis-aligned box in corner convention, pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Validated constructor: coordinates finite, `x2 > x1`, `y2 > y1`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::invalid("bbox", format!("invalid box [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(b)
    }

    pub const fn raw(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::raw(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::raw(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clamps to `[0, width] × [0, height]`; a box that collapses is
    /// re-expanded to [`MIN_CLIPPED_SIDE`] inside the image so the result is
    /// always valid.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        fn axis(lo: f64, hi: f64, limit: f64) -> (f64, f64) {
            let lo_c = if lo.is_finite() { lo.clamp(0.0, limit) } else { 0.0 };
            let hi_c = if hi.is_finite() { hi.clamp(0.0, limit) } else { limit };
            if hi_c - lo_c >= MIN_CLIPPED_SIDE {
                return (lo_c, hi_c);
            }
            let side = MIN_CLIPPED_SIDE.min(limit);
            let start = (0.5 * (lo_c + hi_c) - 0.5 * side).clamp(0.0, limit - side);
            (start, start + side)
        }
        let (x1, x2) = axis(self.x1, self.x2, width);
        let (y1, y2) = axis(self.y1, self.y2, height);
        BBox { x1, y1, x2, y2 }
    }

    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// Encodes targets relative to anchors as `(dx, dy, dw, dh)`:
/// `dx = wx·(tcx − acx)/aw`, `dw = ww·ln(tw/aw)` (likewise for y/h).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    /// Upper clamp on the scaled log-size deltas during decoding.
    pub max_log_scale: f64,
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self::unit()
    }
}

impl BoxCoder {
    pub fn unit() -> Self {
        Self {
            weights: [1.0; 4],
            max_log_scale: (1000.0f64 / 16.0).ln(),
        }
    }

    pub fn with_weights(weights: [f64; 4]) -> Self {
        Self {
            weights,
            ..Self::unit()
        }
    }

    pub fn encode(&self, anchor: &BBox, target: &BBox) -> Result<[f64; 4]> {
        if !(target.width() > 0.0 && target.height() > 0.0) {
            return Err(Error::invalid(
                "encode_boxes",
                format!("target has non-positive size: {target:?}"),
            ));
        }
        if !(anchor.width() > 0.0 && anchor.height() > 0.0) {
            return Err(Error::invalid("encode_boxes", format!("anchor has non-positive size: {anchor:?}")));
        }
        let (acx, acy) = anchor.center();
        let (tcx, tcy) = target.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        let [wx, wy, ww, wh] = self.weights;
        Ok([
            wx * (tcx - acx) / aw,
            wy * (tcy - acy) / ah,
            ww * (target.width() / aw).ln(),
            wh * (target.height() / ah).ln(),
        ])
    }

    /// Unclipped decode.
    pub fn decode(&self, anchor: &BBox, delta: &[f64; 4]) -> BBox {
        let (acx, acy) = anchor.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        let [wx, wy, ww, wh] = self.weights;
        let cx = acx + delta[0] / wx * aw;
        let cy = acy + delta[1] / wy * ah;
        let w = aw * (delta[2] / ww).min(self.max_log_scale).exp();
        let h = ah * (delta[3] / wh).min(self.max_log_scale).exp();
        BBox::from_center(cx, cy, w, h)
    }

    pub fn encode_all(&self, anchors: &[BBox], targets: &[BBox]) -> Result<Vec<[f64; 4]>> {
        if anchors.len() != targets.len() {
            return Err(Error::Shape {
                op: "encode_boxes",
                dim: "box count",
                expected: anchors.len(),
                got: targets.len(),
            });
        }
        anchors.iter().zip(targets).map(|(a, t)| self.encode(a, t)).collect()
    }

    /// Decodes and clips every box to the image.
    pub fn decode_all(&self, anchors: &[BBox], deltas: &[[f64; 4]], width: f64, height: f64) -> Result<Vec<BBox>> {
        if anchors.len() != deltas.len() {
            return Err(Error::Shape {
                op: "decode_boxes",
                dim: "box count",
                expected: anchors.len(),
                got: deltas.len(),
            });
        }
        Ok(anchors
            .iter()
            .zip(deltas)
            .map(|(a, d)| self.decode(a, d).clip(width, height))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_delta_is_identity() {
        let a = BBox::raw(3.0, 4.0, 19.0, 40.0);
        let d = BoxCoder::unit().decode(&a, &[0.0; 4]);
        assert_eq!(d, a);
    }

    #[test]
    fn dx_is_normalized_by_anchor_width() {
        let a = BBox::raw(0.0, 0.0, 16.0, 16.0);
        let d = BoxCoder::unit().decode(&a, &[0.5, 0.0, 0.0, 0.0]);
        assert_eq!(d.center().0 - a.center().0, 8.0);
        assert_eq!(d.center().1, a.center().1);
    }

    #[test]
    fn non_positive_target_is_rejected() {
        let a = BBox::raw(0.0, 0.0, 16.0, 16.0);
        assert!(BoxCoder::unit().encode(&a, &BBox::raw(5.0, 5.0, 5.0, 9.0)).is_err());
    }

    #[test]
    fn clip_always_valid() {
        let b = BBox::raw(-50.0, -50.0, -10.0, -20.0).clip(64.0, 64.0);
        assert!(b.is_valid() && b.inside(64.0, 64.0));
        let b = BBox::raw(10.0, 80.0, 30.0, 90.0).clip(64.0, 64.0);
        assert!(b.is_valid() && b.inside(64.0, 64.0));
    }

    #[test]
    fn iou_hand_value() {
        let a = BBox::raw(0.0, 0.0, 2.0, 2.0);
        let b = BBox::raw(1.0, 1.0, 3.0, 3.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 1.0..60.0f64, 1.0..60.0f64).prop_map(|(x, y, w, h)| BBox::raw(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(a in arb_box(), t in arb_box()) {
            for coder in [BoxCoder::unit(), BoxCoder::with_weights([10.0, 10.0, 5.0, 5.0])] {
                let d = coder.encode(&a, &t).unwrap();
                let back = coder.decode(&a, &d);
                for (x, y) in back.to_array().iter().zip(t.to_array()) {
                    prop_assert!((x - y).abs() < 1e-4);
                }
            }
        }

        #[test]
        fn iou_in_unit_interval_and_symmetric(a in arb_box(), b in arb_box()) {
            let v = a.iou(&b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - b.iou(&a)).abs() < 1e-12);
        }
    }
}
