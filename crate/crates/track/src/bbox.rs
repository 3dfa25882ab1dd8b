use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates: top-left corner plus size. The
/// box covers the half-open region [x, x+w) by [y, y+h).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> BBox {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> BBox {
        BBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        f64::max(self.w as f64, 0.0) * f64::max(self.h as f64, 0.0)
    }

    /// Intersection over union in 64-bit arithmetic. Degenerate unions
    /// yield zero rather than a division error.
    pub fn iou(&self, other: &BBox) -> f64 {
        let (ax1, ay1) = (self.x as f64, self.y as f64);
        let (ax2, ay2) = (ax1 + self.w as f64, ay1 + self.h as f64);
        let (bx1, by1) = (other.x as f64, other.y as f64);
        let (bx2, by2) = (bx1 + other.w as f64, by1 + other.h as f64);
        let iw = f64::max(f64::min(ax2, bx2) - f64::max(ax1, bx1), 0.0);
        let ih = f64::max(f64::min(ay2, by2) - f64::max(ay1, by1), 0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Center location error: Euclidean distance between box centers.
    pub fn cle(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        let dx = ax as f64 - bx as f64;
        let dy = ay as f64 - by as f64;
        (dx * dx + dy * dy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Counts unit cells to measure intersection and union directly.
    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let x_lo = a.x.min(b.x) as i64;
        let x_hi = (a.x + a.w).max(b.x + b.w) as i64;
        let y_lo = a.y.min(b.y) as i64;
        let y_hi = (a.y + a.h).max(b.y + b.h) as i64;
        let inside = |bx: &BBox, x: i64, y: i64| {
            let (x, y) = (x as f32, y as f32);
            x >= bx.x && x < bx.x + bx.w && y >= bx.y && y < bx.y + bx.h
        };
        let mut inter = 0i64;
        let mut union = 0i64;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let in_a = inside(a, x, y);
                let in_b = inside(b, x, y);
                inter += (in_a && in_b) as i64;
                union += (in_a || in_b) as i64;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_matches_unit_cell_counting_on_integer_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        for _ in 0..1000 {
            let a = BBox::new(
                rng.gen_range(0..40) as f32,
                rng.gen_range(0..40) as f32,
                rng.gen_range(1..30) as f32,
                rng.gen_range(1..30) as f32,
            );
            let b = BBox::new(
                rng.gen_range(0..40) as f32,
                rng.gen_range(0..40) as f32,
                rng.gen_range(1..30) as f32,
                rng.gen_range(1..30) as f32,
            );
            let analytic = a.iou(&b);
            let counted = raster_iou(&a, &b);
            assert_eq!(
                analytic.to_bits(),
                counted.to_bits(),
                "a={a:?} b={b:?}: analytic {analytic} vs counted {counted}"
            );
        }
    }

    #[test]
    fn iou_handles_identity_containment_and_disjoint_cases() {
        let a = BBox::new(10.0, 10.0, 20.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);

        let inner = BBox::new(15.0, 12.0, 10.0, 5.0);
        let expected = inner.area() / a.area();
        assert!((a.iou(&inner) - expected).abs() < 1e-12);

        let apart = BBox::new(100.0, 100.0, 5.0, 5.0);
        assert_eq!(a.iou(&apart), 0.0);

        let touching = BBox::new(30.0, 10.0, 5.0, 10.0);
        assert_eq!(a.iou(&touching), 0.0);

        let empty = BBox::new(0.0, 0.0, 0.0, 0.0);
        assert_eq!(empty.iou(&empty), 0.0);
    }

    #[test]
    fn cle_matches_hand_computed_distances() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(3.0, 4.0, 10.0, 10.0);
        assert!((a.cle(&b) - 5.0).abs() < 1e-9);
        assert!(a.cle(&a).abs() < 1e-9);

        let c = BBox::from_center(8.0, 5.0, 2.0, 2.0);
        let d = BBox::from_center(8.0, 17.0, 6.0, 6.0);
        assert!((c.cle(&d) - 12.0).abs() < 1e-9);
    }

    #[test]
    fn center_round_trips_through_from_center() {
        let b = BBox::from_center(12.5, -3.0, 7.0, 9.0);
        let (cx, cy) = b.center();
        assert_eq!((cx, cy), (12.5, -3.0));
        assert_eq!(b.x, 9.0);
        assert_eq!(b.y, -7.5);
    }
}
