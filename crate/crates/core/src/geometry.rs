//! Bounding boxes, pairwise anchor geometry, and the segment crossing test.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Axis-aligned box in normalized page coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Validated constructor: `x1 <= x2`, `y1 <= y2`, all coordinates in `[0, 1]`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(Error::Validation(format!(
                "box {coords:?} has coordinates outside [0, 1]"
            )));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::Validation(format!(
                "box {coords:?} is inverted (need x1 <= x2 and y1 <= y2)"
            )));
        }
        Ok(())
    }

    pub fn top_left(&self) -> Point {
        Point::new(self.x1, self.y1)
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn bottom_right(&self) -> Point {
        Point::new(self.x2, self.y2)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Distance and direction of the line from one box to another, measured at
/// the top-left, center and bottom-right anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry {
    pub dist_tl: f64,
    pub dist_ct: f64,
    pub dist_br: f64,
    pub dir_tl: f64,
    pub dir_ct: f64,
    pub dir_br: f64,
}

impl PairGeometry {
    /// `[(dir, dist)]` per anchor in tl, ct, br order.
    pub fn anchors(&self) -> [(f64, f64); 3] {
        [
            (self.dir_tl, self.dist_tl),
            (self.dir_ct, self.dist_ct),
            (self.dir_br, self.dist_br),
        ]
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    (b.x - a.x).hypot(b.y - a.y)
}

/// Angle of the vector `a -> b` in `(-pi, pi]`; coincident points give 0.
pub fn direction(a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    if dx == 0.0 && dy == 0.0 {
        return 0.0;
    }
    let d = dy.atan2(dx);
    // atan2 can return -pi for (-x, -0.0)
    if d == -PI {
        PI
    } else {
        d
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

pub fn pair_geometry(a: &BBox, b: &BBox) -> PairGeometry {
    let (tl_a, tl_b) = (a.top_left(), b.top_left());
    let (ct_a, ct_b) = (a.center(), b.center());
    let (br_a, br_b) = (a.bottom_right(), b.bottom_right());
    PairGeometry {
        dist_tl: distance(tl_a, tl_b),
        dist_ct: distance(ct_a, ct_b),
        dist_br: distance(br_a, br_b),
        dir_tl: direction(tl_a, tl_b),
        dir_ct: direction(ct_a, ct_b),
        dir_br: direction(br_a, br_b),
    }
}

/// Twice the signed area of triangle `(a, b, c)`; positive when counter-clockwise.
pub fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// True iff segments `p1p2` and `q1q2` properly intersect: each segment's
/// endpoints lie strictly on opposite sides of the other's line. Touching
/// endpoints and collinear overlap do not count.
pub fn segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    use proptest::prelude::*;

    use super::*;

    fn corner_box(x: f64, y: f64) -> BBox {
        BBox::new(x, y, x, y).unwrap()
    }

    #[test]
    fn diagonal_top_left() {
        let g = pair_geometry(&corner_box(0.0, 0.0), &corner_box(1.0, 1.0));
        assert!((g.dist_tl - SQRT_2).abs() < 1e-12);
        assert!((g.dir_tl - FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn vertical_direction() {
        let g = pair_geometry(&corner_box(0.0, 0.0), &corner_box(0.0, 1.0));
        assert!((g.dir_tl - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn identical_boxes_are_all_zero() {
        let b = BBox::new(0.1, 0.2, 0.3, 0.4).unwrap();
        let g = pair_geometry(&b, &b);
        for (dir, dist) in g.anchors() {
            assert_eq!(dir, 0.0);
            assert_eq!(dist, 0.0);
        }
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(0.5, 0.1, 0.2, 0.3).is_err());
        assert!(BBox::new(0.1, 0.1, 1.2, 0.3).is_err());
        assert!(BBox::new(f64::NAN, 0.1, 0.2, 0.3).is_err());
    }

    #[test]
    fn crossing_examples() {
        let p = Point::new;
        assert!(segments_cross(p(0.0, 0.0), p(2.0, 2.0), p(0.0, 2.0), p(2.0, 0.0)));
        assert!(!segments_cross(p(0.0, 0.0), p(1.0, 1.0), p(1.0, 1.0), p(2.0, 0.0)));
        assert!(!segments_cross(p(0.0, 0.0), p(1.0, 0.0), p(0.0, 1.0), p(1.0, 1.0)));
        // collinear overlap
        assert!(!segments_cross(p(0.0, 0.0), p(2.0, 0.0), p(1.0, 0.0), p(3.0, 0.0)));
        // T-junction: an endpoint lying on the other segment
        assert!(!segments_cross(p(0.0, 0.0), p(2.0, 0.0), p(1.0, 0.0), p(1.0, 1.0)));
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }

    fn unit() -> impl Strategy<Value = f64> {
        0.0f64..=1.0
    }

    fn bbox() -> impl Strategy<Value = BBox> {
        (unit(), unit(), unit(), unit()).prop_map(|(a, b, c, d)| {
            BBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap()
        })
    }

    fn point() -> impl Strategy<Value = Point> {
        (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(x, y)| Point::new(x, y))
    }

    proptest! {
        #[test]
        fn direction_antisymmetric_distance_symmetric(a in bbox(), b in bbox()) {
            let ab = pair_geometry(&a, &b);
            let ba = pair_geometry(&b, &a);
            for ((dir_ab, dist_ab), (dir_ba, dist_ba)) in ab.anchors().into_iter().zip(ba.anchors()) {
                prop_assert_eq!(dist_ab, dist_ba);
                prop_assert!((0.0..=SQRT_2 + 1e-12).contains(&dist_ab));
                prop_assert!(dir_ab > -PI && dir_ab <= PI);
                if dist_ab > 0.0 {
                    let expected = wrap_angle(dir_ba + PI);
                    let diff = wrap_angle(dir_ab - expected).abs();
                    prop_assert!(diff < 1e-12, "{} vs {}", dir_ab, expected);
                }
            }
        }

        #[test]
        fn translation_invariant(a in bbox(), b in bbox(), dx in -0.5f64..0.5, dy in -0.5f64..0.5) {
            let shift = |bb: &BBox| BBox::new(bb.x1 + dx, bb.y1 + dy, bb.x2 + dx, bb.y2 + dy);
            if let (Ok(a2), Ok(b2)) = (shift(&a), shift(&b)) {
                let g1 = pair_geometry(&a, &b);
                let g2 = pair_geometry(&a2, &b2);
                for ((d1, s1), (d2, s2)) in g1.anchors().into_iter().zip(g2.anchors()) {
                    prop_assert!((s1 - s2).abs() < 1e-9);
                    if s1 > 1e-9 {
                        prop_assert!(wrap_angle(d1 - d2).abs() < 1e-6);
                    }
                }
            }
        }

        #[test]
        fn crossing_symmetric(p1 in point(), p2 in point(), q1 in point(), q2 in point()) {
            let base = segments_cross(p1, p2, q1, q2);
            prop_assert_eq!(base, segments_cross(q1, q2, p1, p2));
            prop_assert_eq!(base, segments_cross(p2, p1, q1, q2));
            prop_assert_eq!(base, segments_cross(p1, p2, q2, q1));
        }
    }
}
