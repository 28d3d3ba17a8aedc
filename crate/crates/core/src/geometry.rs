//! Planar primitives and overlap measures.
//!
//! Boxes, convex polygons and circles share one coordinate convention: `x`
//! grows to the right and `y` grows downward (image coordinates), although
//! nothing here depends on the handedness except the reported vertex order
//! of [`ConvexPolygon`], which is counter-clockwise in the usual math sense
//! (positive shoelace area).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vertices closer than this are merged when building a polygon.
pub const MERGE_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("degenerate box: ({x_min}, {y_min}, {x_max}, {y_max})")]
    DegenerateBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("polygon has zero area after hull construction")]
    DegeneratePolygon,
    #[error("circle radius must be positive, got {0}")]
    NonPositiveRadius(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Point2D {
        Point2D::new(self.x + dx, self.y + dy)
    }
}

/// Cross product of `(a - o)` and `(b - o)`.
#[inline]
fn cross(o: Point2D, a: Point2D, b: Point2D) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Axis-aligned box stored in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(GeometryError::DegenerateBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from MOT-style `left, top, width, height`.
    pub fn from_ltwh(left: f64, top: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(left, top, left + width, top + height)
    }

    /// Smallest box enclosing all points. `None` for fewer than two distinct
    /// coordinates per axis.
    pub fn enclosing(points: &[Point2D]) -> Option<Self> {
        let mut it = points.iter();
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for p in it {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Self::new(x0, y0, x1, y1).ok()
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2D {
        Point2D::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Corners in counter-clockwise order starting at `(x_min, y_min)`.
    pub fn corners(&self) -> [Point2D; 4] {
        [
            Point2D::new(self.x_min, self.y_min),
            Point2D::new(self.x_max, self.y_min),
            Point2D::new(self.x_max, self.y_max),
            Point2D::new(self.x_min, self.y_max),
        ]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Convex polygon with counter-clockwise vertices and positive area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    vertices: Vec<Point2D>,
}

impl ConvexPolygon {
    /// Convex hull of arbitrary points (Andrew's monotone chain). Near-duplicate
    /// vertices are merged and colinear vertices dropped.
    pub fn hull(points: &[Point2D]) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let mut pts: Vec<Point2D> = points.to_vec();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        pts.dedup_by(|a, b| a.distance(b) <= MERGE_EPS);
        if pts.len() < 3 {
            return Err(GeometryError::DegeneratePolygon);
        }

        let mut lower: Vec<Point2D> = Vec::with_capacity(pts.len());
        for &p in &pts {
            while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
                lower.pop();
            }
            lower.push(p);
        }
        let mut upper: Vec<Point2D> = Vec::with_capacity(pts.len());
        for &p in pts.iter().rev() {
            while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
                upper.pop();
            }
            upper.push(p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        let poly = ConvexPolygon { vertices: lower };
        if poly.vertices.len() < 3 || poly.area() <= 0.0 {
            return Err(GeometryError::DegeneratePolygon);
        }
        Ok(poly)
    }

    pub fn vertices(&self) -> &[Point2D] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn bounding_box(&self) -> BBox {
        BBox::enclosing(&self.vertices).expect("convex polygon has positive area")
    }

    /// Area of the intersection with another convex polygon
    /// (Sutherland-Hodgman clipping of `self` against `other`).
    pub fn intersection_area(&self, other: &ConvexPolygon) -> f64 {
        let clipped = clip_convex(&self.vertices, &other.vertices);
        if clipped.len() < 3 {
            0.0
        } else {
            shoelace(&clipped).max(0.0)
        }
    }
}

/// Signed shoelace area (positive for counter-clockwise order).
fn shoelace(vertices: &[Point2D]) -> f64 {
    let n = vertices.len();
    if n < 3 {
        return 0.0;
    }
    let origin = vertices[0];
    let mut sum = 0.0;
    for i in 1..n - 1 {
        sum += cross(origin, vertices[i], vertices[i + 1]);
    }
    0.5 * sum
}

fn clip_convex(subject: &[Point2D], clip: &[Point2D]) -> Vec<Point2D> {
    let mut output: Vec<Point2D> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_side = cross(a, b, cur);
            let prev_side = cross(a, b, prev);
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    output.push(edge_crossing(prev, cur, prev_side, cur_side));
                }
                output.push(cur);
            } else if prev_side >= 0.0 {
                output.push(edge_crossing(prev, cur, prev_side, cur_side));
            }
        }
    }
    output
}

#[inline]
fn edge_crossing(p: Point2D, q: Point2D, side_p: f64, side_q: f64) -> Point2D {
    let t = side_p / (side_p - side_q);
    Point2D::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    center: Point2D,
    radius: f64,
}

impl Circle {
    pub fn new(center: Point2D, radius: f64) -> Result<Self, GeometryError> {
        if !center.is_finite() || !radius.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if radius <= 0.0 {
            return Err(GeometryError::NonPositiveRadius(radius));
        }
        Ok(Self { center, radius })
    }

    /// Circle inscribed in a box; for non-square boxes the radius is the mean
    /// half side.
    pub fn inscribed(b: &BBox) -> Circle {
        Circle {
            center: b.center(),
            radius: 0.25 * (b.width() + b.height()),
        }
    }

    pub fn center(&self) -> Point2D {
        self.center
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn area(&self) -> f64 {
        PI * self.radius * self.radius
    }

    /// Minimal axis-aligned square around the circle.
    pub fn bounding_box(&self) -> BBox {
        let c = self.center;
        let r = self.radius;
        BBox {
            x_min: c.x - r,
            y_min: c.y - r,
            x_max: c.x + r,
            y_max: c.y + r,
        }
    }

    pub fn intersection_area(&self, other: &Circle) -> f64 {
        let d = self.center.distance(&other.center);
        let (r1, r2) = (self.radius, other.radius);
        if d >= r1 + r2 {
            return 0.0;
        }
        if d <= (r1 - r2).abs() {
            let r = r1.min(r2);
            return PI * r * r;
        }
        let a1 = ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)).clamp(-1.0, 1.0).acos();
        let a2 = ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)).clamp(-1.0, 1.0).acos();
        let k = ((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)).max(0.0);
        r1 * r1 * a1 + r2 * r2 * a2 - 0.5 * k.sqrt()
    }
}

fn ratio(inter: f64, area_a: f64, area_b: f64) -> f64 {
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_box(a: &BBox, b: &BBox) -> f64 {
    ratio(a.intersection_area(b), a.area(), b.area())
}

pub fn iou_polygon(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    ratio(a.intersection_area(b), a.area(), b.area())
}

pub fn iou_circle(a: &Circle, b: &Circle) -> f64 {
    ratio(a.intersection_area(b), a.area(), b.area())
}

pub fn box_to_polygon(b: &BBox) -> ConvexPolygon {
    ConvexPolygon {
        vertices: b.corners().to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn rotated_square(center: Point2D, half: f64, angle: f64) -> ConvexPolygon {
        let (s, c) = angle.sin_cos();
        let pts: Vec<Point2D> = [(-half, -half), (half, -half), (half, half), (-half, half)]
            .iter()
            .map(|&(x, y)| Point2D::new(center.x + c * x - s * y, center.y + s * x + c * y))
            .collect();
        ConvexPolygon::hull(&pts).unwrap()
    }

    #[test]
    fn box_iou_examples() {
        assert_eq!(iou_box(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 1.0);
        assert!((iou_box(&bx(0., 0., 2., 2.), &bx(1., 1., 3., 3.)) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou_box(&bx(0., 0., 1., 1.), &bx(5., 5., 6., 6.)), 0.0);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(matches!(
            BBox::new(1.0, 0.0, 1.0, 2.0),
            Err(GeometryError::DegenerateBox { .. })
        ));
        assert_eq!(BBox::new(f64::NAN, 0.0, 1.0, 1.0), Err(GeometryError::NonFinite));
        assert_eq!(
            Circle::new(Point2D::new(0.0, 0.0), 0.0),
            Err(GeometryError::NonPositiveRadius(0.0))
        );
        let colinear = [Point2D::new(0., 0.), Point2D::new(1., 1.), Point2D::new(2., 2.)];
        assert_eq!(ConvexPolygon::hull(&colinear), Err(GeometryError::DegeneratePolygon));
    }

    #[test]
    fn hull_merges_and_orders() {
        let pts = [
            Point2D::new(1., 1.),
            Point2D::new(0., 0.),
            Point2D::new(0.5, 0.0),
            Point2D::new(1., 0.),
            Point2D::new(0., 1.),
            Point2D::new(0., 1. + 1e-12),
            Point2D::new(0.5, 0.5),
        ];
        let poly = ConvexPolygon::hull(&pts).unwrap();
        assert_eq!(poly.vertices().len(), 4);
        assert!((poly.area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_to_polygon_corners() {
        let p = box_to_polygon(&bx(0., 0., 1., 1.));
        assert_eq!(
            p.vertices(),
            &[
                Point2D::new(0., 0.),
                Point2D::new(1., 0.),
                Point2D::new(1., 1.),
                Point2D::new(0., 1.)
            ]
        );
        let b = bx(-3., 2., 5., 7.5);
        let p = box_to_polygon(&b);
        assert_eq!(p.bounding_box(), b);
        assert!((p.area() - b.area()).abs() < 1e-12);
    }

    #[test]
    fn polygon_rotation_symmetry() {
        let c = Point2D::new(0.5, 0.5);
        let a = rotated_square(c, 0.5, 0.0);
        let b = rotated_square(c, 0.5, std::f64::consts::FRAC_PI_2);
        assert!((iou_polygon(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn polygon_rotated_45_matches_closed_form() {
        // Unit square vs. the same square rotated 45 degrees: the intersection
        // is a regular octagon of area 2(sqrt2 - 1).
        let c = Point2D::new(0.5, 0.5);
        let a = rotated_square(c, 0.5, 0.0);
        let b = rotated_square(c, 0.5, std::f64::consts::FRAC_PI_4);
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let expected = inter / (2.0 - inter);
        assert!((iou_polygon(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn triangle_inside_square() {
        let square = box_to_polygon(&bx(0., 0., 2., 2.));
        let tri = ConvexPolygon::hull(&[
            Point2D::new(0.2, 0.2),
            Point2D::new(1.8, 0.2),
            Point2D::new(0.2, 1.45),
        ])
        .unwrap();
        assert!((tri.area() - 1.0).abs() < 1e-12);
        assert!((iou_polygon(&square, &tri) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn circle_iou_examples() {
        let a = Circle::new(Point2D::new(0., 0.), 2.).unwrap();
        assert_eq!(iou_circle(&a, &a), 1.0);
        let far = Circle::new(Point2D::new(6., 0.), 2.).unwrap();
        assert_eq!(iou_circle(&a, &far), 0.0);
        let lens = Circle::new(Point2D::new(2., 0.), 2.).unwrap();
        // Lens for d = r: r^2 (2pi/3 - sqrt3/2).
        let inter = 4.0 * (2.0 * PI / 3.0 - 3f64.sqrt() / 2.0);
        let expected = inter / (2.0 * PI * 4.0 - inter);
        assert!((iou_circle(&a, &lens) - expected).abs() < 1e-12);
        assert!((expected - 0.2434).abs() < 1e-3);
        let inner = Circle::new(Point2D::new(0.5, 0.), 1.).unwrap();
        assert!((iou_circle(&a, &inner) - 0.25).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn polygon_iou_agrees_with_box_iou(a in arb_box(), b in arb_box()) {
            let via_poly = iou_polygon(&box_to_polygon(&a), &box_to_polygon(&b));
            prop_assert!((via_poly - iou_box(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn iou_bounds_and_symmetry(a in arb_box(), b in arb_box()) {
            let ab = iou_box(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou_box(&b, &a));
            prop_assert!((iou_box(&a, &a) - 1.0).abs() < 1e-12);
            let pa = box_to_polygon(&a);
            let pb = box_to_polygon(&b);
            let inter = pa.intersection_area(&pb);
            prop_assert!(inter <= pa.area().min(pb.area()) + 1e-9);
        }

        #[test]
        fn polygon_iou_rigid_invariance(
            a in arb_box(), b in arb_box(),
            angle in 0.0..std::f64::consts::TAU, tx in -100.0..100.0f64, ty in -100.0..100.0f64,
        ) {
            let (s, c) = angle.sin_cos();
            let motion = |p: &Point2D| Point2D::new(c * p.x - s * p.y + tx, s * p.x + c * p.y + ty);
            let ma = ConvexPolygon::hull(&a.corners().iter().map(motion).collect::<Vec<_>>()).unwrap();
            let mb = ConvexPolygon::hull(&b.corners().iter().map(motion).collect::<Vec<_>>()).unwrap();
            prop_assert!((iou_polygon(&ma, &mb) - iou_box(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn circle_iou_symmetric(
            x in -10.0..10.0f64, y in -10.0..10.0f64, r1 in 0.1..8.0f64, r2 in 0.1..8.0f64,
        ) {
            let a = Circle::new(Point2D::new(0.0, 0.0), r1).unwrap();
            let b = Circle::new(Point2D::new(x, y), r2).unwrap();
            let v = iou_circle(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - iou_circle(&b, &a)).abs() < 1e-12);
        }
    }
}
