//! Invertible maps between section coordinate spaces.
//!
//! A [`PairTransform`] carries points of its `source` section into the space
//! of its `target` section: first the affine stage, then the non-rigid
//! residual field sampled in the affine-mapped space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Circle, ConvexPolygon, GeometryError, Point2D};

/// Smallest accepted `|det|` of the linear part of an affine map.
pub const MIN_DETERMINANT: f64 = 1e-12;
/// Default residual tolerance for field inversion, in coordinate units.
pub const DEFAULT_INVERSION_TOL: f64 = 0.01;
pub const DEFAULT_INVERSION_MAX_ITER: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("singular affine transform (det = {0:e})")]
    SingularTransform(f64),
    #[error("affine matrix must have last row (0, 0, 1) and finite entries")]
    InvalidMatrix,
    #[error("field inversion did not converge (max residual {0:.4})")]
    NonConvergent(f64),
    #[error("invalid displacement field: {0}")]
    InvalidField(String),
    #[error("invalid section pair {from}->{to}")]
    InvalidPair { from: usize, to: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// 2D affine map stored as the top two rows of a homogeneous 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform2D {
    rows: [[f64; 3]; 2],
}

impl Default for AffineTransform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform2D {
    pub const fn identity() -> Self {
        Self {
            rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    /// `[a, b, tx, c, d, ty]` mapping `(x, y)` to `(a x + b y + tx, c x + d y + ty)`.
    pub fn from_params(a: f64, b: f64, tx: f64, c: f64, d: f64, ty: f64) -> Result<Self, TransformError> {
        let t = Self {
            rows: [[a, b, tx], [c, d, ty]],
        };
        if !t.rows.iter().flatten().all(|v| v.is_finite()) {
            return Err(TransformError::InvalidMatrix);
        }
        let det = t.determinant();
        if det.abs() <= MIN_DETERMINANT {
            return Err(TransformError::SingularTransform(det));
        }
        Ok(t)
    }

    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self, TransformError> {
        if m[2] != [0.0, 0.0, 1.0] {
            return Err(TransformError::InvalidMatrix);
        }
        Self::from_params(m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            rows: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Counter-clockwise rotation by `angle` radians about the origin.
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rows: [[c, -s, 0.0], [s, c, 0.0]],
        }
    }

    /// Scale, then rotate, then translate.
    pub fn similarity(scale: f64, angle: f64, tx: f64, ty: f64) -> Result<Self, TransformError> {
        let (s, c) = angle.sin_cos();
        Self::from_params(scale * c, -scale * s, tx, scale * s, scale * c, ty)
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [self.rows[0], self.rows[1], [0.0, 0.0, 1.0]]
    }

    pub fn determinant(&self) -> f64 {
        self.rows[0][0] * self.rows[1][1] - self.rows[0][1] * self.rows[1][0]
    }

    /// Isotropic scale factor `sqrt(|det|)`.
    pub fn scale_factor(&self) -> f64 {
        self.determinant().abs().sqrt()
    }

    pub fn apply(&self, p: Point2D) -> Point2D {
        let [r0, r1] = &self.rows;
        Point2D::new(
            r0[0] * p.x + r0[1] * p.y + r0[2],
            r1[0] * p.x + r1[1] * p.y + r1[2],
        )
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform2D) -> AffineTransform2D {
        let a = self.matrix();
        let b = other.matrix();
        let mut rows = [[0.0; 3]; 2];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        AffineTransform2D { rows }
    }

    pub fn inverse(&self) -> Result<AffineTransform2D, TransformError> {
        let det = self.determinant();
        if det.abs() <= MIN_DETERMINANT || !det.is_finite() {
            return Err(TransformError::SingularTransform(det));
        }
        let [[a, b, tx], [c, d, ty]] = self.rows;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(AffineTransform2D {
            rows: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }
}

pub fn apply_affine(t: &AffineTransform2D, p: Point2D) -> Point2D {
    t.apply(p)
}

pub fn invert_affine(t: &AffineTransform2D) -> Result<AffineTransform2D, TransformError> {
    t.inverse()
}

/// Regular sampling grid shared by displacement fields and TPS fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Point2D,
    pub spacing: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), TransformError> {
        if !self.origin.is_finite() {
            return Err(TransformError::InvalidField("non-finite origin".into()));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(TransformError::InvalidField(format!(
                "spacing must be positive, got {}",
                self.spacing
            )));
        }
        if self.width < 2 || self.height < 2 {
            return Err(TransformError::InvalidField(format!(
                "grid must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Grid covering `bounds` (expanded by `margin`) at the given spacing.
    pub fn covering(bounds: &BBox, margin: f64, spacing: f64) -> GridSpec {
        let origin = Point2D::new(bounds.x_min() - margin, bounds.y_min() - margin);
        let width = ((bounds.width() + 2.0 * margin) / spacing).ceil() as usize + 1;
        let height = ((bounds.height() + 2.0 * margin) / spacing).ceil() as usize + 1;
        GridSpec {
            origin,
            spacing,
            width: width.max(2),
            height: height.max(2),
        }
    }

    pub fn node(&self, i: usize, j: usize) -> Point2D {
        Point2D::new(
            self.origin.x + i as f64 * self.spacing,
            self.origin.y + j as f64 * self.spacing,
        )
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_max(&self) -> f64 {
        self.origin.x + (self.width - 1) as f64 * self.spacing
    }

    pub fn y_max(&self) -> f64 {
        self.origin.y + (self.height - 1) as f64 * self.spacing
    }

    pub fn contains(&self, p: Point2D) -> bool {
        p.x >= self.origin.x && p.x <= self.x_max() && p.y >= self.origin.y && p.y <= self.y_max()
    }
}

/// Dense displacement field on a regular grid; values are stored row-major
/// (`index = j * width + i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    grid: GridSpec,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl DisplacementField {
    pub fn new(grid: GridSpec, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self, TransformError> {
        grid.validate()?;
        if dx.len() != grid.len() || dy.len() != grid.len() {
            return Err(TransformError::InvalidField(format!(
                "expected {} values per component, got dx={} dy={}",
                grid.len(),
                dx.len(),
                dy.len()
            )));
        }
        if !dx.iter().chain(dy.iter()).all(|v| v.is_finite()) {
            return Err(TransformError::InvalidField("non-finite displacement".into()));
        }
        Ok(Self { grid, dx, dy })
    }

    pub fn zeros(grid: GridSpec) -> Result<Self, TransformError> {
        let n = grid.len();
        Self::new(grid, vec![0.0; n], vec![0.0; n])
    }

    /// Samples `f(node)` at every grid node.
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(Point2D) -> (f64, f64)) -> Result<Self, TransformError> {
        grid.validate()?;
        let mut dx = Vec::with_capacity(grid.len());
        let mut dy = Vec::with_capacity(grid.len());
        for j in 0..grid.height {
            for i in 0..grid.width {
                let (u, v) = f(grid.node(i, j));
                dx.push(u);
                dy.push(v);
            }
        }
        Self::new(grid, dx, dy)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn dx(&self) -> &[f64] {
        &self.dx
    }
    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    /// Bilinear displacement at `p`, clamped to the nearest edge outside the
    /// grid.
    pub fn displacement(&self, p: Point2D) -> (f64, f64) {
        let g = &self.grid;
        let fx = ((p.x - g.origin.x) / g.spacing).clamp(0.0, (g.width - 1) as f64);
        let fy = ((p.y - g.origin.y) / g.spacing).clamp(0.0, (g.height - 1) as f64);
        let i0 = (fx.floor() as usize).min(g.width - 2);
        let j0 = (fy.floor() as usize).min(g.height - 2);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let idx = |i: usize, j: usize| j * g.width + i;
        let lerp = |vals: &[f64]| {
            let v00 = vals[idx(i0, j0)];
            let v10 = vals[idx(i0 + 1, j0)];
            let v01 = vals[idx(i0, j0 + 1)];
            let v11 = vals[idx(i0 + 1, j0 + 1)];
            (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
        };
        (lerp(&self.dx), lerp(&self.dy))
    }

    pub fn apply(&self, p: Point2D) -> Point2D {
        let (u, v) = self.displacement(p);
        Point2D::new(p.x + u, p.y + v)
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(u, v)| u.hypot(*v))
            .fold(0.0, f64::max)
    }

    /// Largest `|f(p + g(p)) - p|` over nodes `p` of the inverse `g` whose
    /// pre-image `p + g(p)` lies at least one spacing inside the grid, where
    /// `f` is not clamped.
    pub fn inverse_residual(&self, inverse: &DisplacementField) -> f64 {
        let g = &inverse.grid;
        let f = &self.grid;
        let margin = f.spacing;
        let mut worst: f64 = 0.0;
        for j in 0..g.height {
            for i in 0..g.width {
                let p = g.node(i, j);
                let q = inverse.apply(p);
                let inside = q.x >= f.origin.x + margin
                    && q.x <= f.x_max() - margin
                    && q.y >= f.origin.y + margin
                    && q.y <= f.y_max() - margin;
                if !inside {
                    continue;
                }
                worst = worst.max(self.apply(q).distance(&p));
            }
        }
        worst
    }

    /// Inverts the field on its own grid by fixed-point iteration
    /// `g0 = -f`, `g_{k+1}(p) = -f(p + g_k(p))`.
    pub fn invert(&self, tol: f64, max_iter: usize) -> Result<DisplacementField, TransformError> {
        let n = self.grid.len();
        let mut inv = DisplacementField {
            grid: self.grid,
            dx: self.dx.iter().map(|v| -v).collect(),
            dy: self.dy.iter().map(|v| -v).collect(),
        };
        let mut residual = self.inverse_residual(&inv);
        let mut iter = 0;
        while residual > tol && iter < max_iter {
            let mut dx = Vec::with_capacity(n);
            let mut dy = Vec::with_capacity(n);
            for j in 0..self.grid.height {
                for i in 0..self.grid.width {
                    let k = j * self.grid.width + i;
                    let p = self.grid.node(i, j);
                    let (u, v) = self.displacement(Point2D::new(p.x + inv.dx[k], p.y + inv.dy[k]));
                    dx.push(-u);
                    dy.push(-v);
                }
            }
            inv.dx = dx;
            inv.dy = dy;
            residual = self.inverse_residual(&inv);
            iter += 1;
        }
        if residual > tol {
            return Err(TransformError::NonConvergent(residual));
        }
        Ok(inv)
    }
}

pub fn apply_field(f: &DisplacementField, p: Point2D) -> Point2D {
    f.apply(p)
}

pub fn invert_field(f: &DisplacementField, tol: f64, max_iter: usize) -> Result<DisplacementField, TransformError> {
    f.invert(tol, max_iter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// `t -> t+1`
    ForwardAdjacent,
    /// `t -> t+2`
    BackwardInterleave,
}

impl PairKind {
    pub fn for_sections(source: usize, target: usize) -> Result<Self, TransformError> {
        match target.checked_sub(source) {
            Some(1) => Ok(PairKind::ForwardAdjacent),
            Some(2) => Ok(PairKind::BackwardInterleave),
            _ => Err(TransformError::InvalidPair { from: source, to: target }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionParams {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InversionParams {
    fn default() -> Self {
        Self {
            tol: DEFAULT_INVERSION_TOL,
            max_iter: DEFAULT_INVERSION_MAX_ITER,
        }
    }
}

/// Affine + optional non-rigid map from section `source` to section `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTransform {
    source: usize,
    target: usize,
    kind: PairKind,
    affine: AffineTransform2D,
    affine_inv: AffineTransform2D,
    field: Option<DisplacementField>,
    field_inv: Option<DisplacementField>,
}

impl PairTransform {
    pub fn new(
        source: usize,
        target: usize,
        affine: AffineTransform2D,
        field: Option<DisplacementField>,
        inversion: InversionParams,
    ) -> Result<Self, TransformError> {
        let kind = PairKind::for_sections(source, target)?;
        let affine_inv = affine.inverse()?;
        let field_inv = field
            .as_ref()
            .map(|f| f.invert(inversion.tol, inversion.max_iter))
            .transpose()?;
        Ok(Self {
            source,
            target,
            kind,
            affine,
            affine_inv,
            field,
            field_inv,
        })
    }

    pub fn affine_only(source: usize, target: usize, affine: AffineTransform2D) -> Result<Self, TransformError> {
        Self::new(source, target, affine, None, InversionParams::default())
    }

    pub fn identity(source: usize, target: usize) -> Result<Self, TransformError> {
        Self::affine_only(source, target, AffineTransform2D::identity())
    }

    pub fn source(&self) -> usize {
        self.source
    }
    pub fn target(&self) -> usize {
        self.target
    }
    pub fn kind(&self) -> PairKind {
        self.kind
    }
    pub fn affine(&self) -> &AffineTransform2D {
        &self.affine
    }
    pub fn field(&self) -> Option<&DisplacementField> {
        self.field.as_ref()
    }

    pub fn map_point(&self, p: Point2D, direction: Direction) -> Point2D {
        match direction {
            Direction::Forward => {
                let q = self.affine.apply(p);
                match &self.field {
                    Some(f) => f.apply(q),
                    None => q,
                }
            }
            Direction::Inverse => {
                let q = match &self.field_inv {
                    Some(g) => g.apply(p),
                    None => p,
                };
                self.affine_inv.apply(q)
            }
        }
    }

    /// Maps the four corners and returns their convex hull.
    pub fn map_box(&self, b: &BBox, direction: Direction) -> Result<ConvexPolygon, TransformError> {
        let corners = b.corners().map(|c| self.map_point(c, direction));
        Ok(ConvexPolygon::hull(&corners)?)
    }

    /// Maps the center; the radius follows the affine scale factor.
    pub fn map_circle(&self, c: &Circle, direction: Direction) -> Result<Circle, TransformError> {
        let scale = match direction {
            Direction::Forward => self.affine.scale_factor(),
            Direction::Inverse => self.affine_inv.scale_factor(),
        };
        Ok(Circle::new(self.map_point(c.center(), direction), c.radius() * scale)?)
    }
}

pub fn map_point(t: &PairTransform, p: Point2D, direction: Direction) -> Point2D {
    t.map_point(p, direction)
}

pub fn map_box(t: &PairTransform, b: &BBox, direction: Direction) -> Result<ConvexPolygon, TransformError> {
    t.map_box(b, direction)
}
