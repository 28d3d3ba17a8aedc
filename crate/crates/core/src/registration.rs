//! Pair-wise transform fitting from keypoint correspondences.
//!
//! The affine stage is a weighted least-squares fit, optionally wrapped in
//! RANSAC. The non-rigid stage fits a thin-plate spline to the residuals left
//! by the affine stage and samples it onto a regular grid.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2D;
use crate::transform::{
    AffineTransform2D, Direction, DisplacementField, GridSpec, InversionParams, PairTransform, TransformError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no consensus: best inlier fraction {best:.3} < required {required:.3}")]
    NoConsensus { best: f64, required: f64 },
    #[error("thin-plate spline system is ill-conditioned")]
    IllConditioned,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub source: Point2D,
    pub target: Point2D,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(source: Point2D, target: Point2D) -> Self {
        Self {
            source,
            target,
            weight: 1.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.source.is_finite() && self.target.is_finite() && self.weight.is_finite() && self.weight >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffineModel {
    /// Full 6-DOF affine.
    #[default]
    Affine,
    /// Rotation, isotropic scale and translation.
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub max_iterations: usize,
    pub inlier_threshold: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            inlier_threshold: 10.0,
            min_inlier_fraction: 0.3,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.max_iterations < 1 {
            return Err(RegistrationError::InvalidParams("max_iterations must be >= 1".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(RegistrationError::InvalidParams("inlier_threshold must be > 0".into()));
        }
        if !(self.min_inlier_fraction > 0.0 && self.min_inlier_fraction <= 1.0) {
            return Err(RegistrationError::InvalidParams(
                "min_inlier_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted centroids and centered second moments of a correspondence set.
struct Moments {
    src_mean: Point2D,
    dst_mean: Point2D,
    /// Σ w dx dxᵀ over centered source points: [sxx, sxy, syy]
    scatter: [f64; 3],
    /// Σ w du dxᵀ: [[ux, uy], [vx, vy]]
    cross: [[f64; 2]; 2],
}

fn moments(corr: &[Correspondence]) -> Result<Moments, RegistrationError> {
    if let Some(bad) = corr.iter().position(|c| !c.is_valid()) {
        return Err(RegistrationError::DegenerateConfiguration(format!(
            "correspondence {bad} has non-finite coordinates or negative weight"
        )));
    }
    let active = corr.iter().filter(|c| c.weight > 0.0).count();
    if active < 3 {
        return Err(RegistrationError::DegenerateConfiguration(format!(
            "need at least 3 weighted correspondences, got {active}"
        )));
    }
    let wsum: f64 = corr.iter().map(|c| c.weight).sum();
    let mut sm = Point2D::default();
    let mut dm = Point2D::default();
    for c in corr {
        sm.x += c.weight * c.source.x;
        sm.y += c.weight * c.source.y;
        dm.x += c.weight * c.target.x;
        dm.y += c.weight * c.target.y;
    }
    sm.x /= wsum;
    sm.y /= wsum;
    dm.x /= wsum;
    dm.y /= wsum;

    let mut scatter = [0.0; 3];
    let mut cross = [[0.0; 2]; 2];
    for c in corr {
        let (x, y) = (c.source.x - sm.x, c.source.y - sm.y);
        let (u, v) = (c.target.x - dm.x, c.target.y - dm.y);
        let w = c.weight;
        scatter[0] += w * x * x;
        scatter[1] += w * x * y;
        scatter[2] += w * y * y;
        cross[0][0] += w * u * x;
        cross[0][1] += w * u * y;
        cross[1][0] += w * v * x;
        cross[1][1] += w * v * y;
    }
    let det = scatter[0] * scatter[2] - scatter[1] * scatter[1];
    let trace = scatter[0] + scatter[2];
    if !(trace > 0.0) || det <= 1e-12 * trace * trace {
        return Err(RegistrationError::DegenerateConfiguration(
            "source points are collinear".into(),
        ));
    }
    Ok(Moments {
        src_mean: sm,
        dst_mean: dm,
        scatter,
        cross,
    })
}

/// Weighted least-squares affine map carrying sources onto targets.
pub fn fit_affine_lsq(corr: &[Correspondence]) -> Result<AffineTransform2D, RegistrationError> {
    let m = moments(corr)?;
    let [sxx, sxy, syy] = m.scatter;
    let det = sxx * syy - sxy * sxy;
    // L = C S^-1 with S^-1 = [[syy, -sxy], [-sxy, sxx]] / det
    let l = |row: [f64; 2]| {
        (
            (row[0] * syy - row[1] * sxy) / det,
            (-row[0] * sxy + row[1] * sxx) / det,
        )
    };
    let (a, b) = l(m.cross[0]);
    let (c, d) = l(m.cross[1]);
    let tx = m.dst_mean.x - a * m.src_mean.x - b * m.src_mean.y;
    let ty = m.dst_mean.y - c * m.src_mean.x - d * m.src_mean.y;
    Ok(AffineTransform2D::from_params(a, b, tx, c, d, ty)?)
}

/// Weighted least-squares similarity (rotation + isotropic scale + shift).
pub fn fit_similarity_lsq(corr: &[Correspondence]) -> Result<AffineTransform2D, RegistrationError> {
    let m = moments(corr)?;
    let denom = m.scatter[0] + m.scatter[2];
    let a = (m.cross[0][0] + m.cross[1][1]) / denom;
    let b = (m.cross[1][0] - m.cross[0][1]) / denom;
    let tx = m.dst_mean.x - a * m.src_mean.x + b * m.src_mean.y;
    let ty = m.dst_mean.y - b * m.src_mean.x - a * m.src_mean.y;
    Ok(AffineTransform2D::from_params(a, -b, tx, b, a, ty)?)
}

pub fn fit_model(corr: &[Correspondence], model: AffineModel) -> Result<AffineTransform2D, RegistrationError> {
    match model {
        AffineModel::Affine => fit_affine_lsq(corr),
        AffineModel::Similarity => fit_similarity_lsq(corr),
    }
}

/// Weighted sum of squared residuals of `t` over `corr`.
pub fn weighted_sse(t: &AffineTransform2D, corr: &[Correspondence]) -> f64 {
    corr.iter()
        .map(|c| {
            let d = t.apply(c.source).distance(&c.target);
            c.weight * d * d
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub transform: AffineTransform2D,
    pub inliers: Vec<bool>,
}

impl RansacFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn inlier_mask(t: &AffineTransform2D, corr: &[Correspondence], threshold: f64) -> (Vec<bool>, usize, f64) {
    let mut count = 0;
    let mut err = 0.0;
    let mask = corr
        .iter()
        .map(|c| {
            let d = t.apply(c.source).distance(&c.target);
            let ok = d < threshold && c.weight > 0.0;
            if ok {
                count += 1;
                err += d;
            }
            ok
        })
        .collect();
    (mask, count, err)
}

fn select(corr: &[Correspondence], mask: &[bool]) -> Vec<Correspondence> {
    corr.iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| *c)
        .collect()
}

pub fn fit_affine_ransac(corr: &[Correspondence], params: &RansacParams) -> Result<RansacFit, RegistrationError> {
    fit_ransac(corr, params, AffineModel::Affine)
}

/// RANSAC over minimal 3-point samples, then iterated least-squares refits on
/// the consensus set. Deterministic for a fixed seed.
pub fn fit_ransac(
    corr: &[Correspondence],
    params: &RansacParams,
    model: AffineModel,
) -> Result<RansacFit, RegistrationError> {
    params.validate()?;
    let n = corr.len();
    if n < 3 {
        return Err(RegistrationError::DegenerateConfiguration(format!(
            "need at least 3 correspondences, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(AffineTransform2D, usize, f64)> = None;
    for _ in 0..params.max_iterations {
        let idx = sample(&mut rng, n, 3);
        let minimal: Vec<Correspondence> = idx
            .iter()
            .map(|i| Correspondence {
                weight: 1.0,
                ..corr[i]
            })
            .collect();
        let Ok(candidate) = fit_model(&minimal, model) else {
            continue;
        };
        let (_, count, err) = inlier_mask(&candidate, corr, params.inlier_threshold);
        let better = match &best {
            None => true,
            Some((_, bc, be)) => count > *bc || (count == *bc && err < *be),
        };
        if better {
            best = Some((candidate, count, err));
        }
    }

    let required = params.min_inlier_fraction;
    let Some((mut transform, count, _)) = best else {
        return Err(RegistrationError::NoConsensus { best: 0.0, required });
    };
    let fraction = count as f64 / n as f64;
    if fraction < required {
        return Err(RegistrationError::NoConsensus {
            best: fraction,
            required,
        });
    }

    let (mut mask, _, _) = inlier_mask(&transform, corr, params.inlier_threshold);
    for _ in 0..10 {
        let Ok(refit) = fit_model(&select(corr, &mask), model) else {
            break;
        };
        let (next_mask, next_count, _) = inlier_mask(&refit, corr, params.inlier_threshold);
        if (next_count as f64 / n as f64) < required {
            break;
        }
        transform = refit;
        if next_mask == mask {
            break;
        }
        mask = next_mask;
    }
    Ok(RansacFit {
        transform,
        inliers: mask,
    })
}

#[inline]
fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Thin-plate spline interpolant of 2D displacement vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsModel {
    centers: Vec<Point2D>,
    /// Kernel weights per component.
    weights: [Vec<f64>; 2],
    /// Affine coefficients `[c0, cx, cy]` per component.
    affine: [[f64; 3]; 2],
    /// Coordinate offset applied before evaluation (centroid of the centers).
    offset: Point2D,
}

impl TpsModel {
    /// Fits `value(center_i) = values_i` with smoothing `regularization`
    /// (0 interpolates exactly).
    pub fn fit(centers: &[Point2D], values: &[(f64, f64)], regularization: f64) -> Result<Self, RegistrationError> {
        let n = centers.len();
        if n != values.len() {
            return Err(RegistrationError::InvalidParams(
                "centers and values differ in length".into(),
            ));
        }
        if !(regularization >= 0.0 && regularization.is_finite()) {
            return Err(RegistrationError::InvalidParams("regularization must be >= 0".into()));
        }
        // Reuse the collinearity check of the affine fitter.
        let probe: Vec<Correspondence> = centers.iter().map(|&c| Correspondence::new(c, c)).collect();
        let m = moments(&probe)?;
        let offset = m.src_mean;
        let local: Vec<Point2D> = centers.iter().map(|c| Point2D::new(c.x - offset.x, c.y - offset.y)).collect();

        let size = n + 3;
        let mut a = DMatrix::<f64>::zeros(size, size);
        for i in 0..n {
            for j in 0..n {
                let dx = local[i].x - local[j].x;
                let dy = local[i].y - local[j].y;
                a[(i, j)] = tps_kernel(dx * dx + dy * dy);
            }
            a[(i, i)] += regularization;
            let p = [1.0, local[i].x, local[i].y];
            for k in 0..3 {
                a[(i, n + k)] = p[k];
                a[(n + k, i)] = p[k];
            }
        }
        let mut rhs = DMatrix::<f64>::zeros(size, 2);
        for (i, v) in values.iter().enumerate() {
            rhs[(i, 0)] = v.0;
            rhs[(i, 1)] = v.1;
        }
        let sol = a.clone().lu().solve(&rhs).ok_or(RegistrationError::IllConditioned)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(RegistrationError::IllConditioned);
        }
        let resid = (&a * &sol - &rhs).norm();
        if resid > 1e-6 * (1.0 + rhs.norm()) {
            return Err(RegistrationError::IllConditioned);
        }
        let weights = [0, 1].map(|c| (0..n).map(|i| sol[(i, c)]).collect::<Vec<_>>());
        let affine = [0, 1].map(|c| [sol[(n, c)], sol[(n + 1, c)], sol[(n + 2, c)]]);
        Ok(Self {
            centers: local,
            weights,
            affine,
            offset,
        })
    }

    pub fn evaluate(&self, p: Point2D) -> (f64, f64) {
        let x = p.x - self.offset.x;
        let y = p.y - self.offset.y;
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            let aff = self.affine[c];
            *o = aff[0] + aff[1] * x + aff[2] * y;
        }
        for (i, ctr) in self.centers.iter().enumerate() {
            let dx = x - ctr.x;
            let dy = y - ctr.y;
            let u = tps_kernel(dx * dx + dy * dy);
            out[0] += self.weights[0][i] * u;
            out[1] += self.weights[1][i] * u;
        }
        (out[0], out[1])
    }

    /// `Σ_c w_cᵀ K w_c`, proportional to the integrated bending energy of both
    /// components.
    pub fn bending_energy(&self) -> f64 {
        let n = self.centers.len();
        let mut e = 0.0;
        for w in &self.weights {
            for i in 0..n {
                for j in 0..n {
                    let dx = self.centers[i].x - self.centers[j].x;
                    let dy = self.centers[i].y - self.centers[j].y;
                    e += w[i] * w[j] * tps_kernel(dx * dx + dy * dy);
                }
            }
        }
        e
    }
}

/// Fits a TPS to the residuals `target - affine(source)` (control points in
/// the affine-mapped space) and samples it onto `grid`.
pub fn fit_tps(
    corr: &[Correspondence],
    affine: &AffineTransform2D,
    regularization: f64,
    grid: &GridSpec,
) -> Result<DisplacementField, RegistrationError> {
    grid.validate()?;
    let (centers, values): (Vec<Point2D>, Vec<(f64, f64)>) = corr
        .iter()
        .filter(|c| c.weight > 0.0)
        .map(|c| {
            let q = affine.apply(c.source);
            (q, (c.target.x - q.x, c.target.y - q.y))
        })
        .unzip();
    if centers.len() < 3 {
        return Err(RegistrationError::DegenerateConfiguration(format!(
            "need at least 3 control points, got {}",
            centers.len()
        )));
    }
    if values.iter().all(|&(u, v)| u == 0.0 && v == 0.0) {
        return Ok(DisplacementField::zeros(*grid)?);
    }
    let model = TpsModel::fit(&centers, &values, regularization)?;
    Ok(DisplacementField::from_fn(*grid, |p| model.evaluate(p))?)
}

pub fn build_pair_transform(
    source: usize,
    target: usize,
    affine: AffineTransform2D,
    field: Option<DisplacementField>,
    inversion: InversionParams,
) -> Result<PairTransform, RegistrationError> {
    Ok(PairTransform::new(source, target, affine, field, inversion)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationErrorReport {
    pub median: f64,
    pub mean: f64,
    pub distances: Vec<f64>,
}

/// Distances between mapped source landmarks and their target landmarks.
pub fn registration_error(t: &PairTransform, landmarks: &[Correspondence]) -> RegistrationErrorReport {
    let distances: Vec<f64> = landmarks
        .iter()
        .map(|c| t.map_point(c.source, Direction::Forward).distance(&c.target))
        .collect();
    let n = distances.len();
    if n == 0 {
        return RegistrationErrorReport {
            median: 0.0,
            mean: 0.0,
            distances,
        };
    }
    let mean = distances.iter().sum::<f64>() / n as f64;
    let mut sorted = distances.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    RegistrationErrorReport {
        median,
        mean,
        distances,
    }
}
