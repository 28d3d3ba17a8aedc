//! Synthetic serial-section stacks with known ground truth.
//!
//! Objects are spheroids in a world volume. Section `t` is the plane
//! `z = (t + 0.5) * thickness`, observed through its own warp: a jittered
//! affine about the domain centre followed by a smooth sinusoidal
//! deformation. Detections are the axis-aligned boxes of the warped
//! cross-section circles.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{Detection, Shape, TrackSet};
use crate::geometry::{BBox, Circle, Point2D};
use crate::io::pair_key;
use crate::mot_metrics::{FrameSet, MotRecord};
use crate::registration::Correspondence;
use crate::transform::{AffineTransform2D, DisplacementField, GridSpec, InversionParams, PairTransform, TransformError};

const OUTLINE_POINTS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("placed only {placed} of {requested} objects without overlap")]
    InfeasiblePlacement { placed: usize, requested: usize },
    #[error(transparent)]
    Transform(#[from] TransformError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub sections: usize,
    pub objects: usize,
    pub object_diameter_mean: f64,
    pub object_diameter_sd: f64,
    pub object_diameter_min: f64,
    pub object_diameter_max: f64,
    /// Depth-to-width ratio range of the spheroids.
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub section_thickness: f64,
    pub domain_size: f64,
    /// Minimum gap between object footprints.
    pub placement_gap: f64,
    /// Cross-sections smaller than this are not detected.
    pub min_visible_diameter: f64,
    pub rotation_deg: f64,
    pub translation: f64,
    pub scale: f64,
    pub deformation_amplitude: f64,
    pub deformation_period: f64,
    /// Box centre and size noise, as a fraction of box size.
    pub box_jitter: f64,
    pub dropout_rate: f64,
    /// Per true detection probability of one extra spurious box.
    pub false_positive_rate: f64,
    pub keypoints_per_pair: usize,
    pub keypoint_noise: f64,
    pub keypoint_outlier_rate: f64,
    pub missing_sections: Vec<usize>,
    /// Adjacent pairs `(t, t+1)` whose correspondences are corrupted.
    pub failed_pairs: Vec<(usize, usize)>,
    pub corruption_rotation_deg: (f64, f64),
    pub corruption_shift: (f64, f64),
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sections: 12,
            objects: 50,
            object_diameter_mean: 87.0,
            object_diameter_sd: 17.0,
            object_diameter_min: 40.0,
            object_diameter_max: 160.0,
            aspect_min: 0.9,
            aspect_max: 1.1,
            section_thickness: 8.0,
            domain_size: 1200.0,
            placement_gap: 10.0,
            min_visible_diameter: 30.0,
            rotation_deg: 3.0,
            translation: 20.0,
            scale: 0.02,
            deformation_amplitude: 2.0,
            deformation_period: 600.0,
            box_jitter: 0.02,
            dropout_rate: 0.02,
            false_positive_rate: 0.02,
            keypoints_per_pair: 200,
            keypoint_noise: 0.5,
            keypoint_outlier_rate: 0.1,
            missing_sections: Vec::new(),
            failed_pairs: Vec::new(),
            corruption_rotation_deg: (20.0, 40.0),
            corruption_shift: (200.0, 300.0),
            seed: 0,
        }
    }
}

impl SimConfig {
    /// No section jitter, deformation, detection noise or keypoint noise.
    pub fn clean() -> Self {
        Self {
            rotation_deg: 0.0,
            translation: 0.0,
            scale: 0.0,
            deformation_amplitude: 0.0,
            box_jitter: 0.0,
            dropout_rate: 0.0,
            false_positive_rate: 0.0,
            keypoint_noise: 0.0,
            keypoint_outlier_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.sections < 1 || self.objects < 1 {
            return bad("sections and objects must be >= 1".into());
        }
        for (name, v) in [
            ("dropout_rate", self.dropout_rate),
            ("false_positive_rate", self.false_positive_rate),
            ("keypoint_outlier_rate", self.keypoint_outlier_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("object_diameter_mean", self.object_diameter_mean),
            ("object_diameter_min", self.object_diameter_min),
            ("section_thickness", self.section_thickness),
            ("domain_size", self.domain_size),
            ("deformation_period", self.deformation_period),
            ("aspect_min", self.aspect_min),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("object_diameter_sd", self.object_diameter_sd),
            ("placement_gap", self.placement_gap),
            ("min_visible_diameter", self.min_visible_diameter),
            ("rotation_deg", self.rotation_deg),
            ("translation", self.translation),
            ("scale", self.scale),
            ("deformation_amplitude", self.deformation_amplitude),
            ("box_jitter", self.box_jitter),
            ("keypoint_noise", self.keypoint_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.object_diameter_max < self.object_diameter_min || self.aspect_max < self.aspect_min {
            return bad("diameter and aspect ranges must satisfy min <= max".into());
        }
        if self.scale >= 0.5 {
            return bad("scale jitter must be below 0.5".into());
        }
        if self.keypoints_per_pair < 3 {
            return bad("keypoints_per_pair must be >= 3".into());
        }
        if let Some(s) = self.missing_sections.iter().find(|&&s| s >= self.sections) {
            return bad(format!("missing section {s} out of range"));
        }
        for &(s, t) in &self.failed_pairs {
            if t != s + 1 || t >= self.sections {
                return bad(format!("failed pair ({s}, {t}) is not an adjacent pair of the stack"));
            }
        }
        let (r0, r1) = self.corruption_rotation_deg;
        let (s0, s1) = self.corruption_shift;
        if !(r0 <= r1 && s0 <= s1 && r0.is_finite() && r1.is_finite() && s0.is_finite() && s1.is_finite()) {
            return bad("corruption ranges must satisfy min <= max".into());
        }
        Ok(())
    }

    pub fn stack_depth(&self) -> f64 {
        self.sections as f64 * self.section_thickness
    }

    pub fn section_z(&self, t: usize) -> f64 {
        (t as f64 + 0.5) * self.section_thickness
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spheroid {
    pub center: [f64; 3],
    pub radius_xy: f64,
    pub radius_z: f64,
}

impl Spheroid {
    pub fn slice(&self, z: f64) -> Option<Circle> {
        slice_ellipsoid(self.center, self.radius_xy, self.radius_z, z)
    }
}

/// Cross-section of a spheroid with the plane at height `z`; tangent planes
/// give `None`.
pub fn slice_ellipsoid(center: [f64; 3], radius_xy: f64, radius_z: f64, z: f64) -> Option<Circle> {
    assert!(radius_xy > 0.0 && radius_z > 0.0, "radii must be positive");
    let u = (z - center[2]) / radius_z;
    if u.abs() >= 1.0 {
        return None;
    }
    Circle::new(Point2D::new(center[0], center[1]), radius_xy * (1.0 - u * u).sqrt()).ok()
}

/// World-to-section map of one section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionWarp {
    pub affine: AffineTransform2D,
    pub amplitude: f64,
    pub period: f64,
    pub phase: (f64, f64),
}

impl SectionWarp {
    fn deformation(&self, q: Point2D) -> (f64, f64) {
        if self.amplitude == 0.0 {
            return (0.0, 0.0);
        }
        let k = 2.0 * PI / self.period;
        (
            self.amplitude * (k * q.y + self.phase.0).sin(),
            self.amplitude * (k * q.x + self.phase.1).sin(),
        )
    }

    pub fn apply(&self, w: Point2D) -> Point2D {
        let q = self.affine.apply(w);
        let (dx, dy) = self.deformation(q);
        Point2D::new(q.x + dx, q.y + dy)
    }

    pub fn invert(&self, p: Point2D) -> Result<Point2D, TransformError> {
        let mut q = p;
        for _ in 0..100 {
            let (dx, dy) = self.deformation(q);
            let next = Point2D::new(p.x - dx, p.y - dy);
            let step = next.distance(&q);
            q = next;
            if step < 1e-12 {
                break;
            }
        }
        Ok(self.affine.inverse()?.apply(q))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    SectionWarp {
        section: usize,
        rotation_deg: f64,
        translation: [f64; 2],
        scale: f64,
        deformation_amplitude: f64,
    },
    MissingSection { section: usize },
    Dropout { section: usize, count: usize },
    FalsePositives { section: usize, count: usize },
    KeypointOutliers { source: usize, target: usize, count: usize },
    CorruptedPair {
        source: usize,
        target: usize,
        rotation_deg: f64,
        shift: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub config: SimConfig,
    pub objects: Vec<Spheroid>,
    pub warps: Vec<SectionWarp>,
    /// Ground-truth boxes; track id is object index + 1.
    pub gt_tracks: TrackSet,
    /// Object id of every emitted detection, `None` for spurious boxes.
    pub detection_objects: Vec<Vec<Option<u64>>>,
    pub correspondences: BTreeMap<String, Vec<Correspondence>>,
    pub perturbations: Vec<Perturbation>,
}

impl SimTruth {
    pub fn correspondences(&self, source: usize, target: usize) -> Option<&[Correspondence]> {
        self.correspondences.get(&pair_key(source, target)).map(Vec::as_slice)
    }

    /// Exact map between two sections: the affine part is exact, any
    /// deformation residual is sampled on a grid of the given spacing.
    pub fn true_transform(
        &self,
        source: usize,
        target: usize,
        spacing: f64,
        inversion: InversionParams,
    ) -> Result<PairTransform, SimError> {
        let (ws, wt) = (&self.warps[source], &self.warps[target]);
        let affine = wt.affine.compose(&ws.affine.inverse()?);
        if ws.amplitude == 0.0 && wt.amplitude == 0.0 {
            return Ok(PairTransform::affine_only(source, target, affine)?);
        }
        let d = self.config.domain_size;
        let extent = BBox::new(0.0, 0.0, d, d).expect("positive domain");
        let grid = GridSpec::covering(&extent, 0.25 * d, spacing);
        let affine_inv = affine.inverse()?;
        let mut failure = None;
        let field = DisplacementField::from_fn(grid, |q| {
            let p = affine_inv.apply(q);
            match ws.invert(p) {
                Ok(w) => {
                    let r = wt.apply(w);
                    (r.x - q.x, r.y - q.y)
                }
                Err(e) => {
                    failure = Some(e);
                    (0.0, 0.0)
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e.into());
        }
        Ok(PairTransform::new(source, target, affine, Some(field), inversion)?)
    }

    pub fn gt_frameset(&self) -> FrameSet {
        let mut fs = FrameSet::new();
        for (&id, dets) in &self.gt_tracks.tracks {
            for d in dets {
                fs.push(d.section as u32 + 1, id as i64, d.shape.bounding_box())
                    .expect("one cross-section per object and section");
            }
        }
        fs
    }

    pub fn gt_records(&self) -> Vec<MotRecord> {
        let mut rows = self.gt_frameset().to_records();
        rows.sort_by(|a, b| a.frame.cmp(&b.frame).then(a.id.cmp(&b.id)));
        rows
    }

    /// Number of objects with at least one detected cross-section.
    pub fn visible_objects(&self) -> usize {
        self.gt_tracks.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// `detections[t]`: boxes observed on section `t`.
    pub detections: Vec<Vec<Detection>>,
    pub truth: SimTruth,
}

const STREAM_PLACEMENT: u64 = 1;
const STREAM_WARP: u64 = 2;
const STREAM_DETECTIONS: u64 = 3;
const STREAM_KEYPOINTS: u64 = 4;
const STREAM_CORRUPTION: u64 = 5;

fn rng_for(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) | index);
    rng
}

fn symmetric(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

fn place_objects(cfg: &SimConfig) -> Result<Vec<Spheroid>, SimError> {
    let mut rng = rng_for(cfg.seed, STREAM_PLACEMENT, 0);
    let diameter = Normal::new(cfg.object_diameter_mean, cfg.object_diameter_sd)
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let mut placed: Vec<Spheroid> = Vec::with_capacity(cfg.objects);
    let max_attempts = 1000 * cfg.objects;
    let mut attempts = 0;
    while placed.len() < cfg.objects {
        if attempts >= max_attempts {
            return Err(SimError::InfeasiblePlacement {
                placed: placed.len(),
                requested: cfg.objects,
            });
        }
        attempts += 1;
        let d = diameter
            .sample(&mut rng)
            .clamp(cfg.object_diameter_min, cfg.object_diameter_max);
        let r = d / 2.0;
        let lo = r + cfg.placement_gap;
        let hi = cfg.domain_size - lo;
        if lo >= hi {
            continue;
        }
        let x = rng.random_range(lo..hi);
        let y = rng.random_range(lo..hi);
        let z = rng.random_range(0.0..=cfg.stack_depth());
        let aspect = rng.random_range(cfg.aspect_min..=cfg.aspect_max);
        let clear = placed.iter().all(|o| {
            let dist = ((o.center[0] - x).powi(2) + (o.center[1] - y).powi(2)).sqrt();
            dist >= o.radius_xy + r + cfg.placement_gap
        });
        if clear {
            placed.push(Spheroid {
                center: [x, y, z],
                radius_xy: r,
                radius_z: r * aspect,
            });
        }
    }
    Ok(placed)
}

fn section_warp(cfg: &SimConfig, t: usize) -> Result<(SectionWarp, Perturbation), SimError> {
    let mut rng = rng_for(cfg.seed, STREAM_WARP, t as u64);
    let rotation_deg = symmetric(&mut rng, cfg.rotation_deg);
    let translation = [symmetric(&mut rng, cfg.translation), symmetric(&mut rng, cfg.translation)];
    let scale = 1.0 + symmetric(&mut rng, cfg.scale);
    let phase = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let c = cfg.domain_size / 2.0;
    let affine = AffineTransform2D::translation(c + translation[0], c + translation[1])
        .compose(&AffineTransform2D::similarity(scale, rotation_deg.to_radians(), 0.0, 0.0)?)
        .compose(&AffineTransform2D::translation(-c, -c));
    let warp = SectionWarp {
        affine,
        amplitude: cfg.deformation_amplitude,
        period: cfg.deformation_period,
        phase,
    };
    let log = Perturbation::SectionWarp {
        section: t,
        rotation_deg,
        translation,
        scale,
        deformation_amplitude: cfg.deformation_amplitude,
    };
    Ok((warp, log))
}

fn outline_box(circle: &Circle, warp: &SectionWarp) -> BBox {
    let pts: Vec<Point2D> = (0..OUTLINE_POINTS)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / OUTLINE_POINTS as f64;
            let c = circle.center();
            warp.apply(Point2D::new(c.x + circle.radius() * a.cos(), c.y + circle.radius() * a.sin()))
        })
        .collect();
    BBox::enclosing(&pts).expect("non-empty outline")
}

struct SectionDraw {
    gt: Vec<Detection>,
    detections: Vec<Detection>,
    objects: Vec<Option<u64>>,
    log: Vec<Perturbation>,
}

fn draw_section(cfg: &SimConfig, t: usize, objects: &[Spheroid], warp: &SectionWarp) -> SectionDraw {
    let mut rng = rng_for(cfg.seed, STREAM_DETECTIONS, t as u64);
    let z = cfg.section_z(t);
    let gt: Vec<Detection> = objects
        .iter()
        .enumerate()
        .filter_map(|(i, o)| {
            let c = o.slice(z)?;
            (2.0 * c.radius() >= cfg.min_visible_diameter).then(|| Detection {
                section: t,
                shape: Shape::Box(outline_box(&c, warp)),
                score: Some(1.0),
                track_id: Some(i as u64 + 1),
            })
        })
        .collect();
    let mut log = Vec::new();
    if cfg.missing_sections.contains(&t) {
        log.push(Perturbation::MissingSection { section: t });
        return SectionDraw {
            gt: Vec::new(),
            detections: Vec::new(),
            objects: Vec::new(),
            log,
        };
    }

    let mut kept: Vec<(Option<u64>, BBox)> = Vec::with_capacity(gt.len());
    let mut dropped = 0;
    for d in &gt {
        if cfg.dropout_rate > 0.0 && rng.random_bool(cfg.dropout_rate) {
            dropped += 1;
            continue;
        }
        let b = d.shape.bounding_box();
        let b = if cfg.box_jitter > 0.0 {
            let n = Normal::new(0.0, cfg.box_jitter).expect("finite jitter");
            let (w, h) = (b.width(), b.height());
            let c = b.center();
            let (cx, cy) = (c.x + n.sample(&mut rng) * w, c.y + n.sample(&mut rng) * h);
            let (w, h) = (w * n.sample(&mut rng).exp(), h * n.sample(&mut rng).exp());
            BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).expect("positive jittered size")
        } else {
            b
        };
        kept.push((d.track_id, b));
    }
    if dropped > 0 {
        log.push(Perturbation::Dropout { section: t, count: dropped });
    }
    let fp_count = if cfg.false_positive_rate > 0.0 && !gt.is_empty() {
        Binomial::new(gt.len() as u64, cfg.false_positive_rate)
            .expect("rate in [0, 1]")
            .sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..fp_count {
        let d = (cfg.object_diameter_mean + cfg.object_diameter_sd * rng.random_range(-1.0..1.0))
            .max(cfg.min_visible_diameter);
        let x = rng.random_range(0.0..cfg.domain_size - d);
        let y = rng.random_range(0.0..cfg.domain_size - d);
        kept.push((None, BBox::new(x, y, x + d, y + d).expect("positive size")));
    }
    if fp_count > 0 {
        log.push(Perturbation::FalsePositives { section: t, count: fp_count });
    }
    kept.shuffle(&mut rng);
    let (objects, detections) = kept
        .into_iter()
        .map(|(id, b)| (id, Detection::new(t, Shape::Box(b)).with_score(1.0)))
        .unzip();
    SectionDraw {
        gt,
        detections,
        objects,
        log,
    }
}

fn draw_correspondences(
    cfg: &SimConfig,
    source: usize,
    target: usize,
    warps: &[SectionWarp],
) -> Result<(Vec<Correspondence>, Vec<Perturbation>), SimError> {
    let index = (source as u64) * 4 + (target - source) as u64;
    let mut rng = rng_for(cfg.seed, STREAM_KEYPOINTS, index);
    let noise = Normal::new(0.0, cfg.keypoint_noise).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let d = cfg.domain_size;
    let mut log = Vec::new();
    let mut outliers = 0;
    let mut corr: Vec<Correspondence> = (0..cfg.keypoints_per_pair)
        .map(|_| {
            let w = Point2D::new(rng.random_range(0.0..d), rng.random_range(0.0..d));
            let s = warps[source].apply(w);
            let mut t = warps[target].apply(w);
            let src = Point2D::new(s.x + noise.sample(&mut rng), s.y + noise.sample(&mut rng));
            t = Point2D::new(t.x + noise.sample(&mut rng), t.y + noise.sample(&mut rng));
            if cfg.keypoint_outlier_rate > 0.0 && rng.random_bool(cfg.keypoint_outlier_rate) {
                outliers += 1;
                t = Point2D::new(rng.random_range(0.0..d), rng.random_range(0.0..d));
            }
            Correspondence::new(src, t)
        })
        .collect();
    if outliers > 0 {
        log.push(Perturbation::KeypointOutliers {
            source,
            target,
            count: outliers,
        });
    }
    if cfg.failed_pairs.contains(&(source, target)) {
        let mut rng = rng_for(cfg.seed, STREAM_CORRUPTION, source as u64);
        let (r0, r1) = cfg.corruption_rotation_deg;
        let (s0, s1) = cfg.corruption_shift;
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let rotation_deg = sign * rng.random_range(r0..=r1);
        let magnitude = rng.random_range(s0..=s1);
        let dir = rng.random_range(0.0..2.0 * PI);
        let shift = [magnitude * dir.cos(), magnitude * dir.sin()];
        let c = d / 2.0;
        let corruption = AffineTransform2D::translation(c + shift[0], c + shift[1])
            .compose(&AffineTransform2D::rotation(rotation_deg.to_radians()))
            .compose(&AffineTransform2D::translation(-c, -c));
        for k in corr.iter_mut() {
            k.target = corruption.apply(k.target);
        }
        log.push(Perturbation::CorruptedPair {
            source,
            target,
            rotation_deg,
            shift,
        });
    }
    Ok((corr, log))
}

/// Generates a detection stack and its ground truth. Output depends only on
/// `cfg` (including its seed).
pub fn generate(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let objects = place_objects(cfg)?;
    let mut perturbations = Vec::new();
    let mut warps = Vec::with_capacity(cfg.sections);
    for t in 0..cfg.sections {
        let (w, log) = section_warp(cfg, t)?;
        warps.push(w);
        perturbations.push(log);
    }

    let mut gt_dets = Vec::new();
    let mut detections = Vec::with_capacity(cfg.sections);
    let mut detection_objects = Vec::with_capacity(cfg.sections);
    for (t, warp) in warps.iter().enumerate() {
        let draw = draw_section(cfg, t, &objects, warp);
        gt_dets.extend(draw.gt);
        detections.push(draw.detections);
        detection_objects.push(draw.objects);
        perturbations.extend(draw.log);
    }

    let mut correspondences = BTreeMap::new();
    for s in 0..cfg.sections {
        for t in [s + 1, s + 2] {
            if t < cfg.sections {
                let (corr, log) = draw_correspondences(cfg, s, t, &warps)?;
                correspondences.insert(pair_key(s, t), corr);
                perturbations.extend(log);
            }
        }
    }

    let gt_tracks = TrackSet::from_detections(gt_dets).expect("ids are object indices");
    Ok(SimOutput {
        detections,
        truth: SimTruth {
            config: cfg.clone(),
            objects,
            warps,
            gt_tracks,
            detection_objects,
            correspondences,
            perturbations,
        },
    })
}
