//! Cycle-consistent registration failure identification.
//!
//! Boxes of section `t` are carried `t -> t+1 -> t+2` with the two adjacent
//! transforms and back `t+2 -> t` with the inverse of the interleave
//! transform. A cycle fails when the median IoU between each box and its
//! cycled polygon drops below `q`.
//!
//! A single bad adjacent registration `t -> t+1` breaks both cycles that use
//! it (`t-1` and `t`), so per-pair flags are derived from per-cycle flags by
//! [`localize_pair_flags`]: a pair is flagged when every determinate cycle
//! containing it failed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{box_to_polygon, iou_polygon, BBox, ConvexPolygon, Point2D};
use crate::transform::{Direction, PairKind, PairTransform, TransformError};

/// Failed-cycle threshold.
pub const DEFAULT_Q: f64 = 0.1;
/// Shift used to calibrate `q`, about one glomerular diameter.
pub const CALIBRATION_SHIFT: f64 = 70.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QaError {
    #[error("cycle sections do not chain: f_t {0}->{1}, f_t1 {2}->{3}, b_t {4}->{5}")]
    BrokenChain(usize, usize, usize, usize, usize, usize),
    #[error("missing {kind:?} transform starting at section {t}")]
    MissingTransform { kind: PairKind, t: usize },
    #[error("series needs at least 3 sections for a cycle, got {0}")]
    TooFewSections(usize),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

#[derive(Debug, Clone, Copy)]
pub struct CycleTriplet<'a> {
    f_t: &'a PairTransform,
    f_t1: &'a PairTransform,
    b_t: &'a PairTransform,
}

impl<'a> CycleTriplet<'a> {
    pub fn new(f_t: &'a PairTransform, f_t1: &'a PairTransform, b_t: &'a PairTransform) -> Result<Self, QaError> {
        let chained = f_t.kind() == PairKind::ForwardAdjacent
            && f_t1.kind() == PairKind::ForwardAdjacent
            && b_t.kind() == PairKind::BackwardInterleave
            && f_t.target() == f_t1.source()
            && b_t.source() == f_t.source()
            && b_t.target() == f_t1.target();
        if !chained {
            return Err(QaError::BrokenChain(
                f_t.source(),
                f_t.target(),
                f_t1.source(),
                f_t1.target(),
                b_t.source(),
                b_t.target(),
            ));
        }
        Ok(Self { f_t, f_t1, b_t })
    }

    pub fn section(&self) -> usize {
        self.f_t.source()
    }

    pub fn map_point(&self, p: Point2D) -> Point2D {
        let p = self.f_t.map_point(p, Direction::Forward);
        let p = self.f_t1.map_point(p, Direction::Forward);
        self.b_t.map_point(p, Direction::Inverse)
    }
}

pub fn cycle_map_box(tr: &CycleTriplet<'_>, b: &BBox) -> Result<ConvexPolygon, TransformError> {
    let corners = b.corners().map(|c| tr.map_point(c));
    Ok(ConvexPolygon::hull(&corners)?)
}

mod fc_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("fc must be 0 or 1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub t: usize,
    pub median_iou: f64,
    #[serde(with = "fc_int")]
    pub fc: bool,
    /// No boxes on section `t`; reported as failed.
    #[serde(default)]
    pub indeterminate: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_box_iou: Vec<f64>,
}

/// Lower-middle element for even counts. `None` for an empty slice.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

pub fn fc_score(boxes: &[BBox], tr: &CycleTriplet<'_>, q: f64) -> Result<CycleReport, TransformError> {
    let t = tr.section();
    if boxes.is_empty() {
        return Ok(CycleReport {
            t,
            median_iou: 0.0,
            fc: true,
            indeterminate: true,
            per_box_iou: Vec::new(),
        });
    }
    let per_box_iou = boxes
        .iter()
        .map(|b| Ok(iou_polygon(&box_to_polygon(b), &cycle_map_box(tr, b)?)))
        .collect::<Result<Vec<f64>, TransformError>>()?;
    let median_iou = lower_median(&per_box_iou).unwrap_or(0.0);
    Ok(CycleReport {
        t,
        median_iou,
        fc: median_iou < q,
        indeterminate: false,
        per_box_iou,
    })
}

/// Median IoU between each box and a copy shifted by `shift_magnitude` in a
/// uniformly random direction, pooled over `trials` rounds.
pub fn calibrate_q(boxes: &[BBox], shift_magnitude: f64, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ious = Vec::with_capacity(boxes.len() * trials);
    for _ in 0..trials {
        for b in boxes {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let shifted = b.translate(shift_magnitude * theta.cos(), shift_magnitude * theta.sin());
            ious.push(crate::geometry::iou_box(b, &shifted));
        }
    }
    lower_median(&ious).unwrap_or(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityClass {
    Good,
    Acceptable,
    Bad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesQuality {
    pub class: QualityClass,
    pub fc_flags: Vec<bool>,
    /// Lengths of maximal runs of consecutive failed pairs, in order.
    pub failing_runs: Vec<usize>,
}

/// Good when nothing failed, Bad when two or more consecutive pairs failed,
/// Acceptable when every failure is isolated.
pub fn classify_series(fc_flags: &[bool]) -> SeriesQuality {
    let mut failing_runs = Vec::new();
    let mut run = 0;
    for &f in fc_flags {
        if f {
            run += 1;
        } else if run > 0 {
            failing_runs.push(run);
            run = 0;
        }
    }
    if run > 0 {
        failing_runs.push(run);
    }
    let class = if failing_runs.is_empty() {
        QualityClass::Good
    } else if failing_runs.iter().any(|&r| r >= 2) {
        QualityClass::Bad
    } else {
        QualityClass::Acceptable
    };
    SeriesQuality {
        class,
        fc_flags: fc_flags.to_vec(),
        failing_runs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFlag {
    /// Adjacent pair `(t, t+1)`.
    pub t: usize,
    /// Best median IoU among the determinate cycles containing the pair.
    pub median_iou: Option<f64>,
    #[serde(with = "fc_int")]
    pub fc: bool,
}

/// Pair `(t, t+1)` lies in cycles `t-1` and `t` (only `0` for the first pair,
/// only `T-3` for the last). It is flagged when at least one containing cycle
/// is determinate and all determinate containing cycles failed.
///
/// An end pair whose single failed cycle is already explained by its
/// neighbour (flagged on two failed cycles) is not flagged.
pub fn localize_pair_flags(cycles: &[CycleReport], section_count: usize) -> Vec<PairFlag> {
    let by_t: BTreeMap<usize, &CycleReport> = cycles.iter().map(|c| (c.t, c)).collect();
    let determinate = |t: usize| -> Vec<&CycleReport> {
        [t.checked_sub(1), Some(t)]
            .into_iter()
            .flatten()
            .filter_map(|c| by_t.get(&c).copied())
            .filter(|c| !c.indeterminate)
            .collect()
    };
    let pair_count = section_count.saturating_sub(1);
    let mut flags: Vec<PairFlag> = (0..pair_count)
        .map(|t| {
            let cs = determinate(t);
            PairFlag {
                t,
                median_iou: cs.iter().map(|c| c.median_iou).reduce(f64::max),
                fc: !cs.is_empty() && cs.iter().all(|c| c.fc),
            }
        })
        .collect();
    let doubly_failed = |t: usize| {
        let cs = determinate(t);
        cs.len() == 2 && cs.iter().all(|c| c.fc)
    };
    if pair_count >= 3 {
        for (end, neighbour) in [(0, 1), (pair_count - 1, pair_count - 2)] {
            if flags[end].fc && determinate(end).len() == 1 && doubly_failed(neighbour) {
                flags[end].fc = false;
            }
        }
    }
    flags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub q: f64,
    pub series_class: QualityClass,
    pub pairs: Vec<PairFlag>,
    pub cycles: Vec<CycleReport>,
    pub failing_runs: Vec<usize>,
}

impl QaReport {
    pub fn pair_fc(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.fc).collect()
    }

    /// Whether the interleave transform `t -> t+2` may be used, i.e. its
    /// cycle did not fail.
    pub fn interleave_usable(&self) -> Vec<bool> {
        let mut out = vec![true; self.pairs.len().saturating_sub(1)];
        for c in &self.cycles {
            if let Some(slot) = out.get_mut(c.t) {
                *slot = !c.fc || c.indeterminate;
            }
        }
        out
    }
}

fn lookup(map: &BTreeMap<usize, PairTransform>, t: usize, kind: PairKind) -> Result<&PairTransform, QaError> {
    map.get(&t).ok_or(QaError::MissingTransform { kind, t })
}

/// Scores every complete cycle of a series and classifies it.
///
/// `boxes[t]` are the detection boxes on section `t`; `adjacent[t]` maps
/// `t -> t+1` and `interleave[t]` maps `t -> t+2`.
pub fn assess_series(
    boxes: &[Vec<BBox>],
    adjacent: &BTreeMap<usize, PairTransform>,
    interleave: &BTreeMap<usize, PairTransform>,
    q: f64,
) -> Result<QaReport, QaError> {
    let section_count = boxes.len();
    if section_count < 3 {
        return Err(QaError::TooFewSections(section_count));
    }
    let cycles = (0..section_count - 2)
        .into_par_iter()
        .map(|t| {
            let f_t = lookup(adjacent, t, PairKind::ForwardAdjacent)?;
            let f_t1 = lookup(adjacent, t + 1, PairKind::ForwardAdjacent)?;
            let b_t = lookup(interleave, t, PairKind::BackwardInterleave)?;
            let triplet = CycleTriplet::new(f_t, f_t1, b_t)?;
            Ok(fc_score(&boxes[t], &triplet, q)?)
        })
        .collect::<Result<Vec<CycleReport>, QaError>>()?;
    let pairs = localize_pair_flags(&cycles, section_count);
    let quality = classify_series(&pairs.iter().map(|p| p.fc).collect::<Vec<_>>());
    Ok(QaReport {
        q,
        series_class: quality.class,
        pairs,
        cycles,
        failing_runs: quality.failing_runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::AffineTransform2D;

    fn shift(source: usize, target: usize, dx: f64, dy: f64) -> PairTransform {
        PairTransform::affine_only(source, target, AffineTransform2D::translation(dx, dy)).unwrap()
    }

    fn square(x: f64, y: f64, side: f64) -> BBox {
        BBox::new(x, y, x + side, y + side).unwrap()
    }

    #[test]
    fn identity_cycle() {
        let (f0, f1, b0) = (shift(0, 1, 0., 0.), shift(1, 2, 0., 0.), shift(0, 2, 0., 0.));
        let tr = CycleTriplet::new(&f0, &f1, &b0).unwrap();
        let b = square(10., 20., 87.);
        let poly = cycle_map_box(&tr, &b).unwrap();
        assert_eq!(poly, box_to_polygon(&b));
        let r = fc_score(&[b, square(300., 300., 50.)], &tr, DEFAULT_Q).unwrap();
        assert_eq!(r.median_iou, 1.0);
        assert!(!r.fc);
    }

    #[test]
    fn translations_cancel() {
        let (f0, f1, b0) = (shift(3, 4, 5., -2.), shift(4, 5, -1., 7.), shift(3, 5, 4., 5.));
        let tr = CycleTriplet::new(&f0, &f1, &b0).unwrap();
        let b = square(0., 0., 87.);
        let r = fc_score(&[b], &tr, DEFAULT_Q).unwrap();
        assert!((r.median_iou - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_cycle_error_fails() {
        let (f0, f1, b0) = (shift(0, 1, 5., 0.), shift(1, 2, 3., 0.), shift(0, 2, 208., 0.));
        let tr = CycleTriplet::new(&f0, &f1, &b0).unwrap();
        let boxes = [square(0., 0., 87.), square(500., 0., 87.), square(0., 500., 87.)];
        let poly = cycle_map_box(&tr, &boxes[0]).unwrap();
        assert_eq!(iou_polygon(&poly, &box_to_polygon(&boxes[0])), 0.0);
        let r = fc_score(&boxes, &tr, DEFAULT_Q).unwrap();
        assert_eq!(r.median_iou, 0.0);
        assert!(r.fc);
    }

    #[test]
    fn broken_chain_rejected() {
        let (f0, f1, b0) = (shift(0, 1, 0., 0.), shift(2, 3, 0., 0.), shift(0, 2, 0., 0.));
        assert!(matches!(CycleTriplet::new(&f0, &f1, &b0), Err(QaError::BrokenChain(..))));
    }

    #[test]
    fn empty_section_is_indeterminate() {
        let (f0, f1, b0) = (shift(0, 1, 0., 0.), shift(1, 2, 0., 0.), shift(0, 2, 0., 0.));
        let tr = CycleTriplet::new(&f0, &f1, &b0).unwrap();
        let r = fc_score(&[], &tr, DEFAULT_Q).unwrap();
        assert!(r.fc && r.indeterminate);
    }

    #[test]
    fn lower_median_even_count() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&[5.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(lower_median(&[]), None);
    }

    #[test]
    fn calibration_examples() {
        let boxes: Vec<BBox> = (0..20).map(|i| square(i as f64 * 300.0, 0.0, 87.0)).collect();
        assert_eq!(calibrate_q(&boxes, 0.0, 5, 1), 1.0);
        // Axis-aligned 70-unit shift of an 87-unit square.
        let axis = crate::geometry::iou_box(&boxes[0], &boxes[0].translate(70.0, 0.0));
        assert!((axis - 17.0 * 87.0 / (2.0 * 87.0 * 87.0 - 17.0 * 87.0)).abs() < 1e-12);
        assert!((axis - 0.108).abs() < 1e-3);
        let mut last = f64::INFINITY;
        for s in [0.0, 35.0, 70.0, 140.0] {
            let v = calibrate_q(&boxes, s, 20, 7);
            assert!(v <= last, "{s}: {v} > {last}");
            last = v;
        }
    }

    #[test]
    fn classification_rule() {
        assert_eq!(classify_series(&[false; 4]).class, QualityClass::Good);
        let flags = [false, true, false, false, true, false];
        let q = classify_series(&flags);
        assert_eq!(q.class, QualityClass::Acceptable);
        assert_eq!(q.failing_runs, vec![1, 1]);
        let q = classify_series(&[false, true, true, false]);
        assert_eq!(q.class, QualityClass::Bad);
        assert_eq!(q.failing_runs, vec![2]);
        assert_eq!(classify_series(&[true]).class, QualityClass::Acceptable);
    }

    fn cycle(t: usize, median: f64) -> CycleReport {
        CycleReport {
            t,
            median_iou: median,
            fc: median < DEFAULT_Q,
            indeterminate: false,
            per_box_iou: vec![],
        }
    }

    #[test]
    fn localization_isolates_one_bad_adjacent_pair() {
        // 7 sections, cycles 0..=4; bad adjacent pair (2,3) breaks cycles 1 and 2.
        let cycles: Vec<CycleReport> = [0.9, 0.0, 0.01, 0.8, 0.95].iter().enumerate().map(|(t, &m)| cycle(t, m)).collect();
        let flags: Vec<bool> = localize_pair_flags(&cycles, 7).iter().map(|p| p.fc).collect();
        assert_eq!(flags, vec![false, false, true, false, false, false]);
        // First and last pair belong to a single cycle.
        let cycles: Vec<CycleReport> = [0.0, 0.9, 0.9, 0.9, 0.0].iter().enumerate().map(|(t, &m)| cycle(t, m)).collect();
        let flags: Vec<bool> = localize_pair_flags(&cycles, 7).iter().map(|p| p.fc).collect();
        assert_eq!(flags, vec![true, false, false, false, false, true]);
    }

    #[test]
    fn end_pair_explained_by_neighbour() {
        // Bad pair (1,2) breaks cycles 0 and 1; pair (0,1) sits only in cycle 0.
        let cycles: Vec<CycleReport> = [0.0, 0.0, 0.9, 0.9, 0.9].iter().enumerate().map(|(t, &m)| cycle(t, m)).collect();
        let flags: Vec<bool> = localize_pair_flags(&cycles, 7).iter().map(|p| p.fc).collect();
        assert_eq!(flags, vec![false, true, false, false, false, false]);
        let cycles: Vec<CycleReport> = [0.9, 0.9, 0.9, 0.0, 0.0].iter().enumerate().map(|(t, &m)| cycle(t, m)).collect();
        let flags: Vec<bool> = localize_pair_flags(&cycles, 7).iter().map(|p| p.fc).collect();
        assert_eq!(flags, vec![false, false, false, false, true, false]);
    }

    #[test]
    fn localization_ignores_indeterminate_cycles() {
        let mut cycles: Vec<CycleReport> = (0..5).map(|t| cycle(t, 0.9)).collect();
        cycles[2] = CycleReport {
            indeterminate: true,
            fc: true,
            median_iou: 0.0,
            ..cycle(2, 0.0)
        };
        let flags = localize_pair_flags(&cycles, 7);
        assert!(flags.iter().all(|p| !p.fc));
        assert_eq!(flags[2].median_iou, Some(0.9));
    }

    #[test]
    fn qa_report_json_shape() {
        let boxes = vec![vec![square(0., 0., 87.)]; 4];
        let adjacent: BTreeMap<usize, PairTransform> = (0..3).map(|t| (t, shift(t, t + 1, 0., 0.))).collect();
        let interleave: BTreeMap<usize, PairTransform> = (0..2).map(|t| (t, shift(t, t + 2, 0., 0.))).collect();
        let report = assess_series(&boxes, &adjacent, &interleave, DEFAULT_Q).unwrap();
        assert_eq!(report.series_class, QualityClass::Good);
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["series_class"], "Good");
        assert_eq!(json["pairs"][0]["fc"], 0);
        assert_eq!(json["q"], 0.1);
        let missing: BTreeMap<usize, PairTransform> = BTreeMap::new();
        assert!(matches!(
            assess_series(&boxes, &adjacent, &missing, DEFAULT_Q),
            Err(QaError::MissingTransform { .. })
        ));
    }
}
