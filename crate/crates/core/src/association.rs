//! Dual-path association of detections into cross-section tracks.
//!
//! Section `t+1` is linked to section `t` through the adjacent transform.
//! Detections of `t+1` left unlinked are then offered to section `t-1`
//! through the interleave transform `t-1 -> t+1`. When the QA flags
//! the adjacent pair `(t, t+1)` as failed, section `t+1` is skipped and
//! section `t+2` is linked to `t` directly through the interleave transform.

use std::collections::{BTreeMap, BTreeSet};

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{box_to_polygon, iou_circle, iou_polygon, BBox, Circle};
use crate::mot_metrics::hungarian;
use crate::transform::{Direction, PairKind, PairTransform, TransformError};

/// Linking IoU threshold.
pub const DEFAULT_S: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("missing {kind:?} transform starting at section {t}")]
    MissingTransform { kind: PairKind, t: usize },
    #[error("inconsistent stack: {0}")]
    InconsistentStack(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    Box(BBox),
    Circle(Circle),
}

impl Shape {
    pub fn bounding_box(&self) -> BBox {
        match self {
            Shape::Box(b) => *b,
            Shape::Circle(c) => c.bounding_box(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeMode {
    #[default]
    Box,
    Circle,
}

impl std::str::FromStr for ShapeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "box" => Ok(ShapeMode::Box),
            "circle" => Ok(ShapeMode::Circle),
            other => Err(format!("unknown shape mode '{other}' (expected box or circle)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub section: usize,
    pub shape: Shape,
    pub score: Option<f64>,
    pub track_id: Option<u64>,
}

impl Detection {
    pub fn new(section: usize, shape: Shape) -> Self {
        Self {
            section,
            shape,
            score: None,
            track_id: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    /// Re-expresses a box detection in the requested shape mode.
    pub fn in_mode(&self, mode: ShapeMode) -> Detection {
        let shape = match (mode, self.shape) {
            (ShapeMode::Box, s) => Shape::Box(s.bounding_box()),
            (ShapeMode::Circle, Shape::Box(b)) => Shape::Circle(Circle::inscribed(&b)),
            (ShapeMode::Circle, s @ Shape::Circle(_)) => s,
        };
        Detection { shape, ..self.clone() }
    }
}

/// IoU between detections of an earlier (rows) and a later (cols) section.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl AffinityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged affinity rows");
        Self {
            rows: r,
            cols: c,
            values: rows.into_iter().flatten().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// Maps every late detection into the early section through `tr`'s inverse and
/// scores it against every early detection.
pub fn pair_affinity(
    early: &[Detection],
    late: &[Detection],
    tr: &PairTransform,
) -> Result<AffinityMatrix, AssociationError> {
    enum Mapped {
        Poly(crate::geometry::ConvexPolygon),
        Circle(Circle),
    }
    let pulled: Vec<Mapped> = late
        .iter()
        .map(|d| match d.shape {
            Shape::Box(b) => tr.map_box(&b, Direction::Inverse).map(Mapped::Poly),
            Shape::Circle(c) => tr.map_circle(&c, Direction::Inverse).map(Mapped::Circle),
        })
        .collect::<Result<_, _>>()?;
    let mut values = Vec::with_capacity(early.len() * late.len());
    for e in early {
        let early_poly = match e.shape {
            Shape::Box(b) => Some(box_to_polygon(&b)),
            Shape::Circle(_) => None,
        };
        for (l, m) in late.iter().zip(&pulled) {
            let v = match (&e.shape, m, &early_poly) {
                (_, Mapped::Poly(p), Some(ep)) => iou_polygon(ep, p),
                (Shape::Circle(c), Mapped::Circle(mc), _) => iou_circle(c, mc),
                _ => {
                    return Err(AssociationError::InconsistentStack(format!(
                        "mixed shape kinds between sections {} and {}",
                        e.section, l.section
                    )))
                }
            };
            values.push(v);
        }
    }
    Ok(AffinityMatrix {
        rows: early.len(),
        cols: late.len(),
        values,
    })
}

/// Repeatedly links the globally largest remaining affinity above `s`; ties
/// are broken by `(row, col)` order.
pub fn greedy_match(aff: &AffinityMatrix, s: f64) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = (0..aff.rows)
        .flat_map(|r| (0..aff.cols).map(move |c| (r, c)))
        .map(|(r, c)| (aff.get(r, c), r, c))
        .filter(|(v, _, _)| *v > s)
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_rows = vec![false; aff.rows];
    let mut used_cols = vec![false; aff.cols];
    let mut out = Vec::new();
    for (_, r, c) in candidates {
        if !used_rows[r] && !used_cols[c] {
            used_rows[r] = true;
            used_cols[c] = true;
            out.push((r, c));
        }
    }
    out
}

/// Assignment-optimal linking (maximum total IoU) restricted to pairs above
/// `s`. Ablation alternative to [`greedy_match`].
pub fn optimal_match(aff: &AffinityMatrix, s: f64) -> Vec<(usize, usize)> {
    if aff.rows == 0 || aff.cols == 0 {
        return Vec::new();
    }
    let cost: Vec<Vec<f64>> = (0..aff.rows)
        .map(|r| {
            (0..aff.cols)
                .map(|c| {
                    let v = aff.get(r, c);
                    if v > s {
                        1.0 - v
                    } else {
                        // Never preferred over any admissible pair.
                        2.0
                    }
                })
                .collect()
        })
        .collect();
    let mut out: Vec<(usize, usize)> = hungarian(&cost)
        .into_iter()
        .filter(|&(r, c)| aff.get(r, c) > s)
        .collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkingStrategy {
    #[default]
    Greedy,
    Optimal,
}

impl LinkingStrategy {
    fn link(&self, aff: &AffinityMatrix, s: f64) -> Vec<(usize, usize)> {
        match self {
            LinkingStrategy::Greedy => greedy_match(aff, s),
            LinkingStrategy::Optimal => optimal_match(aff, s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpaParams {
    pub s_threshold: f64,
    pub strategy: LinkingStrategy,
}

impl Default for DpaParams {
    fn default() -> Self {
        Self {
            s_threshold: DEFAULT_S,
            strategy: LinkingStrategy::Greedy,
        }
    }
}

/// Adjacent (`t -> t+1`) and interleave (`t -> t+2`) transforms keyed by `t`.
#[derive(Debug, Clone, Default)]
pub struct TransformSet {
    pub adjacent: BTreeMap<usize, PairTransform>,
    pub interleave: BTreeMap<usize, PairTransform>,
}

impl TransformSet {
    pub fn insert(&mut self, tr: PairTransform) {
        match tr.kind() {
            PairKind::ForwardAdjacent => self.adjacent.insert(tr.source(), tr),
            PairKind::BackwardInterleave => self.interleave.insert(tr.source(), tr),
        };
    }

    fn adjacent(&self, t: usize) -> Result<&PairTransform, AssociationError> {
        self.adjacent.get(&t).ok_or(AssociationError::MissingTransform {
            kind: PairKind::ForwardAdjacent,
            t,
        })
    }

    fn interleave(&self, t: usize) -> Result<&PairTransform, AssociationError> {
        self.interleave.get(&t).ok_or(AssociationError::MissingTransform {
            kind: PairKind::BackwardInterleave,
            t,
        })
    }
}

/// Per-pair QA outcome consumed by [`dpa_track`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairFlags {
    /// `failed[t]`: registration `t -> t+1` failed.
    pub failed: Vec<bool>,
    /// `interleave_usable[t]`: `t -> t+2` may serve the second path.
    pub interleave_usable: Vec<bool>,
}

impl PairFlags {
    pub fn all_good(section_count: usize) -> Self {
        Self {
            failed: vec![false; section_count.saturating_sub(1)],
            interleave_usable: vec![true; section_count.saturating_sub(2)],
        }
    }

    pub fn from_report(report: &crate::cycle_qa::QaReport) -> Self {
        Self {
            failed: report.pair_fc(),
            interleave_usable: report.interleave_usable(),
        }
    }
}

/// Detections grouped by track id; each track is ordered by section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackSet {
    pub tracks: BTreeMap<u64, Vec<Detection>>,
}

impl TrackSet {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn detection_count(&self) -> usize {
        self.tracks.values().map(Vec::len).sum()
    }

    /// Builds a track set from detections that already carry ids.
    pub fn from_detections(dets: impl IntoIterator<Item = Detection>) -> Result<Self, AssociationError> {
        let mut tracks: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
        for d in dets {
            let id = d.track_id.ok_or_else(|| {
                AssociationError::InconsistentStack(format!("detection on section {} has no track id", d.section))
            })?;
            tracks.entry(id).or_default().push(d);
        }
        for (id, t) in tracks.iter_mut() {
            t.sort_by_key(|d| d.section);
            if t.windows(2).any(|w| w[0].section == w[1].section) {
                return Err(AssociationError::InconsistentStack(format!(
                    "track {id} has two detections on one section"
                )));
            }
        }
        Ok(Self { tracks })
    }
}

struct IdState {
    ids: Vec<Vec<Option<u64>>>,
    next: u64,
}

impl IdState {
    fn fresh(&mut self, section: usize) {
        for slot in self.ids[section].iter_mut().filter(|s| s.is_none()) {
            *slot = Some(self.next);
            self.next += 1;
        }
    }

    /// Links `to` detections from `from` detections, restricted to
    /// unassigned `to` detections and ids not already present on `to`.
    fn link(
        &mut self,
        stack: &[Vec<Detection>],
        from: usize,
        to: usize,
        tr: &PairTransform,
        params: &DpaParams,
        only_unassigned: bool,
    ) -> Result<usize, AssociationError> {
        let taken: BTreeSet<u64> = self.ids[to].iter().flatten().copied().collect();
        let rows: Vec<usize> = (0..stack[from].len())
            .filter(|&r| self.ids[from][r].is_some_and(|id| !taken.contains(&id)))
            .collect();
        let cols: Vec<usize> = (0..stack[to].len())
            .filter(|&c| !only_unassigned || self.ids[to][c].is_none())
            .collect();
        if rows.is_empty() || cols.is_empty() {
            return Ok(0);
        }
        let early: Vec<Detection> = rows.iter().map(|&r| stack[from][r].clone()).collect();
        let late: Vec<Detection> = cols.iter().map(|&c| stack[to][c].clone()).collect();
        let aff = pair_affinity(&early, &late, tr)?;
        let matches = params.strategy.link(&aff, params.s_threshold);
        for &(r, c) in &matches {
            self.ids[to][cols[c]] = self.ids[from][rows[r]];
        }
        Ok(matches.len())
    }
}

/// Global track id of every detection, `ids[t][i]` for `stack[t][i]`.
///
/// `stack[t]` holds the detections of section `t`. Detections on a section
/// skipped because of a failed pair get fresh singleton ids.
pub fn dpa_assign(
    stack: &[Vec<Detection>],
    transforms: &TransformSet,
    flags: &PairFlags,
    params: &DpaParams,
) -> Result<Vec<Vec<u64>>, AssociationError> {
    for (t, dets) in stack.iter().enumerate() {
        if let Some(d) = dets.iter().find(|d| d.section != t) {
            return Err(AssociationError::InconsistentStack(format!(
                "detection tagged with section {} stored at position {t}",
                d.section
            )));
        }
    }
    let n = stack.len();
    let mut state = IdState {
        ids: stack.iter().map(|s| vec![None; s.len()]).collect(),
        next: 1,
    };
    if n == 0 {
        return Ok(Vec::new());
    }
    state.fresh(0);

    let mut t = 0;
    while t + 1 < n {
        let failed = flags.failed.get(t).copied().unwrap_or(false);
        if !failed {
            state.link(stack, t, t + 1, transforms.adjacent(t)?, params, false)?;
            if t >= 1 {
                let usable = flags.interleave_usable.get(t - 1).copied().unwrap_or(true);
                match transforms.interleave.get(&(t - 1)) {
                    Some(tr) if usable => {
                        let linked = state.link(stack, t - 1, t + 1, tr, params, true)?;
                        if linked > 0 {
                            debug!("second path linked {linked} detections {}->{}", t - 1, t + 1);
                        }
                    }
                    _ => debug!("second path {}->{} skipped", t - 1, t + 1),
                }
            }
            state.fresh(t + 1);
            t += 1;
        } else if t + 2 < n {
            state.fresh(t + 1);
            state.link(stack, t, t + 2, transforms.interleave(t)?, params, false)?;
            state.fresh(t + 2);
            t += 2;
        } else {
            state.fresh(t + 1);
            t += 1;
        }
    }

    Ok(state
        .ids
        .into_iter()
        .map(|ids| ids.into_iter().map(|id| id.expect("every section is visited")).collect())
        .collect())
}

/// Runs [`dpa_assign`] and groups the detections into tracks.
pub fn dpa_track(
    stack: &[Vec<Detection>],
    transforms: &TransformSet,
    flags: &PairFlags,
    params: &DpaParams,
) -> Result<TrackSet, AssociationError> {
    let ids = dpa_assign(stack, transforms, flags, params)?;
    TrackSet::from_detections(with_ids(stack, &ids))
}

/// Copies of `stack`'s detections tagged with `ids`.
pub fn with_ids<'a>(stack: &'a [Vec<Detection>], ids: &'a [Vec<u64>]) -> impl Iterator<Item = Detection> + 'a {
    stack.iter().zip(ids).flat_map(|(dets, ids)| {
        dets.iter().zip(ids).map(|(d, &id)| Detection {
            track_id: Some(id),
            ..d.clone()
        })
    })
}

/// One MOT15 row for every tracked detection, ordered by frame then id.
pub fn tracks_to_mot(ts: &TrackSet) -> Vec<crate::mot_metrics::MotRecord> {
    let mut out: Vec<crate::mot_metrics::MotRecord> = ts
        .tracks
        .iter()
        .flat_map(|(&id, dets)| {
            dets.iter().map(move |d| {
                let b = d.shape.bounding_box();
                crate::mot_metrics::MotRecord::new(
                    d.section as u32 + 1,
                    id as i64,
                    b.x_min(),
                    b.y_min(),
                    b.width(),
                    b.height(),
                    d.score.unwrap_or(1.0),
                )
            })
        })
        .collect();
    out.sort_by(|a, b| a.frame.cmp(&b.frame).then(a.id.cmp(&b.id)));
    out
}
