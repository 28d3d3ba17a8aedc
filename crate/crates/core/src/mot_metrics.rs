//! MOT15 text format, CLEAR-MOT and identity metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_box, BBox};

/// Default frame-level match threshold.
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: non-positive box size")]
    NonPositiveSize { line: usize },
    #[error("frame {frame}: id {id} appears twice")]
    DuplicateId { frame: u32, id: i64 },
    #[error("hypothesis frame {frame} outside ground-truth range 1..={max}")]
    FrameMismatch { frame: u32, max: u32 },
}

/// One row of a MOT15 file, kept verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotRecord {
    pub frame: u32,
    pub id: i64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub conf: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MotRecord {
    pub fn new(frame: u32, id: i64, left: f64, top: f64, width: f64, height: f64, conf: f64) -> Self {
        Self {
            frame,
            id,
            left,
            top,
            width,
            height,
            conf,
            x: -1.0,
            y: -1.0,
            z: -1.0,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_ltwh(self.left, self.top, self.width, self.height).expect("validated on parse")
    }
}

impl fmt::Display for MotRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            self.frame, self.id, self.left, self.top, self.width, self.height, self.conf, self.x, self.y, self.z
        )
    }
}

fn parse_line(line_no: usize, line: &str) -> Result<MotRecord, MotError> {
    let malformed = |reason: String| MotError::MalformedLine { line: line_no, reason };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if !(7..=10).contains(&fields.len()) {
        return Err(malformed(format!("expected 7 to 10 fields, found {}", fields.len())));
    }
    let num = |i: usize, name: &str| -> Result<f64, MotError> {
        match fields.get(i) {
            None => Ok(-1.0),
            Some(s) => match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(malformed(format!("{name} is not a finite number: '{s}'"))),
            },
        }
    };
    let frame = fields[0]
        .parse::<u32>()
        .ok()
        .filter(|&f| f >= 1)
        .ok_or_else(|| malformed(format!("frame must be a positive integer: '{}'", fields[0])))?;
    let id = fields[1]
        .parse::<i64>()
        .map_err(|_| malformed(format!("id must be an integer: '{}'", fields[1])))?;
    let rec = MotRecord {
        frame,
        id,
        left: num(2, "bb_left")?,
        top: num(3, "bb_top")?,
        width: num(4, "bb_width")?,
        height: num(5, "bb_height")?,
        conf: num(6, "conf")?,
        x: num(7, "x")?,
        y: num(8, "y")?,
        z: num(9, "z")?,
    };
    if rec.width <= 0.0 || rec.height <= 0.0 {
        return Err(MotError::NonPositiveSize { line: line_no });
    }
    Ok(rec)
}

/// Parses MOT15 rows. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_mot15(text: &str) -> Result<Vec<MotRecord>, MotError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(i + 1, l))
        .collect()
}

pub fn write_mot15(records: &[MotRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 48);
    for r in records {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

/// Per-frame `(id, box)` lists, frames numbered from 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameSet {
    frames: BTreeMap<u32, Vec<(i64, BBox)>>,
}

impl FrameSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: &[MotRecord]) -> Result<Self, MotError> {
        let mut fs = Self::new();
        for r in records {
            fs.push(r.frame, r.id, r.bbox())?;
        }
        Ok(fs)
    }

    pub fn parse(text: &str) -> Result<Self, MotError> {
        Self::from_records(&parse_mot15(text)?)
    }

    pub fn push(&mut self, frame: u32, id: i64, b: BBox) -> Result<(), MotError> {
        assert!(frame >= 1, "frames are numbered from 1");
        let entries = self.frames.entry(frame).or_default();
        if entries.iter().any(|(i, _)| *i == id) {
            return Err(MotError::DuplicateId { frame, id });
        }
        entries.push((id, b));
        Ok(())
    }

    pub fn frame(&self, frame: u32) -> &[(i64, BBox)] {
        self.frames.get(&frame).map_or(&[], Vec::as_slice)
    }

    pub fn max_frame(&self) -> u32 {
        self.frames.keys().next_back().copied().unwrap_or(0)
    }

    pub fn box_count(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn ids(&self) -> BTreeSet<i64> {
        self.frames.values().flatten().map(|(id, _)| *id).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, i64, &BBox)> {
        self.frames.iter().flat_map(|(&f, v)| v.iter().map(move |(id, b)| (f, *id, b)))
    }

    pub fn to_records(&self) -> Vec<MotRecord> {
        self.iter()
            .map(|(f, id, b)| MotRecord::new(f, id, b.x_min(), b.y_min(), b.width(), b.height(), 1.0))
            .collect()
    }

    /// Applies `f` to every box, keeping frames and ids.
    pub fn map_boxes(&self, f: impl Fn(&BBox) -> BBox) -> Self {
        Self {
            frames: self
                .frames
                .iter()
                .map(|(&k, v)| (k, v.iter().map(|(id, b)| (*id, f(b))).collect()))
                .collect(),
        }
    }

    /// Applies `f` to every id; `f` must be injective.
    pub fn map_ids(&self, f: impl Fn(i64) -> i64) -> Self {
        Self {
            frames: self
                .frames
                .iter()
                .map(|(&k, v)| (k, v.iter().map(|(id, b)| (f(*id), *b)).collect()))
                .collect(),
        }
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs, returned sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        let mut out: Vec<(usize, usize)> = hungarian(&t).into_iter().map(|(c, r)| (r, c)).collect();
        out.sort_unstable();
        return out;
    }
    // Potentials formulation, rows <= cols, 1-based with a virtual column 0.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    out.sort_unstable();
    out
}

/// CLEAR-MOT counts and the scores derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearMot {
    pub frames: u32,
    pub gt_boxes: u64,
    pub hyp_boxes: u64,
    pub matches: u64,
    pub fp: u64,
    pub fn_: u64,
    pub ids: u64,
    pub fm: u64,
    pub gt_tracks: u64,
    pub mt: u64,
    pub pt: u64,
    pub ml: u64,
    pub mota: f64,
    pub motp: f64,
    pub motal: f64,
    pub far: f64,
    pub rcll: f64,
    pub prcn: f64,
}

fn check_frames(gt: &FrameSet, hyp: &FrameSet) -> Result<u32, MotError> {
    let max = gt.max_frame();
    if max == 0 {
        return Ok(hyp.max_frame());
    }
    match hyp.frames.keys().next_back() {
        Some(&f) if f > max => Err(MotError::FrameMismatch { frame: f, max }),
        _ => Ok(max),
    }
}

fn pct(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        100.0 * num / den
    } else {
        0.0
    }
}

pub fn clear_mot(gt: &FrameSet, hyp: &FrameSet, match_iou: f64) -> Result<ClearMot, MotError> {
    let frames = check_frames(gt, hyp)?;
    let mut last_match: HashMap<i64, i64> = HashMap::new();
    // Per GT id: tracked flag for every frame the id is present.
    let mut history: BTreeMap<i64, Vec<bool>> = BTreeMap::new();
    let (mut matches, mut fp, mut fn_, mut ids) = (0u64, 0u64, 0u64, 0u64);
    let mut iou_sum = 0.0;

    for frame in 1..=frames {
        let g = gt.frame(frame);
        let h = hyp.frame(frame);
        let mut g_used = vec![false; g.len()];
        let mut h_used = vec![false; h.len()];
        let mut pairs: Vec<(usize, usize, f64)> = Vec::new();

        for (gi, (gid, gb)) in g.iter().enumerate() {
            let Some(&hid) = last_match.get(gid) else { continue };
            if let Some(hi) = h.iter().position(|(id, _)| *id == hid) {
                let iou = iou_box(gb, &h[hi].1);
                if !h_used[hi] && iou >= match_iou {
                    g_used[gi] = true;
                    h_used[hi] = true;
                    pairs.push((gi, hi, iou));
                }
            }
        }

        let free_g: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let free_h: Vec<usize> = (0..h.len()).filter(|&i| !h_used[i]).collect();
        if !free_g.is_empty() && !free_h.is_empty() {
            let ious: Vec<Vec<f64>> = free_g
                .iter()
                .map(|&gi| free_h.iter().map(|&hi| iou_box(&g[gi].1, &h[hi].1)).collect())
                .collect();
            let cost: Vec<Vec<f64>> = ious
                .iter()
                .map(|row| row.iter().map(|&v| if v >= match_iou { 1.0 - v } else { 2.0 }).collect())
                .collect();
            for (r, c) in hungarian(&cost) {
                if ious[r][c] >= match_iou {
                    pairs.push((free_g[r], free_h[c], ious[r][c]));
                }
            }
        }

        let mut tracked = vec![false; g.len()];
        for &(gi, hi, iou) in &pairs {
            let (gid, hid) = (g[gi].0, h[hi].0);
            if last_match.insert(gid, hid).is_some_and(|prev| prev != hid) {
                ids += 1;
            }
            tracked[gi] = true;
            iou_sum += iou;
        }
        matches += pairs.len() as u64;
        fn_ += (g.len() - pairs.len()) as u64;
        fp += (h.len() - pairs.len()) as u64;
        for (gi, (gid, _)) in g.iter().enumerate() {
            history.entry(*gid).or_default().push(tracked[gi]);
        }
    }

    let (mut mt, mut pt, mut ml, mut fm) = (0u64, 0u64, 0u64, 0u64);
    for h in history.values() {
        let ratio = h.iter().filter(|&&t| t).count() as f64 / h.len() as f64;
        if ratio >= 0.8 {
            mt += 1;
        } else if ratio <= 0.2 {
            ml += 1;
        } else {
            pt += 1;
        }
        if let (Some(first), Some(last)) = (h.iter().position(|&t| t), h.iter().rposition(|&t| t)) {
            fm += h[first..=last].windows(2).filter(|w| w[0] && !w[1]).count() as u64;
        }
    }

    let gt_boxes = gt.box_count() as u64;
    let total = gt_boxes as f64;
    let score = |errors: f64| if total > 0.0 { 100.0 * (1.0 - errors / total) } else { 0.0 };
    Ok(ClearMot {
        frames,
        gt_boxes,
        hyp_boxes: hyp.box_count() as u64,
        matches,
        fp,
        fn_,
        ids,
        fm,
        gt_tracks: history.len() as u64,
        mt,
        pt,
        ml,
        mota: score((fp + fn_ + ids) as f64),
        motp: pct(iou_sum, matches as f64),
        motal: score((fp + fn_) as f64 + ((ids + 1) as f64).log10()),
        far: if frames > 0 { fp as f64 / frames as f64 } else { 0.0 },
        rcll: pct(matches as f64, total),
        prcn: pct(matches as f64, (matches + fp) as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdMetrics {
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

/// Per identity pair, the number of frames in which both boxes overlap at
/// `match_iou` or more. Rows follow `gt.ids()`, columns `hyp.ids()`.
pub fn identity_overlap(gt: &FrameSet, hyp: &FrameSet, match_iou: f64) -> Vec<Vec<u64>> {
    let g_index: BTreeMap<i64, usize> = gt.ids().into_iter().enumerate().map(|(i, id)| (id, i)).collect();
    let h_index: BTreeMap<i64, usize> = hyp.ids().into_iter().enumerate().map(|(i, id)| (id, i)).collect();
    let mut n = vec![vec![0u64; h_index.len()]; g_index.len()];
    for (frame, g) in &gt.frames {
        for (gid, gb) in g {
            for (hid, hb) in hyp.frame(*frame) {
                if iou_box(gb, hb) >= match_iou {
                    n[g_index[gid]][h_index[hid]] += 1;
                }
            }
        }
    }
    n
}

pub fn id_metrics(gt: &FrameSet, hyp: &FrameSet, match_iou: f64) -> Result<IdMetrics, MotError> {
    check_frames(gt, hyp)?;
    let overlap = identity_overlap(gt, hyp, match_iou);
    let cost: Vec<Vec<f64>> = overlap.iter().map(|r| r.iter().map(|&v| -(v as f64)).collect()).collect();
    let idtp: u64 = hungarian(&cost).into_iter().map(|(r, c)| overlap[r][c]).sum();
    let idfn = gt.box_count() as u64 - idtp;
    let idfp = hyp.box_count() as u64 - idtp;
    Ok(IdMetrics {
        idf1: pct(2.0 * idtp as f64, (2 * idtp + idfp + idfn) as f64),
        idp: pct(idtp as f64, (idtp + idfp) as f64),
        idr: pct(idtp as f64, (idtp + idfn) as f64),
        idtp,
        idfp,
        idfn,
    })
}

/// The full score table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotScore {
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
    pub rcll: f64,
    pub prcn: f64,
    pub far: f64,
    pub gt: u64,
    pub mt: u64,
    pub pt: u64,
    pub ml: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub ids: u64,
    pub fm: u64,
    pub mota: f64,
    pub motp: f64,
    pub motal: f64,
}

pub const TABLE_COLUMNS: [&str; 17] = [
    "IDF1", "IDP", "IDR", "Rcll", "Prcn", "FAR", "GT", "MT", "PT", "ML", "FP", "FN", "IDs", "FM", "MOTA", "MOTP", "MOTAL",
];

impl MotScore {
    pub fn from_parts(c: &ClearMot, id: &IdMetrics) -> Self {
        Self {
            idf1: id.idf1,
            idp: id.idp,
            idr: id.idr,
            rcll: c.rcll,
            prcn: c.prcn,
            far: c.far,
            gt: c.gt_tracks,
            mt: c.mt,
            pt: c.pt,
            ml: c.ml,
            fp: c.fp,
            fn_: c.fn_,
            ids: c.ids,
            fm: c.fm,
            mota: c.mota,
            motp: c.motp,
            motal: c.motal,
        }
    }

    fn cells(&self) -> [String; 17] {
        let p = |v: f64| format!("{v:.1}");
        [
            p(self.idf1),
            p(self.idp),
            p(self.idr),
            p(self.rcll),
            p(self.prcn),
            format!("{:.2}", self.far),
            self.gt.to_string(),
            self.mt.to_string(),
            self.pt.to_string(),
            self.ml.to_string(),
            self.fp.to_string(),
            self.fn_.to_string(),
            self.ids.to_string(),
            self.fm.to_string(),
            p(self.mota),
            p(self.motp),
            p(self.motal),
        ]
    }

    /// Header and one row, right-aligned columns.
    pub fn to_table(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = TABLE_COLUMNS.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
        let line = |items: &mut dyn Iterator<Item = String>| {
            items
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "{}\n{}\n",
            line(&mut TABLE_COLUMNS.iter().map(|s| s.to_string())),
            line(&mut cells.into_iter())
        )
    }
}

/// CLEAR-MOT and identity metrics in one pass.
pub fn evaluate(gt: &FrameSet, hyp: &FrameSet, match_iou: f64) -> Result<MotScore, MotError> {
    let c = clear_mot(gt, hyp, match_iou)?;
    let id = id_metrics(gt, hyp, match_iou)?;
    Ok(MotScore::from_parts(&c, &id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::from_ltwh(x, y, w, h).unwrap()
    }

    fn fs(rows: &[(u32, i64, BBox)]) -> FrameSet {
        let mut f = FrameSet::new();
        for &(fr, id, b) in rows {
            f.push(fr, id, b).unwrap();
        }
        f
    }

    fn total(cost: &[Vec<f64>], a: &[(usize, usize)]) -> f64 {
        a.iter().map(|&(r, c)| cost[r][c]).sum()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn hungarian_small() {
        let c = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert_eq!(hungarian(&c), vec![(0, 0), (1, 1)]);
        assert_eq!(hungarian(&[vec![3.0]]), vec![(0, 0)]);
        assert!(hungarian(&[]).is_empty());
        let rect = vec![vec![5.0, 1.0, 9.0]];
        assert_eq!(hungarian(&rect), vec![(0, 1)]);
        let tall = vec![vec![5.0], vec![1.0], vec![9.0]];
        assert_eq!(hungarian(&tall), vec![(1, 0)]);
    }

    #[test]
    fn hungarian_matches_permutation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let perms = permutations(6);
        assert_eq!(perms.len(), 720);
        for _ in 0..50 {
            let c: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
            let best = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(r, &col)| c[r][col]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let a = hungarian(&c);
            assert_eq!(a.len(), 6);
            assert!((total(&c, &a) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn parse_examples() {
        let r = parse_mot15("1,3,10.0,20.0,30.0,40.0,1,-1,-1,-1").unwrap();
        assert_eq!((r[0].frame, r[0].id), (1, 3));
        assert_eq!(r[0].bbox(), BBox::new(10., 20., 40., 60.).unwrap());
        assert_eq!(
            parse_mot15("1,3,10,20,-5,40,1,-1,-1,-1"),
            Err(MotError::NonPositiveSize { line: 1 })
        );
        let short = parse_mot15("2,1,0,0,5,5,0.5").unwrap();
        assert_eq!((short[0].conf, short[0].z), (0.5, -1.0));
        match parse_mot15("1,1,0,0,5,5,1\n\n1,x,0,0,5,5,1") {
            Err(MotError::MalformedLine { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_mot15("0,1,0,0,5,5,1"), Err(MotError::MalformedLine { line: 1, .. })));
        assert!(matches!(parse_mot15("1,1,0,0,5"), Err(MotError::MalformedLine { .. })));
        assert!(matches!(parse_mot15("1,1,nan,0,5,5,1"), Err(MotError::MalformedLine { .. })));
    }

    #[test]
    fn round_trip() {
        let text = "1,3,10.5,20,30,40,1,-1,-1,-1\n2,-1,0.125,3,4,5,0.9,1,2,3\n";
        assert_eq!(write_mot15(&parse_mot15(text).unwrap()), text);
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert_eq!(
            FrameSet::parse("1,1,0,0,5,5,1\n1,1,9,9,5,5,1"),
            Err(MotError::DuplicateId { frame: 1, id: 1 })
        );
    }

    #[test]
    fn perfect_hypothesis() {
        let gt = fs(&[(1, 1, bx(0., 0., 10., 10.)), (2, 1, bx(1., 0., 10., 10.)), (2, 2, bx(50., 0., 10., 10.))]);
        let s = evaluate(&gt, &gt, 0.5).unwrap();
        assert_eq!((s.mota, s.motp, s.idf1, s.idp, s.idr), (100.0, 100.0, 100.0, 100.0, 100.0));
        assert_eq!((s.ids, s.fp, s.fn_, s.mt, s.gt), (0, 0, 0, 2, 2));
    }

    #[test]
    fn id_switch_fixture() {
        let gt = fs(&[(1, 1, bx(0., 0., 10., 10.)), (2, 1, bx(0., 0., 10., 10.))]);
        let hyp = fs(&[(1, 7, bx(0., 0., 10., 10.)), (2, 8, bx(0., 0., 10., 10.))]);
        let c = clear_mot(&gt, &hyp, 0.5).unwrap();
        assert_eq!((c.ids, c.fp, c.fn_), (1, 0, 0));
        assert_eq!(c.mota, 50.0);
        let id = id_metrics(&gt, &hyp, 0.5).unwrap();
        assert_eq!((id.idtp, id.idfp, id.idfn), (1, 1, 1));
        assert_eq!(id.idf1, 50.0);
    }

    #[test]
    fn empty_hypothesis() {
        let gt = fs(&[(1, 1, bx(0., 0., 10., 10.)), (2, 2, bx(0., 0., 10., 10.))]);
        let s = evaluate(&gt, &FrameSet::new(), 0.5).unwrap();
        assert_eq!((s.fn_, s.mota, s.ml, s.gt), (2, 0.0, 2, 2));
    }

    #[test]
    fn frame_mismatch() {
        let gt = fs(&[(1, 1, bx(0., 0., 10., 10.))]);
        let hyp = fs(&[(3, 1, bx(0., 0., 10., 10.))]);
        assert_eq!(clear_mot(&gt, &hyp, 0.5), Err(MotError::FrameMismatch { frame: 3, max: 1 }));
        assert!(id_metrics(&gt, &hyp, 0.5).is_err());
    }

    #[test]
    fn fragmentation_and_persistence() {
        // Tracked, missed, tracked: one fragmentation, no switch.
        let gt = fs(&[(1, 1, bx(0., 0., 10., 10.)), (2, 1, bx(0., 0., 10., 10.)), (3, 1, bx(0., 0., 10., 10.))]);
        let hyp = fs(&[(1, 5, bx(0., 0., 10., 10.)), (3, 5, bx(0., 0., 10., 10.))]);
        let c = clear_mot(&gt, &hyp, 0.5).unwrap();
        assert_eq!((c.fm, c.ids, c.fn_), (1, 0, 1));
        // An existing correspondence survives a better-overlapping competitor.
        let gt = fs(&[(1, 1, bx(0., 0., 10., 10.)), (2, 1, bx(0., 0., 10., 10.))]);
        let hyp = fs(&[(1, 5, bx(0., 0., 10., 10.)), (2, 5, bx(2., 0., 10., 10.)), (2, 6, bx(0., 0., 10., 10.))]);
        let c = clear_mot(&gt, &hyp, 0.5).unwrap();
        assert_eq!((c.ids, c.fp), (0, 1));
    }

    #[test]
    fn table_layout() {
        let gt = fs(&[(1, 1, bx(0., 0., 10., 10.))]);
        let t = evaluate(&gt, &gt, 0.5).unwrap().to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), TABLE_COLUMNS);
        assert_eq!(lines[1].split_whitespace().next(), Some("100.0"));
        let json = serde_json::to_value(evaluate(&gt, &gt, 0.5).unwrap()).unwrap();
        assert_eq!(json["fn"], 0);
    }

    #[test]
    fn id_metrics_match_bijection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (gt, hyp) = random_pair(&mut rng, 4, 6);
            let n = identity_overlap(&gt, &hyp, 0.5);
            let (g, h) = (n.len(), n.first().map_or(0, Vec::len));
            // Pad to a square and enumerate all bijections.
            let k = g.max(h);
            let best = permutations(k)
                .iter()
                .map(|p| {
                    (0..g)
                        .filter(|&r| p[r] < h)
                        .map(|r| n[r][p[r]])
                        .sum::<u64>()
                })
                .max()
                .unwrap_or(0);
            assert_eq!(id_metrics(&gt, &hyp, 0.5).unwrap().idtp, best);
        }
    }

    /// Integer-grid boxes so IoU is exact under integer shifts.
    fn random_pair(rng: &mut ChaCha8Rng, ids: i64, frames: u32) -> (FrameSet, FrameSet) {
        let mut gt = FrameSet::new();
        let mut hyp = FrameSet::new();
        for f in 1..=frames {
            for id in 1..=ids {
                let x = (id * 30) as f64 + rng.random_range(0..4) as f64;
                if rng.random_bool(0.8) {
                    gt.push(f, id, bx(x, 0., 10., 10.)).unwrap();
                }
                if rng.random_bool(0.8) {
                    let hid = rng.random_range(1..=ids) + 100;
                    if !hyp.frame(f).iter().any(|(i, _)| *i == hid) {
                        let jitter = rng.random_range(0..6) as f64;
                        hyp.push(f, hid, bx(x + jitter, 0., 10., 10.)).unwrap();
                    }
                }
            }
        }
        (gt, hyp)
    }

    proptest! {
        #[test]
        fn metric_invariants(seed in any::<u64>(), dx in -50i32..50, dy in -50i32..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (gt, hyp) = random_pair(&mut rng, 4, 5);
            let s = evaluate(&gt, &hyp, 0.5).unwrap();
            prop_assert_eq!(s.mt + s.pt + s.ml, s.gt);
            if s.idp + s.idr > 0.0 {
                prop_assert!((s.idf1 - 2.0 * s.idp * s.idr / (s.idp + s.idr)).abs() < 1e-9);
            }
            prop_assert!((0.0..=100.0).contains(&s.motp));
            let c = clear_mot(&gt, &hyp, 0.5).unwrap();
            if c.gt_boxes > 0 {
                let expect = 100.0 * (c.ids as f64 - ((c.ids + 1) as f64).log10()) / c.gt_boxes as f64;
                prop_assert!((s.motal - s.mota - expect).abs() < 1e-9);
                prop_assert!(s.motal >= s.mota);
            }

            let mut labels: Vec<i64> = hyp.ids().into_iter().collect();
            let original = labels.clone();
            labels.shuffle(&mut rng);
            let relabel: HashMap<i64, i64> = original.into_iter().zip(labels.into_iter().map(|l| l + 1000)).collect();
            prop_assert_eq!(evaluate(&gt, &hyp.map_ids(|i| relabel[&i]), 0.5).unwrap(), s.clone());

            let (dx, dy) = (dx as f64, dy as f64);
            let moved = evaluate(&gt.map_boxes(|b| b.translate(dx, dy)), &hyp.map_boxes(|b| b.translate(dx, dy)), 0.5).unwrap();
            prop_assert_eq!(moved.ids, s.ids);
            prop_assert_eq!(moved.fp, s.fp);
            prop_assert!((moved.mota - s.mota).abs() < 1e-9);
            prop_assert!((moved.idf1 - s.idf1).abs() < 1e-9);
            prop_assert!((moved.motp - s.motp).abs() < 1e-9);
        }
    }
}
