//! On-disk formats: stack manifest, detection and correspondence files,
//! serialized pair transforms.
//!
//! A stack directory holds `stack.json` plus the files it references. A
//! transform for pair `(s, t)` is stored as `pair_s_t.affine.txt` (three rows
//! of three numbers) and, when non-rigid, `pair_s_t.field.bin` with a
//! `pair_s_t.field.json` sidecar. The binary holds `width * height` little
//! endian `f64` x-displacements followed by as many y-displacements, both
//! row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{Detection, Shape};
use crate::geometry::{BBox, Point2D};
use crate::mot_metrics::{parse_mot15, write_mot15, MotError, MotRecord};
use crate::registration::Correspondence;
use crate::transform::{AffineTransform2D, DisplacementField, GridSpec, InversionParams, PairTransform, TransformError};

pub const MANIFEST_FILE: &str = "stack.json";
pub const CORRESPONDENCE_HEADER: &str = "src_x,src_y,dst_x,dst_y,weight";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Mot {
        path: PathBuf,
        #[source]
        source: MotError,
    },
    #[error("{path}: line {line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Transform {
        path: PathBuf,
        #[source]
        source: TransformError,
    },
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `contents`, creating parent directories.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), IoError> {
    let io = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, contents).map_err(io)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_file(path, text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| IoError::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

pub fn read_mot15(path: &Path) -> Result<Vec<MotRecord>, IoError> {
    parse_mot15(&read_text(path)?).map_err(|source| IoError::Mot {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mot15_file(path: &Path, records: &[MotRecord]) -> Result<(), IoError> {
    write_file(path, write_mot15(records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub section_count: usize,
    #[serde(default = "default_unit_scale")]
    pub unit_scale_um: f64,
    /// One MOT15 detection file per section, relative to the stack root.
    pub detections: Vec<PathBuf>,
    /// Correspondence CSVs keyed by `"s_t"`.
    #[serde(default)]
    pub correspondences: BTreeMap<String, PathBuf>,
    /// Precomputed transforms keyed by `"s_t"`, as path stems.
    #[serde(default)]
    pub transforms: BTreeMap<String, PathBuf>,
}

fn default_unit_scale() -> f64 {
    1.0
}

pub fn pair_key(source: usize, target: usize) -> String {
    format!("{source}_{target}")
}

/// Adjacent pairs `(t, t+1)` then interleave pairs `(t, t+2)`.
pub fn required_pairs(section_count: usize) -> Vec<(usize, usize)> {
    let adjacent = (0..section_count.saturating_sub(1)).map(|t| (t, t + 1));
    let interleave = (0..section_count.saturating_sub(2)).map(|t| (t, t + 2));
    adjacent.chain(interleave).collect()
}

/// A stack directory with its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStack {
    pub root: PathBuf,
    pub manifest: StackManifest,
}

impl SeriesStack {
    pub fn open(root: &Path) -> Result<Self, IoError> {
        let path = root.join(MANIFEST_FILE);
        let manifest: StackManifest = read_json(&path)?;
        if manifest.detections.len() != manifest.section_count {
            return Err(IoError::Invalid {
                path,
                reason: format!(
                    "section_count is {} but {} detection files are listed",
                    manifest.section_count,
                    manifest.detections.len()
                ),
            });
        }
        if !(manifest.unit_scale_um > 0.0 && manifest.unit_scale_um.is_finite()) {
            return Err(IoError::Invalid {
                path,
                reason: "unit_scale_um must be positive".into(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn section_count(&self) -> usize {
        self.manifest.section_count
    }

    /// Detections of every section, frame numbers checked against position.
    pub fn load_detections(&self) -> Result<Vec<Vec<Detection>>, IoError> {
        self.manifest
            .detections
            .iter()
            .enumerate()
            .map(|(t, rel)| {
                let path = self.root.join(rel);
                let rows = read_mot15(&path)?;
                if let Some(r) = rows.iter().find(|r| r.frame as usize != t + 1) {
                    return Err(IoError::Invalid {
                        path,
                        reason: format!("frame {} in the file of section {}", r.frame, t + 1),
                    });
                }
                Ok(rows
                    .iter()
                    .map(|r| Detection::new(t, Shape::Box(r.bbox())).with_score(r.conf))
                    .collect())
            })
            .collect()
    }

    pub fn correspondence_path(&self, source: usize, target: usize) -> Option<PathBuf> {
        self.manifest
            .correspondences
            .get(&pair_key(source, target))
            .map(|p| self.root.join(p))
    }

    pub fn transform_stem(&self, source: usize, target: usize) -> Option<PathBuf> {
        self.manifest
            .transforms
            .get(&pair_key(source, target))
            .map(|p| self.root.join(p))
    }
}

pub fn detections_to_records(section: usize, dets: &[Detection]) -> Vec<MotRecord> {
    dets.iter()
        .map(|d| {
            let b = d.shape.bounding_box();
            MotRecord::new(
                section as u32 + 1,
                d.track_id.map_or(-1, |id| id as i64),
                b.x_min(),
                b.y_min(),
                b.width(),
                b.height(),
                d.score.unwrap_or(1.0),
            )
        })
        .collect()
}

pub fn write_correspondences(corr: &[Correspondence]) -> String {
    let mut out = String::from(CORRESPONDENCE_HEADER);
    out.push('\n');
    for c in corr {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.source.x, c.source.y, c.target.x, c.target.y, c.weight
        ));
    }
    out
}

pub fn parse_correspondences(path: &Path, text: &str) -> Result<Vec<Correspondence>, IoError> {
    let malformed = |line: usize, reason: String| IoError::Malformed {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CORRESPONDENCE_HEADER => {}
        Some((i, h)) => return Err(malformed(i + 1, format!("expected header '{CORRESPONDENCE_HEADER}', found '{h}'"))),
        None => return Err(malformed(1, "empty file".into())),
    }
    lines
        .map(|(i, l)| {
            let v: Vec<f64> = l
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| malformed(i + 1, e.to_string()))?;
            if v.len() != 5 {
                return Err(malformed(i + 1, format!("expected 5 fields, found {}", v.len())));
            }
            let c = Correspondence {
                source: Point2D::new(v[0], v[1]),
                target: Point2D::new(v[2], v[3]),
                weight: v[4],
            };
            if !c.is_valid() {
                return Err(malformed(i + 1, "non-finite value or negative weight".into()));
            }
            Ok(c)
        })
        .collect()
}

pub fn read_correspondences(path: &Path) -> Result<Vec<Correspondence>, IoError> {
    parse_correspondences(path, &read_text(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub source: usize,
    pub target: usize,
    pub grid: GridSpec,
    pub dtype: String,
    pub order: String,
}

const FIELD_DTYPE: &str = "f64le";
const FIELD_ORDER: &str = "dx then dy, row-major";

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn affine_to_text(a: &AffineTransform2D) -> String {
    a.matrix()
        .iter()
        .map(|row| format!("{} {} {}\n", row[0], row[1], row[2]))
        .collect()
}

pub fn affine_from_text(path: &Path, text: &str) -> Result<AffineTransform2D, IoError> {
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != 3 {
        return Err(IoError::Invalid {
            path: path.to_path_buf(),
            reason: format!("expected 3 matrix rows, found {}", rows.len()),
        });
    }
    let mut m = [[0.0; 3]; 3];
    for (i, row) in rows.iter().enumerate() {
        let vals: Vec<f64> = row
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| IoError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        if vals.len() != 3 {
            return Err(IoError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected 3 numbers, found {}", vals.len()),
            });
        }
        m[i].copy_from_slice(&vals);
    }
    AffineTransform2D::from_matrix(m).map_err(|source| IoError::Transform {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `stem.affine.txt` and, for non-rigid transforms, the field files.
/// A stale field from an earlier run is removed.
pub fn write_transform(stem: &Path, tr: &PairTransform) -> Result<(), IoError> {
    write_file(&with_suffix(stem, ".affine.txt"), affine_to_text(tr.affine()))?;
    let bin = with_suffix(stem, ".field.bin");
    let json = with_suffix(stem, ".field.json");
    match tr.field() {
        Some(f) => {
            let mut bytes = Vec::with_capacity(16 * f.dx().len());
            for v in f.dx().iter().chain(f.dy()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            write_file(&bin, bytes)?;
            write_json(
                &json,
                &FieldSidecar {
                    source: tr.source(),
                    target: tr.target(),
                    grid: *f.grid(),
                    dtype: FIELD_DTYPE.into(),
                    order: FIELD_ORDER.into(),
                },
            )?;
        }
        None => {
            for p in [&bin, &json] {
                if p.exists() {
                    fs::remove_file(p).map_err(|source| IoError::Io { path: p.clone(), source })?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_transform(
    stem: &Path,
    source: usize,
    target: usize,
    inversion: InversionParams,
) -> Result<PairTransform, IoError> {
    let affine_path = with_suffix(stem, ".affine.txt");
    let affine = affine_from_text(&affine_path, &read_text(&affine_path)?)?;
    let json = with_suffix(stem, ".field.json");
    let field = if json.exists() {
        let side: FieldSidecar = read_json(&json)?;
        let invalid = |reason: String| IoError::Invalid {
            path: json.clone(),
            reason,
        };
        if side.dtype != FIELD_DTYPE {
            return Err(invalid(format!("unsupported dtype '{}'", side.dtype)));
        }
        if (side.source, side.target) != (source, target) {
            return Err(invalid(format!("sidecar describes pair ({}, {})", side.source, side.target)));
        }
        let bin = with_suffix(stem, ".field.bin");
        let bytes = fs::read(&bin).map_err(|source| IoError::Io {
            path: bin.clone(),
            source,
        })?;
        let n = side.grid.width * side.grid.height;
        if bytes.len() != 16 * n {
            return Err(invalid(format!("expected {} bytes of field data, found {}", 16 * n, bytes.len())));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let (dx, dy) = vals.split_at(n);
        Some(
            DisplacementField::new(side.grid, dx.to_vec(), dy.to_vec()).map_err(|source| IoError::Transform {
                path: bin,
                source,
            })?,
        )
    } else {
        None
    };
    PairTransform::new(source, target, affine, field, inversion).map_err(|source| IoError::Transform {
        path: affine_path,
        source,
    })
}

/// Bounding box of all coordinates mentioned by a correspondence set.
pub fn correspondence_extent(corr: &[Correspondence]) -> Option<BBox> {
    let pts: Vec<Point2D> = corr.iter().flat_map(|c| [c.source, c.target]).collect();
    BBox::enclosing(&pts)
}
