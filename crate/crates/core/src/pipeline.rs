//! Pipeline stages over stack directories and the shared configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{dpa_assign, with_ids, DpaParams, LinkingStrategy, PairFlags, ShapeMode, TrackSet, TransformSet};
use crate::association::{tracks_to_mot, AssociationError};
use crate::cycle_qa::{assess_series, QaError, QaReport};
use crate::geometry::BBox;
use crate::io::{self, IoError, SeriesStack};
use crate::mot_metrics::{evaluate, FrameSet, MotScore};
use crate::registration::{fit_ransac, fit_tps, AffineModel, RansacParams, RegistrationError};
use crate::simulate::{generate, SimConfig, SimError};
use crate::transform::{GridSpec, InversionParams, PairTransform};

pub const TRANSFORM_DIR: &str = "transforms";
pub const QA_FILE: &str = "qa.json";
pub const TRACKS_FILE: &str = "tracks.txt";
pub const SCORES_JSON: &str = "scores.json";
pub const SCORES_TABLE: &str = "scores.txt";
pub const GT_FILE: &str = "gt.txt";
pub const TRUTH_FILE: &str = "truth.json";
pub const DATA_DIR: &str = "data";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("registration failed for pair {pair}: {source}")]
    FitFailure {
        pair: String,
        #[source]
        source: RegistrationError,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("inconsistent stack: {0}")]
    Inconsistent(String),
}

impl PipelineError {
    /// Process exit code: 2 input, 3 numerical, 4 inconsistency.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::MissingInput(_) | PipelineError::Io(_) => 2,
            PipelineError::FitFailure { .. } | PipelineError::Numerical(_) => 3,
            PipelineError::Inconsistent(_) => 4,
        }
    }
}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Transform(t) => PipelineError::Numerical(t.to_string()),
            other => PipelineError::Config(other.to_string()),
        }
    }
}

impl From<AssociationError> for PipelineError {
    fn from(e: AssociationError) -> Self {
        match e {
            AssociationError::MissingTransform { .. } => PipelineError::MissingInput(e.to_string()),
            AssociationError::InconsistentStack(m) => PipelineError::Inconsistent(m),
            AssociationError::Transform(t) => PipelineError::Numerical(t.to_string()),
        }
    }
}

impl From<QaError> for PipelineError {
    fn from(e: QaError) -> Self {
        match e {
            QaError::Transform(t) => PipelineError::Numerical(t.to_string()),
            QaError::BrokenChain(..) => PipelineError::Inconsistent(e.to_string()),
            other => PipelineError::MissingInput(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpsConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub grid_spacing: f64,
    pub grid_margin: f64,
}

impl Default for TpsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: 1000.0,
            grid_spacing: 20.0,
            grid_margin: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub s_threshold: f64,
    pub q_threshold: f64,
    pub match_iou: f64,
    pub shape_mode: ShapeMode,
    pub linking: LinkingStrategy,
    pub affine_model: AffineModel,
    pub ransac: RansacParams,
    pub tps: TpsConfig,
    pub inversion: InversionParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            s_threshold: crate::association::DEFAULT_S,
            q_threshold: crate::cycle_qa::DEFAULT_Q,
            match_iou: crate::mot_metrics::DEFAULT_MATCH_IOU,
            shape_mode: ShapeMode::Box,
            linking: LinkingStrategy::Greedy,
            affine_model: AffineModel::Affine,
            ransac: RansacParams::default(),
            tps: TpsConfig::default(),
            inversion: InversionParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [
            ("s_threshold", self.s_threshold),
            ("q_threshold", self.q_threshold),
            ("match_iou", self.match_iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(PipelineError::Config(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        self.ransac
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let t = &self.tps;
        if !(t.lambda >= 0.0 && t.lambda.is_finite() && t.grid_spacing > 0.0 && t.grid_margin >= 0.0) {
            return Err(PipelineError::Config(
                "tps needs lambda >= 0, grid_spacing > 0, grid_margin >= 0".into(),
            ));
        }
        if !(self.inversion.tol > 0.0) || self.inversion.max_iter == 0 {
            return Err(PipelineError::Config("inversion needs tol > 0 and max_iter >= 1".into()));
        }
        Ok(())
    }

    pub fn dpa_params(&self) -> DpaParams {
        DpaParams {
            s_threshold: self.s_threshold,
            strategy: self.linking,
        }
    }
}

/// The single declarative configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pipeline: PipelineConfig,
    pub simulate: SimConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Config = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.pipeline.validate()?;
        cfg.simulate
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_toml(&io::read_text(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is TOML-representable")
    }
}

/// Writes a simulated stack directory; returns the number of sections.
pub fn cmd_simulate(cfg: &SimConfig, out: &Path) -> Result<usize, PipelineError> {
    let sim = generate(cfg)?;
    let mut manifest = io::StackManifest {
        section_count: cfg.sections,
        unit_scale_um: 1.0,
        detections: Vec::new(),
        correspondences: BTreeMap::new(),
        transforms: BTreeMap::new(),
    };
    for (t, dets) in sim.detections.iter().enumerate() {
        let rel = PathBuf::from(format!("detections/section_{t:03}.txt"));
        io::write_mot15_file(&out.join(&rel), &io::detections_to_records(t, dets))?;
        manifest.detections.push(rel);
    }
    for (s, t) in io::required_pairs(cfg.sections) {
        let corr = sim.truth.correspondences(s, t).expect("every required pair is generated");
        let rel = PathBuf::from(format!("correspondences/pair_{s}_{t}.csv"));
        io::write_file(&out.join(&rel), io::write_correspondences(corr))?;
        manifest.correspondences.insert(io::pair_key(s, t), rel);
    }
    io::write_mot15_file(&out.join(GT_FILE), &sim.truth.gt_records())?;
    io::write_json(&out.join(TRUTH_FILE), &sim.truth)?;
    io::write_json(&out.join(io::MANIFEST_FILE), &manifest)?;
    info!(
        "simulated {} sections, {} visible objects, {} detections",
        cfg.sections,
        sim.truth.visible_objects(),
        sim.detections.iter().map(Vec::len).sum::<usize>()
    );
    Ok(cfg.sections)
}

fn fit_pair(
    stack: &SeriesStack,
    s: usize,
    t: usize,
    cfg: &PipelineConfig,
) -> Result<PairTransform, PipelineError> {
    if let Some(stem) = stack.transform_stem(s, t) {
        return Ok(io::read_transform(&stem, s, t, cfg.inversion)?);
    }
    let path = stack
        .correspondence_path(s, t)
        .ok_or_else(|| PipelineError::MissingInput(format!("pair {}", io::pair_key(s, t))))?;
    let corr = io::read_correspondences(&path)?;
    let pair = io::pair_key(s, t);
    let fail = |source| PipelineError::FitFailure {
        pair: pair.clone(),
        source,
    };
    let params = RansacParams {
        seed: cfg.ransac.seed.wrapping_add(1000 * s as u64 + t as u64),
        ..cfg.ransac
    };
    let fit = fit_ransac(&corr, &params, cfg.affine_model).map_err(fail)?;
    let field = if cfg.tps.enabled {
        let inliers: Vec<_> = corr
            .iter()
            .zip(&fit.inliers)
            .filter(|(_, &m)| m)
            .map(|(c, _)| *c)
            .collect();
        let extent = io::correspondence_extent(&corr).expect("consensus set is non-empty");
        let grid = GridSpec::covering(&extent, cfg.tps.grid_margin, cfg.tps.grid_spacing);
        let f = fit_tps(&inliers, &fit.transform, cfg.tps.lambda, &grid).map_err(fail)?;
        (f.max_magnitude() > 0.0).then_some(f)
    } else {
        None
    };
    PairTransform::new(s, t, fit.transform, field, cfg.inversion).map_err(|e| fail(e.into()))
}

/// Fits every adjacent and interleave pair and writes them under
/// `out/transforms`. Pairs run concurrently on the current rayon pool.
pub fn cmd_register(stack: &SeriesStack, cfg: &PipelineConfig, out: &Path) -> Result<TransformSet, PipelineError> {
    let pairs = io::required_pairs(stack.section_count());
    let absent: Vec<String> = pairs
        .iter()
        .filter(|&&(s, t)| stack.correspondence_path(s, t).is_none() && stack.transform_stem(s, t).is_none())
        .map(|&(s, t)| io::pair_key(s, t))
        .collect();
    if !absent.is_empty() {
        return Err(PipelineError::MissingInput(format!("no correspondences for pairs {}", absent.join(", "))));
    }
    let fitted: Vec<PairTransform> = pairs
        .par_iter()
        .map(|&(s, t)| fit_pair(stack, s, t, cfg))
        .collect::<Result<_, _>>()?;
    let mut set = TransformSet::default();
    for tr in fitted {
        io::write_transform(&transform_stem(out, tr.source(), tr.target()), &tr)?;
        set.insert(tr);
    }
    info!("registered {} pairs", pairs.len());
    Ok(set)
}

pub fn transform_stem(dir: &Path, s: usize, t: usize) -> PathBuf {
    dir.join(TRANSFORM_DIR).join(format!("pair_{s}_{t}"))
}

/// Reads the transforms written by [`cmd_register`] into `dir`.
pub fn load_transforms(dir: &Path, section_count: usize, cfg: &PipelineConfig) -> Result<TransformSet, PipelineError> {
    let pairs = io::required_pairs(section_count);
    let missing: Vec<String> = pairs
        .iter()
        .filter(|&&(s, t)| {
            let stem = transform_stem(dir, s, t);
            !PathBuf::from(format!("{}.affine.txt", stem.display())).exists()
        })
        .map(|&(s, t)| io::pair_key(s, t))
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::MissingInput(format!("no transforms for pairs {}", missing.join(", "))));
    }
    let loaded: Vec<PairTransform> = pairs
        .par_iter()
        .map(|&(s, t)| io::read_transform(&transform_stem(dir, s, t), s, t, cfg.inversion))
        .collect::<Result<_, _>>()?;
    let mut set = TransformSet::default();
    for tr in loaded {
        set.insert(tr);
    }
    Ok(set)
}

fn section_boxes(stack: &[Vec<crate::association::Detection>]) -> Vec<Vec<BBox>> {
    stack
        .iter()
        .map(|dets| dets.iter().map(|d| d.shape.bounding_box()).collect())
        .collect()
}

pub fn cmd_qa(stack: &SeriesStack, transforms: &TransformSet, cfg: &PipelineConfig, out: &Path) -> Result<QaReport, PipelineError> {
    if stack.section_count() < 3 {
        return Err(PipelineError::MissingInput(format!(
            "cycle QA needs at least 3 sections, the stack has {}",
            stack.section_count()
        )));
    }
    let dets = stack.load_detections()?;
    let report = assess_series(&section_boxes(&dets), &transforms.adjacent, &transforms.interleave, cfg.q_threshold)?;
    io::write_json(&out.join(QA_FILE), &report)?;
    info!(
        "series class {:?}, failed pairs {:?}",
        report.series_class,
        report.pairs.iter().filter(|p| p.fc).map(|p| p.t).collect::<Vec<_>>()
    );
    Ok(report)
}

pub fn cmd_track(
    stack: &SeriesStack,
    transforms: &TransformSet,
    qa: Option<&QaReport>,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<TrackSet, PipelineError> {
    let dets = stack.load_detections()?;
    let flags = match qa {
        Some(r) => {
            if r.pairs.len() != stack.section_count().saturating_sub(1) {
                return Err(PipelineError::Inconsistent(format!(
                    "QA report covers {} pairs, the stack has {} sections",
                    r.pairs.len(),
                    stack.section_count()
                )));
            }
            PairFlags::from_report(r)
        }
        None => PairFlags::all_good(stack.section_count()),
    };
    let shaped: Vec<Vec<_>> = dets
        .iter()
        .map(|s| s.iter().map(|d| d.in_mode(cfg.shape_mode)).collect())
        .collect();
    let ids = dpa_assign(&shaped, transforms, &flags, &cfg.dpa_params())?;
    let tracks = TrackSet::from_detections(with_ids(&dets, &ids))?;
    io::write_mot15_file(&out.join(TRACKS_FILE), &tracks_to_mot(&tracks))?;
    info!("tracked {} detections into {} tracks", tracks.detection_count(), tracks.len());
    Ok(tracks)
}

pub fn cmd_eval(gt: &Path, results: &Path, cfg: &PipelineConfig, out: &Path) -> Result<MotScore, PipelineError> {
    let parse = |p: &Path| -> Result<FrameSet, PipelineError> {
        FrameSet::from_records(&io::read_mot15(p)?).map_err(|source| {
            PipelineError::Io(IoError::Mot {
                path: p.to_path_buf(),
                source,
            })
        })
    };
    let (g, h) = (parse(gt)?, parse(results)?);
    let score = evaluate(&g, &h, cfg.match_iou).map_err(|e| PipelineError::Inconsistent(e.to_string()))?;
    io::write_json(&out.join(SCORES_JSON), &score)?;
    io::write_file(&out.join(SCORES_TABLE), score.to_table())?;
    Ok(score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub qa: QaReport,
    pub track_count: usize,
    pub score: Option<MotScore>,
}

/// Register, QA, track and (when the stack has `gt.txt`) evaluate. Without
/// a stack, a simulated one is written to `out/data` first.
pub fn cmd_pipeline(config: &Config, stack_dir: Option<&Path>, assume_good: bool, out: &Path) -> Result<PipelineSummary, PipelineError> {
    let cfg = &config.pipeline;
    cfg.validate()?;
    let root = match stack_dir {
        Some(p) => p.to_path_buf(),
        None => {
            let d = out.join(DATA_DIR);
            cmd_simulate(&config.simulate, &d)?;
            d
        }
    };
    let stack = SeriesStack::open(&root)?;
    cmd_register(&stack, cfg, out)?;
    let transforms = load_transforms(out, stack.section_count(), cfg)?;
    let qa = cmd_qa(&stack, &transforms, cfg, out)?;
    let tracks = cmd_track(&stack, &transforms, (!assume_good).then_some(&qa), cfg, out)?;
    let gt = root.join(GT_FILE);
    let score = if gt.exists() {
        Some(cmd_eval(&gt, &out.join(TRACKS_FILE), cfg, out)?)
    } else {
        None
    };
    Ok(PipelineSummary {
        qa,
        track_count: tracks.len(),
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = Config::from_toml("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.pipeline.s_threshold, 0.1);
        assert_eq!(cfg.simulate.sections, 12);
        let cfg = Config::from_toml(
            "[pipeline]\ns_threshold = 0.3\nshape_mode = \"circle\"\n[pipeline.ransac]\nseed = 4\n[simulate]\nsections = 7\nfailed_pairs = [[2, 3]]\n",
        )
        .unwrap();
        assert_eq!(cfg.pipeline.s_threshold, 0.3);
        assert_eq!(cfg.pipeline.shape_mode, ShapeMode::Circle);
        assert_eq!(cfg.pipeline.ransac.seed, 4);
        assert_eq!(cfg.pipeline.ransac.max_iterations, 2000);
        assert_eq!(cfg.simulate.failed_pairs, vec![(2, 3)]);
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn config_errors_are_input_errors() {
        for bad in ["[pipeline]\ns_threshold = 1.5", "[pipeline]\nbogus = 1", "[simulate]\ndropout_rate = -1.0", "not toml ="] {
            let e = Config::from_toml(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
    }
}
