//! Pipeline orchestration: pairing-file ingestion, per-pair registration
//! (extract -> describe -> match -> RANSAC -> metrics), batch evaluation,
//! and report emission.
//!
//! Per-pair RANSAC seeds derive from the run seed XOR a stable hash of the
//! pair id, so results are reproducible regardless of scheduling or thread
//! count; aggregation is ordered by pair id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptors::{match_mutual, sample_descriptors, DescriptorError};
use crate::geometry::{
    plausible_transform, ransac_homography, scale_points, warp_image, warp_mask, warp_validity,
    GeometryError, Point2, RansacConfig,
};
use crate::harness::{gen_synth_pair, HarnessError, SynthConfig, SynthPair};
use crate::hashing::fnv1a64;
use crate::keypoints::{extract_keypoints, make_heatmap, DetectConfig, HeatmapSet, KeypointError};
use crate::losses::LossConfig;
use crate::metrics::{
    cp_error, dice, iom, iou, normalize_report, registration_score, sm_metric_masked,
    ssim_metric_masked, vtkrs, ControlPointSet, Direction, EvalRecord, FailureReason, MetricsError,
    PairMetrics, ScoredCorrespondence, SmConfig, VtkrsPair, REGISTRATION_SCORE_MAX_PX,
};
use crate::tensorio::{
    ensure_grayscale, load_mask, load_png, read_tensor, save_png, write_tensor, Image, Tensor,
    TensorIoError, VesselMask,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pairing file is empty")]
    EmptyFile,
    #[error("missing column `{column}` in pairing file header")]
    MissingColumn { column: String },
    #[error("pair {pair_id}: required {kind} sidecar missing")]
    MissingSidecar { pair_id: String, kind: &'static str },
    #[error("control-point file {path}: bad line {line}")]
    BadControlPoints { path: PathBuf, line: usize },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error(transparent)]
    Keypoint(#[from] KeypointError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, PipelineError>;

/// One row of a pairing file. Paths are resolved relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingRecord {
    pub pair_id: String,
    pub fixed: PathBuf,
    pub moving: PathBuf,
    pub category: Option<String>,
    pub heatmap_fixed: Option<PathBuf>,
    pub heatmap_moving: Option<PathBuf>,
    pub desc_fixed: Option<PathBuf>,
    pub desc_moving: Option<PathBuf>,
    pub mask_fixed: Option<PathBuf>,
    pub mask_moving: Option<PathBuf>,
    pub control_points: Option<PathBuf>,
    pub exclusions: Option<PathBuf>,
}

/// Parsed pairing file plus non-fatal issues: unknown-column warnings and
/// per-row errors (skipped rows). Strict callers abort when `row_errors` is
/// non-empty.
#[derive(Debug, Clone, Default)]
pub struct PairingSet {
    pub records: Vec<PairingRecord>,
    pub warnings: Vec<String>,
    pub row_errors: Vec<String>,
}

const KNOWN_COLUMNS: [&str; 11] = [
    "fixed",
    "moving",
    "category",
    "heatmap_f",
    "heatmap_m",
    "desc_f",
    "desc_m",
    "mask_f",
    "mask_m",
    "control_points",
    "exclusions",
];

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Reads a pairing CSV with header
/// `fixed,moving,category[,heatmap_f,heatmap_m,desc_f,desc_m,mask_f,mask_m,control_points,exclusions]`.
/// Unknown columns are ignored with a warning; rows with missing required
/// values are collected in `row_errors` and skipped.
pub fn ingest_pairings(path: &Path) -> Result<PairingSet> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(PipelineError::EmptyFile);
    }
    let mut set = PairingSet::default();
    for required in ["fixed", "moving", "category"] {
        if !headers.iter().any(|h| h == required) {
            return Err(PipelineError::MissingColumn {
                column: required.to_string(),
            });
        }
    }
    for header in &headers {
        if !KNOWN_COLUMNS.contains(&header.as_str()) {
            set.warnings
                .push(format!("ignoring unknown column `{header}`"));
        }
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (fixed_col, moving_col, category_col) = (
        col("fixed").unwrap(),
        col("moving").unwrap(),
        col("category").unwrap(),
    );
    let optional_path = |row: &csv::StringRecord, name: &str| -> Option<PathBuf> {
        col(name)
            .and_then(|i| row.get(i))
            .filter(|v| !v.is_empty())
            .map(|v| base.join(v))
    };

    let mut any_row = false;
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        any_row = true;
        let line = i + 2; // header is line 1
        let fixed = row.get(fixed_col).unwrap_or("");
        let moving = row.get(moving_col).unwrap_or("");
        if fixed.is_empty() || moving.is_empty() {
            let which = if fixed.is_empty() { "fixed" } else { "moving" };
            set.row_errors
                .push(format!("line {line}: missing `{which}` path"));
            continue;
        }
        let fixed = base.join(fixed);
        let moving = base.join(moving);
        let category = row
            .get(category_col)
            .filter(|v| !v.is_empty())
            .map(|v| v.to_string());
        set.records.push(PairingRecord {
            pair_id: format!("{}__{}", stem(&fixed), stem(&moving)),
            fixed,
            moving,
            category,
            heatmap_fixed: optional_path(&row, "heatmap_f"),
            heatmap_moving: optional_path(&row, "heatmap_m"),
            desc_fixed: optional_path(&row, "desc_f"),
            desc_moving: optional_path(&row, "desc_m"),
            mask_fixed: optional_path(&row, "mask_f"),
            mask_moving: optional_path(&row, "mask_m"),
            control_points: optional_path(&row, "control_points"),
            exclusions: optional_path(&row, "exclusions"),
        });
    }
    if !any_row {
        return Err(PipelineError::EmptyFile);
    }
    Ok(set)
}

/// Reads a FIRE-style control-point sidecar: one `x_f y_f x_m y_m` line per
/// point, whitespace separated.
pub fn load_control_points(path: &Path) -> Result<ControlPointSet> {
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| PipelineError::BadControlPoints {
                path: path.to_path_buf(),
                line: i + 1,
            })?;
        if vals.len() != 4 {
            return Err(PipelineError::BadControlPoints {
                path: path.to_path_buf(),
                line: i + 1,
            });
        }
        pairs.push((Point2::new(vals[0], vals[1]), Point2::new(vals[2], vals[3])));
    }
    Ok(ControlPointSet::new(pairs))
}

fn load_exclusions(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(
            line.parse::<usize>()
                .map_err(|_| PipelineError::BadControlPoints {
                    path: path.to_path_buf(),
                    line: i + 1,
                })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub detect: DetectConfig,
    pub ransac: RansacConfig,
    pub loss: LossConfig,
    pub sm: SmConfig,
    /// Resolution the heatmaps/descriptors live at; `None` uses each
    /// heatmap's own dims.
    pub matching_resolution: Option<(usize, usize)>,
    /// Resolution metrics and control points live at; `None` uses the fixed
    /// image dims (or the heatmap dims when no image is given).
    pub native_resolution: Option<(usize, usize)>,
    /// Worker threads for dataset evaluation; 0 = one per core.
    pub threads: usize,
    pub seed: u64,
}

/// In-memory inputs of one pair.
pub struct PairInputs<'a> {
    pub pair_id: String,
    pub category: Option<String>,
    pub fixed_heatmaps: &'a HeatmapSet,
    pub moving_heatmaps: &'a HeatmapSet,
    pub fixed_desc: &'a Tensor,
    pub moving_desc: &'a Tensor,
    pub fixed_image: Option<&'a Image>,
    pub moving_image: Option<&'a Image>,
    pub fixed_mask: Option<&'a VesselMask>,
    pub moving_mask: Option<&'a VesselMask>,
    pub control_points: Option<&'a ControlPointSet>,
}

/// Registration outcome plus the scaled scored matches (kept for VTKRS).
#[derive(Debug, Clone)]
pub struct RegisteredPair {
    pub record: EvalRecord,
    pub matches: Vec<ScoredCorrespondence>,
    pub control_points: Option<ControlPointSet>,
}

impl RegisteredPair {
    fn failure(
        inp: &PairInputs<'_>,
        reason: FailureReason,
        matches: Vec<ScoredCorrespondence>,
    ) -> Self {
        Self {
            record: EvalRecord::failure(inp.pair_id.clone(), inp.category.clone(), reason),
            matches,
            control_points: inp.control_points.cloned(),
        }
    }
}

/// Runs the full registration for one pair: extract keypoints from the class
/// heatmaps, sample descriptors, match bidirectionally per class, scale the
/// matched points to native resolution, RANSAC a projective transform, gate
/// it with the plausibility check, then compute control-point error and
/// surrogate metrics where inputs allow.
pub fn register_pair_inputs(inp: &PairInputs<'_>, cfg: &RunConfig) -> Result<RegisteredPair> {
    let fixed_kps = extract_keypoints(inp.fixed_heatmaps, &cfg.detect);
    let moving_kps = extract_keypoints(inp.moving_heatmaps, &cfg.detect);
    if fixed_kps.len() < 4 || moving_kps.len() < 4 {
        return Ok(RegisteredPair::failure(
            inp,
            FailureReason::TooFewKeypoints,
            Vec::new(),
        ));
    }

    let fixed_descs = sample_descriptors(inp.fixed_desc, &fixed_kps)?;
    let moving_descs = sample_descriptors(inp.moving_desc, &moving_kps)?;
    let matches = match_mutual(&fixed_kps, &fixed_descs, &moving_kps, &moving_descs);

    let native = cfg
        .native_resolution
        .or_else(|| inp.fixed_image.map(|img| img.size()))
        .unwrap_or_else(|| inp.fixed_heatmaps.size());
    let fixed_from = cfg
        .matching_resolution
        .unwrap_or_else(|| inp.fixed_heatmaps.size());
    let moving_from = cfg
        .matching_resolution
        .unwrap_or_else(|| inp.moving_heatmaps.size());
    let fixed_native = scale_points(
        &fixed_kps.iter().map(|k| k.pos).collect::<Vec<_>>(),
        fixed_from,
        native,
    )?;
    let moving_native = scale_points(
        &moving_kps.iter().map(|k| k.pos).collect::<Vec<_>>(),
        moving_from,
        native,
    )?;

    let scored: Vec<ScoredCorrespondence> = matches
        .iter()
        .map(|m| ScoredCorrespondence {
            moving: moving_native[m.moving_idx],
            fixed: fixed_native[m.fixed_idx],
            class: m.class,
            similarity: m.similarity,
        })
        .collect();

    if scored.len() < 4 {
        return Ok(RegisteredPair::failure(
            inp,
            FailureReason::TooFewMatches,
            scored,
        ));
    }

    let point_pairs: Vec<(Point2, Point2)> = scored.iter().map(|m| (m.moving, m.fixed)).collect();
    let ransac_cfg = RansacConfig {
        seed: cfg.seed ^ fnv1a64(inp.pair_id.as_bytes()),
        ..cfg.ransac
    };
    let (homography, inliers) = match ransac_homography(&point_pairs, &ransac_cfg) {
        Ok(result) => result,
        Err(GeometryError::NoModelFound) | Err(GeometryError::TooFewMatches { .. }) => {
            return Ok(RegisteredPair::failure(
                inp,
                FailureReason::NoModelFound,
                scored,
            ));
        }
        Err(e) => return Err(e.into()),
    };

    let moving_native_size = inp.moving_image.map(|img| img.size()).unwrap_or(native);
    if inliers.len() < 4 || !plausible_transform(&homography, moving_native_size) {
        return Ok(RegisteredPair::failure(
            inp,
            FailureReason::SanityCheckFailed,
            scored,
        ));
    }

    let cp_error_px = match inp.control_points {
        Some(cps) => Some(cp_error(&homography, cps)?),
        None => None,
    };

    let metrics = match (
        inp.fixed_image,
        inp.moving_image,
        inp.fixed_mask,
        inp.moving_mask,
    ) {
        (Some(fixed_img), Some(moving_img), Some(fixed_mask), Some(moving_mask)) => {
            let out_size = fixed_img.size();
            let warped = warp_image(moving_img, &homography, out_size)?;
            let valid = warp_validity(&homography, moving_img.size(), out_size)?;
            let fixed_gray = ensure_grayscale(fixed_img);
            let warped_gray = ensure_grayscale(&warped);
            let sm = sm_metric_masked(&fixed_gray, &warped_gray, Some(&valid), &cfg.sm)?;
            let ssim = ssim_metric_masked(&fixed_gray, &warped_gray, Some(&valid), &cfg.sm)?;
            let warped_mask = warp_mask(moving_mask, &homography, out_size)?;
            Some(PairMetrics {
                iou: iou(fixed_mask, &warped_mask)?,
                dice: dice(fixed_mask, &warped_mask)?,
                iom: iom(fixed_mask, &warped_mask)?,
                sm,
                ssim,
            })
        }
        _ => None,
    };

    Ok(RegisteredPair {
        record: EvalRecord {
            pair_id: inp.pair_id.clone(),
            category: inp.category.clone(),
            registered: true,
            reason: None,
            inliers: inliers.len(),
            homography: Some(homography),
            cp_error_px,
            metrics,
        },
        matches: scored,
        control_points: inp.control_points.cloned(),
    })
}

struct LoadedPair {
    fixed_heatmaps: HeatmapSet,
    moving_heatmaps: HeatmapSet,
    fixed_desc: Tensor,
    moving_desc: Tensor,
    fixed_image: Option<Image>,
    moving_image: Option<Image>,
    fixed_mask: Option<VesselMask>,
    moving_mask: Option<VesselMask>,
    control_points: Option<ControlPointSet>,
}

fn load_pair(rec: &PairingRecord) -> Result<LoadedPair> {
    let sidecar = |p: &Option<PathBuf>, kind: &'static str| -> Result<PathBuf> {
        p.clone().ok_or_else(|| PipelineError::MissingSidecar {
            pair_id: rec.pair_id.clone(),
            kind,
        })
    };
    let fixed_heatmaps =
        HeatmapSet::from_tensor(&read_tensor(&sidecar(&rec.heatmap_fixed, "heatmap")?)?)?;
    let moving_heatmaps =
        HeatmapSet::from_tensor(&read_tensor(&sidecar(&rec.heatmap_moving, "heatmap")?)?)?;
    let fixed_desc = read_tensor(&sidecar(&rec.desc_fixed, "descriptor map")?)?;
    let moving_desc = read_tensor(&sidecar(&rec.desc_moving, "descriptor map")?)?;
    let fixed_image = rec
        .fixed
        .exists()
        .then(|| load_png(&rec.fixed))
        .transpose()?;
    let moving_image = rec
        .moving
        .exists()
        .then(|| load_png(&rec.moving))
        .transpose()?;
    let fixed_mask = rec.mask_fixed.as_ref().map(|p| load_mask(p)).transpose()?;
    let moving_mask = rec.mask_moving.as_ref().map(|p| load_mask(p)).transpose()?;
    let mut control_points = rec
        .control_points
        .as_ref()
        .map(|p| load_control_points(p))
        .transpose()?;
    if let (Some(cps), Some(excl)) = (control_points.as_mut(), rec.exclusions.as_ref()) {
        cps.exclusions = load_exclusions(excl)?;
    }
    Ok(LoadedPair {
        fixed_heatmaps,
        moving_heatmaps,
        fixed_desc,
        moving_desc,
        fixed_image,
        moving_image,
        fixed_mask,
        moving_mask,
        control_points,
    })
}

/// File-backed single-pair registration.
pub fn register_pair(rec: &PairingRecord, cfg: &RunConfig) -> Result<RegisteredPair> {
    let loaded = load_pair(rec)?;
    register_pair_inputs(
        &PairInputs {
            pair_id: rec.pair_id.clone(),
            category: rec.category.clone(),
            fixed_heatmaps: &loaded.fixed_heatmaps,
            moving_heatmaps: &loaded.moving_heatmaps,
            fixed_desc: &loaded.fixed_desc,
            moving_desc: &loaded.moving_desc,
            fixed_image: loaded.fixed_image.as_ref(),
            moving_image: loaded.moving_image.as_ref(),
            fixed_mask: loaded.fixed_mask.as_ref(),
            moving_mask: loaded.moving_mask.as_ref(),
            control_points: loaded.control_points.as_ref(),
        },
        cfg,
    )
}

/// Dataset-level metric row: `#Pairs` plus the mean of each surrogate metric
/// over the pairs that registered (and had metric inputs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub pairs: usize,
    pub iou: f64,
    pub dice: f64,
    pub iom: f64,
    pub sm: f64,
    pub ssim: f64,
}

impl MetricTable {
    fn zero(pairs: usize) -> Self {
        Self {
            pairs,
            iou: 0.0,
            dice: 0.0,
            iom: 0.0,
            sm: 0.0,
            ssim: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub total: usize,
    pub raw: MetricTable,
    pub normalized: MetricTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub seed: u64,
    pub total_pairs: usize,
    pub raw: MetricTable,
    pub normalized: MetricTable,
    pub per_category: BTreeMap<String, CategorySummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registration_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vtkrs: Option<f64>,
    pub records: Vec<EvalRecord>,
}

fn tabulate(records: &[&EvalRecord]) -> (MetricTable, MetricTable) {
    let total = records.len();
    let registered = records.iter().filter(|r| r.registered).count();
    let with_metrics: Vec<&PairMetrics> =
        records.iter().filter_map(|r| r.metrics.as_ref()).collect();
    if with_metrics.is_empty() {
        let raw = MetricTable::zero(registered);
        let mut normalized = MetricTable::zero(registered);
        // With nothing registered every higher-is-better metric normalizes
        // to 0; keep that explicit.
        normalized.pairs = registered;
        return (raw, normalized);
    }
    let n = with_metrics.len() as f64;
    let mean = |f: &dyn Fn(&PairMetrics) -> f64| -> f64 {
        with_metrics.iter().map(|m| f(m)).sum::<f64>() / n
    };
    let raw = MetricTable {
        pairs: registered,
        iou: mean(&|m| m.iou),
        dice: mean(&|m| m.dice),
        iom: mean(&|m| m.iom),
        sm: mean(&|m| m.sm),
        ssim: mean(&|m| m.ssim),
    };
    let norm = |v: f64| {
        normalize_report(v, registered, total, Direction::HigherBetter)
            .expect("counts consistent by construction")
    };
    let normalized = MetricTable {
        pairs: registered,
        iou: norm(raw.iou),
        dice: norm(raw.dice),
        iom: norm(raw.iom),
        sm: norm(raw.sm),
        ssim: norm(raw.ssim),
    };
    (raw, normalized)
}

fn summarize(cfg: &RunConfig, pairs: Vec<RegisteredPair>) -> Result<DatasetSummary> {
    let mut pairs = pairs;
    pairs.sort_by(|a, b| a.record.pair_id.cmp(&b.record.pair_id));

    let records: Vec<EvalRecord> = pairs.iter().map(|p| p.record.clone()).collect();
    let all_refs: Vec<&EvalRecord> = records.iter().collect();
    let (raw, normalized) = tabulate(&all_refs);

    let mut per_category = BTreeMap::new();
    let categories: std::collections::BTreeSet<String> =
        records.iter().filter_map(|r| r.category.clone()).collect();
    for category in categories {
        let refs: Vec<&EvalRecord> = records
            .iter()
            .filter(|r| r.category.as_deref() == Some(category.as_str()))
            .collect();
        let (c_raw, c_norm) = tabulate(&refs);
        per_category.insert(
            category,
            CategorySummary {
                total: refs.len(),
                raw: c_raw,
                normalized: c_norm,
            },
        );
    }

    let with_cps: Vec<&RegisteredPair> = pairs
        .iter()
        .filter(|p| p.control_points.is_some())
        .collect();
    let (score, vtkrs_value) = if with_cps.is_empty() {
        (None, None)
    } else {
        let errors: Vec<Option<f64>> = with_cps
            .iter()
            .map(|p| {
                p.record
                    .registered
                    .then_some(p.record.cp_error_px)
                    .flatten()
            })
            .collect();
        let score = registration_score(&errors, REGISTRATION_SCORE_MAX_PX)?;
        let vtkrs_pairs: Vec<VtkrsPair> = with_cps
            .iter()
            .map(|p| VtkrsPair {
                matches: p.matches.clone(),
                control_points: p.control_points.clone().expect("filtered on presence"),
            })
            .collect();
        let v = vtkrs(
            &vtkrs_pairs,
            &RansacConfig {
                seed: cfg.seed,
                ..cfg.ransac
            },
            3..=25,
            REGISTRATION_SCORE_MAX_PX,
        )?;
        (Some(score), Some(v))
    };

    Ok(DatasetSummary {
        seed: cfg.seed,
        total_pairs: records.len(),
        raw,
        normalized,
        per_category,
        registration_score: score,
        vtkrs: vtkrs_value,
        records,
    })
}

/// Evaluates every pairing with a bounded worker pool. Results are
/// deterministic for a fixed seed regardless of thread count.
pub fn evaluate_dataset(records: &[PairingRecord], cfg: &RunConfig) -> Result<DatasetSummary> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
    let results: Vec<Result<RegisteredPair>> = pool.install(|| {
        records
            .par_iter()
            .map(|rec| register_pair(rec, cfg))
            .collect()
    });
    let mut pairs = Vec::with_capacity(results.len());
    for result in results {
        pairs.push(result?);
    }
    summarize(cfg, pairs)
}

/// In-memory evaluation over synthetic pairs (same path as
/// [`evaluate_dataset`] minus file I/O).
pub fn evaluate_synth_pairs(pairs: &[SynthPair], cfg: &RunConfig) -> Result<DatasetSummary> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
    let results: Vec<Result<RegisteredPair>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|pair| {
                let size = pair.fixed.image.size();
                let fixed_hm = make_heatmap(&pair.fixed.keypoints, size, &cfg.detect)?;
                let moving_hm = make_heatmap(&pair.moving.keypoints, size, &cfg.detect)?;
                register_pair_inputs(
                    &PairInputs {
                        pair_id: format!("synth_{:06}", pair.seed),
                        category: None,
                        fixed_heatmaps: &fixed_hm,
                        moving_heatmaps: &moving_hm,
                        fixed_desc: &pair.fixed.descriptor_map,
                        moving_desc: &pair.moving.descriptor_map,
                        fixed_image: Some(&pair.fixed.image),
                        moving_image: Some(&pair.moving.image),
                        fixed_mask: Some(&pair.fixed.vessel_mask),
                        moving_mask: Some(&pair.moving.vessel_mask),
                        control_points: Some(&pair.control_points),
                    },
                    cfg,
                )
            })
            .collect()
    });
    let mut registered = Vec::with_capacity(results.len());
    for result in results {
        registered.push(result?);
    }
    summarize(cfg, registered)
}

/// Checkerboard blend of the fixed image and the warped moving image.
pub fn overlay_checkerboard(fixed: &Image, warped: &Image, tile: usize) -> Image {
    let (w, h) = fixed.size();
    let channels = fixed.channels().max(warped.channels());
    let mut out = Image::zeros(w, h, channels);
    let sample = |img: &Image, x: usize, y: usize, c: usize| -> f32 {
        if x < img.width() && y < img.height() {
            img.get(x, y, c.min(img.channels() - 1))
        } else {
            0.0
        }
    };
    for y in 0..h {
        for x in 0..w {
            let use_fixed = (x / tile + y / tile) % 2 == 0;
            for c in 0..channels {
                let v = if use_fixed {
                    sample(fixed, x, y, c)
                } else {
                    sample(warped, x, y, c)
                };
                out.set(x, y, c, v);
            }
        }
    }
    out
}

pub fn write_summary_json(path: &Path, summary: &DatasetSummary) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

/// Per-pair CSV mirroring the JSON records.
pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::from(
        "pair_id,category,registered,reason,inliers,cp_error_px,iou,dice,iom,sm,ssim\n",
    );
    for r in records {
        let reason = r.reason.map(|x| format!("{x:?}")).unwrap_or_default();
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let m = r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.pair_id,
            r.category.clone().unwrap_or_default(),
            r.registered,
            reason,
            r.inliers,
            fmt_opt(r.cp_error_px),
            fmt_opt(m.map(|m| m.iou)),
            fmt_opt(m.map(|m| m.dice)),
            fmt_opt(m.map(|m| m.iom)),
            fmt_opt(m.map(|m| m.sm)),
            fmt_opt(m.map(|m| m.ssim)),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a synthetic dataset in the on-disk layout `evaluate` ingests:
/// per-pair PNGs, heatmap and descriptor tensors, masks, FIRE-style control
/// points, and the pairing CSV. Returns the pairing-file path.
pub fn export_synth_dataset(
    dir: &Path,
    configs: &[SynthConfig],
    detect: &DetectConfig,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from(
        "fixed,moving,category,heatmap_f,heatmap_m,desc_f,desc_m,mask_f,mask_m,control_points\n",
    );
    for (i, cfg) in configs.iter().enumerate() {
        let pair = gen_synth_pair(cfg)?;
        let tag = format!("pair_{i:04}");
        let size = pair.fixed.image.size();

        save_png(&dir.join(format!("{tag}_fixed.png")), &pair.fixed.image)?;
        save_png(&dir.join(format!("{tag}_moving.png")), &pair.moving.image)?;
        let hm_f = make_heatmap(&pair.fixed.keypoints, size, detect)?;
        let hm_m = make_heatmap(&pair.moving.keypoints, size, detect)?;
        write_tensor(&dir.join(format!("{tag}_hm_f.tns")), &hm_f.to_tensor())?;
        write_tensor(&dir.join(format!("{tag}_hm_m.tns")), &hm_m.to_tensor())?;
        write_tensor(
            &dir.join(format!("{tag}_desc_f.tns")),
            &pair.fixed.descriptor_map,
        )?;
        write_tensor(
            &dir.join(format!("{tag}_desc_m.tns")),
            &pair.moving.descriptor_map,
        )?;
        crate::tensorio::save_mask(
            &dir.join(format!("{tag}_mask_f.png")),
            &pair.fixed.vessel_mask,
        )?;
        crate::tensorio::save_mask(
            &dir.join(format!("{tag}_mask_m.png")),
            &pair.moving.vessel_mask,
        )?;
        let cps: String = pair
            .control_points
            .pairs
            .iter()
            .map(|(f, m)| format!("{} {} {} {}\n", f.x, f.y, m.x, m.y))
            .collect();
        fs::write(dir.join(format!("{tag}_cps.txt")), cps)?;

        csv.push_str(&format!(
            "{tag}_fixed.png,{tag}_moving.png,synth,{tag}_hm_f.tns,{tag}_hm_m.tns,{tag}_desc_f.tns,{tag}_desc_m.tns,{tag}_mask_f.png,{tag}_mask_m.png,{tag}_cps.txt\n"
        ));
    }
    let csv_path = dir.join("pairings.csv");
    fs::write(&csv_path, csv)?;
    Ok(csv_path)
}
