//! Registration evaluation: control-point registration score (AUC to 25 px),
//! VTKRS, vessel-overlap metrics, the reformulated SSIM structure term, rank
//! correlations, and normalized reporting.

mod correlation;
mod overlap;
mod registration;
mod report;
mod structure;

pub use correlation::{kendall_tau, spearman};
pub use overlap::{dice, iom, iou};
pub use registration::{
    cp_error, registration_score, vtkrs, ControlPointSet, ScoredCorrespondence, VtkrsPair,
    REGISTRATION_SCORE_MAX_PX,
};
pub use report::{normalize_report, Direction, EvalRecord, FailureReason, PairMetrics};
pub use structure::{
    sm_metric, sm_metric_masked, sm_per_scale, ssim_metric, ssim_metric_masked, structure_term,
    structure_term_classical, SmConfig,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("all control points are excluded")]
    AllPointsExcluded,
    #[error("empty input")]
    EmptyInput,
    #[error("mask dims mismatch: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("image {w}x{h} smaller than the largest window {window}")]
    ImageTooSmall { w: usize, h: usize, window: usize },
    #[error("input lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("correlation undefined for constant input")]
    ConstantInput,
    #[error("need at least 2 observations, got {0}")]
    InsufficientData(usize),
    #[error("bad counts: registered {registered} of total {total}")]
    BadCounts { registered: usize, total: usize },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

pub(crate) type Result<T> = std::result::Result<T, MetricsError>;
