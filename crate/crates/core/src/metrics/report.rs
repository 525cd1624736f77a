//! Per-pair evaluation records and normalization of dataset-level metrics by
//! the number of registered pairs.

use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};
use crate::geometry::Homography;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Folds unregistered pairs into a dataset-level metric: higher-is-better
/// metrics count failures as 0, lower-is-better ones count them as the
/// worst case 1.0.
pub fn normalize_report(
    raw: f64,
    registered: usize,
    total: usize,
    direction: Direction,
) -> Result<f64> {
    if total == 0 || registered > total {
        return Err(MetricsError::BadCounts { registered, total });
    }
    let reg = registered as f64;
    let tot = total as f64;
    Ok(match direction {
        Direction::HigherBetter => raw * reg / tot,
        Direction::LowerBetter => (raw * reg + (tot - reg)) / tot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    TooFewKeypoints,
    TooFewMatches,
    NoModelFound,
    SanityCheckFailed,
}

/// Surrogate similarity metrics of one registered pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub iou: f64,
    pub dice: f64,
    pub iom: f64,
    pub sm: f64,
    pub ssim: f64,
}

/// Outcome of registering one pair. Metric values are present only when the
/// pair registered and the needed sidecars (images, masks) were available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub registered: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<FailureReason>,
    pub inliers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub homography: Option<Homography>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cp_error_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PairMetrics>,
}

impl EvalRecord {
    pub fn failure(pair_id: String, category: Option<String>, reason: FailureReason) -> Self {
        Self {
            pair_id,
            category,
            registered: false,
            reason: Some(reason),
            inliers: 0,
            homography: None,
            cp_error_px: None,
            metrics: None,
        }
    }
}
