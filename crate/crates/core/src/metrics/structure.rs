//! Sliding-window SSIM with the reformulated structure term, and the
//! structure-only SM metric.
//!
//! The classical structure term `(cov + c3) / (sx sy + c3)` approaches 1 when
//! both windows are nearly constant, rewarding misregistrations that land
//! background on background. The reformulated term drops the numerator
//! stabilizer, `cov / (sx sy + c4)` with tiny c4, so constant regions score 0
//! instead.
//!
//! Both metrics run multi-scale (windows 11/33/55/111), sliding by half a
//! window with a final edge-aligned window per row/column, on grayscale
//! images. A window is skipped when both sides are constant (no structural
//! information either way) or, in the masked variants, when any pixel of the
//! window is outside the validity region. Scales without any usable window
//! are skipped; if nothing remains the metric is 0.

use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};
use crate::tensorio::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmConfig {
    pub c1: f64,
    pub c2: f64,
    /// Classical structure-term stabilizer, kept for the failure-mode
    /// comparison; the reformulated term does not use it.
    pub c3: f64,
    pub c4: f64,
    pub window_sizes: Vec<usize>,
}

impl Default for SmConfig {
    fn default() -> Self {
        // Standard SSIM constants with dynamic range L = 1; c3 = c2 / 2.
        let c2 = 0.03f64 * 0.03;
        Self {
            c1: 0.01 * 0.01,
            c2,
            c3: c2 / 2.0,
            c4: 1e-10,
            window_sizes: vec![11, 33, 55, 111],
        }
    }
}

struct WindowStats {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

/// Sample (n-1 normalized) moments of two aligned windows.
fn window_stats(x: &[f64], y: &[f64]) -> WindowStats {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    let denom = (n - 1.0).max(1.0);
    WindowStats {
        mean_x,
        mean_y,
        var_x: var_x / denom,
        var_y: var_y / denom,
        cov: cov / denom,
    }
}

/// Reformulated structure term `cov / (sx sy + c4)`, clamped to `[-1, 1]`.
pub fn structure_term(x: &[f64], y: &[f64], cfg: &SmConfig) -> f64 {
    let s = window_stats(x, y);
    (s.cov / (s.var_x.sqrt() * s.var_y.sqrt() + cfg.c4)).clamp(-1.0, 1.0)
}

/// Classical structure term `(cov + c3) / (sx sy + c3)`; kept to demonstrate
/// the constant-window failure mode.
pub fn structure_term_classical(x: &[f64], y: &[f64], cfg: &SmConfig) -> f64 {
    let s = window_stats(x, y);
    ((s.cov + cfg.c3) / (s.var_x.sqrt() * s.var_y.sqrt() + cfg.c3)).clamp(-1.0, 1.0)
}

fn ssim_term(x: &[f64], y: &[f64], cfg: &SmConfig) -> f64 {
    let s = window_stats(x, y);
    let luminance =
        (2.0 * s.mean_x * s.mean_y + cfg.c1) / (s.mean_x * s.mean_x + s.mean_y * s.mean_y + cfg.c1);
    let contrast = (2.0 * s.var_x.sqrt() * s.var_y.sqrt() + cfg.c2) / (s.var_x + s.var_y + cfg.c2);
    let structure = (s.cov / (s.var_x.sqrt() * s.var_y.sqrt() + cfg.c4)).clamp(-1.0, 1.0);
    luminance * contrast * structure
}

/// Window origins covering `0..=len-window` with stride `window / 2`, always
/// including the edge-aligned final position.
fn window_origins(len: usize, window: usize) -> Vec<usize> {
    let stride = (window / 2).max(1);
    let last = len - window;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

fn check_inputs(a: &Image, b: &Image, largest: usize) -> Result<()> {
    debug_assert_eq!(a.channels(), 1, "SM/SSIM expect grayscale input");
    debug_assert_eq!(b.channels(), 1, "SM/SSIM expect grayscale input");
    if a.size() != b.size() {
        return Err(MetricsError::DimMismatch {
            a_w: a.width(),
            a_h: a.height(),
            b_w: b.width(),
            b_h: b.height(),
        });
    }
    if a.width() < largest || a.height() < largest {
        return Err(MetricsError::ImageTooSmall {
            w: a.width(),
            h: a.height(),
            window: largest,
        });
    }
    Ok(())
}

/// Per-scale mean of `term` over sliding windows; `None` when the scale has
/// no usable window.
fn scale_mean(
    a: &Image,
    b: &Image,
    valid: Option<&[bool]>,
    window: usize,
    term: &dyn Fn(&[f64], &[f64]) -> f64,
) -> Option<f64> {
    let (w, h) = a.size();
    if window > w || window > h {
        return None;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut win_a = vec![0.0; window * window];
    let mut win_b = vec![0.0; window * window];
    for &oy in &window_origins(h, window) {
        'next_window: for &ox in &window_origins(w, window) {
            let mut idx = 0;
            let mut min_a = f64::INFINITY;
            let mut max_a = f64::NEG_INFINITY;
            let mut min_b = f64::INFINITY;
            let mut max_b = f64::NEG_INFINITY;
            for y in oy..oy + window {
                for x in ox..ox + window {
                    if let Some(mask) = valid {
                        if !mask[y * w + x] {
                            continue 'next_window;
                        }
                    }
                    let va = a.get(x, y, 0) as f64;
                    let vb = b.get(x, y, 0) as f64;
                    win_a[idx] = va;
                    win_b[idx] = vb;
                    idx += 1;
                    min_a = min_a.min(va);
                    max_a = max_a.max(va);
                    min_b = min_b.min(vb);
                    max_b = max_b.max(vb);
                }
            }
            // Constant on both sides: no structural information.
            if min_a == max_a && min_b == max_b {
                continue;
            }
            total += term(&win_a, &win_b);
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

fn multiscale(
    a: &Image,
    b: &Image,
    valid: Option<&[bool]>,
    cfg: &SmConfig,
    term: &dyn Fn(&[f64], &[f64]) -> f64,
) -> Result<f64> {
    let largest = cfg.window_sizes.iter().copied().max().unwrap_or(0);
    check_inputs(a, b, largest)?;
    let scales: Vec<f64> = cfg
        .window_sizes
        .iter()
        .filter_map(|&ws| scale_mean(a, b, valid, ws, term))
        .collect();
    if scales.is_empty() {
        return Ok(0.0);
    }
    Ok(scales.iter().sum::<f64>() / scales.len() as f64)
}

/// Per-scale SM values `(window, mean structure term)`, skipping scales with
/// no usable window.
pub fn sm_per_scale(a: &Image, b: &Image, cfg: &SmConfig) -> Result<Vec<(usize, f64)>> {
    let largest = cfg.window_sizes.iter().copied().max().unwrap_or(0);
    check_inputs(a, b, largest)?;
    Ok(cfg
        .window_sizes
        .iter()
        .filter_map(|&ws| {
            scale_mean(a, b, None, ws, &|x, y| structure_term(x, y, cfg)).map(|v| (ws, v))
        })
        .collect())
}

/// Multi-scale mean of the reformulated structure term on grayscale images.
pub fn sm_metric(a: &Image, b: &Image, cfg: &SmConfig) -> Result<f64> {
    multiscale(a, b, None, cfg, &|x, y| structure_term(x, y, cfg))
}

/// [`sm_metric`] restricted to windows fully inside the validity mask
/// (row-major, dims of the images).
pub fn sm_metric_masked(
    a: &Image,
    b: &Image,
    valid: Option<&[bool]>,
    cfg: &SmConfig,
) -> Result<f64> {
    multiscale(a, b, valid, cfg, &|x, y| structure_term(x, y, cfg))
}

/// Multi-scale SSIM (luminance * contrast * reformulated structure).
pub fn ssim_metric(a: &Image, b: &Image, cfg: &SmConfig) -> Result<f64> {
    multiscale(a, b, None, cfg, &|x, y| ssim_term(x, y, cfg))
}

/// [`ssim_metric`] restricted to windows fully inside the validity mask.
pub fn ssim_metric_masked(
    a: &Image,
    b: &Image,
    valid: Option<&[bool]>,
    cfg: &SmConfig,
) -> Result<f64> {
    multiscale(a, b, valid, cfg, &|x, y| ssim_term(x, y, cfg))
}
