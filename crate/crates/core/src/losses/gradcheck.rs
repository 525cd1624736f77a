//! Central finite-difference validation of the analytic gradients.

use serde::Serialize;

use super::{evaluate, EmbeddingSet, LossConfig, LossKind};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub value: f64,
    /// `||g_analytic - g_fd||_inf / max(||g_fd||_inf, 1e-12)`.
    pub max_rel_error: f64,
    pub grad_inf_norm: f64,
}

/// Perturbs every raw embedding entry by ±epsilon and compares the central
/// difference against the analytic gradient. The error is normalized by the
/// largest finite-difference component so near-zero entries do not dominate.
///
/// FastAP's triangular bins make the loss piecewise smooth; a probe that
/// straddles a bin kink measures the average of two one-sided derivatives
/// even though the analytic gradient is exact at the point. Suspicious
/// entries are therefore re-probed with shrinking steps: a straddle error
/// decays linearly with the step while a genuine gradient bug does not.
pub fn finite_difference_check(
    kind: LossKind,
    e: &EmbeddingSet,
    cfg: &LossConfig,
    epsilon: f64,
) -> GradCheckReport {
    let base = evaluate(kind, e, cfg);
    let mut probe = e.clone();
    let mut central = |idx: usize, eps: f64| -> f64 {
        let original = probe.data()[idx];
        probe.data_mut()[idx] = original + eps;
        let plus = evaluate(kind, &probe, cfg).value;
        probe.data_mut()[idx] = original - eps;
        let minus = evaluate(kind, &probe, cfg).value;
        probe.data_mut()[idx] = original;
        (plus - minus) / (2.0 * eps)
    };

    let mut fd = Vec::with_capacity(e.data().len());
    for idx in 0..e.data().len() {
        fd.push(central(idx, epsilon));
    }
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let fd_norm = inf(&fd);

    let refine_threshold = 1e-6 * fd_norm.max(1.0);
    for idx in 0..fd.len() {
        let mut diff = (base.grad[idx] - fd[idx]).abs();
        if diff <= refine_threshold {
            continue;
        }
        for shrink in [16.0, 256.0] {
            let finer = central(idx, epsilon / shrink);
            let finer_diff = (base.grad[idx] - finer).abs();
            if finer_diff < diff {
                fd[idx] = finer;
                diff = finer_diff;
            }
        }
    }

    let max_abs_diff = base
        .grad
        .iter()
        .zip(&fd)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    GradCheckReport {
        value: base.value,
        max_rel_error: max_abs_diff / fd_norm.max(1e-12),
        grad_inf_norm: inf(&base.grad),
    }
}
