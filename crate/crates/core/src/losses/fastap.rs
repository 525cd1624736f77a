//! Differentiable average-precision loss via soft distance histograms.
//!
//! Per anchor s, the Euclidean distances of all candidates A(s) on the unit
//! sphere (range [0, 2]) are soft-assigned to Q triangular bins with centers
//! spaced `delta = 2 / (Q - 1)` apart; the kernels form a partition of unity,
//! so soft counts sum to the candidate count. The per-anchor average
//! precision accumulates, per bin, the positive mass times its precision at
//! the average within-bin rank:
//!
//! AP_s = (1 / M+) sum_j  h+_j (H+_{j-1} + (h+_j + 1) / 2)
//!                        / (H_{j-1} + (h_j + 1) / 2)
//!
//! with h/h+ the (positive-)counts per bin and H/H+ their cumulative sums.
//! The average-rank form is exact for items isolated in their bin pair no
//! matter how the soft kernel splits them, and its denominators stay >= 1/2,
//! so the surface is smooth. The batch value is the mean AP over anchors and
//! the returned loss is `1 - AP`, so gradient descent maximizes average
//! precision.

use super::{backprop_normalization, gram_matrix, EmbeddingSet, LossConfig, LossOutput};

const EPS_DIST: f64 = 1e-9;

/// Soft histogram bookkeeping for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBins {
    pub counts: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub positive_counts: Vec<f64>,
    pub positive_cumulative: Vec<f64>,
    pub positive_total: f64,
}

struct Candidate {
    row: usize,
    distance: f64,
    bin: usize,
    positive: bool,
}

fn soft_histogram(
    e: &EmbeddingSet,
    gram: &[f64],
    anchor: usize,
    cfg: &LossConfig,
) -> (HistogramBins, Vec<Candidate>) {
    let rows = e.rows();
    let q = cfg.bins;
    let (lo, hi) = cfg.distance_range;
    let delta = (hi - lo) / (q - 1) as f64;
    let positives = e.sets().positives(anchor);

    let mut counts = vec![0.0; q];
    let mut positive_counts = vec![0.0; q];
    let mut candidates = Vec::with_capacity(rows - 1);
    for a in 0..rows {
        if a == anchor {
            continue;
        }
        let sim = gram[anchor * rows + a];
        let distance = (2.0 - 2.0 * sim).max(0.0).sqrt().clamp(lo, hi);
        let bin = (((distance - lo) / delta).floor() as usize).min(q - 2);
        let frac = ((distance - lo) / delta - bin as f64).clamp(0.0, 1.0);
        let positive = positives.contains(&a);
        counts[bin] += 1.0 - frac;
        counts[bin + 1] += frac;
        if positive {
            positive_counts[bin] += 1.0 - frac;
            positive_counts[bin + 1] += frac;
        }
        candidates.push(Candidate {
            row: a,
            distance,
            bin,
            positive,
        });
    }

    let cumsum = |v: &[f64]| {
        let mut acc = 0.0;
        v.iter()
            .map(|x| {
                acc += x;
                acc
            })
            .collect::<Vec<f64>>()
    };
    let bins = HistogramBins {
        cumulative: cumsum(&counts),
        positive_cumulative: cumsum(&positive_counts),
        counts,
        positive_counts,
        positive_total: positives.len() as f64,
    };
    (bins, candidates)
}

/// Soft histogram of one anchor's candidate distances, exposed for
/// inspection and tests.
pub fn anchor_histogram(e: &EmbeddingSet, cfg: &LossConfig, anchor: usize) -> HistogramBins {
    let (unit, _) = e.normalized();
    let gram = gram_matrix(&unit, e.rows(), e.dim());
    soft_histogram(e, &gram, anchor, cfg).0
}

pub fn fastap_loss(e: &EmbeddingSet, cfg: &LossConfig) -> LossOutput {
    let rows = e.rows();
    let dim = e.dim();
    let q = cfg.bins;
    let delta = (cfg.distance_range.1 - cfg.distance_range.0) / (q - 1) as f64;
    let (unit, norms) = e.normalized();
    let gram = gram_matrix(&unit, rows, dim);

    let mut ap_total = 0.0;
    let mut ghat = vec![0.0; rows * dim];
    // d(loss)/d(AP_s): the loss is 1 - mean(AP).
    let dloss_dap = -1.0 / rows as f64;

    for s in 0..rows {
        let (bins, candidates) = soft_histogram(e, &gram, s, cfg);
        let m_plus = bins.positive_total;

        // Per-bin numerators and denominators of the average-rank precision.
        let prev_cum = |v: &[f64], k: usize| if k == 0 { 0.0 } else { v[k - 1] };
        let numer: Vec<f64> = (0..q)
            .map(|k| prev_cum(&bins.positive_cumulative, k) + (bins.positive_counts[k] + 1.0) / 2.0)
            .collect();
        let denom: Vec<f64> = (0..q)
            .map(|k| prev_cum(&bins.cumulative, k) + (bins.counts[k] + 1.0) / 2.0)
            .collect();

        let mut ap = 0.0;
        for k in 0..q {
            ap += bins.positive_counts[k] * numer[k] / denom[k];
        }
        ap /= m_plus;
        ap_total += ap;

        // dAP/dh+_k = (1/M+)(numer_k/denom_k + h+_k/(2 denom_k)
        //             + sum_{j>k} h+_j/denom_j)
        // dAP/dh_k  = -(1/M+)(h+_k numer_k/(2 denom_k^2)
        //             + sum_{j>k} h+_j numer_j/denom_j^2)
        let mut suffix_pos_over_denom = vec![0.0; q + 1];
        let mut suffix_term_over_denom = vec![0.0; q + 1];
        for k in (0..q).rev() {
            suffix_pos_over_denom[k] =
                suffix_pos_over_denom[k + 1] + bins.positive_counts[k] / denom[k];
            suffix_term_over_denom[k] = suffix_term_over_denom[k + 1]
                + bins.positive_counts[k] * numer[k] / (denom[k] * denom[k]);
        }
        let dap_dhp = |k: usize| -> f64 {
            (numer[k] / denom[k]
                + bins.positive_counts[k] / (2.0 * denom[k])
                + suffix_pos_over_denom[k + 1])
                / m_plus
        };
        let dap_dh = |k: usize| -> f64 {
            -(bins.positive_counts[k] * numer[k] / (2.0 * denom[k] * denom[k])
                + suffix_term_over_denom[k + 1])
                / m_plus
        };

        let u_s = s * dim;
        for c in &candidates {
            if c.distance < EPS_DIST {
                continue;
            }
            // Bin weights are w_bin = 1 - frac, w_bin+1 = frac with
            // d(frac)/d(distance) = 1/delta.
            let mut dap_dd = (dap_dh(c.bin + 1) - dap_dh(c.bin)) / delta;
            if c.positive {
                dap_dd += (dap_dhp(c.bin + 1) - dap_dhp(c.bin)) / delta;
            }
            let scale = dloss_dap * dap_dd / c.distance;
            let u_a = c.row * dim;
            for k in 0..dim {
                let diff = unit[u_s + k] - unit[u_a + k];
                ghat[u_s + k] += scale * diff;
                ghat[u_a + k] -= scale * diff;
            }
        }
    }

    let value = 1.0 - ap_total / rows as f64;
    let grad = backprop_normalization(&unit, &norms, &ghat, dim);
    LossOutput { value, grad }
}
