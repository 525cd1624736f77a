//! Supervised-contrastive loss over the multiviewed batch.
//!
//! For every anchor s with positives P(s) and candidate set A(s) = S \ {s}:
//!
//! L = sum_s (-1 / |P(s)|) sum_{p in P(s)}
//!         log( exp(u_s . u_p / tau) / sum_{a in A(s)} exp(u_s . u_a / tau) )
//!
//! evaluated on unit-normalized rows u; the softmax denominator mixes the
//! positives with every negative, same-view keypoints included.

use super::{axpy, backprop_normalization, gram_matrix, EmbeddingSet, LossConfig, LossOutput};

/// Softmax weights the anchor's denominator assigns to every other sample.
///
/// The repulsion the anchor's term exerts on candidate a has magnitude
/// `sigma_a / tau` (times a fixed tangent-projection factor), so these
/// weights are the per-candidate gradient attribution of one anchor;
/// exposed for hardness diagnostics.
pub fn anchor_softmax_weights(
    e: &EmbeddingSet,
    cfg: &LossConfig,
    anchor: usize,
) -> Vec<(usize, f64)> {
    let rows = e.rows();
    let dim = e.dim();
    let (unit, _) = e.normalized();
    let gram = gram_matrix(&unit, rows, dim);
    let tau = cfg.tau;
    let mut max_logit = f64::NEG_INFINITY;
    for a in 0..rows {
        if a != anchor {
            max_logit = max_logit.max(gram[anchor * rows + a] / tau);
        }
    }
    let mut z = 0.0;
    for a in 0..rows {
        if a != anchor {
            z += (gram[anchor * rows + a] / tau - max_logit).exp();
        }
    }
    (0..rows)
        .filter(|&a| a != anchor)
        .map(|a| (a, (gram[anchor * rows + a] / tau - max_logit).exp() / z))
        .collect()
}

pub fn supcon_loss(e: &EmbeddingSet, cfg: &LossConfig) -> LossOutput {
    let rows = e.rows();
    let dim = e.dim();
    let tau = cfg.tau;
    let (unit, norms) = e.normalized();
    let gram = gram_matrix(&unit, rows, dim);

    let mut value = 0.0;
    let mut ghat = vec![0.0; rows * dim];

    for s in 0..rows {
        let positives = e.sets().positives(s);
        let inv_p = 1.0 / positives.len() as f64;

        // Stabilized log-sum-exp over A(s).
        let mut max_logit = f64::NEG_INFINITY;
        for a in 0..rows {
            if a != s {
                max_logit = max_logit.max(gram[s * rows + a] / tau);
            }
        }
        let mut z = 0.0;
        for a in 0..rows {
            if a != s {
                z += (gram[s * rows + a] / tau - max_logit).exp();
            }
        }
        let lse = max_logit + z.ln();

        let u_s = &unit[s * dim..(s + 1) * dim];
        for &p in &positives {
            value += inv_p * (lse - gram[s * rows + p] / tau);
            axpy(&mut ghat, p * dim, -inv_p / tau, u_s);
            axpy(
                &mut ghat,
                s * dim,
                -inv_p / tau,
                &unit[p * dim..(p + 1) * dim],
            );
        }
        // The denominator appears once per positive with weight 1/|P|, so its
        // gradient carries total weight 1 per anchor.
        for a in 0..rows {
            if a == s {
                continue;
            }
            let sigma = (gram[s * rows + a] / tau - lse).exp();
            axpy(&mut ghat, a * dim, sigma / tau, u_s);
            axpy(
                &mut ghat,
                s * dim,
                sigma / tau,
                &unit[a * dim..(a + 1) * dim],
            );
        }
    }

    let grad = backprop_normalization(&unit, &norms, &ghat, dim);
    LossOutput { value, grad }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batchgen::IndexSets;

    /// N=1, K=2 with both identity pairs collapsed to a point and the two
    /// keypoints mutually orthogonal. Each anchor's denominator holds its
    /// exact copy (sim 1) plus two orthogonal samples (sim 0), so every term
    /// is log(1 + 2 exp(-1/tau)) and the total is 4 log(1 + 2 e^-10) at
    /// tau = 0.1.
    #[test]
    fn orthogonal_identity_pairs_closed_form() {
        let sets = IndexSets::new(1, 2);
        let data = vec![
            1.0, 0.0, // view0 kp0
            0.0, 1.0, // view0 kp1
            1.0, 0.0, // view1 kp0
            0.0, 1.0, // view1 kp1
        ];
        let e = EmbeddingSet::new(sets, 2, data).unwrap();
        let out = supcon_loss(&e, &LossConfig::default());
        let expected = 4.0 * (1.0 + 2.0 * (-10.0f64).exp()).ln();
        assert!(
            (out.value - expected).abs() < 1e-15,
            "value {} vs {}",
            out.value,
            expected
        );
        assert!((out.value - 3.63e-4).abs() < 1e-6);
    }

    /// Direct transcription of the formula without stabilization or shared
    /// terms, as an independent route.
    fn brute_force_value(e: &EmbeddingSet, tau: f64) -> f64 {
        let (unit, _) = e.normalized();
        let dim = e.dim();
        let dot = |a: usize, b: usize| -> f64 {
            unit[a * dim..(a + 1) * dim]
                .iter()
                .zip(&unit[b * dim..(b + 1) * dim])
                .map(|(x, y)| x * y)
                .sum()
        };
        let mut total = 0.0;
        for s in 0..e.rows() {
            let positives = e.sets().positives(s);
            let mut anchor = 0.0;
            for &p in &positives {
                let denom: f64 = e
                    .sets()
                    .rest(s)
                    .iter()
                    .map(|&a| (dot(s, a) / tau).exp())
                    .sum();
                anchor += -((dot(s, p) / tau).exp() / denom).ln();
            }
            total += anchor / positives.len() as f64;
        }
        total
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        for seed in 0..20 {
            let e = crate::losses::test_support::random_instance(2, 4, 8, seed);
            let cfg = LossConfig {
                tau: 0.5,
                ..LossConfig::default()
            };
            let got = supcon_loss(&e, &cfg).value;
            let expected = brute_force_value(&e, 0.5);
            assert!(
                (got - expected).abs() < 1e-10,
                "seed {seed}: {got} vs {expected}"
            );
        }
    }
}
