//! Multi-positive InfoNCE over ordered image pairs.
//!
//! For images i < j of the batch, each anchor x in X_i is contrasted against
//! C_ij(x) = (X_i ∪ X_j) \ {x}, with its positive p_j(x) in image j:
//!
//! L = sum_i (1/|I'|) sum_{x in X_i} (1/|X_i|) sum_{j > i}
//!         -log( exp(u_x . u_{p_j(x)} / tau)
//!               / sum_{c in C_ij(x)} exp(u_x . u_c / tau) )
//!
//! with |I'| = C(N+1, 2) image pairs.

use super::{axpy, backprop_normalization, gram_matrix, EmbeddingSet, LossConfig, LossOutput};

pub fn mp_infonce_loss(e: &EmbeddingSet, cfg: &LossConfig) -> LossOutput {
    let rows = e.rows();
    let dim = e.dim();
    let tau = cfg.tau;
    let sets = e.sets();
    let (unit, norms) = e.normalized();
    let gram = gram_matrix(&unit, rows, dim);

    let weight = 1.0 / (sets.image_pair_count() * sets.keypoints_per_view()) as f64;
    let mut value = 0.0;
    let mut ghat = vec![0.0; rows * dim];

    for (i, j) in sets.image_pairs() {
        for x in sets.image_samples(i) {
            let p = sets.positive_in(j, x);
            let candidates = sets.pair_candidates(i, j, x);

            let mut max_logit = f64::NEG_INFINITY;
            for &c in &candidates {
                max_logit = max_logit.max(gram[x * rows + c] / tau);
            }
            let mut z = 0.0;
            for &c in &candidates {
                z += (gram[x * rows + c] / tau - max_logit).exp();
            }
            let lse = max_logit + z.ln();

            value += weight * (lse - gram[x * rows + p] / tau);

            let u_x = &unit[x * dim..(x + 1) * dim];
            axpy(&mut ghat, p * dim, -weight / tau, u_x);
            axpy(
                &mut ghat,
                x * dim,
                -weight / tau,
                &unit[p * dim..(p + 1) * dim],
            );
            for &c in &candidates {
                let sigma = (gram[x * rows + c] / tau - lse).exp();
                axpy(&mut ghat, c * dim, weight * sigma / tau, u_x);
                axpy(
                    &mut ghat,
                    x * dim,
                    weight * sigma / tau,
                    &unit[c * dim..(c + 1) * dim],
                );
            }
        }
    }

    let grad = backprop_normalization(&unit, &norms, &ghat, dim);
    LossOutput { value, grad }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batchgen::IndexSets;
    use crate::losses::test_support::random_instance;

    /// Exhaustive triple-loop transcription, no stabilization.
    fn brute_force_value(e: &EmbeddingSet, tau: f64) -> f64 {
        let (unit, _) = e.normalized();
        let dim = e.dim();
        let sets = e.sets();
        let dot = |a: usize, b: usize| -> f64 {
            unit[a * dim..(a + 1) * dim]
                .iter()
                .zip(&unit[b * dim..(b + 1) * dim])
                .map(|(x, y)| x * y)
                .sum()
        };
        let pair_count = sets.image_pair_count() as f64;
        let k = sets.keypoints_per_view() as f64;
        let mut total = 0.0;
        for i in 0..=sets.n_views() {
            for x in sets.image_samples(i) {
                for j in (i + 1)..=sets.n_views() {
                    let p = sets.positive_in(j, x);
                    let denom: f64 = sets
                        .pair_candidates(i, j, x)
                        .iter()
                        .map(|&c| (dot(x, c) / tau).exp())
                        .sum();
                    total +=
                        (1.0 / pair_count) * (1.0 / k) * -((dot(x, p) / tau).exp() / denom).ln();
                }
            }
        }
        total
    }

    #[test]
    fn all_equal_embeddings_give_log_2k_minus_1() {
        // Every similarity is 1, so each log term is log(2K - 1) and the
        // nested weights sum to exactly 1.
        for (n, k) in [(1usize, 3usize), (2, 4), (3, 2)] {
            let sets = IndexSets::new(n, k);
            let dim = 5;
            let mut data = vec![0.0; sets.total() * dim];
            for r in 0..sets.total() {
                data[r * dim] = 2.0;
            }
            let e = EmbeddingSet::new(sets, dim, data).unwrap();
            let got = mp_infonce_loss(&e, &LossConfig::default()).value;
            let expected = ((2 * k - 1) as f64).ln();
            assert!(
                (got - expected).abs() < 1e-12,
                "N={n} K={k}: {got} vs {expected}"
            );
            let brute = brute_force_value(&e, 0.1);
            assert!((got - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        for seed in 0..20 {
            let e = random_instance(2, 4, 8, 100 + seed);
            let got = mp_infonce_loss(&e, &LossConfig::default()).value;
            let expected = brute_force_value(&e, 0.1);
            assert!(
                (got - expected).abs() < 1e-12,
                "seed {seed}: {got} vs {expected}"
            );
        }
    }
}
