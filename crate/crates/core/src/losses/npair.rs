//! Multi-positive N-Pair loss: the MP-InfoNCE structure with no temperature,
//! i.e. raw dot products in the exponentials.
//!
//! L = sum_i (1/|I'|) sum_{x in X_i} (1/|X_i|) sum_{j > i}
//!         -log( exp(u_x . u_{p_j(x)})
//!               / sum_{c in C_ij(x)} exp(u_x . u_c) )
//!
//! Kept as an independent transcription rather than a tau=1 delegate so the
//! identity with InfoNCE at tau = 1 is a real cross-check between two code
//! paths.

use super::{axpy, backprop_normalization, gram_matrix, EmbeddingSet, LossConfig, LossOutput};

pub fn mp_npair_loss(e: &EmbeddingSet, _cfg: &LossConfig) -> LossOutput {
    let rows = e.rows();
    let dim = e.dim();
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
                max_logit = max_logit.max(gram[x * rows + c]);
            }
            let mut z = 0.0;
            for &c in &candidates {
                z += (gram[x * rows + c] - max_logit).exp();
            }
            let lse = max_logit + z.ln();

            value += weight * (lse - gram[x * rows + p]);

            let u_x = &unit[x * dim..(x + 1) * dim];
            axpy(&mut ghat, p * dim, -weight, u_x);
            axpy(&mut ghat, x * dim, -weight, &unit[p * dim..(p + 1) * dim]);
            for &c in &candidates {
                let sigma = (gram[x * rows + c] - lse).exp();
                axpy(&mut ghat, c * dim, weight * sigma, u_x);
                axpy(
                    &mut ghat,
                    x * dim,
                    weight * sigma,
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
    use crate::losses::test_support::random_instance;
    use crate::losses::{mp_infonce_loss, LossConfig};

    #[test]
    fn equals_infonce_at_unit_temperature() {
        let npair_cfg = LossConfig::default();
        let unit_tau = LossConfig {
            tau: 1.0,
            ..LossConfig::default()
        };
        for seed in 0..100 {
            let e = random_instance(2, 3, 6, 500 + seed);
            let a = mp_npair_loss(&e, &npair_cfg);
            let b = mp_infonce_loss(&e, &unit_tau);
            assert!(
                (a.value - b.value).abs() < 1e-12,
                "seed {seed}: {} vs {}",
                a.value,
                b.value
            );
            for (ga, gb) in a.grad.iter().zip(&b.grad) {
                assert!((ga - gb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invariant_under_keypoint_relabeling() {
        // Renumbering the keypoints (consistently across all views) only
        // reorders the summed terms.
        for seed in 0..20 {
            let e = random_instance(2, 4, 8, 900 + seed);
            let sets = *e.sets();
            let dim = e.dim();
            let kp_map = [2usize, 0, 3, 1];
            let mut permuted = vec![0.0; e.data().len()];
            for view in 0..=sets.n_views() {
                for kp in 0..sets.keypoints_per_view() {
                    let src = sets.sample(view, kp);
                    let dst = sets.sample(view, kp_map[kp]);
                    permuted[dst * dim..(dst + 1) * dim]
                        .copy_from_slice(&e.data()[src * dim..(src + 1) * dim]);
                }
            }
            let pe = EmbeddingSet::new(sets, dim, permuted).unwrap();
            let a = mp_npair_loss(&e, &LossConfig::default()).value;
            let b = mp_npair_loss(&pe, &LossConfig::default()).value;
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}
