//! Vessel-mask overlap metrics: DICE, IoU, and intersection-over-minimum.

use super::{MetricsError, Result};
use crate::tensorio::VesselMask;

fn counts(a: &VesselMask, b: &VesselMask) -> Result<(usize, usize, usize)> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MetricsError::DimMismatch {
            a_w: a.width(),
            a_h: a.height(),
            b_w: b.width(),
            b_h: b.height(),
        });
    }
    let mut inter = 0;
    let mut count_a = 0;
    let mut count_b = 0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        count_a += x as usize;
        count_b += y as usize;
    }
    Ok((inter, count_a, count_b))
}

/// `2|A ∩ B| / (|A| + |B|)`; 0 when both masks are empty.
pub fn dice(a: &VesselMask, b: &VesselMask) -> Result<f64> {
    let (inter, ca, cb) = counts(a, b)?;
    if ca + cb == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * inter as f64 / (ca + cb) as f64)
}

/// `|A ∩ B| / |A ∪ B|`; 0 when both masks are empty.
pub fn iou(a: &VesselMask, b: &VesselMask) -> Result<f64> {
    let (inter, ca, cb) = counts(a, b)?;
    let union = ca + cb - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// `|A ∩ B| / min(|A|, |B|)`; robust to segmentation imperfection since a
/// subset relation scores 1. 0 when either mask is empty.
pub fn iom(a: &VesselMask, b: &VesselMask) -> Result<f64> {
    let (inter, ca, cb) = counts(a, b)?;
    let min = ca.min(cb);
    if min == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / min as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(w: usize, h: usize, bits: &[u8]) -> VesselMask {
        VesselMask::new(w, h, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    #[test]
    fn known_values() {
        let a = mask(4, 1, &[1, 1, 0, 0]);
        let b = mask(4, 1, &[0, 0, 1, 1]);
        let same = mask(4, 1, &[1, 1, 0, 0]);
        assert_eq!(dice(&a, &same).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &same).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(iom(&a, &b).unwrap(), 0.0);

        // A subset of B scores 1 on IoM.
        let sub = mask(4, 1, &[1, 0, 0, 0]);
        let sup = mask(4, 1, &[1, 1, 1, 0]);
        assert_eq!(iom(&sub, &sup).unwrap(), 1.0);
    }

    #[test]
    fn pixel_count_cases() {
        // |A| = |B| = 100, overlap 50, union 150 on a 20x10 grid.
        let mut a_bits = vec![0u8; 200];
        let mut b_bits = vec![0u8; 200];
        for i in 0..100 {
            a_bits[i] = 1;
        }
        for i in 50..150 {
            b_bits[i] = 1;
        }
        let a = mask(20, 10, &a_bits);
        let b = mask(20, 10, &b_bits);
        assert!((dice(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        // overlap 50, min area 80.
        let mut c_bits = vec![0u8; 200];
        for i in 0..80 {
            c_bits[i] = 1;
        }
        let mut d_bits = vec![0u8; 200];
        for i in 30..160 {
            d_bits[i] = 1;
        }
        let c = mask(20, 10, &c_bits);
        let d = mask(20, 10, &d_bits);
        assert!((iom(&c, &d).unwrap() - 50.0 / 80.0).abs() < 1e-12);
    }

    #[test]
    fn empty_conventions_and_mismatch() {
        let empty = mask(2, 2, &[0, 0, 0, 0]);
        assert_eq!(dice(&empty, &empty).unwrap(), 0.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 0.0);
        assert_eq!(iom(&empty, &empty).unwrap(), 0.0);
        let other = mask(2, 1, &[1, 1]);
        assert!(matches!(
            dice(&empty, &other),
            Err(MetricsError::DimMismatch { .. })
        ));
    }

    #[test]
    fn metric_relations_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let bits_a: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1)).collect();
            let bits_b: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1)).collect();
            let a = mask(8, 8, &bits_a);
            let b = mask(8, 8, &bits_b);
            let (d, i, m) = (
                dice(&a, &b).unwrap(),
                iou(&a, &b).unwrap(),
                iom(&a, &b).unwrap(),
            );
            // Symmetry.
            assert_eq!(d, dice(&b, &a).unwrap());
            assert_eq!(i, iou(&b, &a).unwrap());
            assert_eq!(m, iom(&b, &a).unwrap());
            // Orderings and bounds.
            assert!(m >= i - 1e-12);
            assert!(d >= i - 1e-12);
            for v in [d, i, m] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
