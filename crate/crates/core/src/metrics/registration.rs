//! Control-point error, the registration score (AUC of the success-rate
//! curve up to 25 px), and VTKRS.

use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};
use crate::geometry::{apply_homography, ransac_homography, Homography, Point2, RansacConfig};
use crate::keypoints::KeypointClass;

pub const REGISTRATION_SCORE_MAX_PX: f64 = 25.0;

/// Ground-truth correspondences `(fixed, moving)` at native resolution, with
/// optional excluded indices (mislabeled points).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPointSet {
    pub pairs: Vec<(Point2, Point2)>,
    pub exclusions: Vec<usize>,
}

impl ControlPointSet {
    pub fn new(pairs: Vec<(Point2, Point2)>) -> Self {
        Self {
            pairs,
            exclusions: Vec::new(),
        }
    }
}

/// Mean Euclidean distance between `H(moving)` and the fixed control points,
/// skipping exclusions. A degenerate projection counts as infinite error.
pub fn cp_error(h: &Homography, cps: &ControlPointSet) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (fixed, moving)) in cps.pairs.iter().enumerate() {
        if cps.exclusions.contains(&i) {
            continue;
        }
        let distance = match apply_homography(h, *moving) {
            Ok(p) => p.distance(fixed),
            Err(_) => f64::INFINITY,
        };
        total += distance;
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::AllPointsExcluded);
    }
    Ok(total / count as f64)
}

/// Registration score: AUC of the success-rate-vs-threshold curve up to
/// `max_threshold` px of mean control-point error, in closed form. Each pair
/// contributes `clamp((T - err) / T, 0, 1)`; failed registrations (None)
/// contribute 0.
pub fn registration_score(errors: &[Option<f64>], max_threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let total: f64 = errors
        .iter()
        .map(|e| match e {
            Some(err) => ((max_threshold - err) / max_threshold).clamp(0.0, 1.0),
            None => 0.0,
        })
        .sum();
    Ok(total / errors.len() as f64)
}

/// One mutual match carried to native resolution, with the similarity used
/// for top-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCorrespondence {
    pub moving: Point2,
    pub fixed: Point2,
    pub class: KeypointClass,
    pub similarity: f64,
}

/// Per-pair input for VTKRS: all mutual matches plus the pair's control
/// points.
#[derive(Debug, Clone, PartialEq)]
pub struct VtkrsPair {
    pub matches: Vec<ScoredCorrespondence>,
    pub control_points: ControlPointSet,
}

fn top_k_by_class(matches: &[ScoredCorrespondence], k: usize) -> Vec<(Point2, Point2)> {
    let mut out = Vec::new();
    for class in KeypointClass::ALL {
        let mut in_class: Vec<&ScoredCorrespondence> =
            matches.iter().filter(|m| m.class == class).collect();
        in_class.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
        out.extend(in_class.iter().take(k).map(|m| (m.moving, m.fixed)));
    }
    out
}

/// Variable Top Keypoint Registration Score: for each k in `k_range`, keep
/// only the top-k matches of each class by similarity (clamped to what is
/// available), re-run RANSAC, and score the dataset; the scalar is the mean
/// of the per-k registration scores. Pairs that fail contribute 0 for that k.
pub fn vtkrs(
    pairs: &[VtkrsPair],
    ransac: &RansacConfig,
    k_range: std::ops::RangeInclusive<usize>,
    max_threshold: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut per_k_scores = Vec::new();
    for k in k_range {
        let errors: Vec<Option<f64>> = pairs
            .iter()
            .map(|pair| {
                let picked = top_k_by_class(&pair.matches, k);
                let (h, _) = ransac_homography(&picked, ransac).ok()?;
                cp_error(&h, &pair.control_points).ok()
            })
            .collect();
        per_k_scores.push(registration_score(&errors, max_threshold)?);
    }
    Ok(per_k_scores.iter().sum::<f64>() / per_k_scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cp_error_known_values() {
        let h = Homography::identity();
        let same = ControlPointSet::new(vec![
            (Point2::new(1.0, 2.0), Point2::new(1.0, 2.0)),
            (Point2::new(5.0, 5.0), Point2::new(5.0, 5.0)),
        ]);
        assert_eq!(cp_error(&h, &same).unwrap(), 0.0);

        let offset = ControlPointSet::new(vec![
            (Point2::new(3.0, 4.0), Point2::new(0.0, 0.0)),
            (Point2::new(13.0, 24.0), Point2::new(10.0, 20.0)),
        ]);
        assert!((cp_error(&h, &offset).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn cp_error_respects_exclusions() {
        let h = Homography::identity();
        let mut cps = ControlPointSet::new(vec![
            (Point2::new(0.0, 0.0), Point2::new(0.0, 0.0)),
            (Point2::new(100.0, 0.0), Point2::new(0.0, 0.0)), // mislabeled
        ]);
        assert!((cp_error(&h, &cps).unwrap() - 50.0).abs() < 1e-12);
        cps.exclusions = vec![1];
        assert_eq!(cp_error(&h, &cps).unwrap(), 0.0);
        cps.exclusions = vec![0, 1];
        assert!(matches!(
            cp_error(&h, &cps),
            Err(MetricsError::AllPointsExcluded)
        ));
    }

    #[test]
    fn registration_score_known_values() {
        assert_eq!(
            registration_score(&[Some(0.0), Some(0.0)], 25.0).unwrap(),
            1.0
        );
        assert_eq!(registration_score(&[Some(12.5)], 25.0).unwrap(), 0.5);
        assert_eq!(registration_score(&[None], 25.0).unwrap(), 0.0);
        assert_eq!(registration_score(&[Some(30.0)], 25.0).unwrap(), 0.0);
        assert!(matches!(
            registration_score(&[], 25.0),
            Err(MetricsError::EmptyInput)
        ));
    }

    #[test]
    fn registration_score_monotone_in_single_error() {
        let mut last = f64::INFINITY;
        for err in [0.0, 1.0, 5.0, 12.5, 24.9, 25.0, 40.0] {
            let s = registration_score(&[Some(err), Some(3.0)], 25.0).unwrap();
            assert!(s <= last);
            assert!((0.0..=1.0).contains(&s));
            last = s;
        }
    }

    fn planted_vtkrs_pair(rng: &mut ChaCha8Rng, n_matches: usize) -> (Homography, VtkrsPair) {
        // Random affine-ish homography; matches are exact correspondences.
        let angle: f64 = rng.gen_range(-0.3..0.3);
        let (s, c) = angle.sin_cos();
        let truth = Homography::from_rows([
            [c, -s, rng.gen_range(-20.0..20.0)],
            [s, c, rng.gen_range(-20.0..20.0)],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let mut matches = Vec::new();
        for i in 0..n_matches {
            let moving = Point2::new(rng.gen_range(0.0..400.0), rng.gen_range(0.0..400.0));
            let fixed = apply_homography(&truth, moving).unwrap();
            matches.push(ScoredCorrespondence {
                moving,
                fixed,
                class: if i % 2 == 0 {
                    KeypointClass::Crossover
                } else {
                    KeypointClass::Bifurcation
                },
                similarity: rng.gen_range(0.5..1.0),
            });
        }
        let cps = ControlPointSet::new(
            (0..10)
                .map(|_| {
                    let moving = Point2::new(rng.gen_range(0.0..400.0), rng.gen_range(0.0..400.0));
                    (apply_homography(&truth, moving).unwrap(), moving)
                })
                .collect(),
        );
        (
            truth,
            VtkrsPair {
                matches,
                control_points: cps,
            },
        )
    }

    #[test]
    fn vtkrs_on_exact_matches_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<VtkrsPair> = (0..4).map(|_| planted_vtkrs_pair(&mut rng, 40).1).collect();
        let score = vtkrs(&pairs, &RansacConfig::default(), 3..=25, 25.0).unwrap();
        assert!(score > 0.999, "vtkrs {score}");
    }

    #[test]
    fn vtkrs_fails_to_zero_with_three_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, mut pair) = planted_vtkrs_pair(&mut rng, 3);
        pair.matches.truncate(3);
        let score = vtkrs(&[pair], &RansacConfig::default(), 3..=25, 25.0).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn vtkrs_clamps_k_to_available_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, pair) = planted_vtkrs_pair(&mut rng, 8);
        // k up to 25 with only 8 matches available: still scores by using
        // them all.
        let score = vtkrs(&[pair], &RansacConfig::default(), 20..=25, 25.0).unwrap();
        assert!(score > 0.999, "vtkrs {score}");
    }
}
