//! Synthetic ground-truth generation and brute-force oracles that make the
//! pipeline testable without datasets or trained networks.
//!
//! A synthetic pair is a fundus-like scene (gradient background + random
//! Bezier vessel strokes) with planted keypoints and per-keypoint random unit
//! descriptors. The moving side is the scene under a random transform within
//! the training augmentation ranges plus a small projective component;
//! translation is bisected so the visible overlap matches the requested
//! fraction. Descriptor maps carry each keypoint's (noise-perturbed)
//! descriptor at its rounded pixel, random filler elsewhere; a configurable
//! fraction of moving descriptors is replaced with fresh random units to
//! plant outliers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::geometry::{apply_homography, warp_image, Homography, Point2};
use crate::keypoints::{Keypoint, KeypointClass};
use crate::metrics::ControlPointSet;
use crate::tensorio::{Image, Tensor, VesselMask};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("overlap {requested} not reachable (no-translation overlap is {reachable:.3})")]
    InfeasibleOverlap { requested: f64, reachable: f64 },
    #[error("need at least 4 keypoints, got {0}")]
    TooFewKeypoints(usize),
    #[error("no positives in the ranking")]
    NoPositives,
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Tensor(#[from] crate::tensorio::TensorIoError),
}

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_keypoints: usize,
    /// Fraction of the fixed frame that stays visible in the moving frame.
    pub overlap_frac: f64,
    /// Per-component Gaussian noise added to each side's descriptors before
    /// re-normalization.
    pub desc_noise_sigma: f64,
    /// Fraction of moving descriptors replaced with fresh random units.
    pub outlier_frac: f64,
    pub seed: u64,
    pub canvas: (usize, usize),
    pub descriptor_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_keypoints: 60,
            overlap_frac: 0.6,
            desc_noise_sigma: 0.0,
            outlier_frac: 0.0,
            seed: 0,
            canvas: (256, 256),
            descriptor_dim: 32,
        }
    }
}

/// One side of a registration pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSide {
    pub image: Image,
    pub keypoints: Vec<Keypoint>,
    pub descriptor_map: Tensor,
    pub vessel_mask: VesselMask,
}

/// A synthetic registration pair with known alignment: `true_h` maps moving
/// coordinates to fixed coordinates, and the control points are the exact
/// shared keypoint correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub fixed: SynthSide,
    pub moving: SynthSide,
    pub true_h: Homography,
    pub control_points: ControlPointSet,
    pub seed: u64,
}

fn stamp_disk(mask: &mut [bool], size: (usize, usize), cx: f64, cy: f64, radius: f64) {
    let (w, h) = size;
    let x0 = ((cx - radius).floor().max(0.0)) as usize;
    let x1 = ((cx + radius).ceil().min(w as f64 - 1.0)) as usize;
    let y0 = ((cy - radius).floor().max(0.0)) as usize;
    let y1 = ((cy + radius).ceil().min(h as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= radius * radius {
                mask[y * w + x] = true;
            }
        }
    }
}

/// Gradient background with dark vessel-like strokes; returns the image and
/// the stroke mask.
fn render_scene(rng: &mut ChaCha8Rng, size: (usize, usize)) -> (Image, VesselMask) {
    let (w, h) = size;
    let mut strokes = vec![false; w * h];
    let n_strokes = 12;
    for _ in 0..n_strokes {
        // Quadratic Bezier with width 2-5 px.
        let p0 = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let p1 = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let p2 = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let width: f64 = rng.gen_range(2.0..5.0);
        let steps = 2 * (w + h);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let u = 1.0 - t;
            let x = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let y = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            stamp_disk(&mut strokes, size, x, y, width / 2.0);
        }
    }

    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f32 / w as f32;
            let fy = y as f32 / h as f32;
            let vessel = strokes[y * w + x];
            let shade = if vessel { 0.45 } else { 1.0 };
            data.push((0.72 + 0.12 * fx) * shade);
            data.push((0.40 + 0.10 * fy) * shade);
            data.push(0.27 * shade);
        }
    }
    let image = Image::new(w, h, 3, data).expect("scene dims consistent");
    let mask = VesselMask::new(w, h, strokes).expect("mask dims consistent");
    (image, mask)
}

fn plant_keypoints(rng: &mut ChaCha8Rng, size: (usize, usize), count: usize) -> Vec<Keypoint> {
    let (w, h) = size;
    let margin = 16.0;
    let min_sep = 8.0; // Chebyshev, comfortably above the 5 px NMS window
    let mut kps: Vec<Keypoint> = Vec::new();
    let mut attempts = 0;
    while kps.len() < count && attempts < 100_000 {
        attempts += 1;
        let x = rng.gen_range(margin..w as f64 - margin);
        let y = rng.gen_range(margin..h as f64 - margin);
        if kps
            .iter()
            .all(|k| (k.pos.x - x).abs().max((k.pos.y - y).abs()) >= min_sep)
        {
            let class = if rng.gen_bool(0.5) {
                KeypointClass::Crossover
            } else {
                KeypointClass::Bifurcation
            };
            kps.push(Keypoint::new(x, y, class, 1.0));
        }
    }
    kps
}

/// Fraction of a coarse fixed-frame grid that lands inside the moving frame
/// under `g` (fixed -> moving).
fn overlap_fraction(g: &Homography, size: (usize, usize)) -> f64 {
    let (w, h) = size;
    let step = 8;
    let mut inside = 0usize;
    let mut total = 0usize;
    let mut y = 0;
    while y < h {
        let mut x = 0;
        while x < w {
            total += 1;
            if let Ok(p) = apply_homography(g, Point2::new(x as f64, y as f64)) {
                if p.x >= 0.0 && p.x <= (w - 1) as f64 && p.y >= 0.0 && p.y <= (h - 1) as f64 {
                    inside += 1;
                }
            }
            x += step;
        }
        y += step;
    }
    inside as f64 / total as f64
}

fn translation(tx: f64, ty: f64) -> Homography {
    Homography::from_rows([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
        .expect("translation is affine")
}

/// Samples the fixed->moving transform: rotation/scale/shear about the
/// center within the augmentation ranges, a small projective component, then
/// a translation bisected to hit the requested overlap.
fn sample_scene_transform(
    rng: &mut ChaCha8Rng,
    size: (usize, usize),
    overlap_frac: f64,
) -> Result<Homography> {
    let (w, h) = size;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let rot = rng.gen_range(-60.0f64..=60.0).to_radians();
    let scale = rng.gen_range(0.75..=1.25);
    let shear = rng.gen_range(-30.0f64..=30.0).to_radians();
    let px = rng.gen_range(-5e-5..=5e-5);
    let py = rng.gen_range(-5e-5..=5e-5);
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);

    let (sin, cos) = rot.sin_cos();
    let linear = Homography::from_rows([
        [scale * (cos - sin * shear.tan()), -scale * sin, 0.0],
        [scale * (sin + cos * shear.tan()), scale * cos, 0.0],
        [px, py, 1.0],
    ])?;
    let centered = translation(cx, cy)
        .compose(&linear)?
        .compose(&translation(-cx, -cy))?;

    let base = overlap_fraction(&centered, size);
    if overlap_frac > base + 0.02 {
        return Err(HarnessError::InfeasibleOverlap {
            requested: overlap_frac,
            reachable: base,
        });
    }
    if overlap_frac <= 0.0 {
        // Push the frame completely away.
        let t = 2.0 * (w + h) as f64;
        return Ok(translation(dir.cos() * t, dir.sin() * t).compose(&centered)?);
    }

    // Overlap decreases monotonically with the translation magnitude along a
    // fixed direction; bisect it.
    let mut lo = 0.0f64;
    let mut hi = 2.0 * ((w * w + h * h) as f64).sqrt();
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        let candidate = translation(dir.cos() * mid, dir.sin() * mid).compose(&centered)?;
        if overlap_fraction(&candidate, size) >= overlap_frac {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(translation(dir.cos() * lo, dir.sin() * lo).compose(&centered)?)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn perturbed_unit(rng: &mut ChaCha8Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    let v: Vec<f64> = base
        .iter()
        .map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / norm).collect()
}

/// Dense descriptor map `[h, w, d]` filled with low-amplitude random values,
/// with per-keypoint descriptors planted at rounded keypoint pixels.
fn descriptor_map(
    rng: &mut ChaCha8Rng,
    size: (usize, usize),
    dim: usize,
    planted: &[(Point2, Vec<f64>)],
) -> Tensor {
    let (w, h) = size;
    let mut data: Vec<f32> = Vec::with_capacity(w * h * dim);
    for _ in 0..w * h * dim {
        data.push(rng.gen_range(-0.1f32..0.1));
    }
    for (pos, desc) in planted {
        let x = pos.x.round() as usize;
        let y = pos.y.round() as usize;
        let off = (y * w + x) * dim;
        for (k, &v) in desc.iter().enumerate() {
            data[off + k] = v as f32;
        }
    }
    Tensor::new(vec![h, w, dim], data).expect("map dims consistent")
}

/// Generates a synthetic registration pair. Deterministic per seed.
pub fn gen_synth_pair(cfg: &SynthConfig) -> Result<SynthPair> {
    if cfg.n_keypoints < 4 {
        return Err(HarnessError::TooFewKeypoints(cfg.n_keypoints));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.canvas;

    let (fixed_image, fixed_mask) = render_scene(&mut rng, size);
    let fixed_kps = plant_keypoints(&mut rng, size, cfg.n_keypoints);

    // fixed -> moving scene transform; the pair's alignment is its inverse.
    let g = sample_scene_transform(&mut rng, size, cfg.overlap_frac)?;
    let true_h = g.inverse()?;

    let moving_image = warp_image(&fixed_image, &g, size)?;
    let moving_mask = crate::geometry::warp_mask(&fixed_mask, &g, size)?;

    // Shared keypoints: fixed keypoints whose image stays inside the moving
    // frame (with a margin so heatmap peaks survive extraction).
    let margin = 2.0;
    let mut moving_kps = Vec::new();
    let mut control_pairs = Vec::new();
    let mut shared_fixed_idx = Vec::new();
    for (i, kp) in fixed_kps.iter().enumerate() {
        let p = apply_homography(&g, kp.pos)?;
        if p.x >= margin
            && p.y >= margin
            && p.x <= (size.0 - 1) as f64 - margin
            && p.y <= (size.1 - 1) as f64 - margin
        {
            moving_kps.push(Keypoint::new(p.x, p.y, kp.class, kp.score));
            control_pairs.push((kp.pos, p));
            shared_fixed_idx.push(i);
        }
    }

    // Identity descriptors per fixed keypoint; both sides carry perturbed
    // copies, and a fraction of the moving ones is replaced entirely.
    let identities: Vec<Vec<f64>> = (0..fixed_kps.len())
        .map(|_| random_unit(&mut rng, cfg.descriptor_dim))
        .collect();
    let fixed_planted: Vec<(Point2, Vec<f64>)> = fixed_kps
        .iter()
        .zip(&identities)
        .map(|(kp, id)| (kp.pos, perturbed_unit(&mut rng, id, cfg.desc_noise_sigma)))
        .collect();
    let mut moving_planted: Vec<(Point2, Vec<f64>)> = moving_kps
        .iter()
        .zip(shared_fixed_idx.iter())
        .map(|(kp, &i)| {
            (
                kp.pos,
                perturbed_unit(&mut rng, &identities[i], cfg.desc_noise_sigma),
            )
        })
        .collect();
    let n_outliers = (cfg.outlier_frac * moving_planted.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..moving_planted.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    for &idx in order.iter().take(n_outliers) {
        moving_planted[idx].1 = random_unit(&mut rng, cfg.descriptor_dim);
    }

    let fixed_map = descriptor_map(&mut rng, size, cfg.descriptor_dim, &fixed_planted);
    let moving_map = descriptor_map(&mut rng, size, cfg.descriptor_dim, &moving_planted);

    Ok(SynthPair {
        fixed: SynthSide {
            image: fixed_image,
            keypoints: fixed_kps,
            descriptor_map: fixed_map,
            vessel_mask: fixed_mask,
        },
        moving: SynthSide {
            image: moving_image,
            keypoints: moving_kps,
            descriptor_map: moving_map,
            vessel_mask: moving_mask,
        },
        true_h,
        control_points: ControlPointSet::new(control_pairs),
        seed: cfg.seed,
    })
}

/// Exact average precision over a ranking: stable-sort by ascending
/// distance, then mean of precision-at-rank over the positive items.
pub fn brute_force_ap(distances: &[f64], positive: &[bool]) -> Result<f64> {
    assert_eq!(distances.len(), positive.len());
    if !positive.iter().any(|&p| p) {
        return Err(HarnessError::NoPositives);
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&i, &j| distances[i].total_cmp(&distances[j]));
    let mut seen_positives = 0usize;
    let mut total = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if positive[idx] {
            seen_positives += 1;
            total += seen_positives as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / seen_positives as f64)
}

/// Discrete threshold-sweep oracle for the registration score: success rate
/// sampled every `step` px over (0, 25], trapezoidal area normalized by 25.
pub fn sweep_auc_oracle(errors: &[Option<f64>], step: f64) -> f64 {
    assert!(step > 0.0);
    let max = crate::metrics::REGISTRATION_SCORE_MAX_PX;
    let rate = |threshold: f64| -> f64 {
        let ok = errors
            .iter()
            .filter(|e| matches!(e, Some(err) if *err <= threshold))
            .count();
        ok as f64 / errors.len() as f64
    };
    let n = (max / step).ceil() as usize;
    let mut area = 0.0;
    let mut prev_t = 0.0;
    let mut prev_rate = rate(0.0);
    for k in 1..=n {
        let t = (k as f64 * step).min(max);
        let r = rate(t);
        area += 0.5 * (prev_rate + r) * (t - prev_t);
        prev_t = t;
        prev_rate = r;
    }
    area / max
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::registration_score;

    #[test]
    fn synth_pair_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = gen_synth_pair(&cfg).unwrap();
        let b = gen_synth_pair(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn moving_keypoints_follow_true_h() {
        let cfg = SynthConfig {
            seed: 3,
            ..SynthConfig::default()
        };
        let pair = gen_synth_pair(&cfg).unwrap();
        assert!(pair.control_points.pairs.len() >= 10);
        for (fixed, moving) in &pair.control_points.pairs {
            let back = apply_homography(&pair.true_h, *moving).unwrap();
            assert!(back.distance(fixed) < 1e-9);
        }
        assert_eq!(pair.moving.keypoints.len(), pair.control_points.pairs.len());
    }

    #[test]
    fn zero_overlap_shares_no_keypoints() {
        let cfg = SynthConfig {
            overlap_frac: 0.0,
            seed: 9,
            ..SynthConfig::default()
        };
        let pair = gen_synth_pair(&cfg).unwrap();
        assert!(pair.moving.keypoints.is_empty());
    }

    #[test]
    fn overlap_fraction_is_controlled() {
        for &target in &[0.4, 0.6, 0.8] {
            let cfg = SynthConfig {
                overlap_frac: target,
                seed: 21,
                ..SynthConfig::default()
            };
            let pair = gen_synth_pair(&cfg).unwrap();
            let g = pair.true_h.inverse().unwrap();
            let measured = overlap_fraction(&g, cfg.canvas);
            assert!(
                (measured - target).abs() < 0.05,
                "target {target}, measured {measured}"
            );
        }
    }

    #[test]
    fn infeasible_overlap_detected() {
        // Requesting near-full overlap is unreachable for most rotations.
        let mut failures = 0;
        for seed in 0..10 {
            let cfg = SynthConfig {
                overlap_frac: 0.999,
                seed,
                ..SynthConfig::default()
            };
            if matches!(
                gen_synth_pair(&cfg),
                Err(HarnessError::InfeasibleOverlap { .. })
            ) {
                failures += 1;
            }
        }
        assert!(failures > 0);
    }

    #[test]
    fn vessel_mask_nontrivial() {
        let pair = gen_synth_pair(&SynthConfig::default()).unwrap();
        let count = pair.fixed.vessel_mask.count();
        let total = 256 * 256;
        assert!(count > total / 50, "vessels too sparse: {count}");
        assert!(count < total / 2, "vessels too dense: {count}");
    }

    #[test]
    fn ap_oracle_known_cases() {
        // All positives first.
        assert_eq!(
            brute_force_ap(&[0.1, 0.2, 0.5, 0.9], &[true, true, false, false]).unwrap(),
            1.0
        );
        // Single positive ranked last among 5.
        assert_eq!(
            brute_force_ap(
                &[0.1, 0.2, 0.3, 0.4, 0.9],
                &[false, false, false, false, true]
            )
            .unwrap(),
            0.2
        );
        // Alternating P, N, P, N.
        let ap = brute_force_ap(&[0.1, 0.2, 0.3, 0.4], &[true, false, true, false]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert!(matches!(
            brute_force_ap(&[0.5], &[false]),
            Err(HarnessError::NoPositives)
        ));
    }

    #[test]
    fn sweep_oracle_matches_closed_form() {
        assert!((sweep_auc_oracle(&[Some(0.0)], 0.01) - 1.0).abs() < 5e-4);
        assert!((sweep_auc_oracle(&[Some(12.5)], 0.01) - 0.5).abs() < 5e-4);
        assert_eq!(sweep_auc_oracle(&[Some(30.0)], 0.01), 0.0);
        assert_eq!(sweep_auc_oracle(&[None], 0.01), 0.0);

        let errors = vec![Some(1.0), Some(7.5), None, Some(24.0), Some(60.0)];
        let closed = registration_score(&errors, 25.0).unwrap();
        let swept = sweep_auc_oracle(&errors, 0.01);
        assert!((closed - swept).abs() < 5e-4);
    }
}
