//! Multiviewed batch construction: one original image plus N augmented views
//! with transformed keypoint coordinates, and the index sets consumed by the
//! contrastive losses.
//!
//! Augmentation follows the descriptor-training regime: affine transforms
//! (rotation, scale, shear, translation about the image center), HSV jitter,
//! and Gaussian noise applied with a fixed probability. Keypoints are
//! detected only on the original image and mapped through each view
//! transform; a keypoint that leaves the frame in any view is dropped from
//! all views so every sample keeps exactly N positives.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_homography, warp_image, Homography};
use crate::keypoints::Keypoint;
use crate::tensorio::{save_png, Image, TensorIoError};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("only {survivors} keypoints survive in all views, need at least 2")]
    TooFewSurvivingKeypoints { survivors: usize },
    #[error("batch needs at least 2 keypoints, got {0}")]
    TooFewKeypoints(usize),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, BatchError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvJitter {
    /// Hue shift range as a fraction of the full hue circle, drawn uniform
    /// in `[-hue_shift, hue_shift]`.
    pub hue_shift: f64,
    pub sat_range: (f64, f64),
    pub val_range: (f64, f64),
}

impl Default for HsvJitter {
    fn default() -> Self {
        Self {
            hue_shift: 0.05,
            sat_range: (0.9, 1.1),
            val_range: (0.9, 1.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation drawn uniform in `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Translation drawn uniform in `[-f, f] * image size` per axis.
    pub translation_frac: f64,
    pub scale_range: (f64, f64),
    /// Shear drawn uniform in `[-shear_deg, shear_deg]`.
    pub shear_deg: f64,
    pub hsv: HsvJitter,
    pub noise_sigma: f64,
    pub noise_prob: f64,
    /// Number of augmented views N; batch size is 1 + N.
    pub views: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 60.0,
            translation_frac: 0.25,
            scale_range: (0.75, 1.25),
            shear_deg: 30.0,
            hsv: HsvJitter::default(),
            noise_sigma: 0.05,
            noise_prob: 0.25,
            views: 9,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// All ranges collapsed so every view equals the original.
    pub fn identity(views: usize, seed: u64) -> Self {
        Self {
            rotation_deg: 0.0,
            translation_frac: 0.0,
            scale_range: (1.0, 1.0),
            shear_deg: 0.0,
            hsv: HsvJitter {
                hue_shift: 0.0,
                sat_range: (1.0, 1.0),
                val_range: (1.0, 1.0),
            },
            noise_sigma: 0.0,
            noise_prob: 0.0,
            views,
            seed,
        }
    }
}

/// One original plus N augmented views with aligned keypoint lists: index `i`
/// in every per-view list is the same physical keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewBatch {
    pub images: Vec<Image>,
    /// `view_transforms[k]` maps original coordinates to view (k+1)
    /// coordinates; the original view has the implicit identity.
    pub view_transforms: Vec<Homography>,
    pub keypoints_per_view: Vec<Vec<Keypoint>>,
}

impl MultiviewBatch {
    pub fn n_views(&self) -> usize {
        self.images.len() - 1
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoints_per_view[0].len()
    }

    pub fn index_sets(&self) -> IndexSets {
        IndexSets::new(self.n_views(), self.keypoint_count())
    }
}

fn affine(rows: [[f64; 2]; 2], t: [f64; 2]) -> Homography {
    Homography::from_rows([
        [rows[0][0], rows[0][1], t[0]],
        [rows[1][0], rows[1][1], t[1]],
        [0.0, 0.0, 1.0],
    ])
    .expect("affine matrices normalize trivially")
}

/// Samples a random affine view transform: rotation ∘ scale ∘ shear ∘
/// translation, with all parameters uniform in the configured ranges, about
/// the image center. Parameter draw order is fixed (rotation, scale, shear,
/// tx, ty) so streams are reproducible.
pub fn sample_affine(
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
    image_size: (usize, usize),
) -> Homography {
    let (w, h) = image_size;
    let rot = rng
        .gen_range(-cfg.rotation_deg..=cfg.rotation_deg)
        .to_radians();
    let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
    let shear = rng.gen_range(-cfg.shear_deg..=cfg.shear_deg).to_radians();
    let tx = rng.gen_range(-cfg.translation_frac..=cfg.translation_frac) * w as f64;
    let ty = rng.gen_range(-cfg.translation_frac..=cfg.translation_frac) * h as f64;

    let (sin, cos) = rot.sin_cos();
    let rotation = affine([[cos, -sin], [sin, cos]], [0.0, 0.0]);
    let scaling = affine([[scale, 0.0], [0.0, scale]], [0.0, 0.0]);
    let shearing = affine([[1.0, shear.tan()], [0.0, 1.0]], [0.0, 0.0]);
    let translation = affine([[1.0, 0.0], [0.0, 1.0]], [tx, ty]);

    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let to_center = affine([[1.0, 0.0], [0.0, 1.0]], [-cx, -cy]);
    let from_center = affine([[1.0, 0.0], [0.0, 1.0]], [cx, cy]);

    from_center
        .compose(&rotation)
        .and_then(|m| m.compose(&scaling))
        .and_then(|m| m.compose(&shearing))
        .and_then(|m| m.compose(&translation))
        .and_then(|m| m.compose(&to_center))
        .expect("composition of affine maps is affine")
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

fn apply_hsv_jitter(img: &mut Image, dh: f64, sat_scale: f64, val_scale: f64) {
    if dh == 0.0 && sat_scale == 1.0 && val_scale == 1.0 {
        return;
    }
    let (w, h) = img.size();
    match img.channels() {
        3 => {
            for y in 0..h {
                for x in 0..w {
                    let (r, g, b) = (
                        img.get(x, y, 0) as f64,
                        img.get(x, y, 1) as f64,
                        img.get(x, y, 2) as f64,
                    );
                    let (hh, ss, vv) = rgb_to_hsv(r, g, b);
                    let (r, g, b) = hsv_to_rgb(
                        hh + dh,
                        (ss * sat_scale).clamp(0.0, 1.0),
                        (vv * val_scale).clamp(0.0, 1.0),
                    );
                    img.set(x, y, 0, r as f32);
                    img.set(x, y, 1, g as f32);
                    img.set(x, y, 2, b as f32);
                }
            }
        }
        // Grayscale has no hue or saturation; only the value scale applies.
        _ => {
            for y in 0..h {
                for x in 0..w {
                    let v = img.get(x, y, 0) as f64 * val_scale;
                    img.set(x, y, 0, v as f32);
                }
            }
        }
    }
}

fn in_bounds(p: &crate::geometry::Point2, size: (usize, usize)) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= (size.0 - 1) as f64 && p.y <= (size.1 - 1) as f64
}

/// Builds the multiviewed batch: N augmented views with keypoints mapped
/// through each view transform. Any keypoint that falls out of bounds in any
/// view is dropped from all views, keeping the per-view lists aligned and the
/// sample count at exactly (N+1)K.
pub fn build_batch(img: &Image, kps: &[Keypoint], cfg: &AugmentConfig) -> Result<MultiviewBatch> {
    if kps.len() < 2 {
        return Err(BatchError::TooFewKeypoints(kps.len()));
    }
    let size = img.size();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma >= 0");

    let mut images = vec![img.clone()];
    let mut transforms = Vec::with_capacity(cfg.views);
    let mut kps_per_view: Vec<Vec<Keypoint>> = vec![kps.to_vec()];

    for view in 1..=cfg.views {
        // Stream k of the batch seed; draw order is fixed: affine params,
        // HSV params, noise gate, noise values.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(view as u64);

        let transform = sample_affine(cfg, &mut rng, size);
        let dh = rng.gen_range(-cfg.hsv.hue_shift..=cfg.hsv.hue_shift);
        let sat = rng.gen_range(cfg.hsv.sat_range.0..=cfg.hsv.sat_range.1);
        let val = rng.gen_range(cfg.hsv.val_range.0..=cfg.hsv.val_range.1);
        let add_noise = rng.gen_bool(cfg.noise_prob);

        let mut warped = warp_image(img, &transform, size)?;
        apply_hsv_jitter(&mut warped, dh, sat, val);
        if add_noise && cfg.noise_sigma > 0.0 {
            let (w, h) = warped.size();
            for y in 0..h {
                for x in 0..w {
                    for c in 0..warped.channels() {
                        let v = warped.get(x, y, c) as f64 + noise.sample(&mut rng);
                        warped.set(x, y, c, v as f32);
                    }
                }
            }
        }

        let mapped: Vec<Keypoint> = kps
            .iter()
            .map(|kp| {
                let p = apply_homography(&transform, kp.pos)
                    .expect("affine transforms have unit denominator");
                Keypoint {
                    pos: p,
                    class: kp.class,
                    score: kp.score,
                }
            })
            .collect();

        images.push(warped);
        transforms.push(transform);
        kps_per_view.push(mapped);
    }

    // Global drop: a keypoint must stay in frame in every view.
    let keep: Vec<usize> = (0..kps.len())
        .filter(|&i| kps_per_view.iter().all(|v| in_bounds(&v[i].pos, size)))
        .collect();
    if keep.len() < 2 {
        return Err(BatchError::TooFewSurvivingKeypoints {
            survivors: keep.len(),
        });
    }
    let kps_per_view = kps_per_view
        .into_iter()
        .map(|v| keep.iter().map(|&i| v[i]).collect())
        .collect();

    Ok(MultiviewBatch {
        images,
        view_transforms: transforms,
        keypoints_per_view: kps_per_view,
    })
}

/// Index bookkeeping over the flattened sample set S of a multiviewed batch.
///
/// Sample `s = view * K + kp` for view in `0..=N` and kp in `0..K`, so
/// `|S| = (N+1)K`. For an anchor s, `positives(s)` is the same keypoint in
/// the other N views and `rest(s) = S \ {s}` mixes those positives with the
/// hard negatives (every other detected keypoint, same-view ones included).
/// For an ordered image pair (i, j), `pair_candidates(i, j, x)` is
/// `(X_i ∪ X_j) \ {x}` with 2K-1 elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSets {
    n_views: usize,
    keypoints: usize,
}

impl IndexSets {
    pub fn new(n_views: usize, keypoints: usize) -> Self {
        Self { n_views, keypoints }
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn keypoints_per_view(&self) -> usize {
        self.keypoints
    }

    /// `|S| = (N+1)K`.
    pub fn total(&self) -> usize {
        (self.n_views + 1) * self.keypoints
    }

    pub fn sample(&self, view: usize, kp: usize) -> usize {
        debug_assert!(view <= self.n_views && kp < self.keypoints);
        view * self.keypoints + kp
    }

    pub fn view_of(&self, s: usize) -> usize {
        s / self.keypoints
    }

    pub fn keypoint_of(&self, s: usize) -> usize {
        s % self.keypoints
    }

    /// P(s): the same keypoint in every other view, in view order.
    pub fn positives(&self, s: usize) -> Vec<usize> {
        let view = self.view_of(s);
        let kp = self.keypoint_of(s);
        (0..=self.n_views)
            .filter(|&v| v != view)
            .map(|v| self.sample(v, kp))
            .collect()
    }

    /// A(s) = S \ {s}.
    pub fn rest(&self, s: usize) -> Vec<usize> {
        (0..self.total()).filter(|&t| t != s).collect()
    }

    /// All ordered image pairs (i, j) with j > i.
    pub fn image_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n_views + 1;
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push((i, j));
            }
        }
        out
    }

    /// `|I'| = C(N+1, 2)`.
    pub fn image_pair_count(&self) -> usize {
        let n = self.n_views + 1;
        n * (n - 1) / 2
    }

    /// X_i: samples of image i.
    pub fn image_samples(&self, view: usize) -> std::ops::Range<usize> {
        let start = view * self.keypoints;
        start..start + self.keypoints
    }

    /// p_j(x): the positive of sample x in image j.
    pub fn positive_in(&self, view_j: usize, x: usize) -> usize {
        self.sample(view_j, self.keypoint_of(x))
    }

    /// C_ij(x) = (X_i ∪ X_j) \ {x}, with 2K - 1 elements.
    pub fn pair_candidates(&self, view_i: usize, view_j: usize, x: usize) -> Vec<usize> {
        self.image_samples(view_i)
            .chain(self.image_samples(view_j))
            .filter(|&c| c != x)
            .collect()
    }
}

/// Computes the index sets of a batch (thin wrapper kept for symmetry with
/// the batch builder).
pub fn index_sets(batch: &MultiviewBatch) -> IndexSets {
    batch.index_sets()
}

#[derive(Serialize)]
struct BatchManifest<'a> {
    views: usize,
    keypoints: usize,
    view_transforms: &'a [Homography],
}

/// Exports the batch for inspection: per-view PNG + keypoint CSV, plus a JSON
/// manifest with the view transforms.
pub fn export_batch(dir: &Path, batch: &MultiviewBatch) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, img) in batch.images.iter().enumerate() {
        save_png(&dir.join(format!("view_{k:02}.png")), img)?;
        crate::keypoints::write_keypoints_csv(
            &dir.join(format!("view_{k:02}_keypoints.csv")),
            &batch.keypoints_per_view[k],
        )
        .map_err(|e| match e {
            crate::keypoints::KeypointError::Io(io) => BatchError::Io(io),
            other => BatchError::Io(std::io::Error::other(other.to_string())),
        })?;
    }
    let manifest = BatchManifest {
        views: batch.n_views(),
        keypoints: batch.keypoint_count(),
        view_transforms: &batch.view_transforms,
    };
    fs::write(
        dir.join("transforms.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}
