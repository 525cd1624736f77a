//! Point transforms, homography estimation (normalized DLT), RANSAC, and
//! projective image warping.

use nalgebra::{DMatrix, Matrix2, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::fnv1a64;
use crate::tensorio::{Image, VesselMask};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("projection denominator {w:e} is numerically zero")]
    DegenerateProjection { w: f64 },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("rank-deficient system, homography not unique")]
    RankDeficient,
    #[error("too few matches: got {got}, need at least 4")]
    TooFewMatches { got: usize },
    #[error("no sample produced a model with at least 4 inliers")]
    NoModelFound,
    #[error("homography is singular")]
    SingularHomography,
    #[error("zero dimension in size {0}x{1}")]
    ZeroDimension(usize, usize),
}

type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// 3x3 projective transform, normalized so the bottom-right entry is 1.
/// Serialized as 9 floats row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 9]", try_from = "[f64; 9]")]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalizes the matrix so `m[2][2] == 1`.
    pub fn from_rows(m: [[f64; 3]; 3]) -> Result<Self> {
        let w = m[2][2];
        if w.abs() < 1e-12 {
            return Err(GeometryError::DegenerateConfiguration(
                "bottom-right entry is zero, cannot normalize",
            ));
        }
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = m[r][c] / w;
            }
        }
        Ok(Self { m: out })
    }

    fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        Self::from_rows([
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ])
    }

    fn to_matrix(self) -> Matrix3<f64> {
        Matrix3::new(
            self.m[0][0],
            self.m[0][1],
            self.m[0][2],
            self.m[1][0],
            self.m[1][1],
            self.m[1][2],
            self.m[2][0],
            self.m[2][1],
            self.m[2][2],
        )
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.m[row][col]
    }

    /// `self` applied after `other`: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(&(self.to_matrix() * other.to_matrix()))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .to_matrix()
            .try_inverse()
            .ok_or(GeometryError::SingularHomography)?;
        Self::from_matrix(&inv)
    }

    /// True when the last row is `[0, 0, 1]`, i.e. the transform is affine.
    pub fn is_affine(&self) -> bool {
        self.m[2][0] == 0.0 && self.m[2][1] == 0.0 && self.m[2][2] == 1.0
    }

    pub fn frobenius_distance(&self, other: &Homography) -> f64 {
        let mut acc = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                acc += (self.m[r][c] - other.m[r][c]).powi(2);
            }
        }
        acc.sqrt()
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        [
            h.m[0][0], h.m[0][1], h.m[0][2], h.m[1][0], h.m[1][1], h.m[1][2], h.m[2][0], h.m[2][1],
            h.m[2][2],
        ]
    }
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = String;

    fn try_from(v: [f64; 9]) -> std::result::Result<Self, String> {
        Homography::from_rows([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub inlier_threshold_px: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold_px: 3.0,
            max_iterations: 2000,
            seed: 0,
        }
    }
}

pub fn apply_homography(h: &Homography, p: Point2) -> Result<Point2> {
    let m = &h.m;
    let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
    if w.abs() < 1e-12 {
        return Err(GeometryError::DegenerateProjection { w });
    }
    Ok(Point2::new(
        (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
        (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
    ))
}

fn collinear(a: Point2, b: Point2, c: Point2) -> bool {
    let area2 = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let scale = a.distance(&b).max(a.distance(&c)).max(b.distance(&c));
    area2.abs() <= 1e-9 * scale.max(1.0).powi(2)
}

/// Hartley normalization: translate the centroid to the origin and scale the
/// mean distance to sqrt(2). Returns the 3x3 normalizing transform.
fn hartley_transform(pts: &[Point2]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return Err(GeometryError::DegenerateConfiguration(
            "all points coincident",
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

/// Direct linear transform on `(source, target)` correspondences with Hartley
/// normalization; exact (<= 1e-6 px reprojection) on consistent input and
/// least-squares otherwise.
pub fn estimate_homography_dlt(pairs: &[(Point2, Point2)]) -> Result<Homography> {
    let n = pairs.len();
    if n < 4 {
        return Err(GeometryError::DegenerateConfiguration(
            "need at least 4 correspondences",
        ));
    }
    // A minimal sample is degenerate as soon as any 3 points are collinear;
    // larger sets are caught by the rank check below.
    if n == 4 {
        for skip in 0..4 {
            let mut src = [Point2::new(0.0, 0.0); 3];
            let mut dst = [Point2::new(0.0, 0.0); 3];
            let mut k = 0;
            for (i, (s, t)) in pairs.iter().enumerate() {
                if i != skip {
                    src[k] = *s;
                    dst[k] = *t;
                    k += 1;
                }
            }
            if collinear(src[0], src[1], src[2]) || collinear(dst[0], dst[1], dst[2]) {
                return Err(GeometryError::DegenerateConfiguration(
                    "3 collinear points in a minimal sample",
                ));
            }
        }
    }

    let src: Vec<Point2> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point2> = pairs.iter().map(|p| p.1).collect();
    let t_src = hartley_transform(&src)?;
    let t_dst = hartley_transform(&dst)?;
    let norm = |t: &Matrix3<f64>, p: &Point2| {
        Point2::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
    };

    // Pad to at least 9 rows: a thin SVD of a 8x9 system would not return
    // the nullspace vector.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, t)) in pairs.iter().enumerate() {
        let s = norm(&t_src, s);
        let t = norm(&t_dst, t);
        let r = 2 * i;
        a[(r, 0)] = -s.x;
        a[(r, 1)] = -s.y;
        a[(r, 2)] = -1.0;
        a[(r, 6)] = t.x * s.x;
        a[(r, 7)] = t.x * s.y;
        a[(r, 8)] = t.x;
        a[(r + 1, 3)] = -s.x;
        a[(r + 1, 4)] = -s.y;
        a[(r + 1, 5)] = -1.0;
        a[(r + 1, 6)] = t.y * s.x;
        a[(r + 1, 7)] = t.y * s.y;
        a[(r + 1, 8)] = t.y;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = order[0];
    let second = order[1];
    let largest = order[order.len() - 1];
    if svd.singular_values[second] <= 1e-10 * svd.singular_values[largest].max(1.0) {
        return Err(GeometryError::RankDeficient);
    }
    let h = v_t.row(smallest);
    let normalized = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);

    let t_dst_inv = t_dst
        .try_inverse()
        .expect("hartley transform is invertible");
    Homography::from_matrix(&(t_dst_inv * normalized * t_src))
}

/// Order-independent content hash of a match list, XORed into the seed so
/// per-pair runs are reproducible regardless of scheduling.
fn match_content_hash(matches: &[(Point2, Point2)]) -> u64 {
    let mut acc = 0u64;
    for (s, t) in matches {
        let mut bytes = [0u8; 32];
        bytes[0..8].copy_from_slice(&s.x.to_bits().to_le_bytes());
        bytes[8..16].copy_from_slice(&s.y.to_bits().to_le_bytes());
        bytes[16..24].copy_from_slice(&t.x.to_bits().to_le_bytes());
        bytes[24..32].copy_from_slice(&t.y.to_bits().to_le_bytes());
        acc ^= fnv1a64(&bytes);
    }
    acc
}

fn reprojection_inliers(
    h: &Homography,
    matches: &[(Point2, Point2)],
    threshold: f64,
) -> Vec<usize> {
    matches
        .iter()
        .enumerate()
        .filter_map(|(i, (s, t))| match apply_homography(h, *s) {
            Ok(p) if p.distance(t) <= threshold => Some(i),
            _ => None,
        })
        .collect()
}

/// RANSAC over `(source, target)` matches. The returned model is refit by
/// normalized DLT on the winning inlier set; inlier indices refer to the
/// input order. Sampling happens over a content-sorted view of the matches,
/// so the result does not depend on input permutation.
pub fn ransac_homography(
    matches: &[(Point2, Point2)],
    cfg: &RansacConfig,
) -> Result<(Homography, Vec<usize>)> {
    let n = matches.len();
    if n < 4 {
        return Err(GeometryError::TooFewMatches { got: n });
    }

    let mut canonical: Vec<usize> = (0..n).collect();
    canonical.sort_by(|&i, &j| {
        let (a, b) = (&matches[i], &matches[j]);
        (a.0.x, a.0.y, a.1.x, a.1.y)
            .partial_cmp(&(b.0.x, b.0.y, b.1.x, b.1.y))
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ match_content_hash(matches));
    let mut best: Option<(Homography, Vec<usize>)> = None;

    for iteration in 0..cfg.max_iterations {
        let picks = rand::seq::index::sample(&mut rng, n, 4);
        let sample: Vec<(Point2, Point2)> = picks.iter().map(|k| matches[canonical[k]]).collect();
        let Ok(model) = estimate_homography_dlt(&sample) else {
            continue;
        };
        let inliers = reprojection_inliers(&model, matches, cfg.inlier_threshold_px);
        if inliers.len() >= 4 && best.as_ref().is_none_or(|(_, b)| inliers.len() > b.len()) {
            best = Some((model, inliers));
        }
        if let Some((_, inliers)) = &best {
            // Early exit once the inlier ratio implies >0.999 confidence that
            // an all-inlier sample has been drawn.
            let w = inliers.len() as f64 / n as f64;
            let p_good = w.powi(4);
            if p_good >= 1.0 - 1e-12 {
                break;
            }
            let needed = (1.0f64 - 0.999).ln() / (1.0 - p_good).ln();
            if (iteration + 1) as f64 >= needed {
                break;
            }
        }
    }

    let (sample_model, inliers) = best.ok_or(GeometryError::NoModelFound)?;
    let inlier_pairs: Vec<(Point2, Point2)> = inliers.iter().map(|&i| matches[i]).collect();
    let refit = estimate_homography_dlt(&inlier_pairs).unwrap_or(sample_model);
    Ok((refit, inliers))
}

fn bilinear(img: &Image, x: f64, y: f64, c: usize) -> f32 {
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let v00 = img.get(x0, y0, c);
    let v10 = img.get(x1, y0, c);
    let v01 = img.get(x0, y1, c);
    let v11 = img.get(x1, y1, c);
    (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
}

/// Inverse-mapped bilinear warp. Output pixel `(x, y)` samples the source at
/// `H^-1 (x, y)`; samples outside the source map to 0.
pub fn warp_image(img: &Image, h: &Homography, out_size: (usize, usize)) -> Result<Image> {
    let (out_w, out_h) = out_size;
    if out_w == 0 || out_h == 0 {
        return Err(GeometryError::ZeroDimension(out_w, out_h));
    }
    let inv = h.inverse()?;
    let channels = img.channels();
    let mut out = Image::zeros(out_w, out_h, channels);
    let max_x = (img.width() - 1) as f64;
    let max_y = (img.height() - 1) as f64;
    for y in 0..out_h {
        for x in 0..out_w {
            let Ok(src) = apply_homography(&inv, Point2::new(x as f64, y as f64)) else {
                continue;
            };
            if src.x < 0.0 || src.x > max_x || src.y < 0.0 || src.y > max_y {
                continue;
            }
            for c in 0..channels {
                out.set(x, y, c, bilinear(img, src.x, src.y, c));
            }
        }
    }
    Ok(out)
}

/// Per-pixel validity of a warp: true where the inverse-mapped location lands
/// inside the source frame. Used to restrict similarity metrics to the
/// overlap region.
pub fn warp_validity(
    h: &Homography,
    src_size: (usize, usize),
    out_size: (usize, usize),
) -> Result<Vec<bool>> {
    let (src_w, src_h) = src_size;
    let (out_w, out_h) = out_size;
    if src_w == 0 || src_h == 0 {
        return Err(GeometryError::ZeroDimension(src_w, src_h));
    }
    if out_w == 0 || out_h == 0 {
        return Err(GeometryError::ZeroDimension(out_w, out_h));
    }
    let inv = h.inverse()?;
    let max_x = (src_w - 1) as f64;
    let max_y = (src_h - 1) as f64;
    let mut valid = vec![false; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            if let Ok(src) = apply_homography(&inv, Point2::new(x as f64, y as f64)) {
                valid[y * out_w + x] =
                    src.x >= 0.0 && src.x <= max_x && src.y >= 0.0 && src.y <= max_y;
            }
        }
    }
    Ok(valid)
}

/// Warp a boolean mask by warping its 0/1 image and re-thresholding at 0.5.
pub fn warp_mask(
    mask: &VesselMask,
    h: &Homography,
    out_size: (usize, usize),
) -> Result<VesselMask> {
    let warped = warp_image(&mask.to_image(), h, out_size)?;
    Ok(VesselMask::from_image(&warped).expect("warped mask image is 1-channel"))
}

pub fn scale_points(
    pts: &[Point2],
    from_size: (usize, usize),
    to_size: (usize, usize),
) -> Result<Vec<Point2>> {
    let (fw, fh) = from_size;
    let (tw, th) = to_size;
    if fw == 0 || fh == 0 {
        return Err(GeometryError::ZeroDimension(fw, fh));
    }
    if tw == 0 || th == 0 {
        return Err(GeometryError::ZeroDimension(tw, th));
    }
    let sx = tw as f64 / fw as f64;
    let sy = th as f64 / fh as f64;
    Ok(pts
        .iter()
        .map(|p| Point2::new(p.x * sx, p.y * sy))
        .collect())
}

/// Plausibility gate applied to an estimated registration: the upper-left 2x2
/// block must preserve orientation with singular values in `[0.1, 10]`, and
/// the warped image frame must remain a convex quadrilateral.
pub fn plausible_transform(h: &Homography, src_size: (usize, usize)) -> bool {
    let a = Matrix2::new(h.m[0][0], h.m[0][1], h.m[1][0], h.m[1][1]);
    if a.determinant() <= 0.0 {
        return false;
    }
    let svd = a.svd(false, false);
    for &s in svd.singular_values.iter() {
        if !(0.1..=10.0).contains(&s) {
            return false;
        }
    }

    let (w, h_px) = (src_size.0 as f64 - 1.0, src_size.1 as f64 - 1.0);
    let corners = [
        Point2::new(0.0, 0.0),
        Point2::new(w, 0.0),
        Point2::new(w, h_px),
        Point2::new(0.0, h_px),
    ];
    let mut mapped = [Point2::new(0.0, 0.0); 4];
    for (dst, src) in mapped.iter_mut().zip(corners.iter()) {
        match apply_homography(h, *src) {
            Ok(p) => *dst = p,
            Err(_) => return false,
        }
    }
    let mut sign = 0.0f64;
    for i in 0..4 {
        let p0 = mapped[i];
        let p1 = mapped[(i + 1) % 4];
        let p2 = mapped[(i + 2) % 4];
        let cross = (p1.x - p0.x) * (p2.y - p1.y) - (p1.y - p0.y) * (p2.x - p1.x);
        if cross == 0.0 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}
