//! Descriptor normalization, cosine similarity, descriptor sampling from
//! dense maps, and bidirectional class-constrained matching.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keypoints::{Keypoint, KeypointClass};
use crate::tensorio::Tensor;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("keypoint ({x}, {y}) outside descriptor map {width}x{height}")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("descriptor map must be rank 3 [h, w, d], got dims {0:?}")]
    BadMapShape(Vec<usize>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, DescriptorError>;

/// Unit-norm feature vector characterizing a keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Descriptor> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return Err(DescriptorError::ZeroVector);
    }
    Ok(Descriptor(v.iter().map(|x| x / norm).collect()))
}

/// Dot product of unit vectors, i.e. cosine similarity in `[-1, 1]`.
pub fn cosine_sim(a: &Descriptor, b: &Descriptor) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum()
}

/// Selects the descriptor at the rounded pixel location of each keypoint from
/// a dense `[h, w, d]` map and L2-normalizes it.
pub fn sample_descriptors(map: &Tensor, keypoints: &[Keypoint]) -> Result<Vec<Descriptor>> {
    if map.rank() != 3 {
        return Err(DescriptorError::BadMapShape(map.dims().to_vec()));
    }
    let (h, w, d) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let mut out = Vec::with_capacity(keypoints.len());
    for kp in keypoints {
        let x = kp.pos.x.round();
        let y = kp.pos.y.round();
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            return Err(DescriptorError::OutOfBounds {
                x: kp.pos.x,
                y: kp.pos.y,
                width: w,
                height: h,
            });
        }
        let (px, py) = (x as usize, y as usize);
        let mut v = Vec::with_capacity(d);
        for k in 0..d {
            v.push(map.at3(py, px, k) as f64);
        }
        out.push(l2_normalize(&v)?);
    }
    Ok(out)
}

/// A mutual-best correspondence between a fixed and a moving keypoint of the
/// same class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub fixed_idx: usize,
    pub moving_idx: usize,
    pub class: KeypointClass,
    pub similarity: f64,
}

/// Within each class independently, best candidates by cosine similarity with
/// ties broken toward the lower index.
fn argmax_rows(sims: &[Vec<f64>]) -> Vec<usize> {
    sims.iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Bidirectional class-constrained matching: `(i, j)` is a match iff `j` is
/// `i`'s most similar moving keypoint and `i` is `j`'s most similar fixed
/// keypoint, both restricted to the shared class. No similarity threshold is
/// applied.
pub fn match_mutual(
    fixed_kps: &[Keypoint],
    fixed_descs: &[Descriptor],
    moving_kps: &[Keypoint],
    moving_descs: &[Descriptor],
) -> Vec<Match> {
    assert_eq!(fixed_kps.len(), fixed_descs.len());
    assert_eq!(moving_kps.len(), moving_descs.len());

    let mut out = Vec::new();
    for class in KeypointClass::ALL {
        let f_idx: Vec<usize> = (0..fixed_kps.len())
            .filter(|&i| fixed_kps[i].class == class)
            .collect();
        let m_idx: Vec<usize> = (0..moving_kps.len())
            .filter(|&j| moving_kps[j].class == class)
            .collect();
        if f_idx.is_empty() || m_idx.is_empty() {
            continue;
        }
        let sims: Vec<Vec<f64>> = f_idx
            .iter()
            .map(|&i| {
                m_idx
                    .iter()
                    .map(|&j| cosine_sim(&fixed_descs[i], &moving_descs[j]))
                    .collect()
            })
            .collect();
        let transposed: Vec<Vec<f64>> = (0..m_idx.len())
            .map(|j| (0..f_idx.len()).map(|i| sims[i][j]).collect())
            .collect();
        let best_moving = argmax_rows(&sims);
        let best_fixed = argmax_rows(&transposed);
        for (fi, &j) in best_moving.iter().enumerate() {
            if best_fixed[j] == fi {
                out.push(Match {
                    fixed_idx: f_idx[fi],
                    moving_idx: m_idx[j],
                    class,
                    similarity: sims[fi][j],
                });
            }
        }
    }
    out.sort_by_key(|m| m.fixed_idx);
    out
}

/// Writes matches as `fixed_idx,moving_idx,class,similarity` CSV.
pub fn write_matches_csv(path: &Path, matches: &[Match]) -> Result<()> {
    let mut out = String::from("fixed_idx,moving_idx,class,similarity\n");
    for m in matches {
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.fixed_idx,
            m.moving_idx,
            m.class.code(),
            m.similarity
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
