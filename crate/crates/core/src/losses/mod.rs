//! Multi-positive multi-negative contrastive losses with analytic gradients.
//!
//! Four losses over a multiviewed batch of raw embeddings: SupCon,
//! MP-InfoNCE, MP-N-Pair, and FastAP. Every loss L2-normalizes the embedding
//! rows first and compares them by dot product, so values depend only on
//! cosine similarities; gradients are exact derivatives through the
//! normalization. Softmax-style losses are log-sum-exp stabilized. A
//! finite-difference checker and a momentum gradient-descent optimizer over
//! free embeddings round out the laboratory.

mod fastap;
mod gradcheck;
mod infonce;
mod npair;
mod supcon;

pub use fastap::{anchor_histogram, fastap_loss, HistogramBins};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use infonce::mp_infonce_loss;
pub use npair::mp_npair_loss;
pub use supcon::{anchor_softmax_weights, supcon_loss};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batchgen::IndexSets;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("embedding data length {found} does not match {rows} rows x {dim} dims")]
    BadShape {
        rows: usize,
        dim: usize,
        found: usize,
    },
    #[error("batch has {0} samples, losses need at least 4")]
    TooFewSamples(usize),
    #[error("invalid loss config: {0}")]
    BadConfig(&'static str),
    #[error(
        "optimization diverged at step {step}: loss {value} > {reference} from 50 steps earlier"
    )]
    Divergent {
        step: usize,
        value: f64,
        reference: f64,
    },
}

type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature for SupCon and MP-InfoNCE.
    pub tau: f64,
    /// Histogram bin count Q for FastAP.
    pub bins: usize,
    /// Distance support for FastAP binning; `[0, 2]` for unit vectors.
    pub distance_range: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            bins: 10,
            distance_range: (0.0, 2.0),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(LossError::BadConfig("tau must be positive"));
        }
        if self.bins < 2 {
            return Err(LossError::BadConfig("bin count must be at least 2"));
        }
        if self.distance_range.1 <= self.distance_range.0 {
            return Err(LossError::BadConfig("empty distance range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SupCon,
    MpInfoNce,
    MpNPair,
    FastAp,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::SupCon,
        LossKind::MpInfoNce,
        LossKind::MpNPair,
        LossKind::FastAp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::SupCon => "supcon",
            LossKind::MpInfoNce => "mp-infonce",
            LossKind::MpNPair => "mp-npair",
            LossKind::FastAp => "fastap",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "supcon" | "sp" => Some(LossKind::SupCon),
            "mp-infonce" | "infonce" | "nce" => Some(LossKind::MpInfoNce),
            "mp-npair" | "npair" | "np" => Some(LossKind::MpNPair),
            "fastap" | "ap" => Some(LossKind::FastAp),
            _ => None,
        }
    }
}

/// Raw (pre-normalization) embeddings for every sample of a multiviewed
/// batch, row-major `(N+1)K x D`, plus the index bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    sets: IndexSets,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new(sets: IndexSets, dim: usize, data: Vec<f64>) -> Result<Self> {
        let rows = sets.total();
        if rows < 4 {
            return Err(LossError::TooFewSamples(rows));
        }
        if data.len() != rows * dim {
            return Err(LossError::BadShape {
                rows,
                dim,
                found: data.len(),
            });
        }
        Ok(Self { sets, dim, data })
    }

    /// Standard-normal random embeddings, seeded.
    pub fn random(sets: IndexSets, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let data = (0..sets.total() * dim)
            .map(|_| rng.sample::<f64, _>(normal))
            .collect();
        Self::new(sets, dim, data)
    }

    pub fn sets(&self) -> &IndexSets {
        &self.sets
    }

    pub fn rows(&self) -> usize {
        self.sets.total()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Unit-normalized rows plus the original norms (for backprop).
    pub(crate) fn normalized(&self) -> (Vec<f64>, Vec<f64>) {
        let rows = self.rows();
        let mut unit = vec![0.0; rows * self.dim];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = self.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            norms[r] = norm;
            for (o, &x) in unit[r * self.dim..(r + 1) * self.dim].iter_mut().zip(row) {
                *o = x / norm;
            }
        }
        (unit, norms)
    }
}

/// Loss value and its exact gradient with respect to the raw embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Dense gram matrix of unit rows: `gram[s * rows + a] = u_s . u_a`.
pub(crate) fn gram_matrix(unit: &[f64], rows: usize, dim: usize) -> Vec<f64> {
    let mut gram = vec![0.0; rows * rows];
    for s in 0..rows {
        for a in s..rows {
            let dot: f64 = unit[s * dim..(s + 1) * dim]
                .iter()
                .zip(&unit[a * dim..(a + 1) * dim])
                .map(|(x, y)| x * y)
                .sum();
            gram[s * rows + a] = dot;
            gram[a * rows + s] = dot;
        }
    }
    gram
}

pub(crate) fn axpy(dst: &mut [f64], offset: usize, alpha: f64, src: &[f64]) {
    for (d, &s) in dst[offset..offset + src.len()].iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Pulls a gradient on the unit rows back through the L2 normalization:
/// `g_raw = (g_hat - (g_hat . u) u) / ||z||` per row.
pub(crate) fn backprop_normalization(
    unit: &[f64],
    norms: &[f64],
    grad_unit: &[f64],
    dim: usize,
) -> Vec<f64> {
    let rows = norms.len();
    let mut out = vec![0.0; rows * dim];
    for r in 0..rows {
        let u = &unit[r * dim..(r + 1) * dim];
        let g = &grad_unit[r * dim..(r + 1) * dim];
        let radial: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..dim {
            out[r * dim + k] = (g[k] - radial * u[k]) / norms[r];
        }
    }
    out
}

pub fn evaluate(kind: LossKind, e: &EmbeddingSet, cfg: &LossConfig) -> LossOutput {
    match kind {
        LossKind::SupCon => supcon_loss(e, cfg),
        LossKind::MpInfoNce => mp_infonce_loss(e, cfg),
        LossKind::MpNPair => mp_npair_loss(e, cfg),
        LossKind::FastAp => fastap_loss(e, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizeConfig {
    pub fn new(steps: usize, learning_rate: f64) -> Self {
        Self {
            steps,
            learning_rate,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeTrace {
    pub embeddings: EmbeddingSet,
    pub loss_history: Vec<f64>,
}

/// Gradient descent with momentum on the raw embeddings. Flags divergence
/// when the loss rises by more than 1e-6 over any 50-step window.
pub fn optimize_embeddings(
    kind: LossKind,
    e0: EmbeddingSet,
    loss_cfg: &LossConfig,
    opt: &OptimizeConfig,
) -> Result<OptimizeTrace> {
    let mut e = e0;
    let mut velocity = vec![0.0; e.data().len()];
    let mut history = Vec::with_capacity(opt.steps);
    for step in 0..opt.steps {
        let out = evaluate(kind, &e, loss_cfg);
        if step >= 50 {
            let reference = history[step - 50];
            if out.value > reference + 1e-6 {
                return Err(LossError::Divergent {
                    step,
                    value: out.value,
                    reference,
                });
            }
        }
        history.push(out.value);
        let data = e.data_mut();
        for ((v, g), x) in velocity.iter_mut().zip(&out.grad).zip(data.iter_mut()) {
            *v = opt.momentum * *v - opt.learning_rate * g;
            *x += *v;
        }
    }
    Ok(OptimizeTrace {
        embeddings: e,
        loss_history: history,
    })
}

/// Mutual-nearest-neighbor matching accuracy between the embeddings of two
/// views: the fraction of keypoints whose mutual best match across the views
/// is their own counterpart.
pub fn view_matching_accuracy(e: &EmbeddingSet, view_a: usize, view_b: usize) -> f64 {
    let (unit, _) = e.normalized();
    let dim = e.dim();
    let k = e.sets().keypoints_per_view();
    let sim = |i: usize, j: usize| -> f64 {
        let a = e.sets().sample(view_a, i);
        let b = e.sets().sample(view_b, j);
        unit[a * dim..(a + 1) * dim]
            .iter()
            .zip(&unit[b * dim..(b + 1) * dim])
            .map(|(x, y)| x * y)
            .sum()
    };
    let mut correct = 0;
    for i in 0..k {
        let mut best_j = 0;
        for j in 1..k {
            if sim(i, j) > sim(i, best_j) {
                best_j = j;
            }
        }
        if best_j != i {
            continue;
        }
        let mut best_i = 0;
        for i2 in 1..k {
            if sim(i2, i) > sim(best_i, i) {
                best_i = i2;
            }
        }
        if best_i == i {
            correct += 1;
        }
    }
    correct as f64 / k as f64
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Seeded random instance with N views and K keypoints per view.
    pub fn random_instance(n_views: usize, k: usize, dim: usize, seed: u64) -> EmbeddingSet {
        EmbeddingSet::random(IndexSets::new(n_views, k), dim, seed).unwrap()
    }

    /// Applies a random orthogonal rotation (QR of a Gaussian matrix) to all
    /// embedding rows.
    pub fn rotate_embeddings(e: &EmbeddingSet, seed: u64) -> EmbeddingSet {
        use nalgebra::DMatrix;
        let dim = e.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(dim, dim, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let q = g.qr().q();
        let mut data = Vec::with_capacity(e.data().len());
        for r in 0..e.rows() {
            let row = e.row(r);
            for c in 0..dim {
                data.push((0..dim).map(|k2| q[(c, k2)] * row[k2]).sum());
            }
        }
        EmbeddingSet::new(*e.sets(), dim, data).unwrap()
    }
}
