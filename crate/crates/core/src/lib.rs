//! Feature-based retinal image registration and a contrastive-loss laboratory.
//!
//! The registration pipeline operates on precomputed keypoint heatmaps and
//! dense descriptor maps:
//!
//! 1. **keypoints** – heatmap synthesis, heatmap MSE, local-maxima extraction.
//! 2. **descriptors** – L2 normalization, cosine similarity, dense-map
//!    sampling, bidirectional class-constrained matching.
//! 3. **geometry** – normalized-DLT homography estimation, RANSAC, projective
//!    warping.
//! 4. **metrics** – registration score (AUC to 25 px), VTKRS, vessel-overlap
//!    metrics, the reformulated SSIM structure term, rank correlations, and
//!    normalized reporting.
//!
//! Alongside the pipeline, [`losses`] implements four multi-positive
//! multi-negative contrastive losses (SupCon, MP-InfoNCE, MP-N-Pair, FastAP)
//! with analytic gradients, a finite-difference checker, and a free-embedding
//! optimizer, while [`batchgen`] builds the multiviewed batches they consume.
//! [`harness`] generates synthetic registration pairs and brute-force oracles
//! so everything is testable without datasets or trained networks, and
//! [`pipeline`] orchestrates batch evaluation over pairing files.

pub mod batchgen;
pub mod descriptors;
pub mod geometry;
pub mod harness;
pub mod keypoints;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod tensorio;

pub(crate) mod hashing;
