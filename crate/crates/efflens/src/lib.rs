//! Effective-weight analysis for bias-free ReLU MLPs.
//!
//! A bias-free ReLU network applies, to each individual input `x`, a single
//! linear map: the product of its layer weight matrices with the inactive
//! rows zeroed out by that sample's activation pattern. This crate trains
//! such a network on MNIST, extracts the per-sample effective weight matrix
//! at training snapshots, and quantifies how those matrices cluster by class
//! as training progresses (pairwise cosine statistics, silhouette scores,
//! and exact t-SNE projections to 2D).
//!
//! The `efflens` binary drives the full pipeline:
//! `train -> verify -> metrics -> embed -> plot`.

pub mod dataset;
pub mod effweight;
pub mod embedding;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod plot;
pub mod rng;
pub mod runio;
pub mod training;
