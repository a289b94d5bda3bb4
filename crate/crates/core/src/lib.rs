//! Heterogeneous decentralized data fusion on factor graphs.
//!
//! Robots run local extended information filters over overlapping subsets of
//! a global state and fuse marginals over their common states with neighbors,
//! removing common information either with an explicit channel filter or with
//! a heterogeneous covariance intersection. The [`harness`] module simulates
//! multi-robot tracking scenarios and scores consistency against a
//! centralized baseline.

pub mod error;
pub mod factor_graph;
pub mod fusion;
pub mod gaussian;
pub mod harness;
pub mod linalg;
pub mod local_filter;
pub mod models;
pub mod network;

pub use error::{Error, Result};
