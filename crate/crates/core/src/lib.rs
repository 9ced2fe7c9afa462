//! Ranking-loss embedding training with same-site sequestering, exact k-NN
//! WSI retrieval, and measurement of residual site leakage.

pub mod cli;
pub mod cohort;
pub mod encoder;
pub mod metrics;
pub mod numerics;
pub mod rankloss;
pub mod retrieval;
pub mod experiment;
