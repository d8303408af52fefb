//! Simulation and analysis of low-bitwidth accumulation in quantized, N:M-pruned networks.
//!
//! The pipeline is prune (N:M magnitude pruning), quantize (uniform per-tensor codes), and
//! sort (a dot-product ordering that cancels large partial products before they overflow a
//! narrow accumulator).

pub mod accumulate;
pub mod cli;
pub mod nn;
pub mod profile;
pub mod quant;
pub mod sparsity;
