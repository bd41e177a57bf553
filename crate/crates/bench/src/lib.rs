//! Shared fixtures for the criterion benches.

use mpq_core::synth::{self, LayerCase};
use mpq_core::{LayerConfig, Precision};

/// Seeded random case on the 16x16x32 -> 64, 3x3, pad 1 reference layer.
pub fn reference_case(triple: (Precision, Precision, Precision), seed: u64) -> LayerCase {
    let cfg = LayerConfig::reference(triple.0, triple.1, triple.2);
    synth::random_case(&cfg, &mut synth::rng(synth::permutation_seed(seed, triple))).expect("reference layer is valid")
}
