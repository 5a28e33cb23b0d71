//! Synthetic data and reference oracles used by the test and acceptance
//! suites.

pub mod oracle;
pub mod synth;

pub use oracle::{oracle_match, oracle_scalar_losses, OracleLosses};
pub use synth::{synth_dataset, synth_patch, synth_patch_with_counts, ClassAppearance, SynthSample, SynthSpec};
