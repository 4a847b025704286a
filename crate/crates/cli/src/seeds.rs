//! Component seeds, each `mix([master, TAG])` for a fixed per-component tag.
//!
//! Changing the master seed reseeds everything; two components never share a
//! stream because the tags differ.

use tomnet_core::rng::mix;

pub const FLEET_TAG: u64 = 0xF1EE_7000;
pub const SPLIT_TAG: u64 = 0x5B11_7000;
pub const TRAIN_TAG: u64 = 0x7EA1_4000;
pub const EMBED_TAG: u64 = 0xE3BE_D000;
pub const ORACLE_TAG: u64 = 0x0EAC_1E00;
pub const LINEAR_TAG: u64 = 0x11EA_4000;
pub const STATELESS_TAG: u64 = 0x57A7_E000;

/// Vehicle fleet parameters and excitation.
pub fn fleet(master: u64) -> u64 {
    mix(&[master, FLEET_TAG])
}

/// Stratified train/test assignment, for every fleet.
pub fn split(master: u64) -> u64 {
    mix(&[master, SPLIT_TAG])
}

/// Model initialization.
pub fn train(master: u64) -> u64 {
    mix(&[master, TRAIN_TAG])
}

/// Window sampling for embeddings.
pub fn embed(master: u64) -> u64 {
    mix(&[master, EMBED_TAG])
}

/// Single linear machine of the oracle run.
pub fn oracle(master: u64) -> u64 {
    mix(&[master, ORACLE_TAG])
}

/// Linear fleet of the embedding-necessity ablation.
pub fn linear(master: u64) -> u64 {
    mix(&[master, LINEAR_TAG])
}

/// Shared-weight stateless fleet of the stateful ablation.
pub fn stateless(master: u64) -> u64 {
    mix(&[master, STATELESS_TAG])
}
