//! Simulation, training and benchmarking workbench for learned voltage
//! control of a three-phase voltage-source inverter.

pub mod baselines;
pub mod bench;
pub mod distill;
pub mod env;
pub mod nn;
pub mod plant;
pub mod signal;
pub mod sac;

use rand::{RngCore, SeedableRng};

/// Independent seed for sub-component `stream` of a run rooted at `root`.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64()
}
