//! Deterministic per-job seeds.
//!
//! Every seed is a pure function of `(master, stream, cell, realization)`,
//! so changing the size of a sweep never moves the seeds of other jobs, and
//! initial-condition and disorder draws come from separate streams.

use serde::{Deserialize, Serialize};

use crate::spectral::JobSeeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedStream {
    Initial = 1,
    Disorder = 2,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: SeedStream, cell: usize, realization: usize) -> u64 {
    let mut h = splitmix64(master);
    for word in [stream as u64, cell as u64, realization as u64] {
        h = splitmix64(h ^ word);
    }
    h
}

/// Initial and disorder seeds of one job.
pub fn job_seeds(master: u64, cell: usize, realization: usize, disordered: bool) -> JobSeeds {
    JobSeeds {
        initial: derive_seed(master, SeedStream::Initial, cell, realization),
        disorder: disordered.then(|| derive_seed(master, SeedStream::Disorder, cell, realization)),
    }
}
