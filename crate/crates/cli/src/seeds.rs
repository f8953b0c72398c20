//! Per-stage seeds. Each consumer of randomness has a label; its seed is
//! `derive_seed(master, fnv1a64(label))`, so adding a label never shifts the
//! seed of another.

use aelayers_detect::derive_seed;

fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn stage_seed(master: u64, label: &str) -> u64 {
    derive_seed(master, fnv1a64(label))
}
