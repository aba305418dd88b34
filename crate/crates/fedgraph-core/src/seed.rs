//! Deterministic seed derivation.
//!
//! Every random stream in a run is derived from the single configured seed
//! plus a role tag and context indices (client id, round, epoch). The
//! derivation is a splitmix64 fold, so parallel scheduling can never perturb
//! which stream a worker sees.

/// Role tags for the independent streams of one experiment.
pub mod tag {
    pub const MODEL_INIT: u64 = 0x4d4f4445;
    pub const DATASET: u64 = 0x44415441;
    pub const SPLIT: u64 = 0x53504c54;
    pub const PARTITION: u64 = 0x50415254;
    pub const LOCAL_TRAIN: u64 = 0x54524e21;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Fold `tags` into `base`, producing an independent child seed.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut x = splitmix64(base);
    for &t in tags {
        x = splitmix64(x ^ splitmix64(t));
    }
    x
}
