//! Deterministic random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by the 64-bit
//! run seed and a purpose tag, with the ChaCha stream id set to a row index.
//! A row of a batch therefore has the same value whether the batch is built
//! in one piece, in shards, or in a different order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. The discriminant is part of the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Features = 1,
    TrainLatents = 2,
    TestLatents = 3,
    TeacherFirst = 4,
    TeacherSecond = 5,
    StudentFirst = 6,
    StudentSecond = 7,
    GepLatents = 8,
    MonteCarlo = 9,
    Shuffle = 10,
    FixedPointStarts = 11,
    Covariances = 12,
    GaussianInputs = 13,
    Lemma = 14,
}

/// Stream `index` of the generator keyed by `(seed, purpose)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"hmlab-v1");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Fill `out` with standard normal draws from `rng`.
pub fn fill_normal<R: rand::Rng>(rng: &mut R, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = StandardNormal.sample(rng);
    }
}

/// `len` standard normals from stream `index`.
pub fn normal_row(seed: u64, purpose: Purpose, index: u64, len: usize) -> Vec<f64> {
    let mut rng = stream(seed, purpose, index);
    let mut v = vec![0.0; len];
    fill_normal(&mut rng, &mut v);
    v
}
