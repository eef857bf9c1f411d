use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Tensor;

/// Deterministic random stream: ChaCha8 keyed by `seed`, with an independent
/// `stream` id and a word position.
///
/// Normals come from the Box–Muller transform, consuming exactly two 64-bit
/// words per draw (the sine branch is discarded), so the position after `n`
/// normal draws is always `4n` 32-bit words past the start.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct RngRepr {
    seed: u64,
    stream: u64,
    position: u128,
}

impl Serialize for RngState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RngRepr {
            seed: self.seed,
            stream: self.stream,
            position: self.position(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RngState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = RngRepr::deserialize(d)?;
        Ok(RngState::at(r.seed, r.stream, r.position))
    }
}

impl PartialEq for RngState {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.stream == other.stream && self.position() == other.position()
    }
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent sub-stream of the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Resumes a stream at a saved position.
    pub fn at(seed: u64, stream: u64, position: u128) -> Self {
        let mut state = Self::with_stream(seed, stream);
        state.rng.set_word_pos(position);
        state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position in 32-bit words since the start of the stream.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// I.i.d. normal tensor with mean 0 and standard deviation `std`.
pub fn randn(shape: &[usize], rng: &mut RngState, std: f64) -> Result<Tensor> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Parameter(format!("randn std must be positive, got {std}")));
    }
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data)
}
