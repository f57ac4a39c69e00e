use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::Result;

/// Seeded random stream.
///
/// Bits come from ChaCha8 seeded with `seed_from_u64`, a counter-based
/// generator whose full state is `(seed, stream, word position)`. Uniforms take the
/// top 53 bits of a `u64` and are offset by half an ulp so they lie strictly
/// inside `(0, 1)`. Normals use the Box–Muller transform; [`randn`] consumes
/// uniforms in pairs and emits both the cosine and sine branch.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable snapshot of an [`Rng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
    /// Word position as a decimal string (`u128` does not survive JSON).
    pub word_pos: String,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for parallel lane `lane` (ChaCha stream id).
    pub fn for_lane(seed: u64, lane: u64) -> Self {
        let mut rng = Self::new(seed);
        rng.inner.set_stream(lane);
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; the bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// One standard normal draw (cosine branch of Box–Muller).
    pub fn normal(&mut self) -> f64 {
        let (a, _) = self.normal_pair();
        a
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let pos: u128 = state.word_pos.parse().map_err(|_| {
            crate::error::DimError::Format(format!("bad rng word position {:?}", state.word_pos))
        })?;
        let mut rng = Self::for_lane(state.seed, state.stream);
        rng.inner.set_word_pos(pos);
        Ok(rng)
    }
}

/// I.i.d. standard normal tensor.
pub fn randn(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() + 1 < n {
        let (a, b) = rng.normal_pair();
        data.push(a);
        data.push(b);
    }
    if data.len() < n {
        data.push(rng.normal());
    }
    Tensor::new(shape.to_vec(), data)
}

/// Normal tensor with standard deviation `std`.
pub fn randn_scaled(rng: &mut Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    Ok(randn(rng, shape)?.scale(std))
}

/// Uniform tensor on `(lo, hi)`.
pub fn rand_uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::new(shape.to_vec(), data)
}
