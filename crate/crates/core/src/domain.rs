//! Axis-aligned boxes used both as action sets and as training domains, plus
//! the sampling helpers shared by collocation, probing and Monte-Carlo norms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Config(format!(
                "box bounds have mismatched or zero length ({} vs {})",
                lo.len(),
                hi.len()
            )));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(Error::Config(format!(
                    "box coordinate {i} has invalid bounds [{l}, {h}]"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// `[-half_width, half_width]^dim`.
    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        Self {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    /// Clamp `x` into the box in place.
    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    /// Same box scaled about its center by `factor` per axis.
    pub fn scaled(&self, factor: f64) -> Self {
        let c = self.center();
        let lo = self
            .lo
            .iter()
            .zip(&c)
            .map(|(l, c)| c + factor * (l - c))
            .collect();
        let hi = self
            .hi
            .iter()
            .zip(&c)
            .map(|(h, c)| c + factor * (h - c))
            .collect();
        Self { lo, hi }
    }

    /// Map a point of the unit cube onto the box.
    pub fn from_unit(&self, u: &[f64], out: &mut [f64]) {
        for k in 0..self.dim() {
            out[k] = self.lo[k] + u[k] * (self.hi[k] - self.lo[k]);
        }
    }

    /// `n` i.i.d. uniform points, row-major `n × dim`.
    pub fn sample_uniform(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        for row in out.chunks_exact_mut(d) {
            for k in 0..d {
                row[k] = rng.random_range(self.lo[k]..self.hi[k]);
            }
        }
        out
    }

    /// First `n` points of the Halton sequence mapped onto the box (skipping
    /// the origin of the sequence), row-major `n × dim`.
    pub fn halton(&self, n: usize) -> Vec<f64> {
        const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
        let d = self.dim();
        assert!(d <= PRIMES.len(), "halton sequence supports up to 16 dimensions");
        let mut out = vec![0.0; n * d];
        let mut u = vec![0.0; d];
        for (i, row) in out.chunks_exact_mut(d).enumerate() {
            for (k, uk) in u.iter_mut().enumerate() {
                *uk = radical_inverse(i as u64 + 1, PRIMES[k]);
            }
            self.from_unit(&u, row);
        }
        out
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Deterministic RNG for a (seed, stream) pair. Streams keep the seeds of
/// independent consumers disjoint.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
