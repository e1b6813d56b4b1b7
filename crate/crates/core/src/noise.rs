//! Seeded Brownian increments on nested time grids.
//!
//! Every scalar increment is addressed by `(seed, fine step, component,
//! path)`: a ChaCha8 stream is selected by `(fine step, component)` and the
//! word position by the path index, so any sub-block can be regenerated on
//! its own. Normals come from the inverse CDF of a 53-bit uniform.
//!
//! A grid is a lazy view: it stores the generating tuple and a coarsening
//! factor, and realizes the increment block of one step on demand. A coarse
//! increment is the left-to-right sum of its fine increments, which makes
//! nested coarsening exact.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use thiserror::Error;

use crate::linalg::Matrix;

/// Stream id reserved for initial-law sampling; increment streams use
/// `fine_step * m + component`, which stays far below this.
const INITIAL_LAW_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NoiseError {
    #[error("coarsening factor {factor} does not divide {n_steps} steps")]
    GridMismatch { factor: u64, n_steps: u64 },
    #[error("invalid grid: {0}")]
    Invalid(String),
}

/// Maps a 64-bit word to a uniform in the open interval (0, 1).
#[inline]
pub fn uniform_open01(word: u64) -> f64 {
    ((word >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal quantile.
#[inline]
pub fn normal_quantile(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

/// Deterministic generator used for initial-law sampling.
pub struct SampleStream {
    rng: ChaCha8Rng,
}

impl SampleStream {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INITIAL_LAW_STREAM);
        Self { rng }
    }

    pub fn uniform(&mut self) -> f64 {
        uniform_open01(self.rng.next_u64())
    }

    /// Uniform on `(lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        normal_quantile(self.uniform())
    }
}

/// The persisted identity of a grid: enough to re-derive every increment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridKey {
    pub seed: u64,
    pub t0: f64,
    pub t1: f64,
    /// Number of steps of the finest grid the increments are drawn on.
    pub fine_steps: u64,
    pub m: usize,
    pub m_paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrownianGrid {
    key: GridKey,
    /// Fine steps summed into one step of this grid.
    factor: u64,
    base: ChaCha8Rng,
}

impl BrownianGrid {
    /// Grid with `n_steps` uniform steps on `[t0, t1]`, `m` noise components
    /// and `m_paths` independent paths.
    pub fn generate(
        seed: u64,
        t0: f64,
        t1: f64,
        n_steps: u64,
        m: usize,
        m_paths: usize,
    ) -> Result<Self, NoiseError> {
        if n_steps == 0 {
            return Err(NoiseError::Invalid("n_steps must be at least 1".into()));
        }
        if t1 <= t0 || !t0.is_finite() || !t1.is_finite() {
            return Err(NoiseError::Invalid(format!("need t1 > t0, got [{t0}, {t1}]")));
        }
        if m == 0 || m_paths == 0 {
            return Err(NoiseError::Invalid("m and m_paths must be positive".into()));
        }
        Ok(Self::from_key(
            GridKey {
                seed,
                t0,
                t1,
                fine_steps: n_steps,
                m,
                m_paths,
            },
            1,
        ))
    }

    fn from_key(key: GridKey, factor: u64) -> Self {
        Self {
            base: ChaCha8Rng::seed_from_u64(key.seed),
            key,
            factor,
        }
    }

    pub fn key(&self) -> GridKey {
        self.key
    }

    pub fn seed(&self) -> u64 {
        self.key.seed
    }

    pub fn coarsening_factor(&self) -> u64 {
        self.factor
    }

    pub fn n_steps(&self) -> u64 {
        self.key.fine_steps / self.factor
    }

    pub fn m(&self) -> usize {
        self.key.m
    }

    pub fn m_paths(&self) -> usize {
        self.key.m_paths
    }

    pub fn t0(&self) -> f64 {
        self.key.t0
    }

    pub fn t1(&self) -> f64 {
        self.key.t1
    }

    pub fn dt(&self) -> f64 {
        (self.key.t1 - self.key.t0) / self.n_steps() as f64
    }

    pub fn fine_dt(&self) -> f64 {
        (self.key.t1 - self.key.t0) / self.key.fine_steps as f64
    }

    /// Time of node `n`; node `n_steps` is exactly `t1`.
    pub fn time(&self, n: u64) -> f64 {
        let steps = self.n_steps();
        if n == steps {
            self.key.t1
        } else {
            self.key.t0 + (self.key.t1 - self.key.t0) * (n as f64 / steps as f64)
        }
    }

    /// Grid whose step `i` is the sum of steps `i*factor .. (i+1)*factor`.
    pub fn coarsen(&self, factor: u64) -> Result<Self, NoiseError> {
        let n = self.n_steps();
        if factor == 0 || !n.is_multiple_of(factor) {
            return Err(NoiseError::GridMismatch { factor, n_steps: n });
        }
        Ok(Self::from_key(self.key, self.factor * factor))
    }

    /// Writes the fine increments of `fine_step`, component `comp`, paths
    /// `start..start + out.len()` into `out`.
    pub fn fine_block(&self, fine_step: u64, comp: usize, start: usize, out: &mut [f64]) {
        let mut rng = self.base.clone();
        rng.set_stream(fine_step * self.key.m as u64 + comp as u64);
        rng.set_word_pos(2 * start as u128);
        let sd = self.fine_dt().sqrt();
        for v in out.iter_mut() {
            *v = sd * normal_quantile(uniform_open01(rng.next_u64()));
        }
    }

    /// Increment block (m x M) of step `step` of this grid.
    pub fn increment(&self, step: u64) -> Matrix {
        let mut out = Matrix::zeros(self.key.m, self.key.m_paths);
        self.increment_into(step, &mut out);
        out
    }

    pub fn increment_into(&self, step: u64, out: &mut Matrix) {
        assert!(step < self.n_steps(), "step {step} out of range");
        assert_eq!(out.shape(), (self.key.m, self.key.m_paths));
        let first = step * self.factor;
        if self.factor == 1 {
            for c in 0..self.key.m {
                self.fine_block(first, c, 0, out.row_mut(c));
            }
            return;
        }
        out.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        let mut buf = vec![0.0; self.key.m_paths];
        for f in 0..self.factor {
            for c in 0..self.key.m {
                self.fine_block(first + f, c, 0, &mut buf);
                for (o, b) in out.row_mut(c).iter_mut().zip(&buf) {
                    *o += b;
                }
            }
        }
    }

    /// All increment blocks; only sensible for small grids.
    pub fn materialize(&self) -> Vec<Matrix> {
        (0..self.n_steps()).map(|s| self.increment(s)).collect()
    }

    /// Brownian path values `W(t_n)` for `n = 0..=n_steps` of one component
    /// and path, accumulated from this grid's increments.
    pub fn path_values(&self, comp: usize, path: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.n_steps() as usize + 1);
        let mut acc = 0.0;
        w.push(acc);
        let mut one = [0.0];
        for s in 0..self.n_steps() {
            let mut inc = 0.0;
            for f in 0..self.factor {
                self.fine_block(s * self.factor + f, comp, path, &mut one);
                inc += one[0];
            }
            acc += inc;
            w.push(acc);
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = BrownianGrid::generate(7, 0.0, 1.0, 4, 2, 16).unwrap();
        let b = BrownianGrid::generate(7, 0.0, 1.0, 4, 2, 16).unwrap();
        assert_eq!(a.materialize(), b.materialize());
        let c = BrownianGrid::generate(8, 0.0, 1.0, 4, 2, 16).unwrap();
        assert_ne!(a.materialize(), c.materialize());
    }

    #[test]
    fn sub_blocks_are_independently_reproducible() {
        let g = BrownianGrid::generate(3, 0.0, 2.0, 5, 3, 40).unwrap();
        let full = g.increment(2);
        let mut part = vec![0.0; 7];
        g.fine_block(2, 1, 13, &mut part);
        assert_eq!(&full.row(1)[13..20], part.as_slice());
    }

    #[test]
    fn increment_moments() {
        let n = 100_000;
        let g = BrownianGrid::generate(11, 0.0, 0.5, 1, 1, n).unwrap();
        let dt = g.dt();
        let inc = g.increment(0);
        let mean = inc.as_slice().iter().sum::<f64>() / n as f64;
        let var = inc.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
        assert!((var / dt - 1.0).abs() < 0.03, "var ratio {}", var / dt);
    }

    #[test]
    fn coarsen_identity_and_total() {
        let g = BrownianGrid::generate(5, 0.0, 1.0, 6, 2, 10).unwrap();
        assert_eq!(g.coarsen(1).unwrap().materialize(), g.materialize());
        let whole = g.coarsen(6).unwrap();
        assert_eq!(whole.n_steps(), 1);
        let fine = g.materialize();
        let mut sum = Matrix::zeros(2, 10);
        for inc in &fine {
            sum.axpy(1.0, inc).unwrap();
        }
        assert_eq!(whole.increment(0), sum);
        assert!(matches!(g.coarsen(4), Err(NoiseError::GridMismatch { factor: 4, n_steps: 6 })));
    }

    #[test]
    fn nested_coarsening_is_exact() {
        let g = BrownianGrid::generate(9, 0.0, 1.0, 12, 2, 8).unwrap();
        let ab = g.coarsen(2).unwrap().coarsen(3).unwrap();
        let direct = g.coarsen(6).unwrap();
        assert_eq!(ab.materialize(), direct.materialize());
    }

    #[test]
    fn coarsened_variance_scales_with_factor() {
        let n = 100_000;
        let g = BrownianGrid::generate(21, 0.0, 0.4, 4, 1, n).unwrap();
        let c = g.coarsen(4).unwrap();
        let inc = c.increment(0);
        let var = inc.as_slice().iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var / (4.0 * g.dt()) - 1.0).abs() < 0.03);
    }

    #[test]
    fn paths_are_uncorrelated() {
        let n = 10_000;
        let g = BrownianGrid::generate(2, 0.0, 1.0, 1, 2, n).unwrap();
        let inc = g.increment(0);
        let (a, b) = (inc.row(0), inc.row(1));
        let corr = crate::linalg::dot(a, b)
            / (crate::linalg::dot(a, a).sqrt() * crate::linalg::dot(b, b).sqrt());
        assert!(corr.abs() < 4.0 / (n as f64).sqrt());
        // adjacent paths of the same component
        let c = &a[..n - 1];
        let d = &a[1..];
        let corr = crate::linalg::dot(c, d) / (crate::linalg::dot(c, c) * crate::linalg::dot(d, d)).sqrt();
        assert!(corr.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn path_values_match_increments() {
        let g = BrownianGrid::generate(4, 0.0, 1.0, 8, 2, 5).unwrap().coarsen(2).unwrap();
        let w = g.path_values(1, 3);
        let mut acc = 0.0;
        for (s, inc) in g.materialize().iter().enumerate() {
            acc += inc[(1, 3)];
            assert!((w[s + 1] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(BrownianGrid::generate(0, 0.0, 1.0, 0, 1, 1).is_err());
        assert!(BrownianGrid::generate(0, 1.0, 1.0, 1, 1, 1).is_err());
    }
}
