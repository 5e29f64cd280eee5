//! Reproducible Gaussian increments keyed by `(seed, stream, step, mode)`.
//!
//! Each `(seed, stream)` pair selects an independent ChaCha8 keystream. Every
//! fine time step consumes a fixed number of words, so the normals of step
//! `k` sit at a computable word offset and can be regenerated in any order.
//! That makes every trajectory a pure function of its key, independent of
//! which worker runs it.

use std::f64::consts::TAU;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream tags that keep unrelated experiments on disjoint keystreams.
pub mod tags {
    pub const CHAIN: u16 = 0;
    pub const BEL: u16 = 1;
    pub const NESTED: u16 = 2;
    pub const TANGENT: u16 = 3;
    pub const ORACLE: u16 = 4;
    pub const FD: u16 = 5;
}

/// Compose a 64-bit stream id from a tag and an index below `2^48`.
pub fn stream_id(tag: u16, index: u64) -> u64 {
    debug_assert!(index < (1 << 48));
    ((tag as u64) << 48) | (index & ((1 << 48) - 1))
}

/// Standardized per-mode Gaussian increments for one time step.
///
/// `dbeta[h]` is the Brownian increment of mode `h+1` over the step,
/// distributed `N(0, dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrement {
    pub dbeta: Vec<f64>,
    pub dt: f64,
}

impl NoiseIncrement {
    pub fn zeros(n_modes: usize, dt: f64) -> Self {
        Self {
            dbeta: vec![0.0; n_modes],
            dt,
        }
    }

    /// `ζ_h = dβ_h / √dt`, standard normal.
    #[inline]
    pub fn standardized(&self, h: usize) -> f64 {
        self.dbeta[h] / self.dt.sqrt()
    }
}

/// Counter-addressed source of standard normals for one `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    n_modes: usize,
    words_per_step: u128,
}

impl NoiseSource {
    pub fn new(seed: u64, stream: u64, n_modes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        // Two u64 (four words) per Box-Muller pair.
        let pairs = n_modes.div_ceil(2) as u128;
        Self {
            rng,
            n_modes,
            words_per_step: 4 * pairs,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    /// Standard normals of fine step `step`, one per mode.
    pub fn standard_normals(&mut self, step: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_modes);
        let pos = step as u128 * self.words_per_step;
        if self.rng.get_word_pos() != pos {
            self.rng.set_word_pos(pos);
        }
        let mut chunks = out.chunks_mut(2);
        for chunk in &mut chunks {
            let (z0, z1) = box_muller(self.rng.next_u64(), self.rng.next_u64());
            chunk[0] = z0;
            if chunk.len() > 1 {
                chunk[1] = z1;
            }
        }
    }

    /// Brownian increments over coarse step `step` of a grid whose step is
    /// `2^level` fine steps of size `dt_fine`. Coarse increments are exact
    /// sums of the fine ones, so paths on nested grids share their noise.
    pub fn increment(&mut self, step: u64, level: u32, dt_fine: f64, out: &mut NoiseIncrement) {
        let substeps = 1u64 << level;
        let dt = dt_fine * substeps as f64;
        out.dt = dt;
        let sd = dt_fine.sqrt();
        if level == 0 {
            self.standard_normals(step, &mut out.dbeta);
            out.dbeta.iter_mut().for_each(|z| *z *= sd);
            return;
        }
        let mut buf = vec![0.0; self.n_modes];
        out.dbeta.iter_mut().for_each(|z| *z = 0.0);
        for sub in 0..substeps {
            self.standard_normals(step * substeps + sub, &mut buf);
            for (acc, z) in out.dbeta.iter_mut().zip(&buf) {
                *acc += sd * z;
            }
        }
    }
}

#[inline]
fn unit_open(bits: u64) -> f64 {
    // (0, 1]: never zero, so the logarithm below stays finite.
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    let r = (-2.0 * unit_open(a).ln()).sqrt();
    let (s, c) = (TAU * unit_open(b)).sin_cos();
    (r * c, r * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_access_matches_sequential() {
        let mut a = NoiseSource::new(42, 7, 5);
        let mut b = NoiseSource::new(42, 7, 5);
        let mut seq = Vec::new();
        let mut buf = vec![0.0; 5];
        for k in 0..20 {
            a.standard_normals(k, &mut buf);
            seq.push(buf.clone());
        }
        for k in (0..20).rev() {
            b.standard_normals(k, &mut buf);
            assert_eq!(buf, seq[k as usize]);
        }
    }

    #[test]
    fn streams_and_seeds_differ() {
        let mut buf1 = vec![0.0; 4];
        let mut buf2 = vec![0.0; 4];
        NoiseSource::new(1, 0, 4).standard_normals(0, &mut buf1);
        NoiseSource::new(1, 1, 4).standard_normals(0, &mut buf2);
        assert_ne!(buf1, buf2);
        NoiseSource::new(2, 0, 4).standard_normals(0, &mut buf2);
        assert_ne!(buf1, buf2);
    }

    #[test]
    fn moments_are_standard_normal() {
        let mut src = NoiseSource::new(9, stream_id(tags::ORACLE, 3), 3);
        let mut buf = vec![0.0; 3];
        let n = 200_000;
        let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
        for k in 0..n {
            src.standard_normals(k, &mut buf);
            for z in &buf {
                s1 += z;
                s2 += z * z;
                s4 += z.powi(4);
            }
        }
        let m = (3 * n) as f64;
        assert!((s1 / m).abs() < 4.0 / m.sqrt());
        assert!((s2 / m - 1.0).abs() < 4.0 * (2.0 / m).sqrt());
        assert!((s4 / m - 3.0).abs() < 4.0 * (96.0 / m).sqrt());
    }

    #[test]
    fn coarse_increments_sum_fine_ones() {
        let dt = 1e-3;
        let mut src = NoiseSource::new(3, 0, 2);
        let mut fine = NoiseIncrement::zeros(2, dt);
        let mut coarse = NoiseIncrement::zeros(2, 2.0 * dt);
        let mut sum = [0.0; 2];
        for k in 0..2 {
            src.increment(4 + k, 0, dt, &mut fine);
            sum[0] += fine.dbeta[0];
            sum[1] += fine.dbeta[1];
        }
        src.increment(2, 1, dt, &mut coarse);
        assert!((coarse.dbeta[0] - sum[0]).abs() < 1e-15);
        assert!((coarse.dbeta[1] - sum[1]).abs() < 1e-15);
        assert_eq!(coarse.dt, 2.0 * dt);
    }
}
