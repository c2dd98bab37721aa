//! Deterministic stand-in backbone: a fixed random projection of simple
//! colour and texture statistics. Needs no trained weights.

use rand_distr::{Distribution, StandardNormal};

use crate::seed;
use crate::PATCH_SIZE;

pub const TOY_STATS: usize = 21;
const HIST_BINS: usize = 4;

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    /// Row-major `dim x TOY_STATS`.
    projection: Vec<f64>,
    dim: usize,
}

impl ToyBackbone {
    pub fn new(dim: usize, projection_seed: u64) -> Self {
        let mut rng = seed::rng(projection_seed);
        let scale = 1.0 / (TOY_STATS as f64).sqrt();
        let projection = (0..dim * TOY_STATS)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Self { projection, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, pixels: &[u8]) -> Vec<f64> {
        let stats = pixel_stats(pixels);
        self.projection
            .chunks_exact(TOY_STATS)
            .map(|row| row.iter().zip(&stats).map(|(w, s)| w * s).sum())
            .collect()
    }
}

/// Per channel: mean, std, mean absolute gradient, and a 4-bin histogram; all in [0, 1].
pub fn pixel_stats(pixels: &[u8]) -> [f64; TOY_STATS] {
    let n = PATCH_SIZE;
    let count = (n * n) as f64;
    let mut out = [0.0; TOY_STATS];
    for ch in 0..3 {
        let v = |r: usize, c: usize| f64::from(pixels[(r * n + c) * 3 + ch]) / 255.0;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut grad = 0.0;
        let mut hist = [0.0; HIST_BINS];
        for r in 0..n {
            for c in 0..n {
                let x = v(r, c);
                sum += x;
                sq += x * x;
                if c + 1 < n {
                    grad += (v(r, c + 1) - x).abs();
                }
                if r + 1 < n {
                    grad += (v(r + 1, c) - x).abs();
                }
                hist[((x * HIST_BINS as f64) as usize).min(HIST_BINS - 1)] += 1.0;
            }
        }
        let mean = sum / count;
        out[ch] = mean;
        out[3 + ch] = (sq / count - mean * mean).max(0.0).sqrt();
        out[6 + ch] = grad / (2.0 * (n * (n - 1)) as f64);
        for (b, h) in hist.iter().enumerate() {
            out[9 + ch * HIST_BINS + b] = h / count;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_patch_stats() {
        let px: Vec<u8> = (0..PATCH_SIZE * PATCH_SIZE).flat_map(|_| [255u8, 0, 102]).collect();
        let s = pixel_stats(&px);
        assert!(s[0..3].iter().zip([1.0, 0.0, 0.4]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(s[3..9].iter().all(|v| v.abs() < 1e-12));
        // 255 -> bin 3, 0 -> bin 0, 102 -> bin 1
        assert_eq!(&s[9..13], &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(&s[13..17], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&s[17..21], &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_is_deterministic_and_nonzero() {
        let px: Vec<u8> = (0..PATCH_SIZE * PATCH_SIZE * 3).map(|i| (i * 7 % 251) as u8).collect();
        let a = ToyBackbone::new(32, 5);
        let b = ToyBackbone::new(32, 5);
        let (ea, eb) = (a.embed(&px), b.embed(&px));
        assert_eq!(ea, eb);
        assert_eq!(ea.len(), 32);
        assert!(ea.iter().all(|v| v.is_finite()) && ea.iter().any(|v| *v != 0.0));
    }
}
