//! Histogram thresholding by maximizing between-class variance. Class
//! moments are exact u64 integers over bin indices, so the f64 objective is
//! a deterministic function of the histogram and ties always break the same
//! way: toward the lowest edge.

use crate::error::{Error, Result};

pub const OTSU_BINS: usize = 256;

#[derive(Clone, Copy, Debug)]
pub struct OtsuSplit {
    pub threshold: f32,
    /// Split edge index in [1, bins); 0 when degenerate.
    pub bin: usize,
    /// True when every input value is identical; callers should then treat
    /// nothing as above threshold.
    pub degenerate: bool,
}

/// Between-class variance of the split [0,t) vs [t,bins), up to the constant
/// factor N², from exact integer class moments. Products stay below 2^53 for
/// any input this crate produces, so the f64 value is exact until the final
/// square and divide.
fn split_score(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    let num = (s0 as f64) * (n1 as f64) - (s1 as f64) * (n0 as f64);
    num * num / ((n0 as f64) * (n1 as f64))
}

pub fn otsu_threshold(values: &[f32], bins: usize) -> Result<OtsuSplit> {
    if values.is_empty() {
        return Err(Error::data("cannot threshold an empty value set"));
    }
    if bins < 2 {
        return Err(Error::data(format!("need at least 2 bins, got {bins}")));
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::numerical(format!("non-finite value {v} in threshold input")));
        }
        min = min.min(v);
        max = max.max(v);
    }
    if min == max {
        return Ok(OtsuSplit { threshold: min, bin: 0, degenerate: true });
    }

    let mut counts = vec![0u64; bins];
    let span = (max - min) as f64;
    for &v in values {
        let idx = (((v - min) as f64 / span) * bins as f64) as usize;
        counts[idx.min(bins - 1)] += 1;
    }

    let n: u64 = counts.iter().sum();
    let s: u64 = counts.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();

    let mut best_score = f64::NEG_INFINITY;
    let mut best_bin = 0usize;
    let mut n0 = 0u64;
    let mut s0 = 0u64;
    for t in 1..bins {
        n0 += counts[t - 1];
        s0 += (t - 1) as u64 * counts[t - 1];
        if n0 == 0 || n0 == n {
            continue;
        }
        let score = split_score(n0, s0, n - n0, s - s0);
        if score > best_score {
            best_score = score;
            best_bin = t;
        }
    }

    let threshold = min + (max - min) * (best_bin as f32 / bins as f32);
    Ok(OtsuSplit { threshold, bin: best_bin, degenerate: false })
}
