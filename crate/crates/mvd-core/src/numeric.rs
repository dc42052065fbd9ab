//! Scalar and slice-level numeric primitives.
//!
//! Every softmax/log-sum-exp in the crate goes through these functions so the
//! value path and the autodiff path compute bit-identical forwards.

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 step, used wherever a cheap deterministic hash-to-uniform is
/// needed (proximity-graph level assignment, fingerprints).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// log(sum(exp(s_i))) with max subtraction; finite for any finite input.
pub fn logsumexp(scores: &[f64]) -> f64 {
    debug_assert!(!scores.is_empty());
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|&s| (s - m).exp()).sum();
    m + sum.ln()
}

/// Elementwise log-softmax: s_i - max - ln(sum(exp(s_j - max))).
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|&s| (s - m).exp()).sum();
    let lse = m + sum.ln();
    scores.iter().map(|&s| s - lse).collect()
}

/// Max-subtracted softmax, computed as exp(log_softmax) so that probabilities
/// and log-probabilities stay consistent to the bit.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    log_softmax(scores).iter().map(|&l| l.exp()).collect()
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximum value and its smallest attaining index. Empty input returns None.
pub fn argmax(values: &[f64]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((bv, _)) if v <= bv => {}
            _ => best = Some((v, i)),
        }
    }
    best
}
