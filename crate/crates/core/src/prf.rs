//! Keyed counter-based pseudo-randomness.
//!
//! Every random quantity in the engine is a pure function of
//! `(seed, purpose, indices)`, never of call order or worker placement, so the
//! oracle and the distributed path initialize and sample identically.

/// Keyed deterministic pseudo-random function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prf {
    pub seed: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer; full-avalanche 64-bit mix.
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Prf {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// 64-bit word for `(purpose, indices)`.
    pub fn word(&self, purpose: &str, indices: &[u64]) -> u64 {
        let mut state = mix(self.seed ^ GOLDEN);
        for chunk in purpose.as_bytes().chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            state = mix(state ^ u64::from_le_bytes(buf).wrapping_add(GOLDEN));
        }
        // Length folds in so distinct (purpose, indices) framings cannot collide trivially.
        state = mix(state ^ (purpose.len() as u64).wrapping_mul(GOLDEN));
        for &ix in indices {
            state = mix(state.wrapping_add(GOLDEN) ^ ix);
        }
        mix(state.wrapping_add(indices.len() as u64))
    }

    /// Uniform draw in `[lo, hi)`, deterministic in all arguments.
    ///
    /// Panics if `lo >= hi`; the bounds are compile-side constants everywhere
    /// this is called.
    pub fn uniform(&self, purpose: &str, indices: &[u64], lo: f64, hi: f64) -> f64 {
        assert!(lo < hi, "prf uniform requires lo < hi, got [{lo}, {hi})");
        let unit = (self.word(purpose, indices) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + unit * (hi - lo)
    }

    /// Fair coin, used for synthetic labels.
    pub fn bernoulli(&self, purpose: &str, indices: &[u64]) -> bool {
        self.word(purpose, indices) & 1 == 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_is_deterministic() {
        let prf = Prf::new(7);
        assert_eq!(prf.word("emb", &[0, 0]), prf.word("emb", &[0, 0]));
        assert_eq!(
            prf.uniform("emb", &[3, 1], -1.0, 1.0),
            prf.uniform("emb", &[3, 1], -1.0, 1.0)
        );
    }

    #[test]
    fn word_separates_seed_purpose_and_indices() {
        assert_ne!(
            Prf::new(1).word("emb", &[0, 0]),
            Prf::new(2).word("emb", &[0, 0])
        );
        let prf = Prf::new(1);
        assert_ne!(prf.word("emb", &[0, 0]), prf.word("dense", &[0, 0]));
        assert_ne!(prf.word("emb", &[0, 1]), prf.word("emb", &[1, 0]));
        assert_ne!(prf.word("emb", &[0]), prf.word("emb", &[0, 0]));
    }

    #[test]
    fn uniform_stays_in_range() {
        let prf = Prf::new(11);
        for i in 0..1000 {
            let v = prf.uniform("range", &[i], -0.25, 0.5);
            assert!((-0.25..0.5).contains(&v), "draw {v} outside [-0.25, 0.5)");
        }
    }

    #[test]
    #[should_panic(expected = "lo < hi")]
    fn uniform_rejects_empty_interval() {
        Prf::new(0).uniform("bad", &[], 1.0, 1.0);
    }

    // Monte-Carlo oracle: the empirical mean of n uniform draws must be within
    // 3 sigma of the interval midpoint, sigma = (hi-lo)/sqrt(12 n).
    #[test]
    fn uniform_mean_within_three_sigma() {
        let prf = Prf::new(99);
        let (lo, hi) = (2.0, 6.0);
        let n = 100_000u64;
        let sum: f64 = (0..n).map(|i| prf.uniform("mc", &[i], lo, hi)).sum();
        let mean = sum / n as f64;
        let sigma = (hi - lo) / (12.0 * n as f64).sqrt();
        let mid = (lo + hi) / 2.0;
        assert!(
            (mean - mid).abs() < 3.0 * sigma,
            "mean {mean} deviates from {mid} by more than 3 sigma ({sigma})"
        );
    }
}
