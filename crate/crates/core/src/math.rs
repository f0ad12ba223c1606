//! Shared numeric primitives: the single SGD update formula used by every
//! parameter path, and a cheap state fingerprint for the frozen-window
//! write detector.

/// In-place `p[i] -= lr * (grad_sum[i] / batch)`, in f32 throughout.
///
/// Both the oracle and the distributed engine call this exact function, so a
/// bitwise trajectory comparison tests summation order and nothing else.
pub fn sgd_update_f32(params: &mut [f32], grad_sum: &[f32], batch: f32, lr: f32) {
    debug_assert_eq!(params.len(), grad_sum.len());
    for (p, g) in params.iter_mut().zip(grad_sum) {
        *p -= lr * (*g / batch);
    }
}

/// FNV-1a over a stream of 64-bit words; used to detect mutation of frozen state.
#[derive(Debug, Clone, Copy)]
pub struct Fingerprint(u64);

impl Fingerprint {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn push_u64(&mut self, word: u64) {
        for byte in word.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn push_f32s(&mut self, values: &[f32]) {
        for v in values {
            self.push_u64(v.to_bits() as u64);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fingerprint {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_update_matches_direct_arithmetic() {
        let mut p = vec![1.0f32, 1.0];
        sgd_update_f32(&mut p, &[2.0, -4.0], 4.0, 0.1);
        assert_eq!(p, vec![0.95, 1.1]);
    }

    #[test]
    fn zero_grad_is_identity() {
        let mut p = vec![0.5f32, -0.25];
        let before = p.clone();
        sgd_update_f32(&mut p, &[0.0, 0.0], 2.0, 0.3);
        assert_eq!(p, before);
    }

    #[test]
    fn fingerprint_distinguishes_bit_flips() {
        let mut a = Fingerprint::new();
        a.push_f32s(&[1.0, 2.0]);
        let mut b = Fingerprint::new();
        b.push_f32s(&[1.0, 2.0000002]);
        assert_ne!(a.finish(), b.finish());
        let mut c = Fingerprint::new();
        c.push_f32s(&[1.0, 2.0]);
        assert_eq!(a.finish(), c.finish());
    }
}
