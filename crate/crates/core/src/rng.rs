//! Counter-based randomness.
//!
//! Every random quantity in the crate is a pure function of a 64-bit key and a
//! draw counter. Trees fold child indices into the key, walks get their own
//! key from [`derive_seed`], so no generator state is ever shared.

/// SplitMix64 finalizer. Full avalanche over 64 bits.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds one word into a running key.
#[inline]
pub fn fold(key: u64, word: u64) -> u64 {
    mix64(key ^ mix64(word.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a, then avalanche
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(h)
}

/// Seed for replicate `index` of the stream `label` under `master`.
///
/// Tree and walk streams must use distinct labels; the label is hashed into the
/// key before the index so that `("tree", i)` and `("walk", i)` never coincide
/// by construction of the inputs.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    fold(fold(mix64(master), label_hash(label)), index)
}

/// A stream of uniforms `mix(key + c * gamma)` for `c = 0, 1, 2, ...`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self {
            key: mix64(key),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift, bias < 2^-32 for small n).
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Standard normal by Box-Muller; used only by synthetic test generators.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn draws(&self) -> u64 {
        self.counter
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn derive_seed_is_deterministic() {
        assert_eq!(derive_seed(7, "tree", 3), derive_seed(7, "tree", 3));
    }

    #[test]
    fn labels_separate_streams() {
        for i in 0..1000 {
            assert_ne!(derive_seed(1, "tree", i), derive_seed(1, "walk", i));
        }
    }

    #[test]
    fn no_collisions_over_a_million_indices() {
        let mut seen = HashSet::with_capacity(1 << 21);
        for i in 0..1_000_000u64 {
            assert!(seen.insert(derive_seed(0xC0FFEE, "walk", i)), "collision at {i}");
        }
    }

    #[test]
    fn uniforms_in_unit_interval_with_right_mean() {
        let mut rng = CounterRng::new(42);
        let n = 200_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        // sd of the mean is sqrt(1/12/n) ~ 6.5e-4
        assert!((mean - 0.5).abs() < 4.0 * 6.5e-4, "mean {mean}");
    }

    #[test]
    fn below_covers_range() {
        let mut rng = CounterRng::new(9);
        let mut counts = [0u32; 5];
        for _ in 0..50_000 {
            counts[rng.below(5) as usize] += 1;
        }
        for c in counts {
            assert!((c as i64 - 10_000).abs() < 4 * 90, "{counts:?}");
        }
    }
}
